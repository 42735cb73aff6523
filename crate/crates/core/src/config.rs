//! Run configuration: a TOML document validated before any computation.
//!
//! Any leaf can be overridden from the command line as `path.to.key=value`,
//! where `value` is parsed as a TOML value (bare words fall back to strings).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conductance::FieldSpec;
use crate::error::{Error, Result};
use crate::estimator::{DeltaMethod, ExteriorMode, McSettings};

/// Quantities `estimate` knows how to produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    Nu,
    NuStar,
    Abar,
    Delta,
    CKm,
    Expansion,
    Harmonic,
    KeyProbe,
    Continuity,
}

impl Quantity {
    pub fn as_str(self) -> &'static str {
        match self {
            Quantity::Nu => "nu",
            Quantity::NuStar => "nu_star",
            Quantity::Abar => "abar",
            Quantity::Delta => "delta",
            Quantity::CKm => "c_km",
            Quantity::Expansion => "expansion",
            Quantity::Harmonic => "harmonic",
            Quantity::KeyProbe => "key_probe",
            Quantity::Continuity => "continuity",
        }
    }
}

/// Which representation(s) of `Δ^ρ` to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaChoice {
    Definition,
    Representation,
    Both,
}

impl DeltaChoice {
    pub fn methods(self) -> Vec<DeltaMethod> {
        match self {
            DeltaChoice::Definition => vec![DeltaMethod::Definition],
            DeltaChoice::Representation => vec![DeltaMethod::Representation],
            DeltaChoice::Both => vec![DeltaMethod::Definition, DeltaMethod::Representation],
        }
    }
}

/// Label sets of one harmonic residual term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelPair {
    pub e: Vec<usize>,
    pub f: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Outputs {
    pub csv: Option<PathBuf>,
    pub json: Option<PathBuf>,
    /// Directory for gnuplot `.dat` files.
    pub gnuplot_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    /// In-memory cache budget in bytes.
    pub cache_bytes: Option<usize>,
}

fn default_d() -> usize {
    1
}

fn default_m() -> Vec<u32> {
    vec![0]
}

fn default_rho0() -> Vec<f64> {
    vec![1.0]
}

fn default_quantities() -> Vec<Quantity> {
    vec![Quantity::NuStar]
}

fn default_orders() -> Vec<usize> {
    vec![1]
}

fn default_delta() -> DeltaChoice {
    DeltaChoice::Representation
}

fn default_harmonic() -> Vec<LabelPair> {
    vec![
        LabelPair { e: vec![], f: vec![] },
        LabelPair { e: vec![0], f: vec![] },
        LabelPair { e: vec![], f: vec![0] },
        LabelPair { e: vec![0], f: vec![0] },
    ]
}

fn default_key_probe() -> Vec<[usize; 2]> {
    vec![[0, 0], [1, 0], [1, 1], [2, 0], [2, 1], [2, 2]]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_m")]
    pub m: Vec<u32>,
    #[serde(default = "default_rho0")]
    pub rho0: Vec<f64>,
    /// Added intensities for `delta` and `expansion`.
    #[serde(default)]
    pub rho: Vec<f64>,
    /// Flux direction for dual quantities; defaults to `e₁`.
    #[serde(default)]
    pub q: Option<Vec<f64>>,
    /// Slope for the primal quantity; defaults to `e₁`.
    #[serde(default)]
    pub p: Option<Vec<f64>>,
    #[serde(default = "default_quantities")]
    pub quantities: Vec<Quantity>,
    /// Orders `k` for `c_km` and `expansion`.
    #[serde(default = "default_orders")]
    pub orders: Vec<usize>,
    #[serde(default = "default_delta")]
    pub delta_method: DeltaChoice,
    #[serde(default = "default_harmonic")]
    pub harmonic: Vec<LabelPair>,
    /// `[|F|, |G|]` pairs.
    #[serde(default = "default_key_probe")]
    pub key_probe: Vec<[usize; 2]>,
    pub field: FieldSpec,
    #[serde(default)]
    pub mc: McSettings,
    #[serde(default)]
    pub outputs: Outputs,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::with_overrides(text, &[])
    }

    /// Parses `text` and applies `path=value` overrides before validation.
    pub fn with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let cfg: RunConfig = if overrides.is_empty() {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
            for o in overrides {
                apply_override(&mut table, o)?;
            }
            RunConfig::deserialize(toml::Value::Table(table)).map_err(|e| Error::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::with_overrides(&text, overrides).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn q(&self) -> Vec<f64> {
        self.q.clone().unwrap_or_else(|| unit(self.d))
    }

    pub fn p(&self) -> Vec<f64> {
        self.p.clone().unwrap_or_else(|| unit(self.d))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(1..=3).contains(&self.d) {
            return bad(format!("d must be 1, 2 or 3, got {}", self.d));
        }
        if self.m.is_empty() || self.m.iter().any(|&m| m > 4) {
            return bad(format!("m must be a non-empty list of levels <= 4, got {:?}", self.m));
        }
        if self.rho0.is_empty() || self.rho0.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return bad(format!("rho0 must be a non-empty list of positive densities, got {:?}", self.rho0));
        }
        if self.rho.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return bad(format!("rho entries must be positive, got {:?}", self.rho));
        }
        for (name, v) in [("q", &self.q), ("p", &self.p)] {
            if let Some(v) = v {
                if v.len() != self.d || v.iter().any(|x| !x.is_finite()) {
                    return bad(format!("{name} must have {} finite entries, got {v:?}", self.d));
                }
            }
        }
        if self.quantities.is_empty() {
            return bad("quantities must not be empty".into());
        }
        let needs_rho = self.quantities.iter().any(|q| matches!(q, Quantity::Delta | Quantity::Expansion));
        if needs_rho && self.rho.is_empty() {
            return bad("delta and expansion need a non-empty rho grid".into());
        }
        if self.orders.iter().any(|&k| !(1..=3).contains(&k)) {
            return bad(format!("orders must lie in 1..=3, got {:?}", self.orders));
        }
        if self.key_probe.iter().any(|&[f, g]| g > f || f > 3) {
            return bad(format!("key_probe pairs need |G| <= |F| <= 3, got {:?}", self.key_probe));
        }
        let mc = &self.mc;
        if !(mc.h > 0.0 && mc.h <= 0.5) {
            return bad(format!("mc.h must lie in (0, 1/2], got {}", mc.h));
        }
        if mc.n_outer == 0 {
            return bad("mc.n_outer must be positive".into());
        }
        if !(mc.tol > 0.0 && mc.tol < 1.0) {
            return bad(format!("mc.tol must lie in (0, 1), got {}", mc.tol));
        }
        if !(mc.tail_tol > 0.0 && mc.tail_tol < 1.0) {
            return bad(format!("mc.tail_tol must lie in (0, 1), got {}", mc.tail_tol));
        }
        if mc.n_max == Some(0) {
            return bad("mc.n_max must be at least 1".into());
        }
        if mc.collar_nodes == 0 {
            return bad("mc.collar_nodes must be positive".into());
        }
        if let ExteriorMode::Quadrature { nodes_per_side, .. } = mc.exterior {
            if self.d != 1 || nodes_per_side == 0 {
                return bad("quadrature exteriors need d = 1 and nodes_per_side > 0".into());
            }
        }
        let one_d_only = [Quantity::Delta, Quantity::CKm, Quantity::Expansion, Quantity::Harmonic, Quantity::KeyProbe];
        if self.d != 1 {
            if let Some(q) = self.quantities.iter().find(|q| one_d_only.contains(q)) {
                return bad(format!("{} is only available in d = 1", q.as_str()));
            }
        }
        self.field.build()?;
        Ok(())
    }
}

fn unit(d: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[0] = 1.0;
    v
}

/// Sets `a.b.c = value` in `table`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let value = parse_value(raw.trim());
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override `{assignment}` has an empty key")));
    }
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    let mut cur = table;
    for k in parents {
        cur = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{assignment}`: `{k}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    toml::from_str::<Wrap>(&format!("v = {raw}"))
        .map(|w| w.v)
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        quantities = ["nu_star"]
        [field]
        name = "constant"
        c = 1.5
    "#;

    #[test]
    fn minimal_config_defaults() {
        let c = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.d, 1);
        assert_eq!(c.m, vec![0]);
        assert_eq!(c.q(), vec![1.0]);
        assert_eq!(c.mc, McSettings::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml(&format!("{MINIMAL}\nbogus = 1\n")).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
        let err = RunConfig::from_toml(&format!("{MINIMAL}\n[mc]\nhh = 0.1\n")).unwrap_err().to_string();
        assert!(err.contains("hh") && err.contains("line"), "{err}");
    }

    #[test]
    fn overrides_reach_nested_leaves() {
        let c = RunConfig::with_overrides(
            MINIMAL,
            &["mc.h=0.0625".into(), "mc.exterior.kind=empty".into(), "rho0=[0.5, 2.0]".into()],
        )
        .unwrap();
        assert_eq!(c.mc.h, 0.0625);
        assert_eq!(c.mc.exterior, ExteriorMode::Empty);
        assert_eq!(c.rho0, vec![0.5, 2.0]);
    }

    #[test]
    fn ranges_validated() {
        for o in ["mc.h=0.75", "rho0=[-1.0]", "d=4", "orders=[4]", "q=[1.0, 0.0]"] {
            assert!(RunConfig::with_overrides(MINIMAL, &[o.into()]).is_err(), "{o}");
        }
        let needs_rho = RunConfig::with_overrides(MINIMAL, &["quantities=[\"delta\"]".into()]);
        assert!(needs_rho.is_err());
    }
}
