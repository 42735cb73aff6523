//! The acceptance suite: twelve numbered criteria, each reduced to one
//! pass/fail line with the numbers that decided it.
//!
//! Settings are fixed here rather than configurable so that a pass means the
//! same thing on every machine. Oracle reference values are read from a
//! fixtures file and never recomputed.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conductance::{evaluate, ConstantField, CrowdingField, FieldSpec};
use crate::config::{Quantity, RunConfig};
use crate::corrector_cache::CorrectorCache;
use crate::diff_calculus::{
    difference, difference_table, leibniz_check, relative_gap, telescope, upsilon, DotProduct, IndexedFamily,
    MatVec, ScalarProduct,
};
use crate::conductance::SymMatrix;
use crate::error::{Error, Result};
use crate::estimator::{first_variation_study, DeltaMethod, Estimator, ExteriorMode, MatrixEstimate, McSettings};
use crate::oracle::{FixtureFile, OracleFixture, OracleKind, OracleValue};
use crate::point_process::{
    mecke_residual, multi_occupancy_bound, single_occupancy_residual, BoxRegion, PointConfiguration,
};
use crate::report::{csv_string, run_estimate, sandwich_violation};
use crate::sector_solver::{dirichlet_energy, slice_energy, solve_dual, GridSpec, SolverOptions};

pub const CRITERIA: [(u8, &str); 12] = [
    (1, "constant-field exactness"),
    (2, "ellipticity sandwich"),
    (3, "monotonicity in m"),
    (4, "oracle agreement"),
    (5, "representation equivalence"),
    (6, "first-order expansion"),
    (7, "second-order expansion"),
    (8, "algebraic identities"),
    (9, "variational residuals"),
    (10, "Mecke and indicator identities"),
    (11, "key-estimate probes"),
    (12, "determinism"),
];

/// Result of one criterion.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    /// Passed on the documented fallback (an explicit noise verdict).
    pub conditional: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match (self.passed, self.conditional) {
            (true, false) => "PASS",
            (true, true) => "PASS*",
            (false, _) => "FAIL",
        };
        write!(f, "criterion {:>2} {:<5} {:<32} [{:>7.1}s] {}", self.id, tag, self.name, self.seconds, self.detail)
    }
}

/// Collects sub-checks of one criterion.
#[derive(Default)]
struct Checks {
    ok: bool,
    notes: Vec<String>,
    failures: Vec<String>,
}

impl Checks {
    fn new() -> Self {
        Self { ok: true, ..Default::default() }
    }

    fn check(&mut self, pass: bool, msg: String) {
        if pass {
            self.notes.push(msg);
        } else {
            self.ok = false;
            self.failures.push(msg);
        }
    }

    fn error(&mut self, what: &str, e: Error) {
        self.ok = false;
        self.failures.push(format!("{what}: {e}"));
    }

    fn finish(self) -> (bool, String) {
        let mut parts = Vec::new();
        if !self.failures.is_empty() {
            parts.push(format!("failed: {}", self.failures.join("; ")));
        }
        if !self.notes.is_empty() {
            parts.push(self.notes.join("; "));
        }
        (self.ok, parts.join(" | "))
    }
}

fn crowding() -> Arc<CrowdingField> {
    Arc::new(CrowdingField::new(2.0, 0.25).expect("valid crowding parameters"))
}

/// Shared state across criteria: one corrector cache and memoized `ā`.
pub struct Suite {
    fixtures: FixtureFile,
    cache: CorrectorCache,
    abar: BTreeMap<(usize, u32, u64), std::result::Result<(MatrixEstimate, MatrixEstimate), String>>,
}

/// Densities of the sandwich and monotonicity scans.
const SCAN_DENSITIES: [f64; 3] = [0.5, 1.0, 2.0];
/// Added intensities for the representation check.
const DELTA_RHOS: [f64; 3] = [0.05, 0.1, 0.2];
/// `ρ` grid of the expansion fits.
const EXPANSION_RHOS: [f64; 5] = [0.02, 0.035, 0.06, 0.1, 0.2];

/// At `ρ₀ = 2` the count truncation on `□₁` needs ~16 particles, which at
/// `h = 1/4` is tens of millions of unknowns per level; both boxes of that
/// density are solved at `h = 1/3`, the coarsest spacing that still resolves
/// the crowding radius, so the paired comparison stays like for like.
fn scan_settings(rho0: f64) -> McSettings {
    let h = if rho0 > 1.0 { 1.0 / 3.0 } else { 0.25 };
    McSettings { h, n_outer: 16, seed: 11, ..Default::default() }
}

impl Suite {
    pub fn new(fixtures: FixtureFile) -> Self {
        Self { fixtures, cache: CorrectorCache::in_memory(1 << 30), abar: BTreeMap::new() }
    }

    pub fn run(&mut self, id: u8) -> Outcome {
        let name = CRITERIA.iter().find(|c| c.0 == id).map_or("unknown", |c| c.1);
        let start = Instant::now();
        let (passed, conditional, detail) = match id {
            1 => plain(self.constant_field()),
            2 => plain(self.sandwich()),
            3 => plain(self.monotonicity()),
            4 => plain(self.oracle_agreement()),
            5 => plain(self.representation()),
            6 => plain(self.first_order()),
            7 => self.second_order(),
            8 => plain(algebraic_identities(10_000, 8)),
            9 => plain(self.residuals()),
            10 => plain(exchange_identities(100_000, 10)),
            11 => plain(self.key_probes()),
            12 => plain(determinism()),
            _ => (false, false, format!("no criterion {id}")),
        };
        Outcome { id, name, passed, conditional, detail, seconds: start.elapsed().as_secs_f64() }
    }

    pub fn run_all(&mut self, ids: &[u8], mut each: impl FnMut(&Outcome)) -> Vec<Outcome> {
        ids.iter()
            .map(|&id| {
                let o = self.run(id);
                each(&o);
                o
            })
            .collect()
    }

    fn fixture(&self, name: &str) -> Result<(&OracleFixture, &OracleValue)> {
        let f = self
            .fixtures
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("fixture `{name}` missing; run `bulkdiff oracle` first")))?;
        let v = f.result.as_ref().ok_or_else(|| Error::InvalidInput(format!("fixture `{name}` has no value")))?;
        Ok((f, v))
    }

    fn abar(&mut self, d: usize, m: u32, rho0: f64) -> std::result::Result<(MatrixEstimate, MatrixEstimate), String> {
        let key = (d, m, rho0.to_bits());
        if let Some(v) = self.abar.get(&key) {
            return v.clone();
        }
        let est = Estimator::new(crowding(), &self.cache);
        let v = est.abar_matrices(d, m, rho0, &scan_settings(rho0)).map_err(|e| e.to_string());
        self.abar.insert(key, v.clone());
        v
    }

    fn constant_field(&mut self) -> (bool, String) {
        let mut c = Checks::new();
        for cval in [1.0, 1.5, 2.0] {
            let field = Arc::new(ConstantField::new(cval, 2.0).expect("valid constant field"));
            let est = Estimator::new(field, &self.cache);
            let mc = McSettings { h: 0.25, ..Default::default() };
            let cases: [(usize, u32, f64); 3] = [(1, 0, 1.0), (1, 1, 1.0), (2, 0, 0.5)];
            for (d, m, rho0) in cases {
                let mut q = vec![0.0; d];
                q[0] = 1.0;
                match (est.nu_star(m, &q, rho0, &mc), est.nu(m, &q, rho0, &mc)) {
                    (Ok(s), Ok(p)) => {
                        let es = (s.value - 0.5 / cval).abs();
                        let ep = (p.value - 0.5 * cval).abs();
                        c.check(
                            es <= s.tail + 1e-6 && ep <= p.tail + 1e-6,
                            format!("c={cval} d={d} m={m}: |ν*-1/2c|={es:.1e} (tail {:.1e}), |ν-c/2|={ep:.1e}", s.tail),
                        );
                    }
                    (Err(e), _) | (_, Err(e)) => c.error(&format!("c={cval} d={d} m={m}"), e),
                }
            }
            for k in 1..=3 {
                match est.c_km(0, &[1.0], 1.0, k, &mc) {
                    Ok(r) => c.check(
                        r.value.value.abs() <= 3.0 * r.value.stderr.max(f64::MIN_POSITIVE) + 1e-14
                            && r.value.stderr <= 1e-4,
                        format!("c={cval} c{k}={:.1e}±{:.1e}", r.value.value, r.value.stderr),
                    ),
                    Err(e) => c.error(&format!("c={cval} c{k}"), e),
                }
            }
        }
        c.finish()
    }

    fn sandwich(&mut self) -> (bool, String) {
        let mut c = Checks::new();
        let mut configs: Vec<(usize, u32, f64)> = Vec::new();
        for m in [0, 1] {
            for rho0 in SCAN_DENSITIES {
                configs.push((1, m, rho0));
            }
        }
        configs.push((2, 0, 0.25));
        for (d, m, rho0) in configs {
            match self.abar(d, m, rho0) {
                Ok((a, s)) => {
                    let slack = 2.0 * a.stderr.max_abs().max(s.stderr.max_abs());
                    let v = sandwich_violation(&a.value, &s.value, 2.0, slack);
                    c.check(
                        v.is_none(),
                        format!(
                            "d={d} m={m} ρ₀={rho0}: ā*={:.4} ā={:.4}{}",
                            s.value.get(0, 0),
                            a.value.get(0, 0),
                            v.map_or(String::new(), |m| format!(" ({m})"))
                        ),
                    );
                }
                Err(e) => {
                    c.ok = false;
                    c.failures.push(format!("d={d} m={m} ρ₀={rho0}: {e}"));
                }
            }
        }
        c.finish()
    }

    fn monotonicity(&mut self) -> (bool, String) {
        let mut c = Checks::new();
        for rho0 in SCAN_DENSITIES {
            match (self.abar(1, 0, rho0), self.abar(1, 1, rho0)) {
                (Ok((a0, s0)), Ok((a1, s1))) => {
                    let (s0v, s1v) = (s0.value.get(0, 0), s1.value.get(0, 0));
                    let (a0v, a1v) = (a0.value.get(0, 0), a1.value.get(0, 0));
                    let ss = s0.stderr.get(0, 0).hypot(s1.stderr.get(0, 0));
                    let sa = a0.stderr.get(0, 0).hypot(a1.stderr.get(0, 0));
                    c.check(
                        s0v <= s1v + 2.0 * ss && a1v <= a0v + 2.0 * sa,
                        format!("ρ₀={rho0}: ā*₀={s0v:.4}≤ā*₁={s1v:.4} (2σ {:.1e}), ā₁={a1v:.4}≤ā₀={a0v:.4} (2σ {:.1e})", 2.0 * ss, 2.0 * sa),
                    );
                }
                (Err(e), _) | (_, Err(e)) => {
                    c.ok = false;
                    c.failures.push(format!("ρ₀={rho0}: {e}"));
                }
            }
        }
        c.finish()
    }

    fn oracle_agreement(&mut self) -> (bool, String) {
        let mut c = Checks::new();
        let fixtures: Vec<OracleFixture> = self.fixtures.fixtures.clone();
        if fixtures.is_empty() {
            c.error("fixtures", Error::InvalidInput("no fixtures; run `bulkdiff oracle` first".into()));
        }
        for f in fixtures.iter() {
            let Some(oracle) = f.result.as_ref() else {
                c.error(&f.name, Error::InvalidInput("fixture has no value".into()));
                continue;
            };
            let field = match f.field.build() {
                Ok(x) => x,
                Err(e) => {
                    c.error(&f.name, e);
                    continue;
                }
            };
            match &f.kind {
                OracleKind::DualEnergy { n, q, exterior } => {
                    let solve = |h: f64| -> Result<f64> {
                        let grid = GridSpec::new(BoxRegion::cube(0, 1), *n, h)?;
                        let ext = PointConfiguration::from_flat(1, exterior.clone())?;
                        Ok(solve_dual(field.as_ref(), &grid, &[*q], &ext, &SolverOptions::default())?.energy)
                    };
                    let h = f.hs[0];
                    match (solve(h), solve(h / 2.0)) {
                        (Ok(c1), Ok(c2)) => {
                            let v = (4.0 * c2 - c1) / 3.0;
                            let gap = (v - oracle.value).abs();
                            c.check(
                                oracle.converged && gap <= 5.0 * oracle.error,
                                format!("{}: solver {v:.6} oracle {:.6}±{:.1e} gap {gap:.1e}", f.name, oracle.value, oracle.error),
                            );
                        }
                        (Err(e), _) | (_, Err(e)) => c.error(&f.name, e),
                    }
                }
                OracleKind::NuStarSeries { rho0, q, n_max, nodes_per_side, max_count } => {
                    let est = Estimator::new(field.clone(), &self.cache);
                    let mc = McSettings {
                        h: f.hs[0],
                        n_max: Some(*n_max),
                        richardson: true,
                        exterior: ExteriorMode::Quadrature { nodes_per_side: *nodes_per_side, max_count: *max_count },
                        ..Default::default()
                    };
                    match est.nu_star(0, &[*q], *rho0, &mc) {
                        Ok(e) => {
                            let gap = (e.value - oracle.value).abs();
                            let tol = (3.0 * e.stderr).max(2.0 * oracle.error);
                            c.check(
                                oracle.converged && gap <= tol,
                                format!("{}: ν* {:.6} oracle {:.6}±{:.1e} gap {gap:.1e}", f.name, e.value, oracle.value, oracle.error),
                            );
                        }
                        Err(e) => c.error(&f.name, e),
                    }
                }
                // checked with the expansion criterion
                OracleKind::C1 { .. } => {}
            }
        }
        c.finish()
    }

    fn representation(&mut self) -> (bool, String) {
        let mut c = Checks::new();
        let est = Estimator::new(crowding(), &self.cache);
        let mc = McSettings { h: 0.125, n_outer: 16, seed: 5, ..Default::default() };
        for rho0 in SCAN_DENSITIES {
            for rho in DELTA_RHOS {
                let def = est.delta_rho(0, &[1.0], rho0, rho, DeltaMethod::Definition, &mc);
                let rep = est.delta_rho(0, &[1.0], rho0, rho, DeltaMethod::Representation, &mc);
                match (def, rep) {
                    (Ok(d), Ok(r)) => {
                        let sigma = d.stderr.hypot(r.stderr);
                        let gap = (d.value - r.value).abs();
                        c.check(
                            gap <= 3.0 * sigma + r.tail,
                            format!("({rho0},{rho}): def {:.5} repr {:.5} gap {gap:.1e} (3σ {:.1e} + T {:.1e})", d.value, r.value, 3.0 * sigma, r.tail),
                        );
                    }
                    (Err(e), _) | (_, Err(e)) => c.error(&format!("({rho0},{rho})"), e),
                }
            }
        }
        c.finish()
    }

    fn expansion_settings() -> McSettings {
        McSettings { h: 0.125, n_outer: 8, seed: 7, ..Default::default() }
    }

    fn first_order(&mut self) -> (bool, String) {
        let mut c = Checks::new();
        let est = Estimator::new(crowding(), &self.cache);
        match est.expansion_report(0, &[1.0], 1.0, 1, &EXPANSION_RHOS, &Self::expansion_settings()) {
            Ok(r) => c.check(r.slope >= 1.7, format!("remainder slope {:.3} (c₁={:.5}±{:.1e})", r.slope, r.coefficients[1].value, r.coefficients[1].stderr)),
            Err(e) => c.error("expansion k=1", e),
        }
        match self.fixture("crowding-c1") {
            Ok((f, oracle)) => {
                let OracleKind::C1 { rho0, q, nodes_per_side, max_count, collar_nodes } = f.kind.clone() else {
                    c.error("crowding-c1", Error::InvalidInput("fixture is not a c₁ fixture".into()));
                    return c.finish();
                };
                let field = match f.field.build() {
                    Ok(x) => x,
                    Err(e) => {
                        c.error("crowding-c1", e);
                        return c.finish();
                    }
                };
                let est = Estimator::new(field, &self.cache);
                let mc = McSettings {
                    h: 0.125,
                    n_max: Some(1),
                    richardson: true,
                    collar_nodes,
                    exterior: ExteriorMode::Quadrature { nodes_per_side, max_count },
                    ..Default::default()
                };
                match est.c_km(0, &[q], rho0, 1, &mc) {
                    Ok(r) => {
                        let gap = (r.value.value - oracle.value).abs();
                        let tol = (3.0 * r.value.stderr).max(2.0 * oracle.error);
                        c.check(
                            oracle.converged && gap <= tol,
                            format!("c₁ {:.5} oracle {:.5}±{:.1e} gap {gap:.1e}", r.value.value, oracle.value, oracle.error),
                        );
                    }
                    Err(e) => c.error("c₁ vs oracle", e),
                }
            }
            Err(e) => c.error("crowding-c1", e),
        }
        c.finish()
    }

    fn second_order(&mut self) -> (bool, bool, String) {
        let est = Estimator::new(crowding(), &self.cache);
        match est.expansion_report(0, &[1.0], 1.0, 2, &EXPANSION_RHOS, &Self::expansion_settings()) {
            Ok(r) => {
                let verdict = r.verdict(2.5);
                let evidence: Vec<String> =
                    r.rows.iter().map(|row| format!("{:.1e}±{:.1e}", row.remainder.value, row.remainder.stderr)).collect();
                let detail = format!("slope {:.3}, verdict {verdict}, remainders [{}]", r.slope, evidence.join(", "));
                match verdict {
                    "converged" => (true, false, detail),
                    "MC-noise-dominated" => (true, true, detail),
                    _ => (false, false, detail),
                }
            }
            Err(e) => (false, false, format!("expansion k=2: {e}")),
        }
    }

    fn residuals(&mut self) -> (bool, String) {
        let mut c = Checks::new();
        let field = crowding();
        match first_variation_study(field.as_ref(), &[1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0, 1.0 / 128.0], &SolverOptions::default()) {
            Ok(levels) => {
                let ratios: Vec<f64> = levels.windows(2).map(|w| w[0].residual / w[1].residual).collect();
                c.check(ratios.iter().all(|&r| r >= 1.8), format!("first variation ratios {}", fmt_ratios(&ratios)));
            }
            Err(e) => c.error("first variation", e),
        }
        let est = Estimator::new(field.clone(), &self.cache);
        let pairs: [(&[usize], &[usize]); 5] = [(&[], &[]), (&[0], &[]), (&[], &[0]), (&[0], &[0]), (&[0], &[1])];
        for (e, f) in pairs {
            let values: Result<Vec<f64>> = [0.125, 0.0625, 0.03125]
                .iter()
                .map(|&h| {
                    let mc = McSettings { h, exterior: ExteriorMode::Empty, ..Default::default() };
                    Ok(est.harmonic_residual(0, &[1.0], 0.25, e, f, &mc)?.value.value.abs())
                })
                .collect();
            match values {
                Ok(v) => {
                    let ratios: Vec<f64> = v.windows(2).map(|w| w[0] / w[1]).collect();
                    c.check(ratios.iter().all(|&r| r >= 1.8), format!("harmonic E={e:?} F={f:?} ratios {}", fmt_ratios(&ratios)));
                }
                Err(err) => c.error(&format!("harmonic E={e:?} F={f:?}"), err),
            }
        }
        let h = 1.0 / 128.0;
        for (n, ext) in [(1usize, vec![]), (2, vec![]), (2, vec![0.6, -0.55])] {
            let run = || -> Result<(f64, f64)> {
                let grid = GridSpec::new(BoxRegion::cube(0, 1), n, h)?;
                let mu = PointConfiguration::from_flat(1, ext.clone())?;
                let cor = solve_dual(field.as_ref(), &grid, &[1.0], &mu, &SolverOptions::default())?;
                Ok((dirichlet_energy(&cor, 1.0), slice_energy(&cor)))
            };
            match run() {
                Ok((dir, slice)) => {
                    let bound = n as f64;
                    let eps = (dir / bound - 1.0).max(slice - 1.0).max(0.0);
                    c.check(eps <= 0.02, format!("n={n} ext={ext:?}: Dirichlet {dir:.4}≤{bound}, slice {slice:.4}≤1"));
                }
                Err(e) => c.error(&format!("energy n={n}"), e),
            }
        }
        c.finish()
    }

    fn key_probes(&mut self) -> (bool, String) {
        let mut c = Checks::new();
        let est = Estimator::new(crowding(), &self.cache);
        let mc = McSettings { h: 0.25, n_outer: 16, seed: 3, ..Default::default() };
        for (f, g) in [(0, 0), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2)] {
            match (est.key_estimate_probe(0, &[1.0], 0.5, f, g, &mc), est.key_estimate_probe(1, &[1.0], 0.5, f, g, &mc)) {
                (Ok(p0), Ok(p1)) => {
                    let (v0, v1) = (p0.value, p1.value);
                    let finite = v0.value.is_finite() && v1.value.is_finite();
                    c.check(
                        finite && v1.value <= 2.0 * v0.value + 3.0 * v1.stderr.hypot(v0.stderr),
                        format!("(|F|,|G|)=({f},{g}): m=0 {:.4} m=1 {:.4}±{:.1e}", v0.value, v1.value, v1.stderr),
                    );
                }
                (Err(e), _) | (_, Err(e)) => c.error(&format!("({f},{g})"), e),
            }
        }
        c.finish()
    }
}

fn plain((ok, detail): (bool, String)) -> (bool, bool, String) {
    (ok, false, detail)
}

fn fmt_ratios(r: &[f64]) -> String {
    let parts: Vec<String> = r.iter().map(|x| format!("{x:.2}")).collect();
    format!("[{}]", parts.join(", "))
}

/// Randomized round trips of the difference calculus.
pub fn algebraic_identities(instances: usize, seed: u64) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = 1e-12;
    let mut worst: f64 = 0.0;
    let mut failures = 0usize;
    let mut record = |gap: f64| {
        worst = worst.max(gap);
        if !(gap <= tol) {
            failures += 1;
        }
    };
    for _ in 0..instances {
        let k = rng.random_range(1..=4usize);
        let mut labels: Vec<usize> = Vec::new();
        while labels.len() < k {
            let l = rng.random_range(0..9usize);
            if !labels.contains(&l) {
                labels.push(l);
            }
        }
        labels.sort_unstable();
        let table_f: BTreeMap<Vec<usize>, f64> = subsets(&labels).into_iter().map(|s| (s, rng.random_range(-2.0..2.0))).collect();
        let table_g: BTreeMap<Vec<usize>, f64> = subsets(&labels).into_iter().map(|s| (s, rng.random_range(-2.0..2.0))).collect();
        let dim = rng.random_range(1..=3usize);
        let table_v: BTreeMap<Vec<usize>, Vec<f64>> =
            subsets(&labels).into_iter().map(|s| (s, (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())).collect();
        let table_m: BTreeMap<Vec<usize>, SymMatrix> = subsets(&labels)
            .into_iter()
            .map(|s| {
                let mut m = SymMatrix::zeros(dim);
                for i in 0..dim {
                    for j in i..dim {
                        m.set(i, j, rng.random_range(-1.0..1.0));
                    }
                }
                (s, m)
            })
            .collect();
        let fam = |t: BTreeMap<Vec<usize>, f64>| IndexedFamily::from_subsets(labels.clone(), move |s| t[s]).expect("labels are valid");
        let f = fam(table_f.clone());
        let g = fam(table_g);
        let v = IndexedFamily::from_subsets(labels.clone(), move |s| table_v[s].clone()).expect("labels are valid");
        let mtx = IndexedFamily::from_subsets(labels.clone(), move |s| table_m[s]).expect("labels are valid");

        // telescope round trip
        let e = labels.clone();
        let tab = difference_table(&f, &e).expect("labels in family");
        record(relative_gap(&telescope(&tab, &e).expect("complete table"), &table_f[&e]));

        // both Leibniz forms, scalar, vector and matrix-vector pairings
        let (lhs, r1, r2) = leibniz_check(&f, &g, &e, &ScalarProduct).expect("shared labels");
        record(relative_gap(&lhs, &r1));
        record(relative_gap(&lhs, &r2));
        let (lhs, r1, r2) = leibniz_check(&v, &v, &e, &DotProduct).expect("shared labels");
        record(relative_gap(&lhs, &r1));
        record(relative_gap(&lhs, &r2));
        let (lhs, r1, r2) = leibniz_check(&mtx, &v, &e, &MatVec).expect("shared labels");
        record(relative_gap(&lhs, &r1));
        record(relative_gap(&lhs, &r2));

        // D_i D_j = D_j D_i = D_{ij}
        if k >= 2 {
            let (i, j) = (labels[0], labels[k - 1]);
            let nested = |outer: usize, inner: usize| -> f64 {
                let d_inner = |s: &[usize]| -> f64 {
                    let mut with: Vec<usize> = s.to_vec();
                    with.push(inner);
                    with.sort_unstable();
                    table_f[&with] - table_f[&s.to_vec()]
                };
                d_inner(&[outer]) - d_inner(&[])
            };
            let direct = difference(&f, &[i, j]).expect("labels in family");
            record(relative_gap(&nested(i, j), &nested(j, i)));
            record(relative_gap(&nested(i, j), &direct));
        }

        // Υ(E ∪ F, z) = Υ(E, z) Υ(F, z)
        let d = rng.random_range(1..=2usize);
        let pts: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let z: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
        let cut = rng.random_range(0..=k);
        let all: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let joint = upsilon(&all, &z);
        let split = upsilon(&all[..cut], &z) && upsilon(&all[cut..], &z);
        record(if joint == split { 0.0 } else { 1.0 });
    }
    (failures == 0, format!("{instances} instances, {failures} failures, worst relative error {worst:.1e}"))
}

fn subsets(labels: &[usize]) -> Vec<Vec<usize>> {
    (0..1u32 << labels.len())
        .map(|m| labels.iter().enumerate().filter(|(i, _)| m & (1 << i) != 0).map(|(_, l)| *l).collect())
        .collect()
}

/// The Mecke identity and the two indicator identities on the crowding field.
pub fn exchange_identities(samples: usize, seed: u64) -> (bool, String) {
    let mut c = Checks::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = crowding();
    let u = BoxRegion::cube(0, 1);
    let window = u.enlarged(0.5);
    let rho = 1.0;
    let a = |mu: &PointConfiguration, x: &[f64]| evaluate(field.as_ref(), mu, x).map_or(f64::NAN, |m| m.get(0, 0));
    match mecke_residual(|mu, x| a(mu, x), rho, &u, &window, samples, &mut rng) {
        Ok(r) => c.check(r.within(3.0), format!("Mecke {:.5} vs {:.5} (σ {:.1e})", r.lhs, r.rhs, r.stderr)),
        Err(e) => c.error("Mecke", e),
    }
    let centre = |mu: &PointConfiguration| a(mu, &[0.0]);
    match single_occupancy_residual(centre, rho, &u, &window, samples, &mut rng) {
        Ok(r) => c.check(r.within(3.0), format!("single occupancy {:.5} vs {:.5} (σ {:.1e})", r.lhs, r.rhs, r.stderr)),
        Err(e) => c.error("single occupancy", e),
    }
    let crowded = |mu: &PointConfiguration| a(mu, &[0.0]) - 1.0;
    match multi_occupancy_bound(crowded, rho, 2, &u, &window, samples, &mut rng) {
        Ok(r) => c.check(r.lhs <= r.rhs + 3.0 * r.stderr, format!("double occupancy {:.5} ≤ {:.5} (σ {:.1e})", r.lhs, r.rhs, r.stderr)),
        Err(e) => c.error("double occupancy", e),
    }
    c.finish()
}

/// The config used by the determinism check.
pub fn determinism_config() -> RunConfig {
    RunConfig {
        d: 1,
        m: vec![0],
        rho0: vec![0.5, 1.0],
        rho: vec![0.1],
        q: None,
        p: None,
        quantities: vec![Quantity::NuStar, Quantity::Nu, Quantity::Abar, Quantity::Delta, Quantity::CKm, Quantity::KeyProbe],
        orders: vec![1],
        delta_method: crate::config::DeltaChoice::Both,
        harmonic: vec![],
        key_probe: vec![[1, 1]],
        field: FieldSpec::Crowding { lambda: 2.0, r: 0.25 },
        mc: McSettings { h: 0.25, n_outer: 8, seed: 42, ..Default::default() },
        outputs: Default::default(),
    }
}

/// Runs `cfg` in a dedicated pool of `threads` workers with a fresh cache.
pub fn csv_with_threads(cfg: &RunConfig, threads: usize, cache: CorrectorCache) -> Result<String> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    pool.install(|| csv_string(&run_estimate(cfg, &cache)?.rows))
}

fn determinism() -> (bool, String) {
    let cfg = determinism_config();
    let runs = [
        csv_with_threads(&cfg, 1, CorrectorCache::in_memory(1 << 28)),
        csv_with_threads(&cfg, 2, CorrectorCache::in_memory(1 << 28)),
        csv_with_threads(&cfg, 3, CorrectorCache::disabled()),
    ];
    match runs {
        [Ok(a), Ok(b), Ok(c)] => {
            let same = a == b && b == c;
            (same, format!("{} rows, 1/2/3 threads (last uncached) byte-identical: {same}", a.lines().count() - 1))
        }
        [a, b, c] => {
            let err = [a, b, c].into_iter().find_map(|r| r.err()).expect("one run failed");
            (false, format!("run failed: {err}"))
        }
    }
}

/// Runs the selected criteria and prints one line each through `print`.
pub fn run_suite(fixtures: FixtureFile, ids: &[u8], print: impl FnMut(&Outcome)) -> Vec<Outcome> {
    Suite::new(fixtures).run_all(ids, print)
}

pub fn all_ids() -> Vec<u8> {
    CRITERIA.iter().map(|c| c.0).collect()
}
