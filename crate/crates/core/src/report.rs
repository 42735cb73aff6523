//! The `estimate` pipeline: runs a config and renders CSV, JSON and gnuplot
//! data.
//!
//! Output is a pure function of the config; no timestamps, host names or
//! thread counts leak into it.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value as Json};

use crate::conductance::{Conductance, SymMatrix};
use crate::config::{Quantity, RunConfig};
use crate::corrector_cache::CorrectorCache;
use crate::error::{Error, Result};
use crate::estimator::{DeltaMethod, Estimator, ExteriorMode, MatrixEstimate, McEstimate, McSettings};

/// CSV header, in column order.
pub const CSV_COLUMNS: [&str; 11] =
    ["field_id", "m", "rho0", "quantity", "value", "stderr", "n_outer", "n_max", "h", "seed", "detail"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Row {
    pub field_id: String,
    pub m: u32,
    pub rho0: f64,
    pub quantity: String,
    pub value: f64,
    pub stderr: f64,
    pub n_outer: usize,
    pub n_max: usize,
    pub h: f64,
    pub seed: u64,
    /// `key=value` pairs, `;`-separated, that pin down the estimate.
    pub detail: String,
}

/// Outcome flags raised while running; they do not stop the run.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Findings {
    pub violations: Vec<String>,
    pub unconverged: Vec<String>,
}

#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub rows: Vec<Row>,
    /// Structured results for the JSON report.
    pub records: Vec<Json>,
    /// `(file stem, header, rows)` for gnuplot.
    pub series: Vec<(String, String, Vec<Vec<f64>>)>,
    pub findings: Findings,
}

impl RunOutput {
    /// Process exit code: 0 clean, 2 invariant violation, 3 unconverged.
    pub fn exit_code(&self) -> i32 {
        if !self.findings.violations.is_empty() {
            2
        } else if !self.findings.unconverged.is_empty() {
            3
        } else {
            0
        }
    }
}

/// Human-readable field label with parameters, e.g. `crowding(lambda=2,r=0.25)`.
pub fn field_label(field: &dyn Conductance) -> String {
    let params: Vec<String> = field.params().iter().map(|(k, v)| format!("{k}={v}")).collect();
    format!("{}({})", field.name(), params.join(","))
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
    format!("[{}]", parts.join(","))
}

fn fmt_labels(v: &[usize]) -> String {
    let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("[{}]", parts.join(","))
}

/// The settings that shape an estimate beyond the CSV columns.
fn mc_detail(mc: &McSettings) -> String {
    let ext = match &mc.exterior {
        ExteriorMode::Sampled => "sampled".to_string(),
        ExteriorMode::Empty => "empty".to_string(),
        ExteriorMode::Quadrature { nodes_per_side, max_count } => format!("quadrature({nodes_per_side},{max_count})"),
    };
    let n_max = mc.n_max.map_or("auto".to_string(), |n| n.to_string());
    format!(
        "exterior={ext};richardson={};n_max={n_max};tail_tol={};tol={};collar_nodes={}",
        mc.richardson, mc.tail_tol, mc.tol, mc.collar_nodes
    )
}

struct Emitter<'a> {
    field_id: String,
    mc: &'a McSettings,
    out: RunOutput,
}

impl Emitter<'_> {
    fn scalar(&mut self, m: u32, rho0: f64, quantity: &str, est: &McEstimate, detail: &str) {
        let mut d = detail.to_string();
        if !d.is_empty() {
            d.push(';');
        }
        let _ = write!(d, "tail={};{}", est.tail, mc_detail(self.mc));
        self.out.rows.push(Row {
            field_id: self.field_id.clone(),
            m,
            rho0,
            quantity: quantity.to_string(),
            value: est.value,
            stderr: est.stderr,
            n_outer: est.n_outer,
            n_max: est.n_max,
            h: est.h,
            seed: est.seed,
            detail: d,
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn matrix(&mut self, m: u32, rho0: f64, name: &str, value: &SymMatrix, stderr: &SymMatrix, like: &McEstimate, detail: &str) {
        for i in 0..value.dim() {
            for j in i..value.dim() {
                let e = McEstimate { value: value.get(i, j), stderr: stderr.get(i, j), ..like.clone() };
                self.scalar(m, rho0, &format!("{name}[{i},{j}]"), &e, detail);
            }
        }
    }

    fn record(&mut self, quantity: Quantity, m: u32, rho0: f64, result: impl Serialize) -> Result<()> {
        self.out.records.push(json!({
            "quantity": quantity.as_str(),
            "m": m,
            "rho0": rho0,
            "result": serde_json::to_value(result)?,
        }));
        Ok(())
    }
}

fn as_estimate(value: f64, stderr: f64, like: &McEstimate) -> McEstimate {
    McEstimate { value, stderr, ..like.clone() }
}

/// Provenance of a matrix estimate, as a scalar template.
fn provenance(a: &MatrixEstimate) -> McEstimate {
    McEstimate { value: 0.0, stderr: 0.0, n_outer: a.n_outer, n_max: a.n_max, tail: a.tail, h: a.h, seed: a.seed }
}

/// Checks `Id ≤ ā* ≤ ā ≤ Λ Id` on eigenvalues with a `slack`-sigma margin.
pub fn sandwich_violation(a: &SymMatrix, a_star: &SymMatrix, lambda: f64, slack: f64) -> Option<String> {
    // solves are iterative: never demand more than round-off at the solver tolerance
    let slack = slack + 1e-9 * lambda;
    let lo = a_star.eigenvalues();
    let hi = a.eigenvalues();
    let gap = a.sub(a_star).eigenvalues();
    let lo_min = lo.iter().copied().fold(f64::INFINITY, f64::min);
    let hi_max = hi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let gap_min = gap.iter().copied().fold(f64::INFINITY, f64::min);
    if lo_min < 1.0 - slack || gap_min < -slack || hi_max > lambda + slack {
        Some(format!("sandwich failed: eig(ā*) {lo:?}, eig(ā) {hi:?}, eig(ā-ā*) {gap:?}, slack {slack:.3e}"))
    } else {
        None
    }
}

/// Runs every requested quantity of `cfg`.
pub fn run_estimate(cfg: &RunConfig, cache: &CorrectorCache) -> Result<RunOutput> {
    cfg.validate()?;
    let field = cfg.field.build()?;
    let est = Estimator::new(field.clone(), cache);
    let mut em = Emitter { field_id: field_label(field.as_ref()), mc: &cfg.mc, out: RunOutput::default() };
    let (q, p) = (cfg.q(), cfg.p());
    let mc = &cfg.mc;
    let qd = format!("q={}", fmt_vec(&q));

    for &m in &cfg.m {
        for &quantity in &cfg.quantities {
            if quantity == Quantity::Continuity {
                log::info!("continuity scan m={m}");
                let scan = est.continuity_scan(cfg.d, m, &cfg.rho0, mc)?;
                let mut series = Vec::new();
                for row in &scan.rows {
                    let like = provenance(&row.abar);
                    em.matrix(m, row.rho0, "continuity_abar", &row.abar.value, &row.abar.stderr, &like, "");
                    em.matrix(m, row.rho0, "continuity_abar_star", &row.abar_star.value, &row.abar_star.stderr, &like, "");
                    series.push(vec![row.rho0, row.abar.value.get(0, 0), row.abar_star.value.get(0, 0)]);
                }
                let like = as_estimate(scan.modulus, 0.0, &provenance(&scan.rows[0].abar));
                em.scalar(m, cfg.rho0[0], "continuity_modulus", &like, &format!("rho0={}", fmt_vec(&cfg.rho0)));
                em.out.series.push((format!("continuity_m{m}"), "rho0 abar00 abar_star00".into(), series));
                em.record(quantity, m, cfg.rho0[0], &scan)?;
                continue;
            }
            for &rho0 in &cfg.rho0 {
                log::info!("{} m={m} rho0={rho0}", quantity.as_str());
                run_one(&est, cfg, &mut em, quantity, m, rho0, &q, &p, &qd)?;
            }
        }
    }
    Ok(em.out)
}

#[allow(clippy::too_many_arguments)]
fn run_one(
    est: &Estimator<'_>,
    cfg: &RunConfig,
    em: &mut Emitter<'_>,
    quantity: Quantity,
    m: u32,
    rho0: f64,
    q: &[f64],
    p: &[f64],
    qd: &str,
) -> Result<()> {
    let mc = &cfg.mc;
    match quantity {
        Quantity::NuStar => {
            let e = est.nu_star(m, q, rho0, mc)?;
            em.scalar(m, rho0, "nu_star", &e, qd);
            em.record(quantity, m, rho0, &e)?;
        }
        Quantity::Nu => {
            let e = est.nu(m, p, rho0, mc)?;
            em.scalar(m, rho0, "nu", &e, &format!("p={}", fmt_vec(p)));
            em.record(quantity, m, rho0, &e)?;
        }
        Quantity::Abar => {
            let (a, s) = est.abar_matrices(cfg.d, m, rho0, mc)?;
            let like = provenance(&a);
            em.matrix(m, rho0, "abar", &a.value, &a.stderr, &like, "");
            em.matrix(m, rho0, "abar_star", &s.value, &s.stderr, &like, "");
            let slack = 2.0 * a.stderr.max_abs().max(s.stderr.max_abs()) + a.tail.max(s.tail);
            if let Some(msg) = sandwich_violation(&a.value, &s.value, est.field().lambda(), slack) {
                em.out.findings.violations.push(format!("abar m={m} rho0={rho0}: {msg}"));
            }
            em.record(quantity, m, rho0, json!({ "abar": a, "abar_star": s }))?;
        }
        Quantity::Delta => {
            for &rho in &cfg.rho {
                for method in cfg.delta_method.methods() {
                    let e = est.delta_rho(m, q, rho0, rho, method, mc)?;
                    let name = match method {
                        DeltaMethod::Definition => "delta_def",
                        DeltaMethod::Representation => "delta_repr",
                    };
                    em.scalar(m, rho0, name, &e, &format!("{qd};rho={rho}"));
                    em.record(quantity, m, rho0, json!({ "rho": rho, "method": name, "estimate": e }))?;
                }
            }
        }
        Quantity::CKm => {
            for &k in &cfg.orders {
                let r = est.c_km(m, q, rho0, k, mc)?;
                em.scalar(m, rho0, &format!("c{k}"), &r.value, qd);
                for s in &r.splits {
                    em.scalar(m, rho0, &format!("c{k}_split"), &s.value, &format!("{qd};E={};F={}", fmt_labels(&s.e), fmt_labels(&s.f)));
                }
                if !r.converged {
                    em.out.findings.unconverged.push(format!("c{k} m={m} rho0={rho0}: splits or truncation unconverged"));
                }
                em.record(quantity, m, rho0, &r)?;
            }
        }
        Quantity::Expansion => {
            for &k in &cfg.orders {
                let r = est.expansion_report(m, q, rho0, k, &cfg.rho, mc)?;
                for (j, c) in r.coefficients.iter().enumerate().skip(1) {
                    em.scalar(m, rho0, &format!("expansion_k{k}_c{j}"), c, qd);
                }
                let mut series = Vec::new();
                for row in &r.rows {
                    let d = format!("{qd};rho={}", row.rho);
                    em.scalar(m, rho0, &format!("expansion_k{k}_delta"), &row.delta, &d);
                    em.scalar(m, rho0, &format!("expansion_k{k}_remainder"), &row.remainder, &d);
                    series.push(vec![row.rho, row.remainder.value.abs(), row.remainder.stderr]);
                }
                let min_slope = k as f64 + 0.5;
                let like = as_estimate(r.slope, 0.0, &r.rows[0].remainder);
                em.scalar(m, rho0, &format!("expansion_k{k}_slope"), &like, &format!("{qd};verdict={}", r.verdict(min_slope)));
                em.out.series.push((format!("expansion_m{m}_rho0_{rho0}_k{k}"), "rho abs_remainder stderr".into(), series));
                em.record(quantity, m, rho0, &r)?;
            }
        }
        Quantity::Harmonic => {
            for pair in &cfg.harmonic {
                let r = est.harmonic_residual(m, q, rho0, &pair.e, &pair.f, mc)?;
                em.scalar(m, rho0, "harmonic", &r.value, &format!("{qd};E={};F={}", fmt_labels(&pair.e), fmt_labels(&pair.f)));
                em.record(quantity, m, rho0, &r)?;
            }
        }
        Quantity::KeyProbe => {
            for &[f, g] in &cfg.key_probe {
                let r = est.key_estimate_probe(m, q, rho0, f, g, mc)?;
                em.scalar(m, rho0, "key_probe", &r.value, &format!("{qd};F={f};G={g}"));
                em.record(quantity, m, rho0, &r)?;
            }
        }
        Quantity::Continuity => unreachable!("handled per level"),
    }
    Ok(())
}

/// CSV with the fixed column set; floats use shortest round-trip formatting.
pub fn write_csv(rows: &[Row], w: impl Write) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(CSV_COLUMNS)?;
    for r in rows {
        wr.write_record([
            r.field_id.clone(),
            r.m.to_string(),
            r.rho0.to_string(),
            r.quantity.clone(),
            r.value.to_string(),
            r.stderr.to_string(),
            r.n_outer.to_string(),
            r.n_max.to_string(),
            r.h.to_string(),
            r.seed.to_string(),
            r.detail.clone(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn csv_string(rows: &[Row]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::InvalidInput(e.to_string()))
}

/// JSON report: config, field digest, findings and structured results.
pub fn json_report(cfg: &RunConfig, out: &RunOutput) -> Result<Json> {
    let field = cfg.field.build()?;
    Ok(json!({
        "generator": format!("bulkdiff {}", env!("CARGO_PKG_VERSION")),
        "field": field_label(field.as_ref()),
        "field_digest": field.field_id(),
        "config": serde_json::to_value(cfg)?,
        "seed": cfg.mc.seed,
        "findings": serde_json::to_value(&out.findings)?,
        "results": out.records,
    }))
}

pub fn gnuplot_text(header: &str, rows: &[Vec<f64>]) -> String {
    let mut s = format!("# {header}\n");
    for r in rows {
        let cols: Vec<String> = r.iter().map(|x| format!("{x:.12e}")).collect();
        s.push_str(&cols.join(" "));
        s.push('\n');
    }
    s
}

/// Where each artifact goes: config paths, re-rooted under `out_dir` if given.
pub fn output_paths(cfg: &RunConfig, out_dir: Option<&Path>) -> (Option<PathBuf>, Option<PathBuf>, Option<PathBuf>) {
    let o = &cfg.outputs;
    match out_dir {
        Some(dir) => {
            let name = |p: &Option<PathBuf>, default: &str| {
                dir.join(p.as_ref().and_then(|p| p.file_name()).map_or_else(|| default.into(), PathBuf::from))
            };
            (Some(name(&o.csv, "results.csv")), Some(name(&o.json, "results.json")), Some(dir.to_path_buf()))
        }
        None => (o.csv.clone(), o.json.clone(), o.gnuplot_dir.clone()),
    }
}

/// Writes the configured artifacts; the CSV goes to `stdout` when no path is set.
pub fn write_outputs(cfg: &RunConfig, out: &RunOutput, out_dir: Option<&Path>, stdout: &mut dyn Write) -> Result<()> {
    let (csv_path, json_path, plot_dir) = output_paths(cfg, out_dir);
    let csv = csv_string(&out.rows)?;
    match csv_path {
        Some(p) => write_file(&p, csv.as_bytes())?,
        None => stdout.write_all(csv.as_bytes())?,
    }
    if let Some(p) = json_path {
        let text = serde_json::to_string_pretty(&json_report(cfg, out)?)?;
        write_file(&p, text.as_bytes())?;
    }
    if let Some(dir) = plot_dir {
        for (stem, header, rows) in &out.series {
            write_file(&dir.join(format!("{stem}.dat")), gnuplot_text(header, rows).as_bytes())?;
        }
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}
