//! Monte Carlo estimators for `ν`, `ν*`, `ā`, `ā*` and the perturbative
//! quantities in the added intensity.
//!
//! Every estimator works sample by sample over exterior configurations: the
//! interior is integrated exactly (Poisson weights over particle counts, grid
//! quadrature over positions) and only the collar outside the box is random.
//! Sample `i` always draws from stream `(seed, i)`, so runs that share a seed
//! share exteriors and differences between them are paired.

mod perturb;
mod residual;

pub use perturb::{CkReport, DeltaMethod, ExpansionReport, ExpansionRow, KeyProbe, SplitTerm};
pub use residual::{first_variation_study, HarmonicResidual, VariationLevel};

use std::sync::Arc;

use gauss_quad::GaussLegendre;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conductance::{Conductance, SymMatrix};
use crate::corrector_cache::{CacheKey, CorrectorCache};
use crate::error::{Error, Result};
use crate::point_process::{poisson_pmf, poisson_tail, sample_poisson, stream_rng, BoxRegion, PointConfiguration};
use crate::sector_solver::{solve_dual, solve_primal, DiscreteCorrector, GridSpec, SolverOptions};

/// Stream offset separating the added-intensity collar from the base one.
pub(crate) const ADDED_STREAM: u64 = 1 << 32;

/// How the exterior of the box is integrated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExteriorMode {
    /// `n_outer` Poisson samples of the collar.
    Sampled,
    /// Gauss–Legendre atoms on the collar with exact Poisson weights over at
    /// most `max_count` points (d = 1 only). Deterministic.
    Quadrature { nodes_per_side: usize, max_count: usize },
    /// Conditions on an empty exterior.
    Empty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McSettings {
    pub n_outer: usize,
    /// Particle-count truncation; chosen from `tail_tol` when absent.
    pub n_max: Option<usize>,
    pub h: f64,
    pub tol: f64,
    pub seed: u64,
    pub tail_tol: f64,
    /// Per-sample extrapolation `(4 v_{h/2} - v_h)/3`.
    pub richardson: bool,
    pub exterior: ExteriorMode,
    pub unknown_budget: usize,
    /// Gauss–Legendre atoms per collar side for added points.
    pub collar_nodes: usize,
}

impl Default for McSettings {
    fn default() -> Self {
        Self {
            n_outer: 16,
            n_max: None,
            h: 0.125,
            tol: 1e-10,
            seed: 1,
            tail_tol: 1e-3,
            richardson: false,
            exterior: ExteriorMode::Sampled,
            unknown_budget: crate::sector_solver::DEFAULT_UNKNOWN_BUDGET,
            collar_nodes: 4,
        }
    }
}

impl McSettings {
    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions { tol: self.tol, unknown_budget: self.unknown_budget, ..SolverOptions::default() }
    }

    pub(crate) fn with_h(&self, h: f64) -> Self {
        Self { h, ..self.clone() }
    }
}

/// A scalar estimate with its provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub value: f64,
    pub stderr: f64,
    pub n_outer: usize,
    pub n_max: usize,
    /// Bound on the bias from truncating the particle count.
    pub tail: f64,
    pub h: f64,
    pub seed: u64,
}

impl McEstimate {
    pub(crate) fn from_samples(ens: &Ensemble, values: &[f64], n_max: usize, tail: f64, mc: &McSettings) -> Self {
        let (value, stderr) = ens.summarize(values);
        Self { value, stderr, n_outer: values.len(), n_max, tail, h: mc.h, seed: mc.seed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixEstimate {
    pub value: SymMatrix,
    pub stderr: SymMatrix,
    pub n_outer: usize,
    pub n_max: usize,
    pub tail: f64,
    pub h: f64,
    pub seed: u64,
}

/// Exterior configurations with integration weights.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub samples: Vec<PointConfiguration>,
    pub weights: Vec<f64>,
    /// Weights are equal Monte Carlo weights (otherwise quadrature).
    pub sampled: bool,
}

impl Ensemble {
    /// Exteriors of intensity `rho` within `width` of `region`.
    pub fn build(region: &BoxRegion, width: f64, rho: f64, mode: &ExteriorMode, mc: &McSettings, stream_base: u64) -> Result<Self> {
        let d = region.dim();
        if width <= 0.0 || rho == 0.0 || *mode == ExteriorMode::Empty {
            return Ok(Self { samples: vec![PointConfiguration::empty(d)], weights: vec![1.0], sampled: false });
        }
        match *mode {
            ExteriorMode::Sampled => {
                if mc.n_outer == 0 {
                    return Err(Error::InvalidInput("n_outer must be positive".into()));
                }
                let outer = region.enlarged(width);
                let samples = (0..mc.n_outer as u64)
                    .map(|i| {
                        let mut rng = stream_rng(mc.seed, stream_base + i);
                        let all = sample_poisson(rho, &outer, &mut rng)?;
                        let mut ext = PointConfiguration::empty(d);
                        for p in all.points().filter(|p| !region.contains(p)) {
                            ext.push(p)?;
                        }
                        Ok(ext)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let w = 1.0 / mc.n_outer as f64;
                Ok(Self { weights: vec![w; samples.len()], samples, sampled: true })
            }
            ExteriorMode::Quadrature { nodes_per_side, max_count } => {
                let atoms = collar_atoms(region, width, nodes_per_side)?;
                let mut samples = Vec::new();
                let mut weights = Vec::new();
                for set in multisets(atoms.len(), max_count) {
                    let mut ext = PointConfiguration::empty(d);
                    for &a in &set {
                        ext.push(&atoms[a as usize].0)?;
                    }
                    weights.push(poisson_multiset_weight(&set, &atoms, rho, 2.0 * width));
                    samples.push(ext);
                }
                Ok(Self { samples, weights, sampled: false })
            }
            ExteriorMode::Empty => unreachable!(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Weighted mean and its standard error (zero for quadrature).
    pub fn summarize(&self, values: &[f64]) -> (f64, f64) {
        if self.sampled {
            mean_stderr(values)
        } else {
            let total = pairwise_sum(&self.weights);
            let terms: Vec<f64> = values.iter().zip(&self.weights).map(|(v, w)| v * w).collect();
            (pairwise_sum(&terms) / total, 0.0)
        }
    }
}

/// Gauss–Legendre atoms `(position, weight)` on the two collar segments of
/// width `width` around a one-dimensional box.
pub fn collar_atoms(region: &BoxRegion, width: f64, nodes_per_side: usize) -> Result<Vec<(Vec<f64>, f64)>> {
    if region.dim() != 1 {
        return Err(Error::InvalidInput("collar quadrature is only available in d = 1".into()));
    }
    if nodes_per_side == 0 || width <= 0.0 {
        return Ok(Vec::new());
    }
    let rule: Vec<(f64, f64)> = if nodes_per_side == 1 {
        vec![(0.0, 2.0)]
    } else {
        GaussLegendre::new(nodes_per_side)
            .map_err(|e| Error::InvalidInput(e.to_string()))?
            .as_node_weight_pairs()
            .to_vec()
    };
    let mut atoms = Vec::with_capacity(2 * nodes_per_side);
    for (lo, hi) in [(region.lower(0) - width, region.lower(0)), (region.upper(0), region.upper(0) + width)] {
        for &(x, w) in &rule {
            atoms.push((vec![0.5 * ((hi - lo) * x + hi + lo)], 0.5 * (hi - lo) * w));
        }
    }
    Ok(atoms)
}

/// Sorted multisets of `0..items` with at most `max_size` elements, by size.
pub(crate) fn multisets(items: usize, max_size: usize) -> Vec<Vec<u16>> {
    let mut out = vec![Vec::new()];
    let mut frontier: Vec<Vec<u16>> = vec![Vec::new()];
    for _ in 0..max_size {
        let mut next = Vec::new();
        for s in &frontier {
            let start = s.last().copied().unwrap_or(0);
            for a in start..items as u16 {
                let mut t = s.clone();
                t.push(a);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// `e^{-ρ|C|} Π (ρ w_a)^{c_a} / c_a!` for a sorted multiset of atoms.
pub(crate) fn poisson_multiset_weight(set: &[u16], atoms: &[(Vec<f64>, f64)], rho: f64, measure: f64) -> f64 {
    let mut w = (-rho * measure).exp();
    let mut run = 0;
    for (i, &a) in set.iter().enumerate() {
        run = if i > 0 && set[i - 1] == a { run + 1 } else { 1 };
        w *= rho * atoms[a as usize].1 / run as f64;
    }
    w
}

pub(crate) fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n => pairwise_sum(&xs[..n / 2]) + pairwise_sum(&xs[n / 2..]),
    }
}

pub(crate) fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(xs) / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    (mean, (pairwise_sum(&dev) / ((n - 1) * n) as f64).sqrt())
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = xs.iter().zip(ys).filter(|(_, y)| y.abs() > 0.0).map(|(x, y)| (x.ln(), y.abs().ln())).collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Row of a continuity scan in `ρ₀`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContinuityRow {
    pub rho0: f64,
    pub abar: MatrixEstimate,
    pub abar_star: MatrixEstimate,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContinuityScan {
    pub rows: Vec<ContinuityRow>,
    /// Largest difference quotient of `ā` between neighbouring densities.
    pub modulus: f64,
}

/// Entry point for all estimates with one conductance field.
pub struct Estimator<'a> {
    field: Arc<dyn Conductance>,
    cache: &'a CorrectorCache,
}

impl<'a> Estimator<'a> {
    pub fn new(field: Arc<dyn Conductance>, cache: &'a CorrectorCache) -> Self {
        Self { field, cache }
    }

    pub fn field(&self) -> &dyn Conductance {
        self.field.as_ref()
    }

    pub fn cache(&self) -> &CorrectorCache {
        self.cache
    }

    pub(crate) fn corrector(
        &self,
        grid: &GridSpec,
        q: &[f64],
        exterior: &PointConfiguration,
        mc: &McSettings,
    ) -> Result<Arc<DiscreteCorrector>> {
        let key = CacheKey::new(self.field(), grid, q, exterior)?;
        self.cache.get_or_solve(key, || solve_dual(self.field(), grid, q, exterior, &mc.solver_options()))
    }

    /// Truncation level and its tail bound for mean count `lambda`.
    ///
    /// Dropping levels `n ≥ N` moves the ratio estimate of `ν*` by at most
    /// `P[X ≥ N] · (|q|²/2)(1 - 1/Λ)`; the automatic choice is the smallest
    /// `N` with `P[X ≥ N] ≤ tail_tol/Λ` whose grid fits the unknown budget.
    pub fn truncation(&self, region: &BoxRegion, lambda: f64, q2: f64, mc: &McSettings) -> Result<(usize, f64)> {
        let big = self.field.lambda();
        let spread = 0.5 * q2 * (1.0 - 1.0 / big);
        let bound = |n: usize| poisson_tail(lambda, n as u64 + 1) * spread;
        if let Some(n) = mc.n_max {
            let g = GridSpec::new(region.clone(), n, mc.h)?;
            g.check_budget(mc.unknown_budget)?;
            return Ok((n, bound(n)));
        }
        let threshold = mc.tail_tol / big;
        let mut n = 1;
        loop {
            let g = GridSpec::new(region.clone(), n, mc.h)?;
            if g.check_budget(mc.unknown_budget).is_err() {
                return Err(Error::TruncationTail {
                    tail: poisson_tail(lambda, n as u64),
                    threshold,
                    n_max: n - 1,
                });
            }
            if poisson_tail(lambda, n as u64 + 1) <= threshold {
                return Ok((n, bound(n)));
            }
            n += 1;
        }
    }

    fn base_ensemble(&self, region: &BoxRegion, rho0: f64, mc: &McSettings) -> Result<Ensemble> {
        Ensemble::build(region, self.field.interaction_radius(), rho0, &mc.exterior, mc, 0)
    }

    /// `Σ_{n ≤ N} π_n e_n / Σ_{n ≤ N} π_n n` for one exterior.
    fn nu_star_sample(&self, region: &BoxRegion, q: &[f64], pi: &[f64], ext: &PointConfiguration, mc: &McSettings) -> Result<f64> {
        let mut num = Vec::with_capacity(pi.len());
        let mut z = 0.0;
        for (n, &w) in pi.iter().enumerate().skip(1) {
            let c = self.corrector(&GridSpec::new(region.clone(), n, mc.h)?, q, ext, mc)?;
            num.push(w * c.energy);
            z += w * n as f64;
        }
        Ok(pairwise_sum(&num) / z)
    }

    /// Dual quantity `ν*(q, □_m)`.
    pub fn nu_star(&self, m: u32, q: &[f64], rho0: f64, mc: &McSettings) -> Result<McEstimate> {
        let d = q.len();
        let region = BoxRegion::cube(m, d);
        check_density(rho0)?;
        let lambda = rho0 * region.volume();
        let q2: f64 = q.iter().map(|x| x * x).sum();
        let (n_max, tail) = self.truncation(&region, lambda, q2, mc)?;
        let pi: Vec<f64> = (0..=n_max).map(|n| poisson_pmf(lambda, n as u64)).collect();
        let ens = self.base_ensemble(&region, rho0, mc)?;
        let fine = mc.with_h(mc.h / 2.0);
        let values = ens
            .samples
            .par_iter()
            .map(|ext| {
                let v = self.nu_star_sample(&region, q, &pi, ext, mc)?;
                if mc.richardson {
                    let f = self.nu_star_sample(&region, q, &pi, ext, &fine)?;
                    Ok((4.0 * f - v) / 3.0)
                } else {
                    Ok(v)
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(McEstimate::from_samples(&ens, &values, n_max, tail, mc))
    }

    /// Primal quantity `ν(p, □_m)`.
    pub fn nu(&self, m: u32, p: &[f64], rho0: f64, mc: &McSettings) -> Result<McEstimate> {
        let d = p.len();
        let region = BoxRegion::cube(m, d);
        check_density(rho0)?;
        if matches!(mc.exterior, ExteriorMode::Quadrature { .. }) {
            return Err(Error::InvalidInput("the primal estimator needs sampled or empty exteriors".into()));
        }
        let lambda = rho0 * region.volume();
        let p2: f64 = p.iter().map(|x| x * x).sum();
        let (n_max, tail) = self.truncation(&region, lambda, p2 * self.field.lambda(), mc)?;
        let ens = self.base_ensemble(&region, rho0, mc)?;
        let opts = mc.solver_options();
        let solve = |h: f64| solve_primal(self.field(), &region, p, rho0, n_max, h, &ens.samples, &opts);
        let coarse = solve(mc.h)?;
        let values = if mc.richardson {
            let fine = solve(mc.h / 2.0)?;
            coarse.per_sample.iter().zip(&fine.per_sample).map(|(c, f)| (4.0 * f - c) / 3.0).collect()
        } else {
            coarse.per_sample
        };
        Ok(McEstimate::from_samples(&ens, &values, n_max, tail, mc))
    }

    /// `(ā, ā*)` by polarization of `ν` and `ν*`.
    pub fn abar_matrices(&self, d: usize, m: u32, rho0: f64, mc: &McSettings) -> Result<(MatrixEstimate, MatrixEstimate)> {
        let unit = |i: usize| -> Vec<f64> { (0..d).map(|k| if k == i { 1.0 } else { 0.0 }).collect() };
        // M = 2ν polarized gives ā; M* = 2ν* polarized gives (ā*)^{-1}
        let polarize = |f: &dyn Fn(&[f64]) -> Result<McEstimate>| -> Result<(SymMatrix, SymMatrix, McEstimate)> {
            let mut val = SymMatrix::zeros(d);
            let mut err = SymMatrix::zeros(d);
            let diag: Vec<McEstimate> = (0..d).map(|i| f(&unit(i))).collect::<Result<_>>()?;
            for i in 0..d {
                val.set(i, i, 2.0 * diag[i].value);
                err.set(i, i, 2.0 * diag[i].stderr);
            }
            for i in 0..d {
                for j in i + 1..d {
                    let mut e = unit(i);
                    e[j] = 1.0;
                    let s = f(&e)?;
                    val.set(i, j, s.value - diag[i].value - diag[j].value);
                    err.set(i, j, (s.stderr.powi(2) + diag[i].stderr.powi(2) + diag[j].stderr.powi(2)).sqrt());
                }
            }
            let worst = diag.into_iter().max_by(|a, b| a.tail.total_cmp(&b.tail)).expect("d >= 1");
            Ok((val, err, worst))
        };
        let (a, a_err, pa) = polarize(&|p| self.nu(m, p, rho0, mc))?;
        let (minv, minv_err, pd) = polarize(&|q| self.nu_star(m, q, rho0, mc))?;
        let a_star = minv.inverse()?;
        // first order: δA = -A δM A
        let mut a_star_err = SymMatrix::zeros(d);
        for i in 0..d {
            for j in i..d {
                let mut v = 0.0;
                for k in 0..d {
                    for l in 0..d {
                        v += (a_star.get(i, k) * a_star.get(l, j) * minv_err.get(k, l)).powi(2);
                    }
                }
                a_star_err.set(i, j, v.sqrt());
            }
        }
        let wrap = |value, stderr, src: &McEstimate| MatrixEstimate {
            value,
            stderr,
            n_outer: src.n_outer,
            n_max: src.n_max,
            tail: src.tail,
            h: src.h,
            seed: src.seed,
        };
        Ok((wrap(a, a_err, &pa), wrap(a_star, a_star_err, &pd)))
    }

    /// `ā` and `ā*` over a grid of densities with common seeds.
    pub fn continuity_scan(&self, d: usize, m: u32, rho0s: &[f64], mc: &McSettings) -> Result<ContinuityScan> {
        let mut rows = Vec::with_capacity(rho0s.len());
        for &rho0 in rho0s {
            let (abar, abar_star) = self.abar_matrices(d, m, rho0, mc)?;
            rows.push(ContinuityRow { rho0, abar, abar_star });
        }
        let modulus = rows
            .windows(2)
            .map(|w| w[1].abar.value.sub(&w[0].abar.value).max_abs() / (w[1].rho0 - w[0].rho0).abs())
            .fold(0.0, f64::max);
        Ok(ContinuityScan { rows, modulus })
    }
}

pub(crate) fn check_density(rho: f64) -> Result<()> {
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(Error::InvalidInput(format!("density must be positive, got {rho}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conductance::{ConstantField, CrowdingField};

    #[test]
    fn multiset_counts() {
        assert_eq!(multisets(4, 0).len(), 1);
        assert_eq!(multisets(4, 2).len(), 1 + 4 + 10);
        assert!(multisets(5, 3).iter().all(|s| s.windows(2).all(|w| w[0] <= w[1])));
    }

    #[test]
    fn collar_weights_integrate_poisson() {
        let region = BoxRegion::cube(0, 1);
        let atoms = collar_atoms(&region, 0.25, 4).unwrap();
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        assert!((total - 0.5).abs() < 1e-14);
        // all multisets up to a large size recover total probability one
        let mass: f64 = multisets(atoms.len(), 6).iter().map(|s| poisson_multiset_weight(s, &atoms, 1.0, 0.5)).sum();
        assert!((mass - 1.0).abs() < 1e-5, "{mass}");
    }

    #[test]
    fn constant_field_nu_star_exact() {
        let cache = CorrectorCache::in_memory(1 << 24);
        let est = Estimator::new(Arc::new(ConstantField::new(1.5, 2.0).unwrap()), &cache);
        let mc = McSettings { h: 0.25, ..Default::default() };
        let e = est.nu_star(0, &[1.0], 1.0, &mc).unwrap();
        assert!((e.value - 1.0 / 3.0).abs() < 1e-9, "{}", e.value);
        assert_eq!(e.stderr, 0.0);
        let p = est.nu(0, &[1.0], 1.0, &mc).unwrap();
        assert!((p.value - 0.75).abs() < 1e-9, "{}", p.value);
    }

    #[test]
    fn sandwich_crowding() {
        let cache = CorrectorCache::in_memory(1 << 26);
        let est = Estimator::new(Arc::new(CrowdingField::new(2.0, 0.25).unwrap()), &cache);
        let mc = McSettings { h: 0.25, n_outer: 4, ..Default::default() };
        let (a, a_star) = est.abar_matrices(1, 0, 0.5, &mc).unwrap();
        let (a, s) = (a.value.get(0, 0), a_star.value.get(0, 0));
        assert!(1.0 <= s && s <= a && a <= 2.0, "{s} {a}");
    }
}
