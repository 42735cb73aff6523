//! Conditioned `n`-particle problems on symmetric grids over `U^n`.
//!
//! Gradients live on grid edges: moving one particle by `h` along an axis.
//! The conductance of an edge is evaluated with the moving particle at the
//! edge midpoint and every other particle at its node. Quadrature weights are
//! trapezoidal in the frozen coordinates and uniform along the edge, so each
//! particle-direction family of edges carries total weight one.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conductance::Conductance;
use crate::error::{Error, Result};
use crate::lattice::{Lattice, Node};
use crate::point_process::{BoxRegion, PointConfiguration};

/// Default cap on symmetric unknowns per solve.
pub const DEFAULT_UNKNOWN_BUDGET: usize = 4_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub region: BoxRegion,
    pub n: usize,
    pub h: f64,
}

impl GridSpec {
    pub fn new(region: BoxRegion, n: usize, h: f64) -> Result<Self> {
        let g = Self { region, n, h };
        g.per_axis()?;
        Ok(g)
    }

    /// Grid points per axis, `side/h + 1`; `h` must divide the side.
    pub fn per_axis(&self) -> Result<usize> {
        if !(self.h > 0.0) || !self.h.is_finite() {
            return Err(Error::InvalidInput(format!("grid spacing must be positive, got {}", self.h)));
        }
        let ratio = self.region.side() / self.h;
        let cells = ratio.round();
        if cells < 1.0 || (ratio - cells).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::InvalidInput(format!(
                "grid spacing {} does not divide the box side {}",
                self.h,
                self.region.side()
            )));
        }
        Ok(cells as usize + 1)
    }

    pub fn lattice(&self) -> Result<Lattice> {
        Lattice::new(&self.region, self.per_axis()?, self.n)
    }

    pub fn unknowns(&self) -> Result<u64> {
        let p = self.per_axis()?;
        Ok(Lattice::state_count(p.pow(self.region.dim() as u32), self.n))
    }

    pub fn check_budget(&self, budget: usize) -> Result<()> {
        let u = self.unknowns()?;
        if u > budget as u64 {
            return Err(Error::MemoryBudget { unknowns: u as usize, budget });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Relative residual target for conjugate gradients.
    pub tol: f64,
    /// Iteration cap is `iter_factor · sqrt(unknowns)`.
    pub iter_factor: f64,
    pub unknown_budget: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-10, iter_factor: 50.0, unknown_budget: DEFAULT_UNKNOWN_BUDGET }
    }
}

/// One grid edge: `from → to` moves one particle by `+h` along the edge's axis.
#[derive(Clone, Copy, Debug)]
pub struct Edge {
    pub from: u32,
    pub to: u32,
    /// Quadrature weight (already summed over the identical particles moved).
    pub w: f64,
    /// Conductance `a_kk` at the edge midpoint.
    pub a: f64,
}

/// Exterior points that can influence conductances inside `region`.
pub fn relevant_exterior(
    region: &BoxRegion,
    exterior: &PointConfiguration,
    radius: f64,
) -> Result<PointConfiguration> {
    if exterior.dim() != region.dim() {
        return Err(Error::DimensionMismatch { expected: region.dim(), got: exterior.dim() });
    }
    let mut out = PointConfiguration::empty(region.dim());
    for p in exterior.points() {
        if region.contains(p) {
            return Err(Error::InvalidInput(format!("exterior point {p:?} lies inside the box")));
        }
        if region.distance_sup(p) < radius {
            out.push(p)?;
        }
    }
    Ok(out.canonical())
}

/// Conductance `a_kk` with particle at `x` and the other particles at `others`.
pub(crate) struct ConductanceProbe<'a> {
    field: &'a dyn Conductance,
    dim: usize,
    exterior: &'a [f64],
    buf: Vec<f64>,
}

impl<'a> ConductanceProbe<'a> {
    pub(crate) fn new(field: &'a dyn Conductance, dim: usize, exterior: &'a [f64]) -> Self {
        Self { field, dim, exterior, buf: Vec::new() }
    }

    /// `others` yields absolute positions of the other interior particles.
    pub(crate) fn eval<'b>(&mut self, x: &[f64], others: impl Iterator<Item = &'b [f64]>, k: usize) -> Result<f64> {
        let d = self.dim;
        self.buf.clear();
        for p in others {
            self.buf.extend(p.iter().zip(x).map(|(a, b)| a - b));
        }
        for p in self.exterior.chunks_exact(d) {
            self.buf.extend(p.iter().zip(x).map(|(a, b)| a - b));
        }
        Ok(self.field.diagonal(d, &self.buf)?[k])
    }
}

/// Edges of the level-`n` problem for a fixed exterior.
#[derive(Clone, Debug)]
pub struct Sector {
    pub lattice: Lattice,
    /// Edges grouped by axis.
    pub edges: Vec<Vec<Edge>>,
}

impl Sector {
    pub fn assemble(field: &dyn Conductance, grid: &GridSpec, exterior: &PointConfiguration) -> Result<Self> {
        let lattice = grid.lattice()?;
        let ext = relevant_exterior(&grid.region, exterior, field.interaction_radius())?;
        let d = lattice.dim();
        let n = lattice.particles();
        if n == 0 {
            return Ok(Self { lattice, edges: vec![Vec::new(); d] });
        }
        let chunks = lattice.rank_chunks(4 * rayon::current_num_threads());
        let parts: Vec<Result<Vec<Vec<Edge>>>> = chunks
            .par_iter()
            .map(|&(start, end)| {
                let mut out = vec![Vec::new(); d];
                let mut s = vec![0 as Node; n];
                lattice.unrank(start, &mut s);
                let mut probe = ConductanceProbe::new(field, d, ext.coords());
                let mut pos = vec![0.0; n * d];
                let mut xm = vec![0.0; d];
                let mut nb = Vec::with_capacity(n);
                for r in start..end {
                    for (j, &c) in s.iter().enumerate() {
                        lattice.node_position(c, &mut pos[j * d..(j + 1) * d]);
                    }
                    let arr = Lattice::arrangements(&s);
                    let prod_tau: f64 = s.iter().map(|&c| lattice.tau(c)).product();
                    let mut p = 0;
                    while p < n {
                        let v = s[p];
                        let mut q = p;
                        while q + 1 < n && s[q + 1] == v {
                            q += 1;
                        }
                        let mult = (q - p + 1) as f64;
                        for k in 0..d {
                            let Some(to) = lattice.step(&s, q, k, &mut nb) else { continue };
                            let w = arr * mult * prod_tau / lattice.tau(v) * lattice.edge_tau(v, k);
                            xm.copy_from_slice(&pos[q * d..(q + 1) * d]);
                            xm[k] += 0.5 * lattice.h();
                            let others = (0..n).filter(|&j| j != q).map(|j| &pos[j * d..(j + 1) * d]);
                            let a = probe.eval(&xm, others, k)?;
                            out[k].push(Edge { from: r as u32, to: to as u32, w, a });
                        }
                        p = q + 1;
                    }
                    lattice.advance(&mut s);
                }
                Ok(out)
            })
            .collect();
        let mut edges = vec![Vec::new(); d];
        for part in parts {
            for (k, e) in part?.into_iter().enumerate() {
                edges[k].extend(e);
            }
        }
        Ok(Self { lattice, edges })
    }

    pub fn h(&self) -> f64 {
        self.lattice.h()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }

    /// `Σ W (-½ a g² + q_k g)`: the per-configuration value of the dual functional.
    pub fn dual_energy(&self, u: &[f64], q: &[f64]) -> f64 {
        let ih = 1.0 / self.h();
        let mut total = 0.0;
        for (k, es) in self.edges.iter().enumerate() {
            for e in es {
                let g = (u[e.to as usize] - u[e.from as usize]) * ih;
                total += e.w * (-0.5 * e.a * g * g + q[k] * g);
            }
        }
        total
    }

    /// `Σ W |g|²`.
    pub fn gradient_norm2(&self, u: &[f64]) -> f64 {
        let ih = 1.0 / self.h();
        self.edges
            .iter()
            .flatten()
            .map(|e| {
                let g = (u[e.to as usize] - u[e.from as usize]) * ih;
                e.w * g * g
            })
            .sum()
    }

    fn state_weights(&self) -> Vec<f64> {
        let l = &self.lattice;
        let mut s = vec![0 as Node; l.particles()];
        let mut w = Vec::with_capacity(l.count());
        loop {
            w.push(l.state_weight(&s));
            if !l.advance(&mut s) {
                break;
            }
        }
        w
    }
}

/// Outcome of a conjugate-gradient run.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct CgReport {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Graph Laplacian-type operator `Σ c_e (e_to - e_from)(e_to - e_from)ᵀ`.
struct EdgeOperator<'a> {
    groups: Vec<(&'a [Edge], f64)>,
}

impl EdgeOperator<'_> {
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for (es, scale) in &self.groups {
            for e in *es {
                let c = e.w * e.a * scale;
                let t = c * (x[e.to as usize] - x[e.from as usize]);
                y[e.to as usize] += t;
                y[e.from as usize] -= t;
            }
        }
    }

    fn diagonal(&self, len: usize) -> Vec<f64> {
        let mut dg = vec![0.0; len];
        for (es, scale) in &self.groups {
            for e in *es {
                if e.from != e.to {
                    let c = e.w * e.a * scale;
                    dg[e.to as usize] += c;
                    dg[e.from as usize] += c;
                }
            }
        }
        dg
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn project_mean(x: &mut [f64], weights: &[f64], total: f64) {
    let mean = dot(x, weights) / total;
    x.iter_mut().for_each(|v| *v -= mean);
}

/// Jacobi-preconditioned CG for a singular system whose kernel is the
/// constants; the weighted mean is removed after every iteration.
///
/// `b_scale` is the norm of the right-hand side before cancellation; a `b`
/// that is pure round-off relative to it is treated as zero.
fn pcg(
    op: &EdgeOperator<'_>,
    b: &[f64],
    b_scale: f64,
    weights: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, CgReport)> {
    let len = b.len();
    let total_w: f64 = weights.iter().sum();
    let mut x = vec![0.0; len];
    let bnorm = dot(b, b).sqrt();
    if bnorm <= 1e-14 * b_scale {
        return Ok((x, CgReport::default()));
    }
    let inv_diag: Vec<f64> = op.diagonal(len).iter().map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 }).collect();
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; len];
    let mut rz = dot(&r, &z);
    let mut rel = 1.0;
    for it in 1..=max_iter {
        op.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        for i in 0..len {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        project_mean(&mut x, weights, total_w);
        rel = dot(&r, &r).sqrt() / bnorm;
        if rel <= tol {
            return Ok((x, CgReport { iterations: it, relative_residual: rel }));
        }
        for i in 0..len {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..len {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::SolverDidNotConverge { iterations: max_iter, residual: rel })
}

fn iteration_cap(opts: &SolverOptions, unknowns: usize) -> usize {
    ((opts.iter_factor * (unknowns as f64).sqrt()).ceil() as usize).max(50)
}

/// Solved dual corrector for one `(n, exterior)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiscreteCorrector {
    pub grid: GridSpec,
    pub field_id: String,
    pub q: Vec<f64>,
    /// Exterior after restriction to the influence collar.
    pub exterior: PointConfiguration,
    /// Values in symmetric-state rank order.
    #[serde(skip)]
    pub values: Vec<f64>,
    /// `Σ W (-½ a g² + q g)` at the maximizer.
    pub energy: f64,
    /// `Σ W |g|²` at the maximizer.
    pub gradient_norm2: f64,
    pub report: CgReport,
}

impl DiscreteCorrector {
    pub fn n(&self) -> usize {
        self.grid.n
    }

    /// Quadrature mean of the values (zero by construction).
    pub fn mean(&self) -> Result<f64> {
        let lattice = self.grid.lattice()?;
        let mut s = vec![0 as Node; lattice.particles()];
        let mut acc = 0.0;
        for v in &self.values {
            acc += lattice.state_weight(&s) * v;
            lattice.advance(&mut s);
        }
        Ok(acc)
    }

    /// Value at a full (unsorted) node tuple.
    pub fn value_at(&self, lattice: &Lattice, nodes: &[Node]) -> f64 {
        let mut s = nodes.to_vec();
        s.sort_unstable();
        self.values[lattice.rank(&s)]
    }
}

/// Maximizes the discrete `n`-particle dual functional.
pub fn solve_dual(
    field: &dyn Conductance,
    grid: &GridSpec,
    q: &[f64],
    exterior: &PointConfiguration,
    opts: &SolverOptions,
) -> Result<DiscreteCorrector> {
    Ok(solve_dual_with_sector(field, grid, q, exterior, opts)?.0)
}

/// As [`solve_dual`], also returning the assembled edges.
pub fn solve_dual_with_sector(
    field: &dyn Conductance,
    grid: &GridSpec,
    q: &[f64],
    exterior: &PointConfiguration,
    opts: &SolverOptions,
) -> Result<(DiscreteCorrector, Sector)> {
    let d = grid.region.dim();
    if q.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: q.len() });
    }
    grid.check_budget(opts.unknown_budget)?;
    let ext = relevant_exterior(&grid.region, exterior, field.interaction_radius())?;
    let sector = Sector::assemble(field, grid, &ext)?;
    let count = sector.lattice.count();
    let ih = 1.0 / sector.h();
    let mut b = vec![0.0; count];
    let mut b_abs = vec![0.0; count];
    for (k, es) in sector.edges.iter().enumerate() {
        for e in es {
            let t = e.w * q[k] * ih;
            b[e.to as usize] += t;
            b[e.from as usize] -= t;
            b_abs[e.to as usize] += t.abs();
            b_abs[e.from as usize] += t.abs();
        }
    }
    let b_scale = dot(&b_abs, &b_abs).sqrt();
    let (values, report) = if grid.n == 0 {
        (vec![0.0], CgReport::default())
    } else {
        let op = EdgeOperator { groups: sector.edges.iter().map(|es| (es.as_slice(), ih * ih)).collect() };
        let weights = sector.state_weights();
        pcg(&op, &b, b_scale, &weights, opts.tol, iteration_cap(opts, count))?
    };
    let energy = sector.dual_energy(&values, q);
    let gradient_norm2 = sector.gradient_norm2(&values);
    let corrector = DiscreteCorrector {
        grid: grid.clone(),
        field_id: field.field_id(),
        q: q.to_vec(),
        exterior: ext,
        values,
        energy,
        gradient_norm2,
        report,
    };
    Ok((corrector, sector))
}

/// A permutation-symmetric test function for residual diagnostics.
pub enum TestFunction<'a> {
    /// Values on the corrector's grid, in rank order.
    Grid(&'a [f64]),
    /// `grad(x, i, k)`: exact `∂u/∂x_{i,k}` at the flat position vector `x`.
    Analytic(&'a (dyn Fn(&[f64], usize, usize) -> f64 + Sync)),
}

/// Discrete first variation `Σ W (-a g_ψ g_u + q_k g_u)` of the dual
/// functional at `corrector` in the direction `test`.
pub fn first_variation_residual(
    field: &dyn Conductance,
    corrector: &DiscreteCorrector,
    test: TestFunction<'_>,
) -> Result<f64> {
    let sector = Sector::assemble(field, &corrector.grid, &corrector.exterior)?;
    first_variation_on_sector(&sector, corrector, test)
}

pub fn first_variation_on_sector(
    sector: &Sector,
    corrector: &DiscreteCorrector,
    test: TestFunction<'_>,
) -> Result<f64> {
    let ih = 1.0 / sector.h();
    let u = &corrector.values;
    let q = &corrector.q;
    match test {
        TestFunction::Grid(t) => {
            if t.len() != u.len() {
                return Err(Error::DimensionMismatch { expected: u.len(), got: t.len() });
            }
            let mut acc = 0.0;
            for (k, es) in sector.edges.iter().enumerate() {
                for e in es {
                    let g = (u[e.to as usize] - u[e.from as usize]) * ih;
                    let gt = (t[e.to as usize] - t[e.from as usize]) * ih;
                    acc += e.w * (-e.a * g + q[k]) * gt;
                }
            }
            Ok(acc)
        }
        TestFunction::Analytic(grad) => {
            // walk the states in assembly order to recover midpoints
            let l = &sector.lattice;
            let (d, n) = (l.dim(), l.particles());
            let mut cursor = vec![0usize; d];
            let mut s = vec![0 as Node; n];
            let mut pos = vec![0.0; n * d];
            let mut acc = 0.0;
            let mut nb = Vec::new();
            for _ in 0..l.count() {
                for (j, &c) in s.iter().enumerate() {
                    l.node_position(c, &mut pos[j * d..(j + 1) * d]);
                }
                let mut p = 0;
                while p < n {
                    let mut qi = p;
                    while qi + 1 < n && s[qi + 1] == s[p] {
                        qi += 1;
                    }
                    for k in 0..d {
                        if l.step(&s, qi, k, &mut nb).is_none() {
                            continue;
                        }
                        let e = sector.edges[k][cursor[k]];
                        cursor[k] += 1;
                        let g = (u[e.to as usize] - u[e.from as usize]) * ih;
                        pos[qi * d + k] += 0.5 * l.h();
                        let gt = grad(&pos, qi, k);
                        pos[qi * d + k] -= 0.5 * l.h();
                        acc += e.w * (-e.a * g + q[k]) * gt;
                    }
                    p = qi + 1;
                }
                l.advance(&mut s);
            }
            Ok(acc)
        }
    }
}

/// `(1/(ρ₀|U|)) ⨏ Σ_i |∇_i ψ|²` for a solved corrector.
pub fn dirichlet_energy(corrector: &DiscreteCorrector, rho0: f64) -> f64 {
    corrector.gradient_norm2 / (rho0 * corrector.grid.region.volume())
}

/// Slice form `(1/n) ⨏ Σ_i |∇_i ψ|²`, bounded by `|q|²`.
pub fn slice_energy(corrector: &DiscreteCorrector) -> f64 {
    if corrector.n() == 0 {
        0.0
    } else {
        corrector.gradient_norm2 / corrector.n() as f64
    }
}

/// Joint minimizer of the discrete primal functional over levels `0..=n_max`.
#[derive(Clone, Debug)]
pub struct PrimalSolution {
    pub p: Vec<f64>,
    pub n_max: usize,
    /// `f_n` on the full level-`n` grid (boundary states carry the value of
    /// the level they are identified with).
    pub levels: Vec<Vec<f64>>,
    /// Functional value with the sample-averaged conductance.
    pub value: f64,
    /// Functional value of the common minimizer under each exterior sample.
    pub per_sample: Vec<f64>,
    pub report: CgReport,
    pub h: f64,
}

/// For every state of one level: global unknown index.
struct PrimalLevel {
    map: Vec<u32>,
}

/// Minimizes `Σ_n (π_n/(2Z)) Σ_edges W ā (p_k + g)²` with `f_n` on faces
/// identified with `f_{n-1}`, where `ā` averages the edge conductance over
/// `exteriors` and `Z = Σ_{n ≤ n_max} π_n n`.
pub fn solve_primal(
    field: &dyn Conductance,
    region: &BoxRegion,
    p: &[f64],
    rho0: f64,
    n_max: usize,
    h: f64,
    exteriors: &[PointConfiguration],
    opts: &SolverOptions,
) -> Result<PrimalSolution> {
    let d = region.dim();
    if p.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: p.len() });
    }
    if exteriors.is_empty() {
        return Err(Error::InvalidInput("primal solve needs at least one exterior sample".into()));
    }
    let top = GridSpec::new(region.clone(), n_max, h)?;
    top.check_budget(opts.unknown_budget)?;
    let per_axis = top.per_axis()?;
    let inner_axis = per_axis.saturating_sub(2);
    let lambda = rho0 * region.volume();
    let pi: Vec<f64> = (0..=n_max).map(|n| crate::point_process::poisson_pmf(lambda, n as u64)).collect();
    let z: f64 = pi.iter().enumerate().map(|(n, w)| w * n as f64).sum();
    if !(z > 0.0) {
        return Err(Error::InvalidInput("primal functional needs n_max >= 1 and rho0 > 0".into()));
    }

    // unknown numbering: interior states of every level, level by level
    let mut offsets = vec![0usize; n_max + 2];
    let mut inner = Vec::with_capacity(n_max + 1);
    for n in 0..=n_max {
        let l = if inner_axis == 0 {
            None
        } else {
            Some(Lattice::index_only(d, inner_axis, n)?)
        };
        let count = match (&l, n) {
            (_, 0) => 1,
            (None, _) => 0,
            (Some(l), _) => l.count(),
        };
        offsets[n + 1] = offsets[n] + count;
        inner.push(l);
    }
    let unknowns = offsets[n_max + 1];

    let to_inner = |lat: &Lattice, c: Node| -> Node {
        let mut idx = 0usize;
        let mut stride = 1usize;
        for k in 0..d {
            idx += (lat.axis_index(c, k) - 1) * stride;
            stride *= inner_axis;
        }
        idx as Node
    };

    let mut levels = Vec::with_capacity(n_max + 1);
    for n in 0..=n_max {
        let lattice = GridSpec::new(region.clone(), n, h)?.lattice()?;
        let mut map = Vec::with_capacity(lattice.count());
        let mut s = vec![0 as Node; n];
        let mut t = Vec::with_capacity(n);
        loop {
            t.clear();
            t.extend(s.iter().filter(|&&c| !lattice.is_boundary(c)).map(|&c| to_inner(&lattice, c)));
            let lvl = t.len();
            let local = match &inner[lvl] {
                Some(il) if lvl > 0 => il.rank(&t),
                _ => 0,
            };
            map.push((offsets[lvl] + local) as u32);
            if !lattice.advance(&mut s) {
                break;
            }
        }
        levels.push(PrimalLevel { map });
    }

    // edges per level with sample-averaged conductance
    let mut sectors: Vec<Sector> = Vec::with_capacity(n_max + 1);
    for n in 0..=n_max {
        let grid = GridSpec::new(region.clone(), n, h)?;
        let mut mean: Option<Sector> = None;
        for ext in exteriors {
            let sec = Sector::assemble(field, &grid, ext)?;
            match &mut mean {
                None => mean = Some(sec),
                Some(m) => {
                    for (mk, sk) in m.edges.iter_mut().zip(&sec.edges) {
                        for (me, se) in mk.iter_mut().zip(sk) {
                            me.a += se.a;
                        }
                    }
                }
            }
        }
        let mut mean = mean.expect("at least one exterior");
        let inv = 1.0 / exteriors.len() as f64;
        for e in mean.edges.iter_mut().flatten() {
            e.a *= inv;
            let lvl = &levels[n];
            e.from = lvl.map[e.from as usize];
            e.to = lvl.map[e.to as usize];
        }
        sectors.push(mean);
    }

    let ih = 1.0 / h;
    let mut groups = Vec::new();
    let mut rhs = vec![0.0; unknowns];
    let mut rhs_abs = vec![0.0; unknowns];
    for (n, sec) in sectors.iter().enumerate() {
        let scale = pi[n] / z;
        for (k, es) in sec.edges.iter().enumerate() {
            groups.push((es.as_slice(), scale * ih * ih));
            for e in es {
                if e.from != e.to {
                    let t = scale * e.w * e.a * p[k] * ih;
                    rhs[e.to as usize] -= t;
                    rhs[e.from as usize] += t;
                    rhs_abs[e.to as usize] += t.abs();
                    rhs_abs[e.from as usize] += t.abs();
                }
            }
        }
    }
    let op = EdgeOperator { groups };
    let weights = vec![1.0; unknowns];
    let (f, report) = pcg(&op, &rhs, dot(&rhs_abs, &rhs_abs).sqrt(), &weights, opts.tol, iteration_cap(opts, unknowns))?;

    let value = primal_value(&sectors, &pi, z, p, &f, ih);
    let mut per_sample = Vec::with_capacity(exteriors.len());
    for ext in exteriors {
        let mut total = 0.0;
        for (n, mean) in sectors.iter().enumerate() {
            let grid = GridSpec::new(region.clone(), n, h)?;
            let mut sec = Sector::assemble(field, &grid, ext)?;
            for (sk, mk) in sec.edges.iter_mut().zip(&mean.edges) {
                for (se, me) in sk.iter_mut().zip(mk) {
                    se.from = me.from;
                    se.to = me.to;
                }
            }
            total += primal_value(std::slice::from_ref(&sec), &pi[n..=n], z, p, &f, ih);
        }
        per_sample.push(total);
    }

    let levels_out = levels.iter().map(|lvl| lvl.map.iter().map(|&g| f[g as usize]).collect()).collect();
    Ok(PrimalSolution { p: p.to_vec(), n_max, levels: levels_out, value, per_sample, report, h })
}

fn primal_value(sectors: &[Sector], pi: &[f64], z: f64, p: &[f64], f: &[f64], ih: f64) -> f64 {
    let mut total = 0.0;
    for (sec, w) in sectors.iter().zip(pi) {
        let scale = w / z;
        for (k, es) in sec.edges.iter().enumerate() {
            for e in es {
                let g = p[k] + (f[e.to as usize] - f[e.from as usize]) * ih;
                total += 0.5 * scale * e.w * e.a * g * g;
            }
        }
    }
    total
}

const BLOB_MAGIC: &[u8; 8] = b"BDCORR01";

#[derive(Serialize, Deserialize)]
struct BlobHeader {
    grid: GridSpec,
    field_id: String,
    q: Vec<f64>,
    exterior: Vec<f64>,
    energy: f64,
    gradient_norm2: f64,
    report: CgReport,
    count: usize,
}

/// Binary form: magic, header length, JSON header, little-endian `f64`
/// values in rank order, then a SHA-256 of everything before it.
pub fn write_blob(c: &DiscreteCorrector, mut w: impl Write) -> Result<()> {
    let header = BlobHeader {
        grid: c.grid.clone(),
        field_id: c.field_id.clone(),
        q: c.q.clone(),
        exterior: c.exterior.coords().to_vec(),
        energy: c.energy,
        gradient_norm2: c.gradient_norm2,
        report: c.report,
        count: c.values.len(),
    };
    let hbytes = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + hbytes.len() + 8 * c.values.len() + 32);
    buf.extend_from_slice(BLOB_MAGIC);
    buf.extend_from_slice(&(hbytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&hbytes);
    for v in &c.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_blob(mut r: impl Read) -> std::result::Result<DiscreteCorrector, String> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| e.to_string())?;
    if buf.len() < 48 || &buf[..8] != BLOB_MAGIC {
        return Err("bad magic or truncated".into());
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err("digest mismatch".into());
    }
    let hlen = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    let header: BlobHeader = serde_json::from_slice(body.get(16..16 + hlen).ok_or("truncated header")?)
        .map_err(|e| e.to_string())?;
    let data = &body[16 + hlen..];
    if data.len() != 8 * header.count {
        return Err(format!("expected {} values, found {} bytes", header.count, data.len()));
    }
    let values = data.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
    let exterior = PointConfiguration::from_flat(header.grid.region.dim(), header.exterior).map_err(|e| e.to_string())?;
    Ok(DiscreteCorrector {
        grid: header.grid,
        field_id: header.field_id,
        q: header.q,
        exterior,
        values,
        energy: header.energy,
        gradient_norm2: header.gradient_norm2,
        report: header.report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conductance::{ConstantField, CrowdingField};

    fn unit(d: usize) -> BoxRegion {
        BoxRegion::centered(1.0, d).unwrap()
    }

    #[test]
    fn empty_sector_is_zero() {
        let f = CrowdingField::new(2.0, 0.25).unwrap();
        let g = GridSpec::new(unit(1), 0, 0.125).unwrap();
        let c = solve_dual(&f, &g, &[1.0], &PointConfiguration::empty(1), &SolverOptions::default()).unwrap();
        assert_eq!(c.values, vec![0.0]);
        assert_eq!(c.energy, 0.0);
    }

    #[test]
    fn constant_field_is_exact() {
        for &(d, n, c) in &[(1, 3, 1.5), (2, 2, 2.0)] {
            let f = ConstantField::new(c, 2.0).unwrap();
            let g = GridSpec::new(unit(d), n, 0.25).unwrap();
            let q: Vec<f64> = (0..d).map(|k| 1.0 - 0.3 * k as f64).collect();
            let q2: f64 = q.iter().map(|x| x * x).sum();
            let cor = solve_dual(&f, &g, &q, &PointConfiguration::empty(d), &SolverOptions::default()).unwrap();
            assert!((cor.energy - n as f64 * q2 / (2.0 * c)).abs() < 1e-9, "{}", cor.energy);
            assert!((slice_energy(&cor) - q2 / (c * c)).abs() < 1e-9);
            assert!(cor.mean().unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn exterior_inside_box_rejected() {
        let f = CrowdingField::new(2.0, 0.25).unwrap();
        let g = GridSpec::new(unit(1), 1, 0.25).unwrap();
        let ext = PointConfiguration::from_flat(1, vec![0.1]).unwrap();
        assert!(solve_dual(&f, &g, &[1.0], &ext, &SolverOptions::default()).is_err());
    }

    #[test]
    fn budget_rejects_large_grids() {
        let f = CrowdingField::new(2.0, 0.25).unwrap();
        let g = GridSpec::new(unit(1), 3, 1.0 / 64.0).unwrap();
        let opts = SolverOptions { unknown_budget: 1000, ..Default::default() };
        let err = solve_dual(&f, &g, &[1.0], &PointConfiguration::empty(1), &opts).unwrap_err();
        assert!(matches!(err, Error::MemoryBudget { .. }));
        assert!(GridSpec::new(unit(1), 1, 0.3).is_err());
    }

    #[test]
    fn blob_round_trip_and_corruption() {
        let f = CrowdingField::new(2.0, 0.25).unwrap();
        let g = GridSpec::new(unit(1), 2, 0.125).unwrap();
        let c = solve_dual(&f, &g, &[1.0], &PointConfiguration::empty(1), &SolverOptions::default()).unwrap();
        let mut bytes = Vec::new();
        write_blob(&c, &mut bytes).unwrap();
        let back = read_blob(bytes.as_slice()).unwrap();
        assert_eq!(back.values, c.values);
        assert_eq!(back.energy, c.energy);
        bytes[40] ^= 1;
        assert!(read_blob(bytes.as_slice()).is_err());
    }

    #[test]
    fn primal_constant_field_is_exact() {
        let f = ConstantField::new(1.5, 2.0).unwrap();
        let sol = solve_primal(&f, &unit(1), &[1.0], 1.0, 4, 0.125, &[PointConfiguration::empty(1)], &SolverOptions::default())
            .unwrap();
        assert!((sol.value - 0.75).abs() < 1e-12, "{}", sol.value);
    }
}
