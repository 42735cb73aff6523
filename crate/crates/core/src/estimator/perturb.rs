//! Perturbation of the dual problem by an independent added intensity `ρ`.
//!
//! For a base level `n` and a multiset `Y` of added atoms (interior grid
//! nodes or collar quadrature points) the per-edge integrand
//! `g₀ (a₀ - a_Y) g_Y` compares the base corrector gradient with the corrector
//! of the configuration with `Y` added. Summing it against Poisson weights of
//! `Y` gives `Δ^ρ`; finite differences over ordered atom tuples give `c_k`.

use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    check_density, collar_atoms, log_log_slope, multisets, pairwise_sum, poisson_multiset_weight, Ensemble, Estimator,
    ExteriorMode, McEstimate, McSettings, ADDED_STREAM,
};
use crate::diff_calculus::{mobius, submasks};
use crate::error::{Error, Result};
use crate::lattice::{merge_sorted, Lattice, Node};
use crate::point_process::{poisson_pmf, poisson_tail, superpose, BoxRegion, PointConfiguration};
use crate::sector_solver::{relevant_exterior, ConductanceProbe, DiscreteCorrector, GridSpec};

/// Which formula `delta_rho` evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaMethod {
    /// Difference of the two dual energies.
    Definition,
    /// Sum over added configurations of the per-edge perturbation.
    Representation,
}

/// An added point: grid node or collar quadrature atom.
#[derive(Clone, Debug)]
pub(crate) struct Atom {
    pub pos: Vec<f64>,
    pub weight: f64,
    pub node: Option<Node>,
}

pub(crate) fn interior_atoms(region: &BoxRegion, h: f64) -> Result<Vec<Atom>> {
    let lat = GridSpec::new(region.clone(), 1, h)?.lattice()?;
    let d = region.dim();
    let vol = region.volume();
    Ok((0..lat.nodes() as Node)
        .map(|c| {
            let mut pos = vec![0.0; d];
            lat.node_position(c, &mut pos);
            Atom { pos, weight: vol * lat.tau(c), node: Some(c) }
        })
        .collect())
}

/// Interior atoms followed by collar atoms.
pub(crate) fn all_atoms(region: &BoxRegion, h: f64, radius: f64, collar_nodes: usize) -> Result<Vec<Atom>> {
    let mut atoms = interior_atoms(region, h)?;
    if radius > 0.0 {
        for (pos, weight) in collar_atoms(region, radius, collar_nodes)? {
            atoms.push(Atom { pos, weight, node: None });
        }
    }
    Ok(atoms)
}

fn as_pairs(atoms: &[Atom]) -> Vec<(Vec<f64>, f64)> {
    atoms.iter().map(|a| (a.pos.clone(), a.weight)).collect()
}

/// Added configuration, split into interior particles and exterior points.
pub(super) struct Variant {
    pub(super) interior: Vec<Node>,
    pub(super) interior_pos: Vec<f64>,
    pub(super) collar: Vec<f64>,
}

impl Variant {
    pub(super) fn new(set: &[u16], atoms: &[Atom]) -> Self {
        let mut v = Variant { interior: Vec::new(), interior_pos: Vec::new(), collar: Vec::new() };
        for &i in set {
            let a = &atoms[i as usize];
            if a.pos.is_empty() {
                // far atom: outside the range of every conductance
                continue;
            }
            match a.node {
                Some(c) => {
                    v.interior.push(c);
                    v.interior_pos.extend_from_slice(&a.pos);
                }
                None => v.collar.extend_from_slice(&a.pos),
            }
        }
        v.interior.sort_unstable();
        v
    }
}

/// Data of one base edge together with every variant.
struct EdgeTerm<'t> {
    w: f64,
    g0: f64,
    a0: f64,
    g: &'t [f64],
    a: &'t [f64],
}

pub(super) struct Engine<'e, 'a> {
    pub(super) est: &'e Estimator<'a>,
    pub(super) region: BoxRegion,
    pub(super) q: Vec<f64>,
    pub(super) mc: McSettings,
}

impl Engine<'_, '_> {
    /// Correctors of every variant at base level `n`, and the lattices of
    /// the levels they live on.
    pub(super) fn variant_correctors(
        &self,
        n: usize,
        ext: &PointConfiguration,
        extra: &PointConfiguration,
        variants: &[Variant],
    ) -> Result<(Vec<Arc<DiscreteCorrector>>, HashMap<usize, Lattice>)> {
        let d = self.region.dim();
        let h = self.mc.h;
        let base_ext = superpose(ext, extra)?;
        let mut lattices: HashMap<usize, Lattice> = HashMap::new();
        let mut unique: HashMap<(usize, Vec<u64>), Arc<DiscreteCorrector>> = HashMap::new();
        let mut cors = Vec::with_capacity(variants.len());
        for v in variants {
            let level = n + v.interior.len();
            let grid = GridSpec::new(self.region.clone(), level, h)?;
            if let std::collections::hash_map::Entry::Vacant(e) = lattices.entry(level) {
                e.insert(grid.lattice()?);
            }
            let key = (level, v.collar.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
            let c = match unique.get(&key) {
                Some(c) => c.clone(),
                None => {
                    let mut e = base_ext.clone();
                    for p in v.collar.chunks_exact(d) {
                        e.push(p)?;
                    }
                    let c = self.est.corrector(&grid, &self.q, &e, &self.mc)?;
                    unique.insert(key, c.clone());
                    c
                }
            };
            cors.push(c);
        }
        Ok((cors, lattices))
    }

    /// Visits every edge of level `n` under exterior `ext`, with `extra`
    /// points added to the exterior of every variant.
    fn visit(
        &self,
        n: usize,
        ext: &PointConfiguration,
        extra: &PointConfiguration,
        variants: &[Variant],
        mut sink: impl FnMut(&EdgeTerm),
    ) -> Result<()> {
        let d = self.region.dim();
        let h = self.mc.h;
        let grid0 = GridSpec::new(self.region.clone(), n, h)?;
        let lat0 = grid0.lattice()?;
        let c0 = self.est.corrector(&grid0, &self.q, ext, &self.mc)?;
        let field = self.est.field();

        let (cors, lattices) = self.variant_correctors(n, ext, extra, variants)?;
        let mut probe0 = ConductanceProbe::new(field, d, c0.exterior.coords());
        let mut probes: Vec<ConductanceProbe> =
            cors.iter().map(|c| ConductanceProbe::new(field, d, c.exterior.coords())).collect();
        let var_lats: Vec<&Lattice> = variants.iter().map(|v| &lattices[&(n + v.interior.len())]).collect();

        let ih = 1.0 / h;
        let mut s = vec![0 as Node; n];
        let mut pos = vec![0.0; n * d];
        let mut xm = vec![0.0; d];
        let mut nb = Vec::with_capacity(n + 8);
        let mut merged = Vec::with_capacity(n + 8);
        let mut g = vec![0.0; variants.len()];
        let mut a = vec![0.0; variants.len()];
        for r in 0..lat0.count() {
            for (j, &c) in s.iter().enumerate() {
                lat0.node_position(c, &mut pos[j * d..(j + 1) * d]);
            }
            let arr = Lattice::arrangements(&s);
            let prod_tau: f64 = s.iter().map(|&c| lat0.tau(c)).product();
            let mut p = 0;
            while p < n {
                let v = s[p];
                let mut top = p;
                while top + 1 < n && s[top + 1] == v {
                    top += 1;
                }
                let mult = (top - p + 1) as f64;
                for k in 0..d {
                    let Some(to0) = lat0.step(&s, top, k, &mut nb) else { continue };
                    let w = arr * mult * prod_tau / lat0.tau(v) * lat0.edge_tau(v, k);
                    let g0 = (c0.values[to0] - c0.values[r]) * ih;
                    xm.copy_from_slice(&pos[top * d..(top + 1) * d]);
                    xm[k] += 0.5 * h;
                    let others = || (0..n).filter(|&j| j != top).map(|j| &pos[j * d..(j + 1) * d]);
                    let a0 = probe0.eval(&xm, others(), k)?;
                    for (j, var) in variants.iter().enumerate() {
                        let lat = var_lats[j];
                        merge_sorted(&s, &var.interior, &mut merged);
                        let from = lat.rank(&merged);
                        let idx = merged.partition_point(|&x| x <= v) - 1;
                        let to = lat.step(&merged, idx, k, &mut nb).expect("base edge exists");
                        let vals = &cors[j].values;
                        g[j] = (vals[to] - vals[from]) * ih;
                        a[j] = probes[j].eval(&xm, others().chain(var.interior_pos.chunks_exact(d)), k)?;
                    }
                    sink(&EdgeTerm { w, g0, a0, g: &g, a: &a });
                }
                p = top + 1;
            }
            lat0.advance(&mut s);
        }
        Ok(())
    }
}

/// Ordered tuples of atoms with the variant index of every sub-multiset.
struct TupleTable {
    len: usize,
    weights: Vec<f64>,
    /// `vars[t * 2^len + mask]`.
    vars: Vec<usize>,
}

impl TupleTable {
    fn new(len: usize, atoms: &[Atom], index: &HashMap<Vec<u16>, usize>) -> Result<Self> {
        let count = atoms.len().pow(len as u32);
        let masks = 1usize << len;
        let mut weights = Vec::with_capacity(count);
        let mut vars = Vec::with_capacity(count * masks);
        let mut digits = vec![0u16; len];
        for t in 0..count {
            let mut rem = t;
            for dgt in digits.iter_mut() {
                *dgt = (rem % atoms.len()) as u16;
                rem /= atoms.len();
            }
            weights.push(digits.iter().map(|&i| atoms[i as usize].weight).product());
            for mask in 0..masks {
                let mut sub: Vec<u16> = (0..len).filter(|b| mask & (1 << b) != 0).map(|b| digits[b]).collect();
                sub.sort_unstable();
                vars.push(*index.get(&sub).ok_or_else(|| Error::MissingSubset(sub.iter().map(|&x| x as usize).collect()))?);
            }
        }
        Ok(Self { len, weights, vars })
    }

    fn count(&self) -> usize {
        self.weights.len()
    }

    fn vars(&self, t: usize) -> &[usize] {
        let m = 1 << self.len;
        &self.vars[t * m..(t + 1) * m]
    }
}

/// One Leibniz term `I(E, F) = ∫ g₀ (-D_E a) D_F g`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitTerm {
    pub e: Vec<usize>,
    pub f: Vec<usize>,
    pub value: McEstimate,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CkReport {
    pub k: usize,
    pub value: McEstimate,
    /// Present for `k ≤ 2`.
    pub splits: Vec<SplitTerm>,
    /// Splits add up to the value and the count truncation tail is small.
    pub converged: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExpansionRow {
    pub rho: f64,
    pub delta: McEstimate,
    pub remainder: McEstimate,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExpansionReport {
    pub k: usize,
    /// `c_0 … c_k` (`c_0 = 0`).
    pub coefficients: Vec<McEstimate>,
    pub rows: Vec<ExpansionRow>,
    /// Fitted exponent of `|R_k(ρ)|`.
    pub slope: f64,
    /// Some remainder is within two standard errors of zero.
    pub noise_dominated: bool,
}

impl ExpansionReport {
    pub fn verdict(&self, min_slope: f64) -> &'static str {
        if self.noise_dominated {
            "MC-noise-dominated"
        } else if self.slope >= min_slope {
            "converged"
        } else {
            "slope-too-small"
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KeyProbe {
    pub f: usize,
    pub g: usize,
    pub value: McEstimate,
}

fn labels(mask: u32) -> Vec<usize> {
    (0..32).filter(|b| mask & (1 << b) != 0).map(|b| b + 1).collect()
}

impl Estimator<'_> {
    pub(super) fn engine(&self, m: u32, q: &[f64], mc: &McSettings) -> Engine<'_, '_> {
        Engine { est: self, region: BoxRegion::cube(m, q.len()), q: q.to_vec(), mc: mc.clone() }
    }

    pub(super) fn one_dimensional(q: &[f64]) -> Result<()> {
        if q.len() != 1 {
            return Err(Error::InvalidInput("collar quadrature of added points needs d = 1".into()));
        }
        Ok(())
    }

    /// `Δ^ρ_m = q·((ā*_{ρ₀+ρ})⁻¹ - (ā*_{ρ₀})⁻¹)q` on `□_m`.
    ///
    /// Both methods sum the interior over `n + j ≤ N`; `tail` bounds the
    /// per-sample gap between them from that truncation.
    pub fn delta_rho(&self, m: u32, q: &[f64], rho0: f64, rho: f64, method: DeltaMethod, mc: &McSettings) -> Result<McEstimate> {
        check_density(rho0)?;
        check_density(rho)?;
        if matches!(mc.exterior, ExteriorMode::Quadrature { .. }) {
            return Err(Error::InvalidInput("delta needs sampled or empty exteriors".into()));
        }
        let eng = self.engine(m, q, mc);
        let region = &eng.region;
        let vol = region.volume();
        let q2: f64 = q.iter().map(|x| x * x).sum();
        let (n_max, _) = self.truncation(region, (rho0 + rho) * vol, q2, mc)?;
        let radius = self.field().interaction_radius();
        let base = Ensemble::build(region, radius, rho0, &mc.exterior, mc, 0)?;
        let added = Ensemble::build(region, radius, rho, &mc.exterior, mc, ADDED_STREAM)?;
        let pi0: Vec<f64> = (0..=n_max).map(|n| poisson_pmf(rho0 * vol, n as u64)).collect();
        let gap: f64 = (1..=n_max)
            .map(|n| pi0[n] * poisson_tail(rho * vol, (n_max - n + 1) as u64) * n as f64 * q2)
            .sum::<f64>()
            / (rho0 * vol);

        let atoms = interior_atoms(region, mc.h)?;
        let pairs = as_pairs(&atoms);
        let sets = multisets(atoms.len(), n_max.saturating_sub(1));
        let variants: Vec<Variant> = sets.iter().map(|s| Variant::new(s, &atoms)).collect();
        let probs: Vec<f64> = sets.iter().map(|s| poisson_multiset_weight(s, &pairs, rho, vol)).collect();

        let values = (0..base.len())
            .into_par_iter()
            .map(|i| {
                let ext = &base.samples[i];
                let extra = &added.samples[i.min(added.len() - 1)];
                match method {
                    DeltaMethod::Definition => {
                        let both = superpose(ext, extra)?;
                        let mut hi = Vec::new();
                        let mut lo = Vec::new();
                        for n in 1..=n_max {
                            let grid = GridSpec::new(region.clone(), n, mc.h)?;
                            let e_hi = self.corrector(&grid, q, &both, mc)?.energy;
                            let e_lo = self.corrector(&grid, q, ext, mc)?.energy;
                            hi.push(poisson_pmf((rho0 + rho) * vol, n as u64) * 2.0 * e_hi);
                            lo.push(pi0[n] * 2.0 * e_lo);
                        }
                        Ok(pairwise_sum(&hi) / ((rho0 + rho) * vol) - pairwise_sum(&lo) / (rho0 * vol))
                    }
                    DeltaMethod::Representation => {
                        let mut terms = Vec::new();
                        for n in 1..=n_max {
                            let count = sets.partition_point(|s| s.len() <= n_max - n);
                            let mut acc = vec![0.0; count];
                            eng.visit(n, ext, extra, &variants[..count], |t| {
                                for j in 0..count {
                                    acc[j] += t.w * t.g0 * (t.a0 - t.a[j]) * t.g[j];
                                }
                            })?;
                            let s: Vec<f64> = acc.iter().zip(&probs).map(|(a, p)| a * p).collect();
                            terms.push(pi0[n] * pairwise_sum(&s));
                        }
                        Ok(pairwise_sum(&terms) / (rho0 * vol))
                    }
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        let ens = if base.sampled || added.sampled { Ensemble { sampled: true, ..base } } else { base };
        Ok(McEstimate::from_samples(&ens, &values, n_max, gap, mc))
    }

    /// Per-sample tables `F(Y)` over all atom multisets with `|Y| ≤ size`.
    fn f_tables(
        &self,
        m: u32,
        q: &[f64],
        rho0: f64,
        size: usize,
        mc: &McSettings,
    ) -> Result<(Vec<Atom>, Vec<Vec<u16>>, Ensemble, Vec<Vec<f64>>, usize, f64)> {
        check_density(rho0)?;
        Self::one_dimensional(q)?;
        let eng = self.engine(m, q, mc);
        let vol = eng.region.volume();
        let q2: f64 = q.iter().map(|x| x * x).sum();
        let (n_max, tail) = self.truncation(&eng.region, rho0 * vol, q2, mc)?;
        let radius = self.field().interaction_radius();
        let atoms = all_atoms(&eng.region, mc.h, radius, mc.collar_nodes)?;
        let sets = multisets(atoms.len(), size);
        let variants: Vec<Variant> = sets.iter().map(|s| Variant::new(s, &atoms)).collect();
        let ens = Ensemble::build(&eng.region, radius, rho0, &mc.exterior, mc, 0)?;
        let none = PointConfiguration::empty(1);
        let (keys, distinct) = distinct_samples(&eng.region, &ens, radius)?;
        let computed = distinct
            .par_iter()
            .map(|&i| {
                let ext = &ens.samples[i];
                let mut total = vec![0.0; variants.len()];
                for n in 1..=n_max {
                    let pi = poisson_pmf(rho0 * vol, n as u64) / (rho0 * vol);
                    eng.visit(n, ext, &none, &variants, |t| {
                        for j in 0..total.len() {
                            total[j] += pi * t.w * t.g0 * (t.a0 - t.a[j]) * t.g[j];
                        }
                    })?;
                }
                Ok((keys[i].clone(), total))
            })
            .collect::<Result<HashMap<_, _>>>()?;
        let tables = expand(&keys, &computed);
        Ok((atoms, sets, ens, tables, n_max, tail))
    }

    /// `c_{k,m} = ∫ D_{x₁…x_k} (2ν*)(∅) dx` with the Leibniz split for `k ≤ 2`.
    ///
    /// With `richardson` set, values at `h` and `h/2` are combined as
    /// `(4 c_{h/2} - c_h)/3`.
    pub fn c_km(&self, m: u32, q: &[f64], rho0: f64, k: usize, mc: &McSettings) -> Result<CkReport> {
        if !mc.richardson {
            return self.c_km_at(m, q, rho0, k, mc);
        }
        let plain = McSettings { richardson: false, ..mc.clone() };
        let coarse = self.c_km_at(m, q, rho0, k, &plain)?;
        let fine = self.c_km_at(m, q, rho0, k, &plain.with_h(mc.h / 2.0))?;
        let combine = |c: &McEstimate, f: &McEstimate| McEstimate {
            value: (4.0 * f.value - c.value) / 3.0,
            stderr: ((4.0 * f.stderr).powi(2) + c.stderr.powi(2)).sqrt() / 3.0,
            h: mc.h,
            ..f.clone()
        };
        Ok(CkReport {
            k,
            value: combine(&coarse.value, &fine.value),
            splits: coarse
                .splits
                .iter()
                .zip(&fine.splits)
                .map(|(c, f)| SplitTerm { e: c.e.clone(), f: c.f.clone(), value: combine(&c.value, &f.value) })
                .collect(),
            converged: coarse.converged && fine.converged,
        })
    }

    fn c_km_at(&self, m: u32, q: &[f64], rho0: f64, k: usize, mc: &McSettings) -> Result<CkReport> {
        if k == 0 || k > 3 {
            return Err(Error::InvalidInput(format!("c_k is available for 1 <= k <= 3, got {k}")));
        }
        let (atoms, sets, ens, tables, n_max, tail) = self.f_tables(m, q, rho0, k, mc)?;
        let index: HashMap<Vec<u16>, usize> = sets.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
        let tuples = TupleTable::new(k, &atoms, &index)?;
        let full = (1u32 << k) - 1;
        let per_sample: Vec<f64> = tables
            .iter()
            .map(|f| {
                let terms: Vec<f64> = (0..tuples.count())
                    .map(|t| {
                        let vals: Vec<f64> = tuples.vars(t).iter().map(|&v| f[v]).collect();
                        tuples.weights[t] * mobius(&vals, full)
                    })
                    .collect();
                pairwise_sum(&terms)
            })
            .collect();
        let value = McEstimate::from_samples(&ens, &per_sample, n_max, tail, mc);

        let mut splits = Vec::new();
        let mut converged = tail <= mc.tail_tol;
        if k <= 2 {
            let pairs: Vec<(u32, u32)> = (1..=full)
                .flat_map(|e| submasks(full).map(move |f| (e, f)))
                .filter(|&(e, f)| e | f == full)
                .collect();
            let eng = self.engine(m, q, mc);
            let vol = eng.region.volume();
            let variants: Vec<Variant> = sets.iter().map(|s| Variant::new(s, &atoms)).collect();
            let none = PointConfiguration::empty(1);
            let (keys, distinct) = distinct_samples(&eng.region, &ens, self.field().interaction_radius())?;
            let computed = distinct
                .par_iter()
                .map(|&i| {
                    let ext = &ens.samples[i];
                    let mut acc = vec![0.0; pairs.len()];
                    let mut av = vec![0.0; 1 << k];
                    let mut gv = vec![0.0; 1 << k];
                    for n in 1..=n_max {
                        let pi = poisson_pmf(rho0 * vol, n as u64) / (rho0 * vol);
                        eng.visit(n, ext, &none, &variants, |t| {
                            for tu in 0..tuples.count() {
                                for (mask, &v) in tuples.vars(tu).iter().enumerate() {
                                    av[mask] = t.a[v];
                                    gv[mask] = t.g[v];
                                }
                                let c = pi * t.w * t.g0 * tuples.weights[tu];
                                for (slot, &(e, f)) in acc.iter_mut().zip(&pairs) {
                                    *slot -= c * mobius(&av, e) * mobius(&gv, f);
                                }
                            }
                        })?;
                    }
                    Ok((keys[i].clone(), acc))
                })
                .collect::<Result<HashMap<_, _>>>()?;
            let per = expand(&keys, &computed);
            let mut sum = 0.0;
            for (i, &(e, f)) in pairs.iter().enumerate() {
                let vals: Vec<f64> = per.iter().map(|p| p[i]).collect();
                let est = McEstimate::from_samples(&ens, &vals, n_max, tail, mc);
                sum += est.value;
                splits.push(SplitTerm { e: labels(e), f: labels(f), value: est });
            }
            converged &= (sum - value.value).abs() <= 1e-8 * value.value.abs().max(1e-6);
        }
        Ok(CkReport { k, value, splits, converged })
    }

    /// `Δ^ρ` on a grid of `ρ` against its Taylor polynomial of order `k`.
    ///
    /// Added points range over multisets of at most `k + 2` atoms, which
    /// leaves the Taylor coefficients up to order `k + 2` exact: the
    /// remainder `R_k(ρ)` is `O(ρ^{k+1})` sample by sample and its first
    /// correction is the true one.
    pub fn expansion_report(&self, m: u32, q: &[f64], rho0: f64, k: usize, rhos: &[f64], mc: &McSettings) -> Result<ExpansionReport> {
        if k == 0 || k > 3 || rhos.is_empty() {
            return Err(Error::InvalidInput("expansion needs 1 <= k <= 3 and a non-empty rho grid".into()));
        }
        let (atoms, sets, ens, tables, n_max, tail) = self.f_tables(m, q, rho0, k + 2, mc)?;
        let index: HashMap<Vec<u16>, usize> = sets.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
        let pairs = as_pairs(&atoms);
        let measure: f64 = atoms.iter().map(|a| a.weight).sum();

        // per-sample coefficients c_1..c_k
        let mut coeff: Vec<Vec<f64>> = vec![vec![0.0; tables.len()]];
        for j in 1..=k {
            let tuples = TupleTable::new(j, &atoms, &index)?;
            let full = (1u32 << j) - 1;
            coeff.push(
                tables
                    .iter()
                    .map(|f| {
                        let terms: Vec<f64> = (0..tuples.count())
                            .map(|t| {
                                let vals: Vec<f64> = tuples.vars(t).iter().map(|&v| f[v]).collect();
                                tuples.weights[t] * mobius(&vals, full)
                            })
                            .collect();
                        pairwise_sum(&terms)
                    })
                    .collect(),
            );
        }
        let coefficients: Vec<McEstimate> =
            coeff.iter().map(|c| McEstimate::from_samples(&ens, c, n_max, tail, mc)).collect();

        let mut rows = Vec::with_capacity(rhos.len());
        for &rho in rhos {
            check_density(rho)?;
            let probs: Vec<f64> = sets.iter().map(|s| poisson_multiset_weight(s, &pairs, rho, measure)).collect();
            let delta: Vec<f64> = tables
                .iter()
                .map(|f| pairwise_sum(&f.iter().zip(&probs).map(|(a, b)| a * b).collect::<Vec<_>>()))
                .collect();
            let rem: Vec<f64> = (0..tables.len())
                .map(|i| {
                    let mut poly = 0.0;
                    let mut fact = 1.0;
                    for (j, c) in coeff.iter().enumerate().skip(1) {
                        fact *= j as f64;
                        poly += c[i] * rho.powi(j as i32) / fact;
                    }
                    delta[i] - poly
                })
                .collect();
            rows.push(ExpansionRow {
                rho,
                delta: McEstimate::from_samples(&ens, &delta, n_max, tail, mc),
                remainder: McEstimate::from_samples(&ens, &rem, n_max, tail, mc),
            });
        }
        let xs: Vec<f64> = rows.iter().map(|r| r.rho).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.remainder.value).collect();
        let noise_dominated = rows.iter().any(|r| r.remainder.value.abs() < 2.0 * r.remainder.stderr);
        Ok(ExpansionReport { k, coefficients, rows, slope: log_log_slope(&xs, &ys), noise_dominated })
    }

    /// `(1/(ρ₀|U|)) Σ ∫_{F∖G} |∫_G D_F g|²`: the squared gradient
    /// differences controlled by the key estimate.
    pub fn key_estimate_probe(&self, m: u32, q: &[f64], rho0: f64, f: usize, g: usize, mc: &McSettings) -> Result<KeyProbe> {
        if g > f || f > 3 {
            return Err(Error::InvalidInput(format!("need g <= f <= 3, got f={f}, g={g}")));
        }
        check_density(rho0)?;
        Self::one_dimensional(q)?;
        let eng = self.engine(m, q, mc);
        let vol = eng.region.volume();
        let q2: f64 = q.iter().map(|x| x * x).sum();
        let (n_max, tail) = self.truncation(&eng.region, rho0 * vol, q2, mc)?;
        let radius = self.field().interaction_radius();
        let atoms = all_atoms(&eng.region, mc.h, radius, mc.collar_nodes)?;
        let sets = multisets(atoms.len(), f);
        let index: HashMap<Vec<u16>, usize> = sets.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
        let variants: Vec<Variant> = sets.iter().map(|s| Variant::new(s, &atoms)).collect();
        let tuples = TupleTable::new(f, &atoms, &index)?;
        let inner = atoms.len().pow(g as u32);
        let full = (1u32 << f) - 1;
        let ens = Ensemble::build(&eng.region, radius, rho0, &mc.exterior, mc, 0)?;
        let none = PointConfiguration::empty(1);
        let (keys, distinct) = distinct_samples(&eng.region, &ens, radius)?;
        let computed = distinct
            .par_iter()
            .map(|&i| {
                let ext = &ens.samples[i];
                let mut total = 0.0;
                let mut gv = vec![0.0; 1 << f];
                for n in 1..=n_max {
                    let pi = poisson_pmf(rho0 * vol, n as u64) / (rho0 * vol);
                    eng.visit(n, ext, &none, &variants, |t| {
                        let mut edge = 0.0;
                        for o in 0..tuples.count() / inner {
                            let mut s = 0.0;
                            let mut w_out = 1.0;
                            for i in 0..inner {
                                let tu = o * inner + i;
                                for (mask, &v) in tuples.vars(tu).iter().enumerate() {
                                    gv[mask] = t.g[v];
                                }
                                let w_in: f64 = inner_weight(&atoms, tu, g);
                                w_out = tuples.weights[tu] / w_in;
                                s += w_in * mobius(&gv, full);
                            }
                            edge += w_out * s * s;
                        }
                        total += pi * t.w * edge;
                    })?;
                }
                Ok((keys[i].clone(), total))
            })
            .collect::<Result<HashMap<_, _>>>()?;
        let values = expand(&keys, &computed);
        Ok(KeyProbe { f, g, value: McEstimate::from_samples(&ens, &values, n_max, tail, mc) })
    }
}

/// Keys of the influence-relevant part of each exterior sample, and one
/// representative index per distinct key.
fn distinct_samples(region: &BoxRegion, ens: &Ensemble, radius: f64) -> Result<(Vec<Vec<u64>>, Vec<usize>)> {
    let keys: Vec<Vec<u64>> = ens
        .samples
        .iter()
        .map(|e| Ok(relevant_exterior(region, e, radius)?.coords().iter().map(|x| x.to_bits()).collect()))
        .collect::<Result<_>>()?;
    let mut distinct: Vec<usize> = (0..keys.len()).collect();
    distinct.sort_by(|&a, &b| keys[a].cmp(&keys[b]).then(a.cmp(&b)));
    distinct.dedup_by(|a, b| keys[*a] == keys[*b]);
    Ok((keys, distinct))
}

fn expand<T: Clone>(keys: &[Vec<u64>], computed: &HashMap<Vec<u64>, T>) -> Vec<T> {
    keys.iter().map(|k| computed[k].clone()).collect()
}

/// Product of the weights of the first `g` atoms of tuple `t`.
fn inner_weight(atoms: &[Atom], mut t: usize, g: usize) -> f64 {
    let mut w = 1.0;
    for _ in 0..g {
        w *= atoms[t % atoms.len()].weight;
        t /= atoms.len();
    }
    w
}
