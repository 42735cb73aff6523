//! Variational residual diagnostics.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::perturb::{all_atoms, Atom, Variant};
use super::{check_density, multisets, pairwise_sum, Ensemble, Estimator, McEstimate, McSettings};
use crate::conductance::Conductance;
use crate::error::{Error, Result};
use crate::lattice::{merge_sorted, Lattice, Node};
use crate::point_process::{poisson_pmf, BoxRegion, PointConfiguration};
use crate::sector_solver::{
    first_variation_residual, solve_dual, ConductanceProbe, GridSpec, SolverOptions, TestFunction,
};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HarmonicResidual {
    pub e: Vec<usize>,
    pub f: Vec<usize>,
    pub value: McEstimate,
}

/// Neighbour of a sorted state with copy `idx` moved by `-h` along `k`.
fn step_back(lat: &Lattice, s: &[Node], idx: usize, k: usize, out: &mut Vec<Node>) -> Option<usize> {
    let v = s[idx];
    if lat.axis_index(v, k) == 0 {
        return None;
    }
    let nv = v - lat.stride(k);
    out.clear();
    out.extend_from_slice(s);
    out.remove(idx);
    let pos = out.partition_point(|&x| x <= nv);
    out.insert(pos, nv);
    Some(lat.rank(out))
}

impl Estimator<'_> {
    /// `∫_{(□_{m+1})^{E∪F}} E[∫_{□_m} ∇ψ^F·(a^E ∇ψ^E - q) dμ]` at added
    /// intensity zero, divided by `ρ₀|U|`.
    ///
    /// Gradients are node-centred differences (one-sided on the faces) with
    /// the conductance at the node, so the discrete value is `O(h)`. Added
    /// points beyond the interaction collar leave every corrector unchanged
    /// and enter through a single far atom carrying the remaining volume.
    pub fn harmonic_residual(&self, m: u32, q: &[f64], rho0: f64, e: &[usize], f: &[usize], mc: &McSettings) -> Result<HarmonicResidual> {
        check_density(rho0)?;
        Self::one_dimensional(q)?;
        let mut union: Vec<usize> = e.iter().chain(f).copied().collect();
        union.sort_unstable();
        union.dedup();
        if union.len() > 3 || e.len() > 2 || f.len() > 2 {
            return Err(Error::InvalidInput("harmonic residual supports |E|, |F| <= 2 and |E ∪ F| <= 3".into()));
        }
        let pick = |set: &[usize]| -> u32 {
            union.iter().enumerate().filter(|(_, l)| set.contains(l)).fold(0, |acc, (i, _)| acc | (1 << i))
        };
        let (emask, fmask) = (pick(e), pick(f));

        let eng = self.engine(m, q, mc);
        let region = eng.region.clone();
        let vol = region.volume();
        let q2: f64 = q.iter().map(|x| x * x).sum();
        let (n_max, tail) = self.truncation(&region, rho0 * vol, q2, mc)?;
        let radius = self.field().interaction_radius();
        let mut atoms = all_atoms(&region, mc.h, radius, mc.collar_nodes)?;
        let outer = BoxRegion::cube(m + 1, 1).volume();
        atoms.push(Atom { pos: Vec::new(), weight: outer - vol - 2.0 * radius, node: None });

        let sets = multisets(atoms.len(), union.len());
        let index: HashMap<Vec<u16>, usize> = sets.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
        let variants: Vec<Variant> = sets.iter().map(|s| Variant::new(s, &atoms)).collect();
        // ordered tuples over the union labels: (weight, E variant, F variant)
        let len = union.len();
        let count = atoms.len().pow(len as u32);
        let mut tuples = Vec::with_capacity(count);
        for t in 0..count {
            let mut digits = Vec::with_capacity(len);
            let mut rem = t;
            for _ in 0..len {
                digits.push((rem % atoms.len()) as u16);
                rem /= atoms.len();
            }
            let w: f64 = digits.iter().map(|&i| atoms[i as usize].weight).product();
            let sub = |mask: u32| {
                let mut v: Vec<u16> = (0..len).filter(|b| mask & (1 << b) != 0).map(|b| digits[b]).collect();
                v.sort_unstable();
                index[&v]
            };
            tuples.push((w, sub(emask), sub(fmask)));
        }

        let ens = Ensemble::build(&region, radius, rho0, &mc.exterior, mc, 0)?;
        let none = PointConfiguration::empty(1);
        let field = self.field();
        let values = ens
            .samples
            .par_iter()
            .map(|ext| {
                let mut terms = Vec::new();
                for n in 1..=n_max {
                    let pi = poisson_pmf(rho0 * vol, n as u64) / (rho0 * vol);
                    let (cors, lattices) = eng.variant_correctors(n, ext, &none, &variants)?;
                    let lat0 = GridSpec::new(region.clone(), n, mc.h)?.lattice()?;
                    let lats: Vec<&Lattice> = variants.iter().map(|v| &lattices[&(n + v.interior.len())]).collect();
                    let mut probes: Vec<ConductanceProbe> =
                        cors.iter().map(|c| ConductanceProbe::new(field, 1, c.exterior.coords())).collect();
                    let h = mc.h;
                    let mut s = vec![0 as Node; n];
                    let mut pos = vec![0.0; n];
                    let (mut merged, mut up, mut down) = (Vec::new(), Vec::new(), Vec::new());
                    let mut g = vec![0.0; variants.len()];
                    let mut a = vec![0.0; variants.len()];
                    let mut acc = 0.0;
                    for _ in 0..lat0.count() {
                        for (j, &c) in s.iter().enumerate() {
                            lat0.node_position(c, &mut pos[j..j + 1]);
                        }
                        let sw = lat0.state_weight(&s);
                        let mut p = 0;
                        while p < n {
                            let v = s[p];
                            let mut top = p;
                            while top + 1 < n && s[top + 1] == v {
                                top += 1;
                            }
                            let mult = (top - p + 1) as f64;
                            for (j, var) in variants.iter().enumerate() {
                                let lat = lats[j];
                                merge_sorted(&s, &var.interior, &mut merged);
                                let here = lat.rank(&merged);
                                let idx = merged.partition_point(|&x| x <= v) - 1;
                                let vals = &cors[j].values;
                                g[j] = match (lat.step(&merged, idx, 0, &mut up), step_back(lat, &merged, idx, 0, &mut down)) {
                                    (Some(u), Some(dn)) => (vals[u] - vals[dn]) / (2.0 * h),
                                    (Some(u), None) => (vals[u] - vals[here]) / h,
                                    (None, Some(dn)) => (vals[here] - vals[dn]) / h,
                                    (None, None) => 0.0,
                                };
                                let others = (0..n).filter(|&i| i != top).map(|i| &pos[i..i + 1]);
                                a[j] = probes[j].eval(&pos[top..top + 1], others.chain(var.interior_pos.chunks_exact(1)), 0)?;
                            }
                            let mut node = 0.0;
                            for &(w, ve, vf) in &tuples {
                                node += w * g[vf] * (a[ve] * g[ve] - q[0]);
                            }
                            acc += sw * mult * node;
                            p = top + 1;
                        }
                        lat0.advance(&mut s);
                    }
                    terms.push(pi * acc);
                }
                Ok(pairwise_sum(&terms))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(HarmonicResidual { e: e.to_vec(), f: f.to_vec(), value: McEstimate::from_samples(&ens, &values, n_max, tail, mc) })
    }
}

/// First-variation residual at one grid size.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct VariationLevel {
    pub h: f64,
    pub residual: f64,
}

/// First variation of the two-particle dual functional on the unit box with
/// empty exterior, tested against the smooth symmetric function
/// `u = sin(πx₁) + sin(πx₂) + x₁³x₂² + x₁²x₂³`, over a ladder of grid sizes.
///
/// The discrete first variation vanishes against any grid gradient, so a test
/// field sampled at edge midpoints only registers through its discrete curl.
/// Polynomials of degree ≤ 3 and functions of `x₁+x₂` have none; the quintic
/// term is there to make the residual visible.
pub fn first_variation_study(field: &dyn Conductance, hs: &[f64], opts: &SolverOptions) -> Result<Vec<VariationLevel>> {
    use std::f64::consts::PI;
    let region = BoxRegion::cube(0, 1);
    let grad = |x: &[f64], i: usize, _k: usize| -> f64 {
        let (xi, xj) = (x[i], x[1 - i]);
        PI * (PI * xi).cos() + 3.0 * xi * xi * xj * xj + 2.0 * xi * xj.powi(3)
    };
    hs.iter()
        .map(|&h| {
            let grid = GridSpec::new(region.clone(), 2, h)?;
            let c = solve_dual(field, &grid, &[1.0], &PointConfiguration::empty(1), opts)?;
            let residual = first_variation_residual(field, &c, TestFunction::Analytic(&grad))?;
            Ok(VariationLevel { h, residual: residual.abs() })
        })
        .collect()
}
