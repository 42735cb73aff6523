//! Set-indexed perturbation calculus: families `E ↦ f^E` and the difference
//! operators `D_E`.
//!
//! Subsets of a family's index set are bitmasks over label positions; mask
//! order is colexicographic order, which fixes all summation orders.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use crate::conductance::{evaluate, Conductance, SymMatrix};
use crate::error::{Error, Result};
use crate::point_process::PointConfiguration;

/// Maximum size of a family's index set.
pub const MAX_INDICES: usize = 6;

/// Values a family may take: a real vector space with a size measure.
pub trait Value: Clone + Send + Sync {
    fn zero_like(&self) -> Self;
    fn add_scaled(&mut self, other: &Self, c: f64);
    fn magnitude(&self) -> f64;
}

impl Value for f64 {
    fn zero_like(&self) -> Self {
        0.0
    }
    fn add_scaled(&mut self, other: &Self, c: f64) {
        *self += c * other;
    }
    fn magnitude(&self) -> f64 {
        self.abs()
    }
}

impl Value for Vec<f64> {
    fn zero_like(&self) -> Self {
        vec![0.0; self.len()]
    }
    fn add_scaled(&mut self, other: &Self, c: f64) {
        for (a, b) in self.iter_mut().zip(other) {
            *a += c * b;
        }
    }
    fn magnitude(&self) -> f64 {
        self.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

impl Value for SymMatrix {
    fn zero_like(&self) -> Self {
        SymMatrix::zeros(self.dim())
    }
    fn add_scaled(&mut self, other: &Self, c: f64) {
        *self = self.add(&other.scale(c));
    }
    fn magnitude(&self) -> f64 {
        self.max_abs()
    }
}

/// Bilinear pairing used to multiply family values.
pub trait Pairing<A, B> {
    type Output: Value;
    fn pair(&self, a: &A, b: &B) -> Self::Output;
}

/// Ordinary product of scalars.
pub struct ScalarProduct;

impl Pairing<f64, f64> for ScalarProduct {
    type Output = f64;
    fn pair(&self, a: &f64, b: &f64) -> f64 {
        a * b
    }
}

/// Euclidean inner product of vectors.
pub struct DotProduct;

impl Pairing<Vec<f64>, Vec<f64>> for DotProduct {
    type Output = f64;
    fn pair(&self, a: &Vec<f64>, b: &Vec<f64>) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }
}

/// Matrix acting on a vector.
pub struct MatVec;

impl Pairing<SymMatrix, Vec<f64>> for MatVec {
    type Output = Vec<f64>;
    fn pair(&self, a: &SymMatrix, b: &Vec<f64>) -> Vec<f64> {
        a.mul_vec(b)
    }
}

type Rule<V> = Box<dyn Fn(u32) -> V + Send + Sync>;

/// Lazily evaluated, memoized family `E ↦ f^E` over a label set.
pub struct IndexedFamily<V> {
    labels: Vec<usize>,
    rule: Rule<V>,
    memo: Vec<OnceLock<V>>,
}

impl<V: Value> IndexedFamily<V> {
    /// Family given directly on subsets (sorted label lists).
    pub fn from_subsets(labels: Vec<usize>, rule: impl Fn(&[usize]) -> V + Send + Sync + 'static) -> Result<Self> {
        let labels = normalized_labels(labels)?;
        let ls = labels.clone();
        let rule = move |mask: u32| rule(&mask_labels(&ls, mask));
        Ok(Self::with_rule(labels, Box::new(rule)))
    }

    /// `E ↦ f(μ + Σ_{i∈E} δ_{x_i})`.
    pub fn from_configuration(
        base: PointConfiguration,
        labels: Vec<usize>,
        positions: Vec<Vec<f64>>,
        f: impl Fn(&PointConfiguration) -> V + Send + Sync + 'static,
    ) -> Result<Self> {
        if positions.len() != labels.len() {
            return Err(Error::InvalidInput(format!(
                "{} labels but {} positions",
                labels.len(),
                positions.len()
            )));
        }
        if let Some(p) = positions.iter().find(|p| p.len() != base.dim()) {
            return Err(Error::DimensionMismatch { expected: base.dim(), got: p.len() });
        }
        let mut paired: Vec<(usize, Vec<f64>)> = labels.into_iter().zip(positions).collect();
        paired.sort_by_key(|(l, _)| *l);
        let labels: Vec<usize> = paired.iter().map(|(l, _)| *l).collect();
        let labels = normalized_labels(labels)?;
        let positions: Vec<Vec<f64>> = paired.into_iter().map(|(_, p)| p).collect();
        let rule = move |mask: u32| {
            let mut mu = base.clone();
            for (i, p) in positions.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    mu.push(p).expect("dimension checked");
                }
            }
            f(&mu)
        };
        Ok(Self::with_rule(labels, Box::new(rule)))
    }

    fn with_rule(labels: Vec<usize>, rule: Rule<V>) -> Self {
        let memo = (0..1usize << labels.len()).map(|_| OnceLock::new()).collect();
        Self { labels, rule, memo }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Bitmask of a label subset.
    pub fn mask_of(&self, e: &[usize]) -> Result<u32> {
        let mut mask = 0u32;
        for l in e {
            match self.labels.iter().position(|x| x == l) {
                Some(i) => mask |= 1 << i,
                None => {
                    return Err(Error::InvalidInput(format!(
                        "label {l} is not in the index set {:?}",
                        self.labels
                    )))
                }
            }
        }
        Ok(mask)
    }

    /// `f^E` by mask, evaluated at most once.
    pub fn at_mask(&self, mask: u32) -> &V {
        self.memo[mask as usize].get_or_init(|| (self.rule)(mask))
    }

    /// `f^E`.
    pub fn value(&self, e: &[usize]) -> Result<V> {
        Ok(self.at_mask(self.mask_of(e)?).clone())
    }

    /// `D_E f` for a mask.
    pub fn difference_mask(&self, mask: u32) -> V {
        let mut acc = self.at_mask(0).zero_like();
        for sub in submasks(mask) {
            let sign = if (mask & !sub).count_ones().is_multiple_of(2) { 1.0 } else { -1.0 };
            acc.add_scaled(self.at_mask(sub), sign);
        }
        acc
    }

    /// `D_G (f^F)`: difference of the family shifted by `F` (disjoint from `G`).
    pub fn shifted_difference(&self, shift: u32, mask: u32) -> V {
        let mut acc = self.at_mask(0).zero_like();
        for sub in submasks(mask) {
            let sign = if (mask & !sub).count_ones().is_multiple_of(2) { 1.0 } else { -1.0 };
            acc.add_scaled(self.at_mask(shift | sub), sign);
        }
        acc
    }
}

fn normalized_labels(mut labels: Vec<usize>) -> Result<Vec<usize>> {
    labels.sort_unstable();
    if labels.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidInput("duplicate labels".into()));
    }
    if labels.len() > MAX_INDICES {
        return Err(Error::InvalidInput(format!(
            "index sets are capped at {MAX_INDICES} labels, got {}",
            labels.len()
        )));
    }
    Ok(labels)
}

fn mask_labels(labels: &[usize], mask: u32) -> Vec<usize> {
    labels.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, l)| *l).collect()
}

/// Submasks of `mask` in increasing (colex) order, starting at the empty set.
pub fn submasks(mask: u32) -> impl Iterator<Item = u32> {
    let mut next = Some(0u32);
    std::iter::from_fn(move || {
        let cur = next?;
        next = if cur == mask { None } else { Some(((cur | !mask).wrapping_add(1)) & mask) };
        Some(cur)
    })
}

/// `D_E` on a table indexed by subset mask: `Σ_{F⊆E} (-1)^{|E∖F|} values[F]`.
pub fn mobius(values: &[f64], mask: u32) -> f64 {
    let full = mask.count_ones();
    submasks(mask)
        .map(|f| if (full - f.count_ones()).is_multiple_of(2) { values[f as usize] } else { -values[f as usize] })
        .sum()
}

/// `D_E f = Σ_{F⊆E} (-1)^{|E∖F|} f^F`.
pub fn difference<V: Value>(family: &IndexedFamily<V>, e: &[usize]) -> Result<V> {
    Ok(family.difference_mask(family.mask_of(e)?))
}

/// `f^E = Σ_{F⊆E} D_F f`, summed in colex order of `F`.
pub fn telescope<V: Value>(differences: &BTreeMap<Vec<usize>, V>, e: &[usize]) -> Result<V> {
    let mut labels = e.to_vec();
    labels.sort_unstable();
    let k = labels.len();
    if k > 31 {
        return Err(Error::InvalidInput("subset too large".into()));
    }
    let mut acc: Option<V> = None;
    for mask in 0..(1u32 << k) {
        let sub = mask_labels(&labels, mask);
        let v = differences.get(&sub).ok_or_else(|| Error::MissingSubset(sub.clone()))?;
        match &mut acc {
            None => acc = Some(v.clone()),
            Some(a) => a.add_scaled(v, 1.0),
        }
    }
    Ok(acc.expect("the empty subset is always visited"))
}

/// All `D_F f` for `F ⊆ E`, keyed by sorted label lists.
pub fn difference_table<V: Value>(family: &IndexedFamily<V>, e: &[usize]) -> Result<BTreeMap<Vec<usize>, V>> {
    let mask = family.mask_of(e)?;
    Ok(submasks(mask)
        .map(|sub| (mask_labels(family.labels(), sub), family.difference_mask(sub)))
        .collect())
}

/// `D_E(fg)` directly, via `Σ_F (D_F f)(D_{E∖F} g^F)`, and via
/// `Σ_{F∪G=E} (D_F f)(D_G g)`.
pub fn leibniz_check<A: Value, B: Value, P: Pairing<A, B>>(
    f: &IndexedFamily<A>,
    g: &IndexedFamily<B>,
    e: &[usize],
    pairing: &P,
) -> Result<(P::Output, P::Output, P::Output)> {
    if f.labels() != g.labels() {
        return Err(Error::InvalidInput(format!(
            "index sets differ: {:?} vs {:?}",
            f.labels(),
            g.labels()
        )));
    }
    let mask = f.mask_of(e)?;
    let zero = pairing.pair(f.at_mask(0), g.at_mask(0)).zero_like();

    let mut lhs = zero.clone();
    for sub in submasks(mask) {
        let sign = if (mask & !sub).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
        lhs.add_scaled(&pairing.pair(f.at_mask(sub), g.at_mask(sub)), sign);
    }

    let mut rhs1 = zero.clone();
    for sub in submasks(mask) {
        let df = f.difference_mask(sub);
        let dg = g.shifted_difference(sub, mask & !sub);
        rhs1.add_scaled(&pairing.pair(&df, &dg), 1.0);
    }

    let mut rhs2 = zero;
    for fm in submasks(mask) {
        let df = f.difference_mask(fm);
        // G ranges over sets with F ∪ G = E: G = (E∖F) ∪ H, H ⊆ F
        for h in submasks(fm) {
            let gm = (mask & !fm) | h;
            rhs2.add_scaled(&pairing.pair(&df, &g.difference_mask(gm)), 1.0);
        }
    }
    Ok((lhs, rhs1, rhs2))
}

/// `D_E` applied to a combination of factors in which only the factors
/// flagged `true` are perturbed; the others stay at `E = ∅`.
///
/// `combine` receives one value per factor, in order.
pub fn frozen_difference<V: Value, W: Value>(
    factors: &[(&IndexedFamily<V>, bool)],
    e: &[usize],
    combine: impl Fn(&[V]) -> W,
) -> Result<W> {
    let first = factors.first().ok_or_else(|| Error::InvalidInput("no factors".into()))?.0;
    if factors.iter().any(|(f, _)| f.labels() != first.labels()) {
        return Err(Error::InvalidInput("factors must share an index set".into()));
    }
    let mask = first.mask_of(e)?;
    let mut acc: Option<W> = None;
    let mut vals = Vec::with_capacity(factors.len());
    for sub in submasks(mask) {
        let sign = if (mask & !sub).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
        vals.clear();
        for (f, acted) in factors {
            vals.push(f.at_mask(if *acted { sub } else { 0 }).clone());
        }
        let term = combine(&vals);
        match &mut acc {
            None => {
                let mut z = term.zero_like();
                z.add_scaled(&term, sign);
                acc = Some(z);
            }
            Some(a) => a.add_scaled(&term, sign),
        }
    }
    Ok(acc.expect("the empty subset is always visited"))
}

/// `Υ(E, z)`: every listed position lies in the unit cube `z + (-½, ½)^d`.
pub fn upsilon(positions: &[&[f64]], z: &[f64]) -> bool {
    positions
        .iter()
        .all(|x| x.iter().zip(z).all(|(a, b)| (a - b).abs() < 0.5))
}

/// Family `E ↦ a(μ + Σ_{i∈E} δ_{x_i}, z)` of conductance matrices.
pub fn conductance_family(
    field: std::sync::Arc<dyn Conductance>,
    base: PointConfiguration,
    z: Vec<f64>,
    positions: Vec<Vec<f64>>,
) -> Result<IndexedFamily<SymMatrix>> {
    let labels = (1..=positions.len()).collect();
    let dim = base.dim();
    IndexedFamily::from_configuration(base, labels, positions, move |mu| {
        // evaluation errors surface as NaN so the bound checks fail loudly
        evaluate(field.as_ref(), mu, &z).unwrap_or_else(|_| SymMatrix::scaled_identity(dim, f64::NAN))
    })
}

/// Relative discrepancy `|a - b| / max(1, |a|, |b|)`.
pub fn relative_gap<V: Value>(a: &V, b: &V) -> f64 {
    let mut d = a.clone();
    d.add_scaled(b, -1.0);
    d.magnitude() / a.magnitude().max(b.magnitude()).max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conductance::CrowdingField;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn hashed(seed: u64) -> impl Fn(&[usize]) -> f64 + Send + Sync {
        move |e: &[usize]| {
            let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
            for &l in e {
                h = (h ^ l as u64).wrapping_mul(0x100_0000_01b3);
                h ^= h >> 29;
            }
            (h % 10_000) as f64 / 1000.0 - 5.0
        }
    }

    #[test]
    fn empty_and_singleton_differences() {
        let f = IndexedFamily::from_subsets(vec![1, 2], hashed(3)).unwrap();
        assert_eq!(difference(&f, &[]).unwrap(), f.value(&[]).unwrap());
        assert_eq!(difference(&f, &[1]).unwrap(), f.value(&[1]).unwrap() - f.value(&[]).unwrap());
        assert!(difference(&f, &[7]).is_err());
    }

    #[test]
    fn nested_composition_matches() {
        let rule = hashed(11);
        let f = IndexedFamily::from_subsets(vec![1, 2], hashed(11)).unwrap();
        // D_1(D_2 f) = (f^{12} - f^{1}) - (f^{2} - f)
        let nested = (rule(&[1, 2]) - rule(&[1])) - (rule(&[2]) - rule(&[]));
        assert!((difference(&f, &[1, 2]).unwrap() - nested).abs() < 1e-14);
    }

    #[test]
    fn telescope_missing_subset() {
        let mut table = BTreeMap::new();
        table.insert(vec![], 1.0);
        assert!(matches!(telescope(&table, &[1]), Err(Error::MissingSubset(s)) if s == vec![1]));
        table.insert(vec![1], 0.5);
        assert_eq!(telescope(&table, &[1]).unwrap(), 1.5);
    }

    #[test]
    fn leibniz_with_constant_factor() {
        let f = IndexedFamily::from_subsets(vec![1, 2, 3], hashed(5)).unwrap();
        let one = IndexedFamily::from_subsets(vec![1, 2, 3], |_| 1.0).unwrap();
        let (l, r1, r2) = leibniz_check(&f, &one, &[1, 3], &ScalarProduct).unwrap();
        let d = difference(&f, &[1, 3]).unwrap();
        assert!((l - d).abs() < 1e-13 && (r1 - d).abs() < 1e-13 && (r2 - d).abs() < 1e-13);
    }

    #[test]
    fn frozen_product_by_hand() {
        let f = IndexedFamily::from_subsets(vec![1, 2], hashed(1)).unwrap();
        let g = IndexedFamily::from_subsets(vec![1, 2], hashed(2)).unwrap();
        let val = frozen_difference(&[(&f, true), (&g, false)], &[1, 2], |v| v[0] * v[1]).unwrap();
        let g0 = g.value(&[]).unwrap();
        assert!((val - difference(&f, &[1, 2]).unwrap() * g0).abs() < 1e-13);
        let e0 = frozen_difference(&[(&f, true), (&g, false)], &[], |v| v[0] * v[1]).unwrap();
        assert_eq!(e0, f.value(&[]).unwrap() * g0);
        // (a - a^#) b^# over four subsets
        let by_hand: f64 = [(vec![], 1.0), (vec![1], -1.0), (vec![2], -1.0), (vec![1, 2], 1.0)]
            .iter()
            .map(|(s, sign)| sign * (f.value(&[]).unwrap() - f.value(s).unwrap()) * g.value(s).unwrap())
            .sum();
        let fam = frozen_difference(&[(&f, false), (&f, true), (&g, true)], &[1, 2], |v| (v[0] - v[1]) * v[2]).unwrap();
        assert!((fam - by_hand).abs() < 1e-13);
    }

    #[test]
    fn memo_evaluates_once() {
        let calls = Arc::new(AtomicUsize::new(0));
        let c = calls.clone();
        let f = IndexedFamily::from_subsets(vec![1, 2, 3], move |e| {
            c.fetch_add(1, Ordering::SeqCst);
            e.len() as f64
        })
        .unwrap();
        for _ in 0..3 {
            difference(&f, &[1, 2, 3]).unwrap();
        }
        assert_eq!(calls.load(Ordering::SeqCst), 8);
        assert!(IndexedFamily::from_subsets((0..7).collect(), |_| 0.0).is_err());
    }

    #[test]
    fn conductance_locality_annihilates() {
        let field: Arc<dyn Conductance> = Arc::new(CrowdingField::new(2.0, 0.25).unwrap());
        let base = PointConfiguration::from_flat(1, vec![0.0]).unwrap();
        let fam = conductance_family(field, base, vec![0.0], vec![vec![0.1], vec![0.7]]).unwrap();
        let d = difference(&fam, &[1, 2]).unwrap();
        assert_eq!(d.max_abs(), 0.0);
        let d1 = difference(&fam, &[1]).unwrap();
        assert_eq!(d1.get(0, 0), 1.0);
        assert!(d1.max_abs() <= 2.0 * 2.0);
    }

    #[test]
    fn submask_order_is_colex() {
        let v: Vec<u32> = submasks(0b101).collect();
        assert_eq!(v, vec![0, 1, 4, 5]);
    }
}
