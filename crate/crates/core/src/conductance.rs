//! Local conductance fields `a∘(μ)` and their stationary extension `a(μ, x)`.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::point_process::{stream_rng, translate, PointConfiguration};

/// Tolerance used when checking that a matrix lies in `[Id, Λ Id]`.
const BAND_SLACK: f64 = 1e-12;

/// Symmetric `d × d` matrix with `d ≤ 3`, stored row-major.
#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix {
    dim: usize,
    m: [f64; 9],
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        assert!((1..=3).contains(&dim), "SymMatrix supports 1 <= d <= 3");
        Self { dim, m: [0.0; 9] }
    }

    pub fn scaled_identity(dim: usize, c: f64) -> Self {
        let mut s = Self::zeros(dim);
        for i in 0..dim {
            s.m[i * 3 + i] = c;
        }
        s
    }

    pub fn identity(dim: usize) -> Self {
        Self::scaled_identity(dim, 1.0)
    }

    /// Builds from rows; fails unless the input is square and exactly symmetric.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.len();
        if !(1..=3).contains(&d) || rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidInput(format!("expected a square matrix with 1 <= d <= 3, got {d} rows")));
        }
        let mut s = Self::zeros(d);
        for i in 0..d {
            for j in 0..d {
                if rows[i][j] != rows[j][i] {
                    return Err(Error::InvariantViolation(format!(
                        "matrix not symmetric at ({i},{j}): {} vs {}",
                        rows[i][j], rows[j][i]
                    )));
                }
                s.m[i * 3 + j] = rows[i][j];
            }
        }
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[i * 3 + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.m[i * 3 + j] = v;
        self.m[j * 3 + i] = v;
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim).map(|i| (0..self.dim).map(|j| self.get(i, j)).collect()).collect()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.dim).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.dim).map(|i| (0..self.dim).map(|j| self.get(i, j) * v[j]).sum()).collect()
    }

    pub fn quad_form(&self, v: &[f64]) -> f64 {
        self.mul_vec(v).iter().zip(v).map(|(a, b)| a * b).sum()
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut s = *self;
        for (a, b) in s.m.iter_mut().zip(other.m.iter()) {
            *a += b;
        }
        s
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, c: f64) -> Self {
        let mut s = *self;
        s.m.iter_mut().for_each(|a| *a *= c);
        s
    }

    pub fn max_abs(&self) -> f64 {
        self.m.iter().fold(0.0, |a, b| a.max(b.abs()))
    }

    /// Eigenvalues in ascending order (cyclic Jacobi rotations).
    pub fn eigenvalues(&self) -> Vec<f64> {
        let d = self.dim;
        let mut a = [[0.0; 3]; 3];
        for i in 0..d {
            for j in 0..d {
                a[i][j] = self.get(i, j);
            }
        }
        for _ in 0..64 {
            let off: f64 = (0..d).flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[i][j] * a[i][j])
                .sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..d {
                for q in p + 1..d {
                    if a[p][q] == 0.0 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..d {
                        let (akp, akq) = (a[k][p], a[k][q]);
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..d {
                        let (apk, aqk) = (a[p][k], a[q][k]);
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..d).map(|i| a[i][i]).collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// Inverse by Gauss–Jordan elimination with partial pivoting.
    pub fn inverse(&self) -> Result<Self> {
        let d = self.dim;
        let mut a = [[0.0; 6]; 3];
        for i in 0..d {
            for j in 0..d {
                a[i][j] = self.get(i, j);
            }
            a[i][d + i] = 1.0;
        }
        for col in 0..d {
            let piv = (col..d)
                .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
                .unwrap_or(col);
            if a[piv][col].abs() < 1e-300 {
                return Err(Error::InvariantViolation("singular matrix".into()));
            }
            a.swap(col, piv);
            let p = a[col][col];
            a[col].iter_mut().for_each(|v| *v /= p);
            for r in 0..d {
                if r != col {
                    let f = a[r][col];
                    for c in 0..2 * d {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
        let mut s = Self::zeros(d);
        for i in 0..d {
            for j in 0..d {
                // symmetrize round-off
                s.m[i * 3 + j] = 0.5 * (a[i][d + j] + a[j][d + i]);
            }
        }
        Ok(s)
    }

    /// True when every eigenvalue lies in `[lo - slack, hi + slack]`.
    pub fn in_band(&self, lo: f64, hi: f64, slack: f64) -> bool {
        let ev = self.eigenvalues();
        ev[0] >= lo - slack && ev[self.dim - 1] <= hi + slack
    }

    /// Loewner order `self ≤ other` up to `slack`.
    pub fn le(&self, other: &Self, slack: f64) -> bool {
        other.sub(self).eigenvalues()[0] >= -slack
    }
}

impl fmt::Debug for SymMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.rows())
    }
}

/// A rule `μ ↦ a∘(μ)`, uniformly elliptic with bound `Λ` and of finite range.
///
/// `rule` receives `μ` in coordinates relative to the evaluation point, so a
/// particle sitting exactly at the evaluation point appears at the origin.
pub trait Conductance: Send + Sync {
    fn name(&self) -> &str;

    /// Named parameters, used for the field digest.
    fn params(&self) -> Vec<(&'static str, f64)>;

    fn lambda(&self) -> f64;

    fn rule(&self, mu: &PointConfiguration) -> SymMatrix;

    /// Distance beyond which other particles never affect the value; at most ½.
    fn interaction_radius(&self) -> f64 {
        0.5
    }

    /// Diagonal of `a∘` given the other particles' displacements (flat, `dim`
    /// per point; the evaluating particle itself is not listed).
    ///
    /// Solvers use only this entry point. The default builds a configuration
    /// and calls `rule`; fields with off-diagonal entries are rejected.
    fn diagonal(&self, dim: usize, others: &[f64]) -> Result<[f64; 3]> {
        let mut coords = vec![0.0; dim];
        coords.extend_from_slice(others);
        let mu = PointConfiguration::from_flat(dim, coords)?;
        let a = validated(self, &mu, dim)?;
        for i in 0..dim {
            for j in 0..dim {
                if i != j && a.get(i, j) != 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "field `{}` has off-diagonal conductance; the grid solvers need diagonal matrices",
                        self.name()
                    )));
                }
            }
        }
        let mut out = [1.0; 3];
        for (k, o) in out.iter_mut().enumerate().take(dim) {
            *o = a.get(k, k);
        }
        Ok(out)
    }

    /// Stable digest of `(name, params)`.
    fn field_id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.name().as_bytes());
        for (k, v) in self.params() {
            h.update(b";");
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(&h.finalize()[..16])
    }
}

fn validated<F: Conductance + ?Sized>(field: &F, mu: &PointConfiguration, dim: usize) -> Result<SymMatrix> {
    let a = field.rule(mu);
    if a.dim() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: a.dim() });
    }
    if !a.is_symmetric() {
        return Err(Error::InvariantViolation(format!("field `{}` returned a non-symmetric matrix {a:?}", field.name())));
    }
    if !a.in_band(1.0, field.lambda(), BAND_SLACK) {
        return Err(Error::InvariantViolation(format!(
            "field `{}` returned {a:?}, outside [Id, {} Id]",
            field.name(),
            field.lambda()
        )));
    }
    Ok(a)
}

/// `a∘(μ)`, with the ellipticity and symmetry invariants checked.
pub fn evaluate_origin(field: &dyn Conductance, mu: &PointConfiguration) -> Result<SymMatrix> {
    validated(field, mu, mu.dim())
}

/// `a(μ, x) = a∘(τ_{-x} μ)`.
pub fn evaluate(field: &dyn Conductance, mu: &PointConfiguration, x: &[f64]) -> Result<SymMatrix> {
    if x.len() != mu.dim() {
        return Err(Error::DimensionMismatch { expected: mu.dim(), got: x.len() });
    }
    evaluate_origin(field, &translate(mu, x))
}

/// Randomized audit of finite range: adds and removes points outside `B_{1/2}`
/// and checks that `a∘` does not change.
pub fn locality_probe(field: &dyn Conductance, mu: &PointConfiguration, n_trials: usize, seed: u64) -> bool {
    let d = mu.dim();
    let Ok(reference) = evaluate_origin(field, mu) else {
        return false;
    };
    let inner: Vec<&[f64]> = mu.points().filter(|p| norm(p) < 0.5).collect();
    let mut rng = stream_rng(seed, 0x10ca1);
    for _ in 0..n_trials {
        let mut cfg = PointConfiguration::empty(d);
        for p in &inner {
            cfg.push(p).expect("same dimension");
        }
        // keep a random subset of the far points
        for p in mu.points().filter(|p| norm(p) >= 0.5) {
            if rng.random::<bool>() {
                cfg.push(p).expect("same dimension");
            }
        }
        let extra = rng.random_range(1..=4);
        for _ in 0..extra {
            let r = rng.random_range(0.5..1.5);
            let dir = random_unit(d, &mut rng);
            let p: Vec<f64> = dir.iter().map(|c| c * r).collect();
            if norm(&p) >= 0.5 {
                cfg.push(&p).expect("same dimension");
            }
        }
        match evaluate_origin(field, &cfg) {
            Ok(a) if a == reference => {}
            _ => return false,
        }
    }
    true
}

pub(crate) fn random_unit(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = norm(&v);
        if n > 1e-3 && n <= 1.0 {
            return v.iter().map(|c| c / n).collect();
        }
    }
}

fn norm(p: &[f64]) -> f64 {
    p.iter().map(|c| c * c).sum::<f64>().sqrt()
}

/// Displacements of the particles other than one copy at the origin.
fn others_of(mu: &PointConfiguration) -> Vec<f64> {
    let mut skipped = false;
    let mut out = Vec::with_capacity(mu.coords().len());
    for p in mu.points() {
        if !skipped && p.iter().all(|&c| c == 0.0) {
            skipped = true;
            continue;
        }
        out.extend_from_slice(p);
    }
    out
}

/// `a∘ ≡ c Id`.
#[derive(Clone, Debug)]
pub struct ConstantField {
    c: f64,
    lambda: f64,
}

impl ConstantField {
    pub fn new(c: f64, lambda: f64) -> Result<Self> {
        if !(lambda >= 1.0) || !(c >= 1.0 && c <= lambda) {
            return Err(Error::InvalidInput(format!("constant field needs 1 <= c <= lambda, got c={c}, lambda={lambda}")));
        }
        Ok(Self { c, lambda })
    }

    pub fn value(&self) -> f64 {
        self.c
    }
}

impl Conductance for ConstantField {
    fn name(&self) -> &str {
        "constant"
    }
    fn params(&self) -> Vec<(&'static str, f64)> {
        vec![("c", self.c), ("lambda", self.lambda)]
    }
    fn lambda(&self) -> f64 {
        self.lambda
    }
    fn rule(&self, mu: &PointConfiguration) -> SymMatrix {
        SymMatrix::scaled_identity(mu.dim(), self.c)
    }
    fn interaction_radius(&self) -> f64 {
        0.0
    }
    fn diagonal(&self, _dim: usize, _others: &[f64]) -> Result<[f64; 3]> {
        Ok([self.c; 3])
    }
}

/// `a∘ = Id + (Λ-1) 1{another particle within distance r} Id`.
#[derive(Clone, Debug)]
pub struct CrowdingField {
    lambda: f64,
    r: f64,
}

impl CrowdingField {
    pub fn new(lambda: f64, r: f64) -> Result<Self> {
        if !(lambda >= 1.0) || !(r > 0.0 && r <= 0.5) {
            return Err(Error::InvalidInput(format!("crowding field needs lambda >= 1 and 0 < r <= 1/2, got {lambda}, {r}")));
        }
        Ok(Self { lambda, r })
    }

    fn scalar(&self, dim: usize, others: &[f64]) -> f64 {
        let r2 = self.r * self.r;
        let crowded = others.chunks_exact(dim).any(|p| p.iter().map(|c| c * c).sum::<f64>() < r2);
        if crowded {
            self.lambda
        } else {
            1.0
        }
    }
}

impl Conductance for CrowdingField {
    fn name(&self) -> &str {
        "crowding"
    }
    fn params(&self) -> Vec<(&'static str, f64)> {
        vec![("lambda", self.lambda), ("r", self.r)]
    }
    fn lambda(&self) -> f64 {
        self.lambda
    }
    fn rule(&self, mu: &PointConfiguration) -> SymMatrix {
        SymMatrix::scaled_identity(mu.dim(), self.scalar(mu.dim(), &others_of(mu)))
    }
    fn interaction_radius(&self) -> f64 {
        self.r
    }
    fn diagonal(&self, dim: usize, others: &[f64]) -> Result<[f64; 3]> {
        Ok([self.scalar(dim, others); 3])
    }
}

/// `a∘ = Id + (Λ-1) min(1, Σ φ(|y|)) Id` with `φ(s) = (1 - 4s²)²` on `[0, ½)`.
#[derive(Clone, Debug)]
pub struct SmoothPairField {
    lambda: f64,
}

impl SmoothPairField {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 1.0) {
            return Err(Error::InvalidInput(format!("smooth field needs lambda >= 1, got {lambda}")));
        }
        Ok(Self { lambda })
    }

    fn scalar(&self, dim: usize, others: &[f64]) -> f64 {
        let s: f64 = others
            .chunks_exact(dim)
            .map(|p| {
                let r2 = p.iter().map(|c| c * c).sum::<f64>();
                if r2 < 0.25 {
                    (1.0 - 4.0 * r2).powi(2)
                } else {
                    0.0
                }
            })
            .sum();
        1.0 + (self.lambda - 1.0) * s.min(1.0)
    }
}

impl Conductance for SmoothPairField {
    fn name(&self) -> &str {
        "smooth_pair"
    }
    fn params(&self) -> Vec<(&'static str, f64)> {
        vec![("lambda", self.lambda)]
    }
    fn lambda(&self) -> f64 {
        self.lambda
    }
    fn rule(&self, mu: &PointConfiguration) -> SymMatrix {
        SymMatrix::scaled_identity(mu.dim(), self.scalar(mu.dim(), &others_of(mu)))
    }
    fn diagonal(&self, dim: usize, others: &[f64]) -> Result<[f64; 3]> {
        Ok([self.scalar(dim, others); 3])
    }
}

fn default_lambda() -> f64 {
    2.0
}

fn default_radius() -> f64 {
    0.25
}

/// Declarative field description as it appears in run configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    Constant {
        c: f64,
        #[serde(default = "default_lambda")]
        lambda: f64,
    },
    Crowding {
        #[serde(default = "default_lambda")]
        lambda: f64,
        #[serde(default = "default_radius")]
        r: f64,
    },
    SmoothPair {
        #[serde(default = "default_lambda")]
        lambda: f64,
    },
}

impl FieldSpec {
    pub fn build(&self) -> Result<Arc<dyn Conductance>> {
        Ok(match *self {
            FieldSpec::Constant { c, lambda } => Arc::new(ConstantField::new(c, lambda)?),
            FieldSpec::Crowding { lambda, r } => Arc::new(CrowdingField::new(lambda, r)?),
            FieldSpec::SmoothPair { lambda } => Arc::new(SmoothPairField::new(lambda)?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(dim: usize, xs: &[f64]) -> PointConfiguration {
        PointConfiguration::from_flat(dim, xs.to_vec()).unwrap()
    }

    #[test]
    fn builtin_examples() {
        let crowd = CrowdingField::new(2.0, 0.25).unwrap();
        assert_eq!(evaluate_origin(&crowd, &cfg(1, &[0.0])).unwrap(), SymMatrix::identity(1));
        assert_eq!(evaluate_origin(&crowd, &cfg(1, &[0.0, 0.2])).unwrap(), SymMatrix::scaled_identity(1, 2.0));
        assert_eq!(evaluate(&crowd, &cfg(1, &[0.0, 0.9]), &[0.0]).unwrap(), SymMatrix::identity(1));
        let c = ConstantField::new(1.5, 2.0).unwrap();
        assert_eq!(evaluate(&c, &cfg(2, &[0.3, 0.1]), &[1.0, 1.0]).unwrap(), SymMatrix::scaled_identity(2, 1.5));
    }

    #[test]
    fn two_particles_at_origin_count_as_neighbours() {
        let crowd = CrowdingField::new(2.0, 0.25).unwrap();
        assert_eq!(evaluate_origin(&crowd, &cfg(1, &[0.0, 0.0])).unwrap().get(0, 0), 2.0);
    }

    struct Skewed;
    impl Conductance for Skewed {
        fn name(&self) -> &str {
            "skewed"
        }
        fn params(&self) -> Vec<(&'static str, f64)> {
            vec![]
        }
        fn lambda(&self) -> f64 {
            2.0
        }
        fn rule(&self, _mu: &PointConfiguration) -> SymMatrix {
            SymMatrix::scaled_identity(1, 3.0)
        }
    }

    #[test]
    fn out_of_band_is_rejected() {
        let err = evaluate_origin(&Skewed, &cfg(1, &[0.0])).unwrap_err();
        assert!(matches!(err, Error::InvariantViolation(_)));
        assert!(ConstantField::new(2.5, 2.0).is_err());
    }

    #[test]
    fn field_ids_differ_by_params() {
        let a = CrowdingField::new(2.0, 0.25).unwrap().field_id();
        let b = CrowdingField::new(2.0, 0.3).unwrap().field_id();
        assert_ne!(a, b);
        assert_eq!(a, FieldSpec::Crowding { lambda: 2.0, r: 0.25 }.build().unwrap().field_id());
    }

    #[test]
    fn eigen_and_inverse() {
        let m = SymMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let ev = m.eigenvalues();
        assert!((ev[0] - 1.0).abs() < 1e-14 && (ev[1] - 3.0).abs() < 1e-14);
        let inv = m.inverse().unwrap();
        assert!((inv.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((inv.get(0, 1) + 1.0 / 3.0).abs() < 1e-15);
        assert!(SymMatrix::from_rows(&[vec![1.0, 0.5], vec![0.4, 1.0]]).is_err());
    }

    #[test]
    fn spec_parses_from_toml() {
        let s: FieldSpec = toml::from_str("name = \"crowding\"\nlambda = 2.0").unwrap();
        assert_eq!(s, FieldSpec::Crowding { lambda: 2.0, r: 0.25 });
        assert!(toml::from_str::<FieldSpec>("name = \"crowding\"\nradius = 2.0").is_err());
    }
}
