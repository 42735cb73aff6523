//! Finite point configurations and Poisson sampling.
//!
//! A [`PointConfiguration`] is a finite multiset of points in `R^d`, stored as a
//! flat coordinate array. Equality is multiset equality: the order in which
//! points are stored is irrelevant and region metadata is ignored.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reproducible random stream keyed by `(seed, stream)`.
///
/// ChaCha is counter based, so stream `k` of a seed is independent of how many
/// values other streams have consumed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Open axis-aligned cube `center + (-side/2, side/2)^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxRegion {
    center: Vec<f64>,
    side: f64,
}

impl BoxRegion {
    pub fn new(center: Vec<f64>, side: f64) -> Result<Self> {
        if center.is_empty() {
            return Err(Error::InvalidInput("box needs dimension >= 1".into()));
        }
        if !(side > 0.0) || !side.is_finite() {
            return Err(Error::InvalidInput(format!("box side must be positive, got {side}")));
        }
        if center.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("box center must be finite".into()));
        }
        Ok(Self { center, side })
    }

    /// The cube of side `3^m` centered at the origin.
    pub fn cube(m: u32, dim: usize) -> Self {
        Self { center: vec![0.0; dim], side: 3f64.powi(m as i32) }
    }

    pub fn centered(side: f64, dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim], side)
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn side(&self) -> f64 {
        self.side
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn volume(&self) -> f64 {
        self.side.powi(self.dim() as i32)
    }

    pub fn lower(&self, axis: usize) -> f64 {
        self.center[axis] - 0.5 * self.side
    }

    pub fn upper(&self, axis: usize) -> f64 {
        self.center[axis] + 0.5 * self.side
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.iter()
            .enumerate()
            .all(|(k, &x)| x > self.lower(k) && x < self.upper(k))
    }

    /// Same center, side enlarged by `2 * width`.
    pub fn enlarged(&self, width: f64) -> Self {
        Self { center: self.center.clone(), side: self.side + 2.0 * width }
    }

    /// Sup-norm distance from `p` to the closed box (0 inside).
    pub fn distance_sup(&self, p: &[f64]) -> f64 {
        p.iter()
            .enumerate()
            .map(|(k, &x)| (self.lower(k) - x).max(x - self.upper(k)).max(0.0))
            .fold(0.0, f64::max)
    }

    /// Euclidean distance from `p` to the closed box.
    pub fn distance(&self, p: &[f64]) -> f64 {
        p.iter()
            .enumerate()
            .map(|(k, &x)| {
                let e = (self.lower(k) - x).max(x - self.upper(k)).max(0.0);
                e * e
            })
            .sum::<f64>()
            .sqrt()
    }

    fn uniform_point(&self, rng: &mut impl Rng, out: &mut Vec<f64>) {
        for k in 0..self.dim() {
            // open box: reject the lower endpoint
            let mut u: f64 = rng.random();
            while u == 0.0 {
                u = rng.random();
            }
            out.push(self.lower(k) + self.side * u);
        }
    }
}

/// Finite multiset of points in `R^d`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PointConfiguration {
    dim: usize,
    coords: Vec<f64>,
    region: Option<BoxRegion>,
}

impl PointConfiguration {
    pub fn empty(dim: usize) -> Self {
        Self { dim, coords: Vec::new(), region: None }
    }

    pub fn from_points(dim: usize, points: &[Vec<f64>]) -> Result<Self> {
        let mut coords = Vec::with_capacity(dim * points.len());
        for p in points {
            if p.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: p.len() });
            }
            coords.extend_from_slice(p);
        }
        Ok(Self { dim, coords, region: None })
    }

    pub fn from_flat(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim == 0 || !coords.len().is_multiple_of(dim) {
            return Err(Error::InvalidInput(format!(
                "{} coordinates do not split into points of dimension {dim}",
                coords.len()
            )));
        }
        Ok(Self { dim, coords, region: None })
    }

    /// Attaches region metadata; fails if a point lies outside it.
    pub fn with_region(mut self, region: BoxRegion) -> Result<Self> {
        if region.dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: region.dim() });
        }
        if let Some(p) = self.points().find(|p| !region.contains(p)) {
            return Err(Error::InvalidInput(format!("point {p:?} lies outside the region")));
        }
        self.region = Some(region);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn region(&self) -> Option<&BoxRegion> {
        self.region.as_ref()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.coords.chunks_exact(self.dim.max(1))
    }

    pub fn push(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: p.len() });
        }
        self.coords.extend_from_slice(p);
        self.region = None;
        Ok(())
    }

    /// Number of points in `b`.
    pub fn count_in(&self, b: &BoxRegion) -> usize {
        self.points().filter(|p| b.contains(p)).count()
    }

    /// Points sorted lexicographically; canonical representative of the multiset.
    pub fn sorted_points(&self) -> Vec<&[f64]> {
        let mut pts: Vec<&[f64]> = self.points().collect();
        pts.sort_by(|a, b| lex_cmp(a, b));
        pts
    }

    /// Returns a copy whose stored order is canonical.
    pub fn canonical(&self) -> Self {
        let coords = self.sorted_points().concat();
        Self { dim: self.dim, coords, region: self.region.clone() }
    }
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| *o != Ordering::Equal)
        .unwrap_or(Ordering::Equal)
}

impl PartialEq for PointConfiguration {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.coords.len() == other.coords.len()
            && self.sorted_points() == other.sorted_points()
    }
}

/// `mu` restricted to the open box `u`.
pub fn restrict(mu: &PointConfiguration, u: &BoxRegion) -> PointConfiguration {
    let coords: Vec<f64> = mu.points().filter(|p| u.contains(p)).flatten().copied().collect();
    PointConfiguration { dim: mu.dim, coords, region: Some(u.clone()) }
}

/// Points of `mu` lying outside the open box `u`.
pub fn restrict_complement(mu: &PointConfiguration, u: &BoxRegion) -> PointConfiguration {
    let coords: Vec<f64> = mu.points().filter(|p| !u.contains(p)).flatten().copied().collect();
    PointConfiguration { dim: mu.dim, coords, region: None }
}

/// The configuration `tau_{-x} mu`, i.e. every point shifted by `-x`.
pub fn translate(mu: &PointConfiguration, x: &[f64]) -> PointConfiguration {
    let d = mu.dim;
    let coords = mu
        .coords
        .iter()
        .enumerate()
        .map(|(i, c)| c - x[i % d])
        .collect();
    PointConfiguration { dim: d, coords, region: None }
}

/// Multiset union.
pub fn superpose(mu: &PointConfiguration, nu: &PointConfiguration) -> Result<PointConfiguration> {
    if mu.dim != nu.dim {
        return Err(Error::DimensionMismatch { expected: mu.dim, got: nu.dim });
    }
    let mut coords = mu.coords.clone();
    coords.extend_from_slice(&nu.coords);
    Ok(PointConfiguration { dim: mu.dim, coords, region: None })
}

pub fn ln_factorial(n: u64) -> f64 {
    if n < 32 {
        (2..=n).map(|k| (k as f64).ln()).sum()
    } else {
        let x = n as f64;
        x * x.ln() - x + 0.5 * (2.0 * std::f64::consts::PI * x).ln() + 1.0 / (12.0 * x)
            - 1.0 / (360.0 * x.powi(3))
            + 1.0 / (1260.0 * x.powi(5))
    }
}

/// `P[Poisson(mean) = n]`.
pub fn poisson_pmf(mean: f64, n: u64) -> f64 {
    if mean == 0.0 {
        return if n == 0 { 1.0 } else { 0.0 };
    }
    (-mean + n as f64 * mean.ln() - ln_factorial(n)).exp()
}

/// `P[Poisson(mean) >= n]`, summed from the complement for small `n`.
pub fn poisson_tail(mean: f64, n: u64) -> f64 {
    let head: f64 = (0..n).map(|k| poisson_pmf(mean, k)).sum();
    if head < 0.5 {
        1.0 - head
    } else {
        // sum upward to avoid cancellation
        let mut s = 0.0;
        let mut k = n;
        loop {
            let p = poisson_pmf(mean, k);
            s += p;
            if (k as f64) > mean && p < 1e-18 * s.max(1e-300) {
                break;
            }
            k += 1;
            if k > n + 10_000 {
                break;
            }
        }
        s
    }
}

/// Draws a Poisson count (inversion at small means, PTRS rejection at large ones).
pub fn poisson_count(mean: f64, rng: &mut impl Rng) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    match Poisson::new(mean) {
        Ok(dist) => dist.sample(rng) as u64,
        Err(_) => 0,
    }
}

/// Poisson point process of the given intensity on `region`.
pub fn sample_poisson(
    intensity: f64,
    region: &BoxRegion,
    rng: &mut impl Rng,
) -> Result<PointConfiguration> {
    if !(intensity >= 0.0) || !intensity.is_finite() {
        return Err(Error::InvalidInput(format!("intensity must be >= 0, got {intensity}")));
    }
    let n = poisson_count(intensity * region.volume(), rng) as usize;
    let mut coords = Vec::with_capacity(n * region.dim());
    for _ in 0..n {
        region.uniform_point(rng, &mut coords);
    }
    Ok(PointConfiguration { dim: region.dim(), coords, region: Some(region.clone()) })
}

/// Monte Carlo comparison of the two sides of an exchange identity.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub lhs: f64,
    pub rhs: f64,
    /// Combined standard error of `lhs - rhs`.
    pub stderr: f64,
}

impl IdentityCheck {
    pub fn residual(&self) -> f64 {
        (self.lhs - self.rhs).abs()
    }

    pub fn within(&self, sigmas: f64) -> bool {
        self.residual() <= sigmas * self.stderr
    }
}

fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Mecke residual for `H(mu, x)`:
/// `E[(1/(rho|U|)) sum_{x in mu, x in U} H(mu, x)]` against `avg_U E[H(mu + delta_x, x)] dx`.
///
/// Configurations are sampled on `window`, which must contain `u`; `H` may
/// look at any point of the window.
pub fn mecke_residual<H>(
    h: H,
    rho: f64,
    u: &BoxRegion,
    window: &BoxRegion,
    n_samples: usize,
    rng: &mut impl Rng,
) -> Result<IdentityCheck>
where
    H: Fn(&PointConfiguration, &[f64]) -> f64,
{
    if !(rho > 0.0) {
        return Err(Error::InvalidInput("Mecke identity needs rho > 0".into()));
    }
    if n_samples < 2 {
        return Err(Error::InvalidInput("need at least two samples".into()));
    }
    let norm = rho * u.volume();
    let mut lhs = Vec::with_capacity(n_samples);
    let mut rhs = Vec::with_capacity(n_samples);
    let mut x = Vec::with_capacity(u.dim());
    for _ in 0..n_samples {
        let mu = sample_poisson(rho, window, rng)?;
        let s: f64 = mu.points().filter(|p| u.contains(p)).map(|p| h(&mu, p)).sum();
        lhs.push(s / norm);

        let nu = sample_poisson(rho, window, rng)?;
        x.clear();
        u.uniform_point(rng, &mut x);
        let mut plus = nu;
        plus.push(&x)?;
        rhs.push(h(&plus, &x));
    }
    let (l, sl) = mean_and_stderr(&lhs);
    let (r, sr) = mean_and_stderr(&rhs);
    Ok(IdentityCheck { lhs: l, rhs: r, stderr: (sl * sl + sr * sr).sqrt() })
}

/// First indicator identity: `E[F(mu) 1{mu(Q) = 1}] = rho int_Q E[F(mu + delta_x) 1{mu(Q) = 0}] dx`
/// where `Q` is the unit cube `cell`.
pub fn single_occupancy_residual<F>(
    f: F,
    rho: f64,
    cell: &BoxRegion,
    window: &BoxRegion,
    n_samples: usize,
    rng: &mut impl Rng,
) -> Result<IdentityCheck>
where
    F: Fn(&PointConfiguration) -> f64,
{
    if !(rho > 0.0) {
        return Err(Error::InvalidInput("indicator identity needs rho > 0".into()));
    }
    let mut lhs = Vec::with_capacity(n_samples);
    let mut rhs = Vec::with_capacity(n_samples);
    let mut x = Vec::with_capacity(cell.dim());
    for _ in 0..n_samples {
        let mu = sample_poisson(rho, window, rng)?;
        lhs.push(if mu.count_in(cell) == 1 { f(&mu) } else { 0.0 });

        let nu = sample_poisson(rho, window, rng)?;
        if nu.count_in(cell) == 0 {
            x.clear();
            cell.uniform_point(rng, &mut x);
            let mut plus = nu;
            plus.push(&x)?;
            rhs.push(rho * cell.volume() * f(&plus));
        } else {
            rhs.push(0.0);
        }
    }
    let (l, sl) = mean_and_stderr(&lhs);
    let (r, sr) = mean_and_stderr(&rhs);
    Ok(IdentityCheck { lhs: l, rhs: r, stderr: (sl * sl + sr * sr).sqrt() })
}

/// Second indicator bound with `|E| = k`:
/// `|E[F(mu) 1{mu(Q) >= k}]| <= rho^k int_{Q^k} E[|F(mu + sum_i delta_{x_i})|]`.
///
/// `lhs` holds the left side, `rhs` the bound.
pub fn multi_occupancy_bound<F>(
    f: F,
    rho: f64,
    k: usize,
    cell: &BoxRegion,
    window: &BoxRegion,
    n_samples: usize,
    rng: &mut impl Rng,
) -> Result<IdentityCheck>
where
    F: Fn(&PointConfiguration) -> f64,
{
    let mut lhs = Vec::with_capacity(n_samples);
    let mut rhs = Vec::with_capacity(n_samples);
    let mut x = Vec::with_capacity(cell.dim());
    let scale = (rho * cell.volume()).powi(k as i32);
    for _ in 0..n_samples {
        let mu = sample_poisson(rho, window, rng)?;
        lhs.push(if mu.count_in(cell) >= k { f(&mu) } else { 0.0 });
        let mut plus = sample_poisson(rho, window, rng)?;
        for _ in 0..k {
            x.clear();
            cell.uniform_point(rng, &mut x);
            plus.push(&x)?;
        }
        rhs.push(scale * f(&plus).abs());
    }
    let (l, sl) = mean_and_stderr(&lhs);
    let (r, sr) = mean_and_stderr(&rhs);
    Ok(IdentityCheck { lhs: l.abs(), rhs: r, stderr: (sl * sl + sr * sr).sqrt() })
}

impl fmt::Display for PointConfiguration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "dim {}; region", self.dim)?;
        match &self.region {
            Some(r) => {
                for c in r.center() {
                    write!(f, " {c}")?;
                }
                writeln!(f, " {}", r.side())?;
            }
            None => writeln!(f, " none")?,
        }
        for p in self.points() {
            let line: Vec<String> = p.iter().map(|c| format!("{c}")).collect();
            writeln!(f, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

impl FromStr for PointConfiguration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: String| Error::InvalidInput(msg);
        let mut lines = s.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty configuration text".into()))?;
        let (dim_part, region_part) = header
            .split_once(';')
            .ok_or_else(|| bad(format!("malformed header `{header}`")))?;
        let dim: usize = dim_part
            .trim()
            .strip_prefix("dim")
            .ok_or_else(|| bad(format!("header must start with `dim`: `{header}`")))?
            .trim()
            .parse()
            .map_err(|e| bad(format!("bad dimension: {e}")))?;
        let region_fields: Vec<&str> = region_part
            .trim()
            .strip_prefix("region")
            .ok_or_else(|| bad(format!("missing `region` in header `{header}`")))?
            .split_whitespace()
            .collect();
        let region = if region_fields == ["none"] {
            None
        } else {
            let nums: Vec<f64> = region_fields
                .iter()
                .map(|t| t.parse::<f64>().map_err(|e| bad(format!("bad region value `{t}`: {e}"))))
                .collect::<Result<_>>()?;
            if nums.len() != dim + 1 {
                return Err(bad(format!("region needs {} numbers, got {}", dim + 1, nums.len())));
            }
            Some(BoxRegion::new(nums[..dim].to_vec(), nums[dim])?)
        };
        let mut coords = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let before = coords.len();
            for t in line.split_whitespace() {
                coords.push(
                    t.parse::<f64>()
                        .map_err(|e| bad(format!("line {}: bad coordinate `{t}`: {e}", lineno + 2)))?,
                );
            }
            if coords.len() - before != dim {
                return Err(bad(format!("line {}: expected {dim} coordinates", lineno + 2)));
            }
        }
        let mut cfg = Self::from_flat(dim, coords)?;
        if let Some(r) = region {
            cfg = cfg.with_region(r)?;
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg1(xs: &[f64]) -> PointConfiguration {
        PointConfiguration::from_flat(1, xs.to_vec()).unwrap()
    }

    #[test]
    fn zero_intensity_gives_empty() {
        let mut rng = stream_rng(1, 0);
        let b = BoxRegion::centered(2.0, 2).unwrap();
        assert!(sample_poisson(0.0, &b, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn negative_intensity_rejected() {
        let mut rng = stream_rng(1, 0);
        let b = BoxRegion::centered(1.0, 1).unwrap();
        assert!(sample_poisson(-1.0, &b, &mut rng).is_err());
    }

    #[test]
    fn same_seed_same_configuration() {
        let b = BoxRegion::centered(3.0, 2).unwrap();
        let a = sample_poisson(2.0, &b, &mut stream_rng(9, 4)).unwrap();
        let c = sample_poisson(2.0, &b, &mut stream_rng(9, 4)).unwrap();
        assert_eq!(a.coords(), c.coords());
        let other = sample_poisson(2.0, &b, &mut stream_rng(9, 5)).unwrap();
        assert_ne!(a.coords(), other.coords());
    }

    #[test]
    fn restrict_examples() {
        let u = BoxRegion::centered(1.0, 1).unwrap();
        let mu = cfg1(&[-0.7, 0.1, 0.4]);
        assert_eq!(restrict(&mu, &u), cfg1(&[0.1, 0.4]));
        assert!(restrict(&PointConfiguration::empty(1), &u).is_empty());
        let inside = cfg1(&[0.2, -0.3]);
        assert_eq!(restrict(&inside, &u), inside);
    }

    #[test]
    fn translate_examples() {
        let mu = PointConfiguration::from_points(2, &[vec![1.0, 0.0]]).unwrap();
        let moved = translate(&mu, &[1.0, 0.0]);
        assert_eq!(moved, PointConfiguration::from_points(2, &[vec![0.0, 0.0]]).unwrap());
        assert_eq!(translate(&mu, &[0.0, 0.0]), mu);
    }

    #[test]
    fn superpose_counts_and_dims() {
        let a = cfg1(&[0.1, 0.2]);
        let b = cfg1(&[0.3]);
        assert_eq!(superpose(&a, &b).unwrap().len(), 3);
        assert_eq!(superpose(&a, &PointConfiguration::empty(1)).unwrap(), a);
        assert!(superpose(&a, &PointConfiguration::empty(2)).is_err());
    }

    #[test]
    fn multiset_equality_ignores_order() {
        assert_eq!(cfg1(&[0.3, 0.1, 0.3]), cfg1(&[0.3, 0.3, 0.1]));
        assert_ne!(cfg1(&[0.3, 0.1]), cfg1(&[0.3, 0.1, 0.1]));
    }

    #[test]
    fn with_region_checks_membership() {
        let u = BoxRegion::centered(1.0, 1).unwrap();
        assert!(cfg1(&[0.7]).with_region(u.clone()).is_err());
        assert!(cfg1(&[0.2]).with_region(u).is_ok());
    }

    #[test]
    fn text_round_trip_is_exact() {
        let b = BoxRegion::new(vec![0.25, -1.0], 3.0).unwrap();
        let mu = sample_poisson(1.7, &b, &mut stream_rng(3, 1)).unwrap();
        let text = mu.to_string();
        assert!(text.starts_with("dim 2; region 0.25 -1 3"));
        let back: PointConfiguration = text.parse().unwrap();
        assert_eq!(back.coords(), mu.coords());
        assert_eq!(back.region(), mu.region());
        let none: PointConfiguration = "dim 1; region none\n0.1\n".parse().unwrap();
        assert_eq!(none, cfg1(&[0.1]));
        assert!("dim 1; region none\n0.1 0.2\n".parse::<PointConfiguration>().is_err());
    }

    #[test]
    fn poisson_count_moments() {
        // Poisson(2): mean 2 and variance 2; 1e5 samples give sigma(mean) ~ 0.0045.
        let mut rng = stream_rng(11, 0);
        let b = BoxRegion::centered(1.0, 1).unwrap();
        let n = 100_000;
        let counts: Vec<f64> =
            (0..n).map(|_| sample_poisson(2.0, &b, &mut rng).unwrap().len() as f64).collect();
        let mean = counts.iter().sum::<f64>() / n as f64;
        let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (2.0 / n as f64).sqrt();
        assert!((mean - 2.0).abs() < 3.0 * se, "mean {mean}");
        // sd of the sample variance for Poisson(2) is sqrt((2 + 2*4)/n)
        assert!((var - 2.0).abs() < 3.0 * (10.0 / n as f64).sqrt(), "var {var}");
    }

    #[test]
    fn ptrs_branch_matches_mean() {
        let mut rng = stream_rng(5, 2);
        let n = 20_000;
        let mean = (0..n).map(|_| poisson_count(55.0, &mut rng) as f64).sum::<f64>() / n as f64;
        assert!((mean - 55.0).abs() < 3.0 * (55.0 / n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn superposition_chi_square() {
        // counts of superpose(Poisson(0.7), Poisson(0.8)) on a unit box ~ Poisson(1.5)
        let mut rng = stream_rng(21, 0);
        let b = BoxRegion::centered(1.0, 1).unwrap();
        let n = 20_000usize;
        let bins = 6usize;
        let mut observed = vec![0usize; bins];
        for _ in 0..n {
            let a = sample_poisson(0.7, &b, &mut rng).unwrap();
            let c = sample_poisson(0.8, &b, &mut rng).unwrap();
            let k = superpose(&a, &c).unwrap().len().min(bins - 1);
            observed[k] += 1;
        }
        let mut chi2 = 0.0;
        for (k, &o) in observed.iter().enumerate() {
            let p = if k + 1 == bins { poisson_tail(1.5, k as u64) } else { poisson_pmf(1.5, k as u64) };
            let e = p * n as f64;
            chi2 += (o as f64 - e).powi(2) / e;
        }
        // 5 degrees of freedom, 99.9% quantile 20.5
        assert!(chi2 < 20.5, "chi2 {chi2}");
    }

    #[test]
    fn poisson_tail_consistent() {
        let total: f64 = (0..60).map(|k| poisson_pmf(6.0, k)).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!((poisson_tail(6.0, 0) - 1.0).abs() < 1e-12);
        let t = poisson_tail(1.0, 6);
        let direct: f64 = (6..40).map(|k| poisson_pmf(1.0, k)).sum();
        assert!((t - direct).abs() < 1e-15);
    }

    #[test]
    fn mecke_rejects_zero_intensity() {
        let u = BoxRegion::centered(1.0, 1).unwrap();
        let r = mecke_residual(|_, _| 1.0, 0.0, &u, &u, 10, &mut stream_rng(0, 0));
        assert!(r.is_err());
    }

    #[test]
    fn restriction_nesting_and_translation_count() {
        use proptest::prelude::*;
        proptest!(|(seed in 0u64..1000, shift in -2.0f64..2.0)| {
            let big = BoxRegion::centered(3.0, 2).unwrap();
            let v = BoxRegion::centered(2.0, 2).unwrap();
            let u = BoxRegion::centered(1.0, 2).unwrap();
            let mu = sample_poisson(1.5, &big, &mut stream_rng(seed, 0)).unwrap();
            prop_assert_eq!(restrict(&restrict(&mu, &v), &u), restrict(&mu, &u));
            prop_assert_eq!(translate(&mu, &[shift, -shift]).len(), mu.len());
            let back = translate(&translate(&mu, &[shift, 0.5]), &[-shift, -0.5]);
            prop_assert_eq!(back.len(), mu.len());
            for (a, b) in back.points().zip(mu.points()) {
                prop_assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
            }
        });
    }
}
