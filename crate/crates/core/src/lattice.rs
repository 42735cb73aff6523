//! Permutation-symmetric vertex grids over `U^n`.
//!
//! A node of `U^n` is stored as the sorted multiset of the `n` per-particle
//! node indices. Multisets are ranked with the combinatorial number system:
//! with `b_i = s_i + i`, `rank(s) = Σ_i C(b_i, i+1)`, which enumerates states
//! in colexicographic order. Only symmetric functions are ever represented.

use crate::error::{Error, Result};
use crate::point_process::BoxRegion;

/// Node index of one particle: `ix + P·iy` (+ `P²·iz`).
pub type Node = u32;

#[derive(Clone, Debug)]
pub struct Lattice {
    dim: usize,
    per_axis: usize,
    side: f64,
    lower: [f64; 3],
    h: f64,
    n: usize,
    nodes: usize,
    count: usize,
    binom: Vec<u64>,
    binom_cols: usize,
    tau_axis: Vec<f64>,
}

impl Lattice {
    /// `per_axis` points per axis on the closed box `region`, `n` particles.
    pub fn new(region: &BoxRegion, per_axis: usize, n: usize) -> Result<Self> {
        if per_axis < 2 {
            return Err(Error::InvalidInput("need at least two grid points per axis".into()));
        }
        let side = region.side();
        let mut lower = [0.0; 3];
        for (k, l) in lower.iter_mut().enumerate().take(region.dim().min(3)) {
            *l = region.lower(k);
        }
        Self::build(region.dim(), per_axis, n, side, lower)
    }

    /// Ranking structure only (positions and weights are meaningless);
    /// allows a single point per axis.
    pub fn index_only(dim: usize, per_axis: usize, n: usize) -> Result<Self> {
        if per_axis < 1 {
            return Err(Error::InvalidInput("need at least one grid point per axis".into()));
        }
        Self::build(dim, per_axis, n, 1.0, [0.0; 3])
    }

    fn build(dim: usize, per_axis: usize, n: usize, side: f64, lower: [f64; 3]) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::InvalidInput(format!("dimension {dim} not supported")));
        }
        let nodes = per_axis.pow(dim as u32);
        let h = if per_axis > 1 { side / (per_axis - 1) as f64 } else { side };
        let rows = nodes + n + 1;
        let binom_cols = n + 2;
        let mut binom = vec![0u64; rows * binom_cols];
        for a in 0..rows {
            binom[a * binom_cols] = 1;
            for b in 1..binom_cols.min(a + 1) {
                let v = binom[(a - 1) * binom_cols + b - 1].saturating_add(if b < a {
                    binom[(a - 1) * binom_cols + b]
                } else {
                    0
                });
                binom[a * binom_cols + b] = v;
            }
        }
        let count_u64 = if n == 0 { 1 } else { binom[(nodes + n - 1) * binom_cols + n] };
        if count_u64 >= u32::MAX as u64 {
            return Err(Error::MemoryBudget { unknowns: count_u64 as usize, budget: u32::MAX as usize });
        }
        let mut tau_axis = vec![h / side; per_axis];
        if per_axis > 1 {
            tau_axis[0] *= 0.5;
            tau_axis[per_axis - 1] *= 0.5;
        }
        Ok(Self { dim, per_axis, side, lower, h, n, nodes, count: count_u64 as usize, binom, binom_cols, tau_axis })
    }

    /// Number of symmetric states, `C(M + n - 1, n)`, without building the table.
    pub fn state_count(nodes: usize, n: usize) -> u64 {
        let mut c: u128 = 1;
        for i in 0..n as u128 {
            c = c * (nodes as u128 + i) / (i + 1);
            if c > u64::MAX as u128 {
                return u64::MAX;
            }
        }
        c as u64
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn per_axis(&self) -> usize {
        self.per_axis
    }
    pub fn h(&self) -> f64 {
        self.h
    }
    pub fn side(&self) -> f64 {
        self.side
    }
    pub fn particles(&self) -> usize {
        self.n
    }
    pub fn nodes(&self) -> usize {
        self.nodes
    }
    pub fn count(&self) -> usize {
        self.count
    }

    #[inline]
    pub fn binom(&self, a: usize, b: usize) -> u64 {
        if b > a {
            0
        } else {
            self.binom[a * self.binom_cols + b]
        }
    }

    /// Stride of axis `k` in the node index.
    #[inline]
    pub fn stride(&self, k: usize) -> u32 {
        (self.per_axis as u32).pow(k as u32)
    }

    #[inline]
    pub fn axis_index(&self, c: Node, k: usize) -> usize {
        (c as usize / self.stride(k) as usize) % self.per_axis
    }

    pub fn node_position(&self, c: Node, out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate().take(self.dim) {
            *o = self.lower[k] + self.axis_index(c, k) as f64 * self.h;
        }
    }

    /// Normalized trapezoid weight of a node; the weights sum to one.
    #[inline]
    pub fn tau(&self, c: Node) -> f64 {
        (0..self.dim).map(|k| self.tau_axis[self.axis_index(c, k)]).product()
    }

    /// Normalized weight of the `k`-edge starting at `c`; edges of one
    /// direction sum to one.
    #[inline]
    pub fn edge_tau(&self, c: Node, k: usize) -> f64 {
        (0..self.dim)
            .map(|j| if j == k { self.h / self.side } else { self.tau_axis[self.axis_index(c, j)] })
            .product()
    }

    pub fn is_boundary(&self, c: Node) -> bool {
        (0..self.dim).any(|k| {
            let i = self.axis_index(c, k);
            i == 0 || i + 1 == self.per_axis
        })
    }

    /// Rank of a sorted multiset.
    #[inline]
    pub fn rank(&self, s: &[Node]) -> usize {
        debug_assert_eq!(s.len(), self.n);
        let mut r = 0u64;
        for (i, &v) in s.iter().enumerate() {
            r += self.binom(v as usize + i, i + 1);
        }
        r as usize
    }

    /// Inverse of [`rank`](Self::rank).
    pub fn unrank(&self, mut r: usize, s: &mut [Node]) {
        let top = self.nodes + self.n;
        let mut hi = top;
        for i in (0..self.n).rev() {
            // largest b < hi with C(b, i+1) <= r
            let mut b = hi - 1;
            while self.binom(b, i + 1) as usize > r {
                b -= 1;
            }
            r -= self.binom(b, i + 1) as usize;
            s[i] = (b - i) as Node;
            hi = b;
        }
    }

    /// Advances `s` to the next state in rank order; false at the end.
    #[inline]
    pub fn advance(&self, s: &mut [Node]) -> bool {
        let n = self.n;
        // b_i = s_i + i is strictly increasing and below M + n - 1
        let end = self.nodes + n - 1;
        for i in 0..n {
            let b = s[i] as usize + i;
            let limit = if i + 1 < n { s[i + 1] as usize + i + 1 } else { end };
            if b + 1 < limit {
                s[i] += 1;
                s[..i].fill(0);
                return true;
            }
        }
        false
    }

    /// Number of full arrangements of the multiset, `n!/Π mult!`.
    pub fn arrangements(s: &[Node]) -> f64 {
        let mut result = 1.0;
        let mut run = 0usize;
        for i in 0..s.len() {
            run = if i > 0 && s[i] == s[i - 1] { run + 1 } else { 1 };
            result *= (i + 1) as f64 / run as f64;
        }
        result
    }

    /// Quadrature weight of a state: `arrangements · Π tau`. Weights sum to one.
    pub fn state_weight(&self, s: &[Node]) -> f64 {
        Self::arrangements(s) * s.iter().map(|&c| self.tau(c)).product::<f64>()
    }

    /// Splits the rank range into at most `chunks` contiguous pieces.
    pub fn rank_chunks(&self, chunks: usize) -> Vec<(usize, usize)> {
        let chunks = chunks.max(1).min(self.count.max(1));
        let size = self.count.div_ceil(chunks);
        (0..chunks)
            .map(|c| (c * size, ((c + 1) * size).min(self.count)))
            .filter(|(a, b)| a < b)
            .collect()
    }

    /// The forward neighbour obtained by moving the copy of `s[p]` one step
    /// along axis `k`. Returns `None` at the upper face. `out` receives the
    /// sorted neighbour.
    #[inline]
    pub fn step(&self, s: &[Node], p: usize, k: usize, out: &mut Vec<Node>) -> Option<usize> {
        let v = s[p];
        if self.axis_index(v, k) + 1 == self.per_axis {
            return None;
        }
        let nv = v + self.stride(k);
        out.clear();
        out.extend_from_slice(s);
        out.remove(p);
        let pos = out.partition_point(|&x| x <= nv);
        out.insert(pos, nv);
        Some(self.rank(out))
    }
}

/// Merges two sorted multisets.
pub fn merge_sorted(a: &[Node], b: &[Node], out: &mut Vec<Node>) {
    out.clear();
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lat(d: usize, p: usize, n: usize) -> Lattice {
        Lattice::new(&BoxRegion::centered(1.0, d).unwrap(), p, n).unwrap()
    }

    #[test]
    fn enumeration_matches_ranks() {
        for &(d, p, n) in &[(1, 5, 3), (2, 3, 2), (1, 4, 0), (2, 4, 3)] {
            let l = lat(d, p, n);
            let mut s = vec![0; n];
            let mut seen = 0;
            loop {
                assert_eq!(l.rank(&s), seen);
                let mut u = vec![0; n];
                l.unrank(seen, &mut u);
                assert_eq!(u, s);
                assert!(s.windows(2).all(|w| w[0] <= w[1]));
                seen += 1;
                if !l.advance(&mut s) {
                    break;
                }
            }
            assert_eq!(seen, l.count());
            assert_eq!(seen as u64, Lattice::state_count(l.nodes(), n));
        }
    }

    #[test]
    fn weights_are_normalized() {
        let l = lat(2, 4, 3);
        let mut s = vec![0; 3];
        let mut total = 0.0;
        loop {
            total += l.state_weight(&s);
            if !l.advance(&mut s) {
                break;
            }
        }
        assert!((total - 1.0).abs() < 1e-13);
        let edges: f64 = (0..l.nodes() as Node)
            .filter(|&c| l.axis_index(c, 1) + 1 < l.per_axis())
            .map(|c| l.edge_tau(c, 1))
            .sum();
        assert!((edges - 1.0).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn step_keeps_sorted_and_ranks(seed in 0usize..200, p in 0usize..3, k in 0usize..2) {
            let l = lat(2, 5, 3);
            let mut s = vec![0; 3];
            l.unrank(seed % l.count(), &mut s);
            let mut out = Vec::new();
            if let Some(r) = l.step(&s, p, k, &mut out) {
                prop_assert!(out.windows(2).all(|w| w[0] <= w[1]));
                prop_assert_eq!(r, l.rank(&out));
            }
        }
    }
}
