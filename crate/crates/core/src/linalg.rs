//! Dense linear algebra helpers on top of nalgebra.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Result, SaeError};
use crate::math;

/// Relative tolerance for numerical rank decisions.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
}

impl SpdFactor {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(SaeError::InvalidInput("SPD factor needs a non-empty square matrix".into()));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(SaeError::SingularCovariance);
        }
        let chol = Cholesky::new(m).ok_or(SaeError::SingularCovariance)?;
        let l = chol.l_dirty();
        let n = l.nrows();
        if (0..n).any(|i| !(l[(i, i)] > 0.0) || !l[(i, i)].is_finite()) {
            return Err(SaeError::SingularCovariance);
        }
        Ok(Self { chol })
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    /// `log |A|`.
    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        (0..l.nrows()).map(|i| 2.0 * math::ln(l[(i, i)])).sum()
    }

    /// Smallest diagonal entry of the Cholesky factor.
    pub fn min_pivot(&self) -> f64 {
        let l = self.chol.l_dirty();
        (0..l.nrows()).map(|i| l[(i, i)]).fold(f64::INFINITY, f64::min)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let mut inv = self.chol.inverse();
        symmetrize(&mut inv);
        inv
    }
}

/// Replaces `m` by `(m + m^t) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Numerical column rank via column-pivoted QR; a column counts when its
/// pivot exceeds `RANK_TOLERANCE` times the largest pivot.
pub fn numerical_rank(x: &DMatrix<f64>) -> usize {
    if x.ncols() == 0 || x.nrows() == 0 {
        return 0;
    }
    let r = x.clone().col_piv_qr().unpack_r();
    let k = r.nrows().min(r.ncols());
    let diag: Vec<f64> = (0..k).map(|i| math::abs(r[(i, i)])).collect();
    let largest = diag.iter().cloned().fold(0.0, f64::max);
    if largest == 0.0 {
        return 0;
    }
    diag.iter().filter(|&&d| d > RANK_TOLERANCE * largest).count()
}

/// `x^t diag(w) x`.
pub fn weighted_gram(x: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let p = x.ncols();
    let mut out = DMatrix::zeros(p, p);
    for i in 0..x.nrows() {
        let wi = w[i];
        for a in 0..p {
            let xa = x[(i, a)] * wi;
            if xa == 0.0 {
                continue;
            }
            for b in a..p {
                out[(a, b)] += xa * x[(i, b)];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            out[(a, b)] = out[(b, a)];
        }
    }
    out
}

/// `x^t diag(w) y`.
pub fn weighted_cross(x: &DMatrix<f64>, w: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
    let p = x.ncols();
    let mut out = DVector::zeros(p);
    for i in 0..x.nrows() {
        let wy = w[i] * y[i];
        for a in 0..p {
            out[a] += x[(i, a)] * wy;
        }
    }
    out
}

/// Quadratic form `v^t m v` for a row slice of a matrix.
pub fn row_quad(x: &DMatrix<f64>, row: usize, m: &DMatrix<f64>) -> f64 {
    let p = x.ncols();
    let mut acc = 0.0;
    for a in 0..p {
        let xa = x[(row, a)];
        for b in 0..p {
            acc += xa * m[(a, b)] * x[(row, b)];
        }
    }
    acc
}

/// Reverse Cuthill-McKee ordering of a sparse symmetric pattern together with
/// the envelope (first structural nonzero per row of the lower triangle) of
/// the reordered matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeOrder {
    perm: Vec<usize>,
    first: Vec<usize>,
}

impl EnvelopeOrder {
    /// `pattern[(i, j)] != 0` marks a structural nonzero; the pattern is
    /// symmetrized before ordering.
    pub fn new(pattern: &DMatrix<f64>) -> Self {
        let n = pattern.nrows();
        let adj: Vec<Vec<usize>> = (0..n)
            .map(|i| (0..n).filter(|&j| j != i && (pattern[(i, j)] != 0.0 || pattern[(j, i)] != 0.0)).collect())
            .collect();
        let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
        let mut order = Vec::with_capacity(n);
        let mut seen = vec![false; n];
        while order.len() < n {
            let root = (0..n).filter(|&i| !seen[i]).min_by_key(|&i| (degree[i], i)).expect("unvisited node");
            let start = peripheral(&adj, root);
            let mut queue = VecDeque::from([start]);
            seen[start] = true;
            while let Some(v) = queue.pop_front() {
                order.push(v);
                let mut next: Vec<usize> = adj[v].iter().copied().filter(|&u| !seen[u]).collect();
                next.sort_by_key(|&u| (degree[u], u));
                for u in next {
                    seen[u] = true;
                    queue.push_back(u);
                }
            }
        }
        order.reverse();
        let mut pos = vec![0; n];
        for (k, &v) in order.iter().enumerate() {
            pos[v] = k;
        }
        let first = (0..n).map(|k| adj[order[k]].iter().map(|&u| pos[u]).filter(|&q| q < k).min().unwrap_or(k)).collect();
        Self { perm: order, first }
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    /// Position `k` of the reordered matrix holds original index `perm()[k]`.
    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// Stored entries of the lower triangle, diagonal included.
    pub fn envelope_size(&self) -> usize {
        self.first.iter().enumerate().map(|(k, &f)| k - f + 1).sum()
    }

    /// Cholesky factor of `m`, which must vanish outside the pattern.
    pub fn factor(&self, m: &DMatrix<f64>) -> Result<EnvelopeCholesky<'_>> {
        let n = self.dim();
        if m.nrows() != n || m.ncols() != n {
            return Err(SaeError::InvalidInput("matrix does not match the envelope".into()));
        }
        self.factor_with(|i, j| m[(i, j)])
    }

    /// As [`factor`](Self::factor), reading entry `(i, j)` (original
    /// indices, `i` and `j` inside the envelope) from `entry`.
    pub fn factor_with(&self, entry: impl Fn(usize, usize) -> f64) -> Result<EnvelopeCholesky<'_>> {
        let n = self.dim();
        // column k of `u` holds row k of L
        let mut u = DMatrix::zeros(n, n);
        for i in 0..n {
            let fi = self.first[i];
            let pi = self.perm[i];
            for j in fi..i {
                let lo = fi.max(self.first[j]);
                let dot = u.view((lo, i), (j - lo, 1)).dot(&u.view((lo, j), (j - lo, 1)));
                u[(j, i)] = (entry(pi, self.perm[j]) - dot) / u[(j, j)];
            }
            let sq = u.view((fi, i), (i - fi, 1)).norm_squared();
            let pivot: f64 = entry(pi, pi) - sq;
            if !(pivot > 0.0) || !pivot.is_finite() {
                return Err(SaeError::SingularCovariance);
            }
            u[(i, i)] = math::sqrt(pivot);
        }
        Ok(EnvelopeCholesky { order: self, u })
    }
}

fn peripheral(adj: &[Vec<usize>], root: usize) -> usize {
    let levels = |s: usize| {
        let mut depth = vec![usize::MAX; adj.len()];
        depth[s] = 0;
        let mut queue = VecDeque::from([s]);
        let mut last = s;
        while let Some(v) = queue.pop_front() {
            last = v;
            for &u in &adj[v] {
                if depth[u] == usize::MAX {
                    depth[u] = depth[v] + 1;
                    queue.push_back(u);
                }
            }
        }
        (depth[last], last)
    };
    let mut current = root;
    let (mut ecc, mut far) = levels(current);
    for _ in 0..adj.len() {
        let (e, f) = levels(far);
        if e <= ecc {
            break;
        }
        current = far;
        ecc = e;
        far = f;
    }
    current
}

/// Envelope Cholesky factor `P m P^t = L L^t` from [`EnvelopeOrder::factor`].
#[derive(Debug, Clone)]
pub struct EnvelopeCholesky<'a> {
    order: &'a EnvelopeOrder,
    u: DMatrix<f64>,
}

impl EnvelopeCholesky<'_> {
    /// `log |m|`.
    pub fn log_det(&self) -> f64 {
        (0..self.order.dim()).map(|i| 2.0 * math::ln(self.u[(i, i)])).sum()
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.order.dim();
        let perm = &self.order.perm;
        let first = &self.order.first;
        let mut out = DMatrix::zeros(n, b.ncols());
        let mut y = DVector::zeros(n);
        for c in 0..b.ncols() {
            for i in 0..n {
                let fi = first[i];
                let dot = self.u.view((fi, i), (i - fi, 1)).dot(&y.rows(fi, i - fi));
                y[i] = (b[(perm[i], c)] - dot) / self.u[(i, i)];
            }
            for i in (0..n).rev() {
                let xi = y[i] / self.u[(i, i)];
                y[i] = xi;
                for k in first[i]..i {
                    y[k] -= self.u[(k, i)] * xi;
                }
            }
            for i in 0..n {
                out[(perm[i], c)] = y[i];
            }
        }
        out
    }
}

/// Relative Frobenius distance `||a - b|| / max(||b||, tiny)`.
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let num = (a - b).norm();
    let den = b.norm().max(f64::MIN_POSITIVE);
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spd_logdet_matches_determinant() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let f = SpdFactor::new(m).unwrap();
        assert!((f.log_det() - math::ln(11.0)).abs() < 1e-14);
    }

    #[test]
    fn spd_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert_eq!(SpdFactor::new(m).unwrap_err(), SaeError::SingularCovariance);
    }

    #[test]
    fn rank_detects_collinear_columns() {
        let x = DMatrix::from_row_slice(4, 3, &[
            1.0, 1.0, 2.0, //
            1.0, 2.0, 3.0, //
            1.0, 3.0, 4.0, //
            1.0, 4.0, 5.0,
        ]);
        assert_eq!(numerical_rank(&x), 2);
        assert_eq!(numerical_rank(&x.columns(0, 2).into_owned()), 2);
    }

    fn banded_spd(n: usize, seed: u64) -> DMatrix<f64> {
        // scrambled path-plus-chords pattern, made diagonally dominant
        let mut m = DMatrix::zeros(n, n);
        let scramble = |i: usize| (i * 7 + seed as usize) % n;
        for i in 0..n {
            for step in [1usize, 3] {
                if i + step < n {
                    let (a, b) = (scramble(i), scramble(i + step));
                    let v = 0.1 + ((i * 13 + step) % 5) as f64 * 0.1;
                    m[(a, b)] = -v;
                    m[(b, a)] = -v;
                }
            }
        }
        for i in 0..n {
            m[(i, i)] = 1.0 + m.row(i).iter().map(|v| v.abs()).sum::<f64>();
        }
        m
    }

    #[test]
    fn envelope_cholesky_matches_dense() {
        for (n, seed) in [(1, 0), (2, 1), (9, 2), (40, 3), (61, 5)] {
            let m = banded_spd(n, seed);
            let order = EnvelopeOrder::new(&m);
            let mut sorted = order.perm().to_vec();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            let env = order.factor(&m).unwrap();
            let dense = SpdFactor::new(m.clone()).unwrap();
            assert!((env.log_det() - dense.log_det()).abs() < 1e-12 * (1.0 + dense.log_det().abs()));
            let b = DMatrix::from_fn(n, 3, |i, j| (i as f64 + 1.0).sin() + j as f64);
            assert!(rel_frobenius(&env.solve_mat(&b), &dense.solve_mat(&b)) < 1e-12);
        }
    }

    #[test]
    fn reordering_shrinks_a_scrambled_band() {
        let m = banded_spd(200, 4);
        let order = EnvelopeOrder::new(&m);
        assert!(order.envelope_size() < 200 * 201 / 2 / 5, "{}", order.envelope_size());
    }

    #[test]
    fn envelope_factor_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let order = EnvelopeOrder::new(&m);
        assert_eq!(order.factor(&m).unwrap_err(), SaeError::SingularCovariance);
    }
}
