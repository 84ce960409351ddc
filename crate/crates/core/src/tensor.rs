//! Dense f64 linear algebra: just enough for the adapter pipeline.
//!
//! Everything is deterministic and single-allocation-per-result; shapes at
//! desk scale (≤ 4096) so no blocking, no BLAS. 16-bit floats exist only at
//! the serialization boundary — all math here is f64.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("jacobi iteration did not converge within {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
    #[error("matrix not positive definite (pivot {pivot:.3e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Row-major dense matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "buffer length must equal rows*cols");
        DenseMatrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        DenseMatrix { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// Dense product; ikj order so the inner loop streams both operands.
    ///
    /// Panics on inner-dimension mismatch.
    pub fn matmul(&self, rhs: &DenseMatrix) -> DenseMatrix {
        assert_eq!(
            self.cols, rhs.rows,
            "matmul dimension mismatch: {}x{} * {}x{}",
            self.rows, self.cols, rhs.rows, rhs.cols
        );
        let mut out = DenseMatrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let arow = &self.data[i * self.cols..(i + 1) * self.cols];
            let orow = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let brow = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for j in 0..rhs.cols {
                    orow[j] += a * brow[j];
                }
            }
        }
        out
    }

    pub fn add(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        DenseMatrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.shape(), other.shape(), "sub shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        DenseMatrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn scaled(&self, c: f64) -> DenseMatrix {
        let data = self.data.iter().map(|a| a * c).collect();
        DenseMatrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn add_assign(&mut self, other: &DenseMatrix) {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// diag(d) · self — scales row i by d[i].
    pub fn scale_rows(&self, d: &[f64]) -> DenseMatrix {
        assert_eq!(d.len(), self.rows, "row scale length mismatch");
        let mut out = self.clone();
        for i in 0..self.rows {
            let di = d[i];
            for v in out.row_mut(i) {
                *v *= di;
            }
        }
        out
    }

    /// self · diag(d) — scales column j by d[j].
    pub fn scale_cols(&self, d: &[f64]) -> DenseMatrix {
        assert_eq!(d.len(), self.cols, "col scale length mismatch");
        let mut out = self.clone();
        for i in 0..self.rows {
            let row = out.row_mut(i);
            for (v, &dj) in row.iter_mut().zip(d) {
                *v *= dj;
            }
        }
        out
    }

    /// Frobenius inner product ⟨self, other⟩.
    pub fn dot(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "dot shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Rank-k factorization `m ≈ U · diag(S) · Vt`; S descending, U is N×k, Vt is k×M.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    pub u: DenseMatrix,
    pub s: Vec<f64>,
    pub vt: DenseMatrix,
}

impl ThinSvd {
    pub fn reconstruct(&self) -> DenseMatrix {
        self.u.scale_cols(&self.s).matmul(&self.vt)
    }
}

pub const DEFAULT_JACOBI_SWEEPS: usize = 64;
const JACOBI_TOL: f64 = 1e-14;

/// Thin SVD via one-sided Jacobi, applied on the smaller dimension so the
/// rotation set stays O(min(N,M)²) per sweep.
pub fn thin_svd(m: &DenseMatrix, k: usize) -> Result<ThinSvd, TensorError> {
    thin_svd_capped(m, k, DEFAULT_JACOBI_SWEEPS)
}

pub fn thin_svd_capped(m: &DenseMatrix, k: usize, max_sweeps: usize) -> Result<ThinSvd, TensorError> {
    assert!(
        k >= 1 && k <= m.rows().min(m.cols()),
        "thin_svd rank {} out of range for {}x{}",
        k,
        m.rows(),
        m.cols()
    );
    if m.rows() < m.cols() {
        // Work on the transpose and swap the roles of U and V.
        let t = thin_svd_capped(&m.transpose(), k, max_sweeps)?;
        return Ok(ThinSvd { u: t.vt.transpose(), s: t.s, vt: t.u.transpose() });
    }

    let n = m.cols();
    let mut w = m.clone();
    let mut v = DenseMatrix::identity(n);
    // Right rotations leave the Frobenius norm alone, so this floor is valid
    // for every sweep. A column this small is cancellation residue from an
    // exactly rank-deficient input and cannot carry resolvable singular
    // mass; rotating it against a live column keeps re-injecting tiny
    // components (its squared norm can even underflow to 0 while the cross
    // term stays nonzero), so the sweep loop would rotate forever.
    let junk = {
        let f = w.frob_norm() * 32.0 * f64::EPSILON;
        f * f
    };
    let mut converged = false;
    for _ in 0..max_sweeps {
        let mut rotated = 0usize;
        for p in 0..n {
            for q in (p + 1)..n {
                let (mut app, mut aqq, mut apq) = (0.0, 0.0, 0.0);
                for i in 0..w.rows() {
                    let wp = w.get(i, p);
                    let wq = w.get(i, q);
                    app += wp * wp;
                    aqq += wq * wq;
                    apq += wp * wq;
                }
                if apq == 0.0
                    || apq.abs() <= JACOBI_TOL * (app * aqq).sqrt()
                    || app.min(aqq) <= junk
                {
                    continue;
                }
                let zeta = (aqq - app) / (2.0 * apq);
                let t = if zeta >= 0.0 {
                    1.0 / (zeta + (1.0 + zeta * zeta).sqrt())
                } else {
                    -1.0 / (-zeta + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..w.rows() {
                    let wp = w.get(i, p);
                    let wq = w.get(i, q);
                    w.set(i, p, c * wp - s * wq);
                    w.set(i, q, s * wp + c * wq);
                }
                for i in 0..n {
                    let vp = v.get(i, p);
                    let vq = v.get(i, q);
                    v.set(i, p, c * vp - s * vq);
                    v.set(i, q, s * vp + c * vq);
                }
                rotated += 1;
            }
        }
        if rotated == 0 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(TensorError::NoConvergence { sweeps: max_sweeps });
    }

    let mut norms: Vec<(usize, f64)> = (0..n)
        .map(|j| {
            let s: f64 = (0..w.rows()).map(|i| w.get(i, j) * w.get(i, j)).sum();
            (j, s.sqrt())
        })
        .collect();
    norms.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

    let mut u = DenseMatrix::zeros(m.rows(), k);
    let mut vt = DenseMatrix::zeros(k, n);
    let mut s = Vec::with_capacity(k);
    for (out_j, &(j, sj)) in norms.iter().take(k).enumerate() {
        s.push(sj);
        if sj > 0.0 {
            for i in 0..m.rows() {
                u.set(i, out_j, w.get(i, j) / sj);
            }
        }
        for i in 0..n {
            vt.set(out_j, i, v.get(i, j));
        }
    }
    Ok(ThinSvd { u, s, vt })
}

/// Cholesky solve for symmetric positive definite `g`.
pub fn solve_spd(g: &DenseMatrix, rhs: &[f64]) -> Result<Vec<f64>, TensorError> {
    let n = g.rows();
    if g.cols() != n {
        return Err(TensorError::ShapeMismatch(format!("solve_spd needs square, got {}x{}", g.rows(), g.cols())));
    }
    if rhs.len() != n {
        return Err(TensorError::ShapeMismatch(format!("rhs length {} vs n {}", rhs.len(), n)));
    }
    // Lower-triangular factor, packed row-major.
    let mut l = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = g.get(i, j);
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(TensorError::NotPositiveDefinite { index: i, pivot: sum });
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    // L y = rhs, then Lᵀ x = y.
    let mut x = rhs.to_vec();
    for i in 0..n {
        for k in 0..i {
            x[i] -= l[i * n + k] * x[k];
        }
        x[i] /= l[i * n + i];
    }
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            x[i] -= l[k * n + i] * x[k];
        }
        x[i] /= l[i * n + i];
    }
    Ok(x)
}

/// Symmetric eigendecomposition by cyclic two-sided Jacobi.
/// Returns eigenvalues descending with matching eigenvector columns.
pub fn eigh(g: &DenseMatrix) -> Result<(Vec<f64>, DenseMatrix), TensorError> {
    let n = g.rows();
    if g.cols() != n {
        return Err(TensorError::ShapeMismatch(format!("eigh needs square, got {}x{}", g.rows(), g.cols())));
    }
    // Symmetrize defensively; callers pass Gram-style matrices.
    let mut a = DenseMatrix::from_fn(n, n, |i, j| 0.5 * (g.get(i, j) + g.get(j, i)));
    let mut v = DenseMatrix::identity(n);
    let scale = a.frob_norm().max(1e-300);
    let mut converged = n <= 1;
    for _ in 0..DEFAULT_JACOBI_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = 0usize;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq.abs() <= 1e-15 * scale {
                    continue;
                }
                let tau = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..n {
                    let aip = a.get(i, p);
                    let aiq = a.get(i, q);
                    a.set(i, p, c * aip - s * aiq);
                    a.set(i, q, s * aip + c * aiq);
                }
                for j in 0..n {
                    let apj = a.get(p, j);
                    let aqj = a.get(q, j);
                    a.set(p, j, c * apj - s * aqj);
                    a.set(q, j, s * apj + c * aqj);
                }
                for i in 0..n {
                    let vip = v.get(i, p);
                    let viq = v.get(i, q);
                    v.set(i, p, c * vip - s * viq);
                    v.set(i, q, s * vip + c * viq);
                }
                rotated += 1;
            }
        }
        if rotated == 0 {
            converged = true;
        }
    }
    if !converged {
        return Err(TensorError::NoConvergence { sweeps: DEFAULT_JACOBI_SWEEPS });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(j, j).partial_cmp(&a.get(i, i)).unwrap().then(i.cmp(&j)));
    let vals: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
    let vecs = DenseMatrix::from_fn(n, n, |i, j| v.get(i, order[j]));
    Ok((vals, vecs))
}

/// Minimum-norm least-squares solve for symmetric PSD `g`:
/// eigenmodes below 1e-12 · λ_max are treated as exactly zero.
pub fn pinv_solve(g: &DenseMatrix, rhs: &[f64]) -> Result<Vec<f64>, TensorError> {
    let n = g.rows();
    if rhs.len() != n {
        return Err(TensorError::ShapeMismatch(format!("rhs length {} vs n {}", rhs.len(), n)));
    }
    let (vals, vecs) = eigh(g)?;
    let lmax = vals.first().copied().unwrap_or(0.0);
    let mut x = vec![0.0f64; n];
    if lmax <= 0.0 {
        return Ok(x);
    }
    let cutoff = 1e-12 * lmax;
    for (j, &lam) in vals.iter().enumerate() {
        if lam <= cutoff {
            continue;
        }
        let mut proj = 0.0;
        for i in 0..n {
            proj += vecs.get(i, j) * rhs[i];
        }
        let coef = proj / lam;
        for i in 0..n {
            x[i] += coef * vecs.get(i, j);
        }
    }
    Ok(x)
}

/// Spectral-norm estimate by power iteration on AᵀA with a fixed start vector.
pub fn op_norm_est(a: &DenseMatrix, max_iters: usize) -> f64 {
    let n = a.cols();
    if n == 0 || a.rows() == 0 {
        return 0.0;
    }
    let mut v: Vec<f64> = (0..n).map(|j| 1.0 / (1.0 + j as f64)).collect();
    normalize(&mut v);
    let mut sigma = 0.0f64;
    for _ in 0..max_iters.max(1) {
        let w = apply(a, &v);
        let s = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if s == 0.0 {
            return 0.0;
        }
        let mut next = apply_t(a, &w);
        normalize(&mut next);
        let rel = (s - sigma).abs() / s.max(1e-300);
        sigma = s;
        v = next;
        if rel < 1e-13 {
            break;
        }
    }
    sigma
}

fn apply(a: &DenseMatrix, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0f64; a.rows()];
    for i in 0..a.rows() {
        let row = a.row(i);
        let mut s = 0.0;
        for j in 0..a.cols() {
            s += row[j] * v[j];
        }
        out[i] = s;
    }
    out
}

fn apply_t(a: &DenseMatrix, w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0f64; a.cols()];
    for i in 0..a.rows() {
        let row = a.row(i);
        let wi = w[i];
        for j in 0..a.cols() {
            out[j] += row[j] * wi;
        }
    }
    out
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}
