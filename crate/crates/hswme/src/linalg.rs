//! Self-contained dense linear algebra kernels.
//!
//! Everything here is deterministic: no randomness, fixed iteration orders,
//! so repeated calls on identical inputs produce bit-identical results. The
//! kernels are sized for this crate's needs (matrices up to a few hundred
//! rows/columns on the short side), not for general-purpose use.

use thiserror::Error;

/// Relative pivot threshold below which a matrix is reported singular.
const PIVOT_TOL: f64 = 1e-14;

/// Relative column-norm threshold below which a QR column counts as
/// rank-deficient and is replaced by a completion vector.
const QR_RANK_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("qr requires rows >= cols, got {rows}x{cols}")]
    NotTall { rows: usize, cols: usize },
    #[error("singular matrix in {context} (pivot {pivot:.3e} below threshold)")]
    Singular { context: &'static str, pivot: f64 },
    #[error("rank {r} out of range 1..={max}")]
    RankOutOfRange { r: usize, max: usize },
    #[error("dimension mismatch in {context}: {detail}")]
    DimensionMismatch {
        context: &'static str,
        detail: String,
    },
}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (k, &aik) in a_row.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let b_row = other.row(k);
                for j in 0..b_row.len() {
                    out_row[j] += aik * b_row[j];
                }
            }
        }
        out
    }

    /// y = self * x for a column vector x.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "matvec dimension mismatch");
        (0..self.rows)
            .map(|i| dot(self.row(i), x))
            .collect()
    }

    pub fn scale(&self, s: f64) -> DenseMatrix {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            *v *= s;
        }
        out
    }

    pub fn add(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut out = self.clone();
        for (v, w) in out.data.iter_mut().zip(other.data.iter()) {
            *v += *w;
        }
        out
    }

    pub fn sub(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut out = self.clone();
        for (v, w) in out.data.iter_mut().zip(other.data.iter()) {
            *v -= *w;
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// max |self - other| over all entries.
    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// LU factorization with partial pivoting, reusable for several right-hand sides.
#[derive(Debug, Clone)]
pub struct LuFactors {
    n: usize,
    lu: Vec<f64>,
    piv: Vec<usize>,
}

impl LuFactors {
    pub fn new(a: &DenseMatrix) -> Result<Self, LinalgError> {
        assert_eq!(a.rows(), a.cols(), "LU needs a square matrix");
        let n = a.rows();
        let mut lu = a.data().to_vec();
        let mut piv = vec![0usize; n];
        let scale = a.max_abs();
        factor_in_place(&mut lu, n, &mut piv, scale, "solve_dense")?;
        Ok(Self { n, lu, piv })
    }

    /// Factor from a raw row-major buffer (avoids building a DenseMatrix).
    pub fn from_raw(buf: &[f64], n: usize, context: &'static str) -> Result<Self, LinalgError> {
        let mut lu = buf.to_vec();
        let mut piv = vec![0usize; n];
        let scale = lu.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        factor_in_place(&mut lu, n, &mut piv, scale, context)?;
        Ok(Self { n, lu, piv })
    }

    pub fn solve_vec(&self, x: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        let n = self.n;
        for k in 0..n {
            x.swap(k, self.piv[k]);
            let xk = x[k];
            if xk != 0.0 {
                for i in k + 1..n {
                    x[i] -= self.lu[i * n + k] * xk;
                }
            }
        }
        for k in (0..n).rev() {
            x[k] /= self.lu[k * n + k];
            let xk = x[k];
            if xk != 0.0 {
                for i in 0..k {
                    x[i] -= self.lu[i * n + k] * xk;
                }
            }
        }
    }

    pub fn solve_matrix(&self, b: &DenseMatrix) -> DenseMatrix {
        assert_eq!(b.rows(), self.n);
        let mut out = b.clone();
        let mut col = vec![0.0; self.n];
        for j in 0..b.cols() {
            for i in 0..self.n {
                col[i] = b[(i, j)];
            }
            self.solve_vec(&mut col);
            for i in 0..self.n {
                out[(i, j)] = col[i];
            }
        }
        out
    }
}

fn factor_in_place(
    lu: &mut [f64],
    n: usize,
    piv: &mut [usize],
    scale: f64,
    context: &'static str,
) -> Result<(), LinalgError> {
    let threshold = PIVOT_TOL * scale.max(f64::MIN_POSITIVE);
    for k in 0..n {
        let mut p = k;
        let mut pmax = lu[k * n + k].abs();
        for i in k + 1..n {
            let v = lu[i * n + k].abs();
            if v > pmax {
                pmax = v;
                p = i;
            }
        }
        if !(pmax > threshold) {
            return Err(LinalgError::Singular {
                context,
                pivot: pmax,
            });
        }
        piv[k] = p;
        if p != k {
            for j in 0..n {
                lu.swap(k * n + j, p * n + j);
            }
        }
        let pivot = lu[k * n + k];
        for i in k + 1..n {
            let l = lu[i * n + k] / pivot;
            lu[i * n + k] = l;
            if l != 0.0 {
                let (upper, lower) = lu.split_at_mut(i * n);
                let row_k = &upper[k * n + k + 1..k * n + n];
                let row_i = &mut lower[k + 1..n];
                for j in 0..row_k.len() {
                    row_i[j] -= l * row_k[j];
                }
            }
        }
    }
    Ok(())
}

/// Solve A X = B for square nonsingular A by partial-pivot elimination.
pub fn solve_dense(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    if a.rows() != a.cols() || a.rows() != b.rows() {
        return Err(LinalgError::DimensionMismatch {
            context: "solve_dense",
            detail: format!(
                "A is {}x{}, B is {}x{}",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            ),
        });
    }
    Ok(LuFactors::new(a)?.solve_matrix(b))
}

/// Thin QR factorization A = Q R with orthonormal Q (m x k) and
/// upper-triangular R (k x k) with non-negative diagonal.
#[derive(Debug, Clone)]
pub struct QrResult {
    pub q: DenseMatrix,
    pub r: DenseMatrix,
}

/// Modified Gram-Schmidt with a second orthogonalization pass per column.
///
/// Columns whose residual norm falls below `1e-12 * max|A|` are treated as
/// rank-deficient: their R diagonal is set to zero and the Q column is
/// replaced by a deterministic completion vector (the first canonical basis
/// vector with a non-negligible component outside the span of the accepted
/// columns, orthonormalized against them).
pub fn qr(a: &DenseMatrix) -> Result<QrResult, LinalgError> {
    let (m, k) = (a.rows(), a.cols());
    if m < k {
        return Err(LinalgError::NotTall { rows: m, cols: k });
    }
    let tol = QR_RANK_TOL * a.max_abs();
    let mut q = DenseMatrix::zeros(m, k);
    let mut r = DenseMatrix::zeros(k, k);
    let mut v = vec![0.0; m];
    for j in 0..k {
        for i in 0..m {
            v[i] = a[(i, j)];
        }
        for _pass in 0..2 {
            for i in 0..j {
                let qi = q.col(i);
                let c = dot(&qi, &v);
                r[(i, j)] += c;
                for (vi, qv) in v.iter_mut().zip(qi.iter()) {
                    *vi -= c * qv;
                }
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > tol {
            r[(j, j)] = norm;
            for i in 0..m {
                q[(i, j)] = v[i] / norm;
            }
        } else {
            r[(j, j)] = 0.0;
            let comp = completion_column(&q, j, m);
            for i in 0..m {
                q[(i, j)] = comp[i];
            }
        }
    }
    Ok(QrResult { q, r })
}

/// First canonical basis vector with a usable component orthogonal to the
/// columns 0..j of q, orthonormalized against them. The sum of squared
/// residual norms over all canonical vectors is m - j >= 1, so a candidate
/// with residual norm >= 1e-3 always exists for m below a million.
fn completion_column(q: &DenseMatrix, j: usize, m: usize) -> Vec<f64> {
    let mut v = vec![0.0; m];
    for t in 0..m {
        v.iter_mut().for_each(|x| *x = 0.0);
        v[t] = 1.0;
        for _pass in 0..2 {
            for i in 0..j {
                let qi = q.col(i);
                let c = dot(&qi, &v);
                for (vi, qv) in v.iter_mut().zip(qi.iter()) {
                    *vi -= c * qv;
                }
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm >= 1e-3 {
            for x in v.iter_mut() {
                *x /= norm;
            }
            return v;
        }
    }
    unreachable!("orthonormal completion must exist for m > j");
}

/// Truncated singular value decomposition A ~ U diag(sigma) Vt.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: DenseMatrix,
    pub sigma: Vec<f64>,
    pub vt: DenseMatrix,
}

/// Rank-r truncated SVD of a (typically tall) matrix, computed through a
/// symmetric eigendecomposition of the Gram matrix A^T A. Adequate while the
/// inner dimension stays small (here: the moment count).
pub fn truncated_svd(a: &DenseMatrix, r: usize) -> Result<SvdResult, LinalgError> {
    let (m, n) = (a.rows(), a.cols());
    let max_rank = m.min(n);
    if r < 1 || r > max_rank {
        return Err(LinalgError::RankOutOfRange { r, max: max_rank });
    }
    // Gram matrix, accumulated row by row so a streaming caller gets
    // bit-identical results.
    let mut gram = DenseMatrix::zeros(n, n);
    for i in 0..m {
        let row = a.row(i);
        for p in 0..n {
            let rp = row[p];
            if rp == 0.0 {
                continue;
            }
            for q in 0..n {
                gram[(p, q)] += rp * row[q];
            }
        }
    }
    let (eigvals, eigvecs) = jacobi_eigh(&gram);
    svd_from_gram_eig(a, &eigvals, &eigvecs, r)
}

/// Assemble the truncated SVD from the eigendecomposition of A^T A.
/// Exposed so the POD offline phase can reuse a Gram matrix accumulated
/// across snapshot batches without materializing the stacked matrix.
pub fn svd_from_gram_eig(
    a: &DenseMatrix,
    eigvals: &[f64],
    eigvecs: &DenseMatrix,
    r: usize,
) -> Result<SvdResult, LinalgError> {
    let (m, n) = (a.rows(), a.cols());
    let mut vt = DenseMatrix::zeros(r, n);
    let mut sigma = vec![0.0; r];
    let mut u = DenseMatrix::zeros(m, r);
    let sigma_max = eigvals.first().copied().unwrap_or(0.0).max(0.0).sqrt();
    let tol = 1e-12 * sigma_max;
    for i in 0..r {
        // Sign convention: largest-magnitude component of each right
        // singular vector is positive.
        let mut v = eigvecs.col(i);
        let mut idx = 0;
        for (t, val) in v.iter().enumerate() {
            if val.abs() > v[idx].abs() {
                idx = t;
            }
        }
        if v[idx] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        let b = a.matvec(&v);
        let norm = dot(&b, &b).sqrt();
        sigma[i] = norm;
        for j in 0..n {
            vt[(i, j)] = v[j];
        }
        if norm > tol {
            for row in 0..m {
                u[(row, i)] = b[row] / norm;
            }
        }
        // Deficient or degraded left vectors are cleaned up below.
    }
    // One Gram-Schmidt sweep restores orthonormality of U when singular
    // values are clustered or vanish; zero columns get completion vectors.
    let cleaned = reorthonormalize_columns(&u);
    Ok(SvdResult {
        u: cleaned,
        sigma,
        vt,
    })
}

fn reorthonormalize_columns(u: &DenseMatrix) -> DenseMatrix {
    let (m, k) = (u.rows(), u.cols());
    let mut q = DenseMatrix::zeros(m, k);
    let mut v = vec![0.0; m];
    for j in 0..k {
        for i in 0..m {
            v[i] = u[(i, j)];
        }
        for _pass in 0..2 {
            for i in 0..j {
                let qi = q.col(i);
                let c = dot(&qi, &v);
                for (vi, qv) in v.iter_mut().zip(qi.iter()) {
                    *vi -= c * qv;
                }
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-8 {
            for i in 0..m {
                q[(i, j)] = v[i] / norm;
            }
        } else {
            let comp = completion_column(&q, j, m);
            for i in 0..m {
                q[(i, j)] = comp[i];
            }
        }
    }
    q
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order with matching eigenvector columns.
pub fn jacobi_eigh(a: &DenseMatrix) -> (Vec<f64>, DenseMatrix) {
    assert_eq!(a.rows(), a.cols(), "jacobi_eigh needs a square matrix");
    let n = a.rows();
    let mut m = a.clone();
    let mut v = DenseMatrix::identity(n);
    if n <= 1 {
        let vals = if n == 1 { vec![m[(0, 0)]] } else { vec![] };
        return (vals, v);
    }
    let fro = m.frobenius_norm();
    let stop = 1e-15 * fro.max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0_f64;
        for p in 0..n {
            for q in p + 1..n {
                off += m[(p, q)] * m[(p, q)];
            }
        }
        if off.sqrt() <= stop {
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq.abs() <= stop / (n as f64) {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m[(j, j)]
            .partial_cmp(&m[(i, i)])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let vals: Vec<f64> = order.iter().map(|&i| m[(i, i)]).collect();
    let vecs = DenseMatrix::from_fn(n, n, |i, j| v[(i, order[j])]);
    (vals, vecs)
}

/// Solve the generalized Sylvester-type system
/// `L - dt*A1*L*H1 - dt*A2*L*H2 = RHS` for L (same shape as RHS)
/// by assembling the Kronecker-product operator and eliminating densely.
///
/// The assembled system has (rows*cols)^2 entries, so the cost is cubic in
/// `rows*cols`; this matches the expected cost profile of the implicit
/// low-rank friction update that it serves.
pub fn solve_kron(
    a1: &DenseMatrix,
    h1: &DenseMatrix,
    a2: &DenseMatrix,
    h2: &DenseMatrix,
    dt: f64,
    rhs: &DenseMatrix,
) -> Result<DenseMatrix, LinalgError> {
    let (m, n) = (rhs.rows(), rhs.cols());
    let square = |mat: &DenseMatrix, dim: usize, name: &str| -> Result<(), LinalgError> {
        if mat.rows() != dim || mat.cols() != dim {
            return Err(LinalgError::DimensionMismatch {
                context: "solve_kron",
                detail: format!("{name} is {}x{}, expected {dim}x{dim}", mat.rows(), mat.cols()),
            });
        }
        Ok(())
    };
    square(a1, m, "A1")?;
    square(a2, m, "A2")?;
    square(h1, n, "H1")?;
    square(h2, n, "H2")?;

    let dim = m * n;
    // Unknown L[k][l] maps to index l*m + k (column-major vectorization).
    let mut big = DenseMatrix::zeros(dim, dim);
    for i in 0..m {
        for j in 0..n {
            let row = j * m + i;
            for k in 0..m {
                let a1ik = a1[(i, k)];
                let a2ik = a2[(i, k)];
                for l in 0..n {
                    let col = l * m + k;
                    let mut val = -dt * (a1ik * h1[(l, j)] + a2ik * h2[(l, j)]);
                    if row == col {
                        val += 1.0;
                    }
                    big[(row, col)] = val;
                }
            }
        }
    }
    let mut vec_rhs = vec![0.0; dim];
    for k in 0..m {
        for l in 0..n {
            vec_rhs[l * m + k] = rhs[(k, l)];
        }
    }
    let lu = LuFactors::from_raw(big.data(), dim, "solve_kron")?;
    lu.solve_vec(&mut vec_rhs);
    let mut out = DenseMatrix::zeros(m, n);
    for k in 0..m {
        for l in 0..n {
            out[(k, l)] = vec_rhs[l * m + k];
        }
    }
    Ok(out)
}
