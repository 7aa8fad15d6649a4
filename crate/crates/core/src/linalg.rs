//! Dense row-major matrices and the handful of kernels the optimizers need:
//! products, Gram means, Cholesky-based SPD inversion, the Kronecker
//! "sandwich" `Hg * V * Ha`, and symmetric eigenvalue extremes.
//!
//! Vectors are plain `Vec<f64>` / `&[f64]`.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{dim_err, Error, Result};

/// Pivots at or below this value are treated as a failed factorization.
const PIVOT_FLOOR: f64 = 1e-300;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::scaled_identity(n, 1.0)
    }

    pub fn scaled_identity(n: usize, value: f64) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = value;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(dim_err(
                "Matrix::from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input; meant
    /// for literals and tests.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    /// Column vector (n x 1).
    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col_to_vec(&self, j: usize) -> Vec<f64> {
        (0..self.rows)
            .map(|i| self.data[i * self.cols + j])
            .collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols))
            .map(|i| self[(i, i)])
            .collect()
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn scaled(&self, factor: f64) -> Matrix {
        let mut m = self.clone();
        m.scale(factor);
        m
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(dim_err(
                "add_scaled",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// Exponential moving average `self = beta * self + (1 - beta) * other`.
    pub fn decay_toward(&mut self, beta: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(dim_err(
                "decay_toward",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = beta * *a + (1.0 - beta) * b;
        }
        Ok(())
    }

    pub fn add_to_diagonal(&mut self, value: f64) {
        for i in 0..self.rows.min(self.cols) {
            self.data[i * self.cols + i] += value;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// `||self - other||_F / max(||other||_F, tiny)`.
    pub fn rel_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        let num: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        num / other.frobenius_norm().max(f64::MIN_POSITIVE)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// Replaces the matrix with `(M + M^T) / 2`.
    pub fn symmetrize(&mut self) {
        debug_assert!(self.is_square());
        let n = self.rows;
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (self.data[i * n + j] + self.data[j * n + i]);
                self.data[i * n + j] = v;
                self.data[j * n + i] = v;
            }
        }
    }

    /// Copies the upper triangle onto the lower one.
    pub(crate) fn mirror_upper(&mut self) {
        let n = self.rows;
        for i in 0..n {
            for j in (i + 1)..n {
                self.data[j * n + i] = self.data[i * n + j];
            }
        }
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols, "matvec dimension");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// Column means (rows are samples).
    pub fn column_means(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        let inv = 1.0 / self.rows.max(1) as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        out
    }

    /// Column-stacking vectorization.
    pub fn vec_columns(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                out.push(self[(i, j)]);
            }
        }
        out
    }

    pub fn from_vec_columns(rows: usize, cols: usize, v: &[f64]) -> Matrix {
        assert_eq!(v.len(), rows * cols);
        Matrix::from_fn(rows, cols, |i, j| v[j * rows + i])
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Strided view used to hand sub-blocks to the GEMM kernel without copying.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn of(m: &'a Matrix, transpose: bool) -> Self {
        if transpose {
            View {
                data: &m.data,
                rows: m.cols,
                cols: m.rows,
                rs: 1,
                cs: m.cols,
            }
        } else {
            View {
                data: &m.data,
                rows: m.rows,
                cols: m.cols,
                rs: m.cols,
                cs: 1,
            }
        }
    }

    /// The first `cols` columns of a row-major matrix.
    pub fn leading_cols(m: &'a Matrix, cols: usize) -> Self {
        assert!(cols <= m.cols);
        View {
            data: &m.data,
            rows: m.rows,
            cols,
            rs: m.cols,
            cs: 1,
        }
    }

    fn max_offset(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
        }
    }
}

/// `c = alpha * a * b + beta * c` on strided views.
pub(crate) fn gemm_view(alpha: f64, a: View<'_>, b: View<'_>, beta: f64, c: &mut Matrix) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!((c.rows, c.cols), (a.rows, b.cols), "gemm output shape");
    if c.data.is_empty() {
        return;
    }
    if a.cols == 0 {
        c.scale(beta);
        return;
    }
    assert!(a.max_offset() < a.data.len() && b.max_offset() < b.data.len());
    let (m, k, n) = (a.rows, a.cols, b.cols);
    // SAFETY: the asserts above bound every element the kernel touches
    // inside the borrowed slices, and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// General matrix product with optional transposition of either operand.
pub fn gemm(a: &Matrix, b: &Matrix, transpose_a: bool, transpose_b: bool) -> Result<Matrix> {
    let va = View::of(a, transpose_a);
    let vb = View::of(b, transpose_b);
    if va.cols != vb.rows {
        return Err(dim_err(
            "gemm",
            format!("{}x{} times {}x{}", va.rows, va.cols, vb.rows, vb.cols),
        ));
    }
    let mut c = Matrix::zeros(va.rows, vb.cols);
    gemm_view(1.0, va, vb, 0.0, &mut c);
    Ok(c)
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    gemm(a, b, false, false)
}

/// Mean of `x_i x_i^T` over the given vectors.
pub fn batch_outer_mean(columns: &[Vec<f64>]) -> Result<Matrix> {
    let first = columns.first().ok_or(Error::EmptyBatch)?;
    let d = first.len();
    let mut stacked = Vec::with_capacity(columns.len() * d);
    for c in columns {
        if c.len() != d {
            return Err(dim_err(
                "batch_outer_mean",
                format!("vector of length {} among length {d}", c.len()),
            ));
        }
        stacked.extend_from_slice(c);
    }
    let x = Matrix::from_vec(columns.len(), d, stacked)?;
    gram_mean(&x)
}

/// `X^T X / rows` for a samples-by-features matrix, exactly symmetric.
pub fn gram_mean(x: &Matrix) -> Result<Matrix> {
    if x.rows == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut g = Matrix::zeros(x.cols, x.cols);
    gemm_view(
        1.0 / x.rows as f64,
        View::of(x, true),
        View::of(x, false),
        0.0,
        &mut g,
    );
    g.mirror_upper();
    Ok(g)
}

/// Lower Cholesky factor `L` with `A = L L^T`. Reads only the lower triangle.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(dim_err("cholesky", format!("{}x{}", a.rows, a.cols)));
    }
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let lj = &l.data[j * n..j * n + j];
        let pivot = a[(j, j)] - dot(lj, lj);
        if !pivot.is_finite() || pivot <= PIVOT_FLOOR {
            return Err(Error::NotPositiveDefinite {
                index: j,
                value: pivot,
            });
        }
        let ljj = pivot.sqrt();
        l.data[j * n + j] = ljj;
        for i in (j + 1)..n {
            let (head, tail) = l.data.split_at_mut(i * n);
            let lj = &head[j * n..j * n + j];
            let li = &tail[..j];
            tail[j] = (a[(i, j)] - dot(li, lj)) / ljj;
        }
    }
    Ok(l)
}

/// Inverse of a lower-triangular matrix with nonzero diagonal.
fn lower_triangular_inverse(l: &Matrix) -> Matrix {
    let n = l.rows;
    let mut x = Matrix::zeros(n, n);
    let mut row = vec![0.0; n];
    for i in 0..n {
        row.iter_mut().for_each(|v| *v = 0.0);
        row[i] = 1.0;
        for k in 0..i {
            let lik = l.data[i * n + k];
            if lik != 0.0 {
                axpy(-lik, &x.data[k * n..k * n + k + 1], &mut row[..=k]);
            }
        }
        let inv = 1.0 / l.data[i * n + i];
        for (dst, v) in x.data[i * n..i * n + i + 1].iter_mut().zip(&row[..=i]) {
            *dst = v * inv;
        }
    }
    x
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(a: &Matrix) -> Result<Matrix> {
    let l = cholesky(a)?;
    let linv = lower_triangular_inverse(&l);
    let mut h = Matrix::zeros(a.rows, a.rows);
    gemm_view(
        1.0,
        View::of(&linv, true),
        View::of(&linv, false),
        0.0,
        &mut h,
    );
    h.mirror_upper();
    if !h.is_finite() {
        return Err(Error::NotPositiveDefinite {
            index: 0,
            value: f64::NAN,
        });
    }
    Ok(h)
}

/// `Hg * V * Ha`, i.e. `(Ha ⊗ Hg) vec(V)` for symmetric factors.
pub fn kron_sandwich(hg: &Matrix, v: &Matrix, ha: &Matrix) -> Result<Matrix> {
    if !hg.is_square() || !ha.is_square() || hg.rows != v.rows || ha.rows != v.cols {
        return Err(dim_err(
            "kron_sandwich",
            format!(
                "Hg {:?}, V {:?}, Ha {:?}",
                hg.shape(),
                v.shape(),
                ha.shape()
            ),
        ));
    }
    let left = matmul(hg, v)?;
    matmul(&left, ha)
}

/// Explicit Kronecker product `A ⊗ B`.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    let (p, q) = b.shape();
    Matrix::from_fn(a.rows * p, a.cols * q, |i, j| {
        a[(i / p, j / q)] * b[(i % p, j % q)]
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extreme {
    Min,
    Max,
}

fn check_symmetric(a: &Matrix) -> Result<()> {
    if !a.is_square() {
        return Err(dim_err("symmetric eigensolve", format!("{:?}", a.shape())));
    }
    let asym = a.max_asymmetry();
    if asym > 1e-10 * a.max_abs().max(1.0) {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    Ok(())
}

/// All eigenvalues of a symmetric matrix in ascending order
/// (Householder tridiagonalization followed by implicit QL).
pub fn symmetric_eigenvalues(a: &Matrix) -> Result<Vec<f64>> {
    check_symmetric(a)?;
    let n = a.rows;
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut w = a.clone();
    w.symmetrize();
    let (mut d, mut e) = tridiagonalize(&mut w);
    tridiagonal_ql(&mut d, &mut e)?;
    d.sort_by(|x, y| x.total_cmp(y));
    Ok(d)
}

pub fn extreme_eigenvalue_estimate(a: &Matrix, which: Extreme) -> Result<f64> {
    let eig = symmetric_eigenvalues(a)?;
    let v = match which {
        Extreme::Min => eig.first(),
        Extreme::Max => eig.last(),
    };
    v.copied()
        .ok_or_else(|| dim_err("extreme_eigenvalue_estimate", "empty matrix"))
}

/// Reduces `a` in place; returns (diagonal, subdiagonal) with `e[i]` coupling
/// rows `i-1` and `i`.
fn tridiagonalize(a: &mut Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = a.rows;
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    for i in (1..n).rev() {
        let l = i - 1;
        let mut h = 0.0;
        if l > 0 {
            let scale: f64 = (0..=l).map(|k| a[(i, k)].abs()).sum();
            if scale == 0.0 {
                e[i] = a[(i, l)];
            } else {
                for k in 0..=l {
                    a[(i, k)] /= scale;
                    h += a[(i, k)] * a[(i, k)];
                }
                let f = a[(i, l)];
                let g = if f >= 0.0 { -h.sqrt() } else { h.sqrt() };
                e[i] = scale * g;
                h -= f * g;
                a[(i, l)] = f - g;
                let mut f = 0.0;
                for j in 0..=l {
                    let mut g = 0.0;
                    for k in 0..=j {
                        g += a[(j, k)] * a[(i, k)];
                    }
                    for k in (j + 1)..=l {
                        g += a[(k, j)] * a[(i, k)];
                    }
                    e[j] = g / h;
                    f += e[j] * a[(i, j)];
                }
                let hh = f / (h + h);
                for j in 0..=l {
                    let f = a[(i, j)];
                    let g = e[j] - hh * f;
                    e[j] = g;
                    for k in 0..=j {
                        a[(j, k)] -= f * e[k] + g * a[(i, k)];
                    }
                }
            }
        } else {
            e[i] = a[(i, l)];
        }
        d[i] = h;
    }
    e[0] = 0.0;
    for (i, di) in d.iter_mut().enumerate() {
        *di = a[(i, i)];
    }
    (d, e)
}

fn tridiagonal_ql(d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 100 {
                return Err(Error::Format("tridiagonal QL failed to converge".into()));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut deflated = false;
            let mut i = m;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    deflated = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
            }
            if deflated {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> Matrix {
        let m = random(rng, d, d);
        let mut a = gemm(&m, &m, true, false).unwrap();
        a.add_to_diagonal(1.0);
        a
    }

    fn nalgebra_eigs(a: &Matrix) -> Vec<f64> {
        let n = a.rows();
        let m = nalgebra::DMatrix::from_row_slice(n, n, a.as_slice());
        let mut v: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
        v.sort_by(|x, y| x.total_cmp(y));
        v
    }

    #[test]
    fn gemm_identity_and_hand_values() {
        let m = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(gemm(&Matrix::identity(2), &m, false, false).unwrap(), m);
        let ones = Matrix::from_rows(&[&[1.0], &[1.0]]);
        let p = gemm(&m, &ones, false, false).unwrap();
        assert_eq!(p, Matrix::from_rows(&[&[3.0], &[7.0]]));
    }

    #[test]
    fn gemm_transpose_flags_match_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 3, 2);
        let fast = gemm(&a, &b, true, false).unwrap();
        let slow = gemm(&a.transpose(), &b, false, false).unwrap();
        assert!(fast.max_abs_diff(&slow) < 1e-15);
        let c = random(&mut rng, 2, 4);
        let fast = gemm(&a, &c, false, true).unwrap();
        let slow = gemm(&a, &c.transpose(), false, false).unwrap();
        assert!(fast.max_abs_diff(&slow) < 1e-15);
    }

    #[test]
    fn gemm_dimension_error() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(
            gemm(&a, &a, false, false),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn outer_mean_cases() {
        let m = batch_outer_mean(&[vec![1.0, 0.0]]).unwrap();
        assert_eq!(m, Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]));
        let m = batch_outer_mean(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(m, Matrix::from_rows(&[&[0.5, 0.0], &[0.0, 0.5]]));
        assert!(matches!(batch_outer_mean(&[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn outer_mean_exactly_symmetric_and_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cols: Vec<Vec<f64>> = (0..37)
            .map(|_| (0..11).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let m = batch_outer_mean(&cols).unwrap();
        assert_eq!(m.max_asymmetry(), 0.0);
        assert!(nalgebra_eigs(&m)[0] > -1e-10);
    }

    #[test]
    fn spd_inverse_small_cases() {
        assert_eq!(
            spd_inverse(&Matrix::identity(3)).unwrap(),
            Matrix::identity(3)
        );
        let h = spd_inverse(&Matrix::diag(&[2.0, 1.0])).unwrap();
        assert!(h.max_abs_diff(&Matrix::diag(&[0.5, 1.0])) <= 1e-15);
    }

    #[test]
    fn spd_inverse_residual_and_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_spd(&mut rng, 20);
        let h = spd_inverse(&a).unwrap();
        let r = matmul(&a, &h).unwrap();
        assert!(r.max_abs_diff(&Matrix::identity(20)) <= 1e-8);
        let back = spd_inverse(&h).unwrap();
        assert!(back.rel_diff(&a) <= 1e-6);
    }

    #[test]
    fn spd_inverse_rejects_indefinite() {
        let a = Matrix::diag(&[1.0, -1.0]);
        assert!(matches!(
            spd_inverse(&a),
            Err(Error::NotPositiveDefinite { index: 1, .. })
        ));
        let a = Matrix::diag(&[1.0, f64::NAN]);
        assert!(spd_inverse(&a).is_err());
    }

    #[test]
    fn kron_sandwich_identity_scalar_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v = random(&mut rng, 3, 4);
        let out = kron_sandwich(&Matrix::identity(3), &v, &Matrix::identity(4)).unwrap();
        assert_eq!(out, v);
        let out = kron_sandwich(
            &Matrix::scaled_identity(3, 2.0),
            &v,
            &Matrix::scaled_identity(4, 3.0),
        )
        .unwrap();
        assert!(out.max_abs_diff(&v.scaled(6.0)) < 1e-15);

        let hg = random_spd(&mut rng, 3);
        let ha = random_spd(&mut rng, 4);
        let fast = kron_sandwich(&hg, &v, &ha).unwrap().vec_columns();
        let big = kron(&ha, &hg);
        let slow = big.matvec(&v.vec_columns());
        let err = fast
            .iter()
            .zip(&slow)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err / norm2(&slow) <= 1e-12);
    }

    #[test]
    fn kron_sandwich_dimension_error() {
        let r = kron_sandwich(
            &Matrix::identity(2),
            &Matrix::zeros(3, 3),
            &Matrix::identity(3),
        );
        assert!(matches!(r, Err(Error::Dimension { .. })));
    }

    #[test]
    fn eigen_extremes_diag() {
        let a = Matrix::diag(&[1.0, 2.0, 3.0]);
        assert_eq!(extreme_eigenvalue_estimate(&a, Extreme::Max).unwrap(), 3.0);
        assert_eq!(extreme_eigenvalue_estimate(&a, Extreme::Min).unwrap(), 1.0);
    }

    #[test]
    fn eigen_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for d in [1, 2, 5, 33, 120] {
            let a = random_spd(&mut rng, d);
            let ours = symmetric_eigenvalues(&a).unwrap();
            let oracle = nalgebra_eigs(&a);
            for (x, y) in ours.iter().zip(&oracle) {
                assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn eigen_rejects_nonsymmetric() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[0.0, 1.0]]);
        assert!(matches!(
            extreme_eigenvalue_estimate(&a, Extreme::Max),
            Err(Error::NotSymmetric { .. })
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn sandwich_matches_kron(seed in any::<u64>(), dout in 1usize..5, din in 1usize..5) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let v = random(&mut rng, dout, din);
                let hg = random_spd(&mut rng, dout);
                let ha = random_spd(&mut rng, din);
                let fast = kron_sandwich(&hg, &v, &ha).unwrap().vec_columns();
                let slow = kron(&ha, &hg).matvec(&v.vec_columns());
                let err: f64 = fast.iter().zip(&slow).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                prop_assert!(err <= 1e-12 * norm2(&slow).max(1e-300));
            }

            #[test]
            fn inverse_involution(seed in any::<u64>(), d in 1usize..12) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = random_spd(&mut rng, d);
                let back = spd_inverse(&spd_inverse(&a).unwrap()).unwrap();
                prop_assert!(back.rel_diff(&a) <= 1e-6);
            }
        }
    }
}
