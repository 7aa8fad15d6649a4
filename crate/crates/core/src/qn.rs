//! Quasi-Newton update kernels.
//!
//! Everything here works on inverse-Hessian approximations `H`. Dense `H`
//! is updated with the BFGS (or general Broyden-family) formula; the
//! limited-memory variant keeps `(s, y)` pairs and applies `H` through the
//! compact representation `H = I + [S Y] M [S Y]^T`, so applying it to a
//! `d x n` block costs two matrix-matrix products. Pairs are conditioned by
//! Powell damping before they reach either form.

use std::collections::VecDeque;

use crate::error::{dim_err, Error, Result};
use crate::linalg::{axpy, dot, gemm_view, Matrix, View};

/// Anything that can apply an inverse-Hessian approximation to a vector.
pub trait InverseOperator {
    fn dim(&self) -> usize;
    fn apply_vec(&self, v: &[f64]) -> Vec<f64>;
}

impl InverseOperator for Matrix {
    fn dim(&self) -> usize {
        self.rows()
    }

    fn apply_vec(&self, v: &[f64]) -> Vec<f64> {
        self.matvec(v)
    }
}

/// A damped `(s, y)` pair with the Powell interpolation weights that
/// produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvaturePair {
    pub s: Vec<f64>,
    pub y: Vec<f64>,
    pub theta1: f64,
    pub theta2: f64,
    pub skipped: bool,
}

impl CurvaturePair {
    pub fn undamped(s: Vec<f64>, y: Vec<f64>) -> Self {
        Self {
            s,
            y,
            theta1: 1.0,
            theta2: 1.0,
            skipped: false,
        }
    }

    pub fn sy(&self) -> f64 {
        dot(&self.s, &self.y)
    }
}

fn check_pair(op: &'static str, h_dim: usize, s: &[f64], y: &[f64]) -> Result<()> {
    if s.len() != y.len() || s.len() != h_dim {
        return Err(dim_err(
            op,
            format!("s {}, y {}, H {h_dim}", s.len(), y.len()),
        ));
    }
    Ok(())
}

/// BFGS update of an inverse Hessian approximation:
/// `H+ = (I - ρ s y^T) H (I - ρ y s^T) + ρ s s^T`, `ρ = 1 / s^T y`.
pub fn bfgs_inverse_update(h: &Matrix, s: &[f64], y: &[f64]) -> Result<Matrix> {
    let mut out = h.clone();
    bfgs_inverse_update_in_place(&mut out, s, y)?;
    Ok(out)
}

/// In-place form of [`bfgs_inverse_update`], `O(d²)`.
pub fn bfgs_inverse_update_in_place(h: &mut Matrix, s: &[f64], y: &[f64]) -> Result<()> {
    check_pair("bfgs_inverse_update", h.rows(), s, y)?;
    let sy = dot(s, y);
    if !(sy > 0.0) || !sy.is_finite() {
        return Err(Error::CurvatureCondition { sy });
    }
    let rho = 1.0 / sy;
    let hy = h.matvec(y);
    let yhy = dot(y, &hy);
    // H+ = H - ρ (s (Hy)^T + (Hy) s^T) + (ρ + ρ² y^T H y) s s^T
    let coef = rho + rho * rho * yhy;
    let n = h.rows();
    for i in 0..n {
        let (si, hyi) = (s[i], hy[i]);
        let row = h.row_mut(i);
        for j in 0..n {
            row[j] += -rho * (si * hy[j] + hyi * s[j]) + coef * si * s[j];
        }
    }
    h.symmetrize();
    Ok(())
}

/// Broyden-family update
/// `H+ = H - σ Hy (Hy)^T + ρ s s^T + φ (y^T H y) h h^T` with
/// `h = ρ s - σ H y`. `φ = 1` is BFGS, `φ = 0` is DFP.
pub fn broyden_update(h: &Matrix, s: &[f64], y: &[f64], phi: f64) -> Result<Matrix> {
    check_pair("broyden_update", h.rows(), s, y)?;
    let sy = dot(s, y);
    let hy = h.matvec(y);
    let yhy = dot(y, &hy);
    if !(sy > 0.0) || !sy.is_finite() {
        return Err(Error::CurvatureCondition { sy });
    }
    if !(yhy > 0.0) || !yhy.is_finite() {
        return Err(Error::CurvatureCondition { sy: yhy });
    }
    let rho = 1.0 / sy;
    let sigma = 1.0 / yhy;
    let hv: Vec<f64> = s
        .iter()
        .zip(&hy)
        .map(|(si, hyi)| rho * si - sigma * hyi)
        .collect();
    let n = h.rows();
    let mut out = h.clone();
    for i in 0..n {
        let row = out.row_mut(i);
        for j in 0..n {
            row[j] += -sigma * hy[i] * hy[j] + rho * s[i] * s[j] + phi * yhy * hv[i] * hv[j];
        }
    }
    out.symmetrize();
    Ok(out)
}

/// `(H^{-1} + c a a^T)^{-1}` via Sherman–Morrison:
/// `H - H a (1/c + a^T H a)^{-1} a^T H`.
pub fn sherman_morrison_rank1_inverse(h: &Matrix, a: &[f64], c: f64) -> Result<Matrix> {
    if a.len() != h.rows() || !h.is_square() {
        return Err(dim_err(
            "sherman_morrison_rank1_inverse",
            format!("a {} vs H {:?}", a.len(), h.shape()),
        ));
    }
    let ha = h.matvec(a);
    let denom = 1.0 / c + dot(a, &ha);
    let mut out = h.clone();
    let n = h.rows();
    for i in 0..n {
        let row = out.row_mut(i);
        for j in 0..n {
            row[j] -= ha[i] * ha[j] / denom;
        }
    }
    out.symmetrize();
    if !out.is_finite() {
        return Err(Error::CurvatureCondition { sy: denom });
    }
    Ok(out)
}

/// Powell damping on `H`: returns `(s̃, θ₁)` with `s̃^T y >= μ₁ y^T H y`.
pub fn powell_damp_h<H: InverseOperator + ?Sized>(
    s: &[f64],
    y: &[f64],
    h: &H,
    mu1: f64,
) -> Result<(Vec<f64>, f64)> {
    check_pair("powell_damp_h", h.dim(), s, y)?;
    if y.iter().all(|&v| v == 0.0) {
        return Err(Error::DegeneratePair("y = 0"));
    }
    let hy = h.apply_vec(y);
    let yhy = dot(y, &hy);
    let sy = dot(s, y);
    if sy >= mu1 * yhy {
        return Ok((s.to_vec(), 1.0));
    }
    let theta = (1.0 - mu1) * yhy / (yhy - sy);
    let s_tilde = s
        .iter()
        .zip(&hy)
        .map(|(si, hyi)| theta * si + (1.0 - theta) * hyi)
        .collect();
    Ok((s_tilde, theta))
}

/// Powell damping with `B = I`: returns `(ỹ, θ₂)` with `s̃^T ỹ >= μ₂ s̃^T s̃`.
pub fn powell_damp_identity(s_tilde: &[f64], y: &[f64], mu2: f64) -> Result<(Vec<f64>, f64)> {
    if s_tilde.len() != y.len() {
        return Err(dim_err(
            "powell_damp_identity",
            format!("s {}, y {}", s_tilde.len(), y.len()),
        ));
    }
    if s_tilde.iter().all(|&v| v == 0.0) {
        return Err(Error::DegeneratePair("s = 0"));
    }
    let ss = dot(s_tilde, s_tilde);
    let sy = dot(s_tilde, y);
    if sy >= mu2 * ss {
        return Ok((y.to_vec(), 1.0));
    }
    let theta = (1.0 - mu2) * ss / (ss - sy);
    let y_tilde = y
        .iter()
        .zip(s_tilde)
        .map(|(yi, si)| theta * yi + (1.0 - theta) * si)
        .collect();
    Ok((y_tilde, theta))
}

/// Powell's original damping on `B`: `ỹ = θ y + (1 - θ) B s` with
/// `s^T ỹ >= μ s^T B s`.
pub fn powell_damp_b(s: &[f64], y: &[f64], b: &Matrix, mu: f64) -> Result<Vec<f64>> {
    check_pair("powell_damp_b", b.rows(), s, y)?;
    let bs = b.matvec(s);
    let sbs = dot(s, &bs);
    let sy = dot(s, y);
    if sy >= mu * sbs {
        return Ok(y.to_vec());
    }
    let theta = (1.0 - mu) * sbs / (sbs - sy);
    Ok(y.iter()
        .zip(&bs)
        .map(|(yi, bsi)| theta * yi + (1.0 - theta) * bsi)
        .collect())
}

/// Double damping: Powell on `H` with `μ₁`, then Powell with `B = I` with `μ₂`.
pub fn double_damp<H: InverseOperator + ?Sized>(
    s: &[f64],
    y: &[f64],
    h: &H,
    mu1: f64,
    mu2: f64,
) -> Result<CurvaturePair> {
    let (s_tilde, theta1) = powell_damp_h(s, y, h, mu1)?;
    let (y_tilde, theta2) = powell_damp_identity(&s_tilde, y, mu2)?;
    Ok(CurvaturePair {
        s: s_tilde,
        y: y_tilde,
        theta1,
        theta2,
        skipped: false,
    })
}

/// `ỹ^T H ỹ / s̃^T ỹ` for a damped pair; `+∞` when `s̃^T ỹ <= 0`.
pub fn curvature_ratio<H: InverseOperator + ?Sized>(pair: &CurvaturePair, h: &H) -> f64 {
    let sy = pair.sy();
    if !(sy > 0.0) {
        return f64::INFINITY;
    }
    dot(&pair.y, &h.apply_vec(&pair.y)) / sy
}

/// True when `s̃^T ỹ >= μ₁ ỹ^T H ỹ`, i.e. the pair may be used without
/// breaking the norm-growth bound. A zero `ỹ` is always rejected.
pub fn dd_skip_predicate<H: InverseOperator + ?Sized>(
    pair: &CurvaturePair,
    h: &H,
    mu1: f64,
) -> bool {
    if pair.y.iter().all(|&v| v == 0.0) {
        return false;
    }
    let yhy = dot(&pair.y, &h.apply_vec(&pair.y));
    pair.sy() >= mu1 * yhy
}

/// Limited-memory BFGS pair storage with `H₀ = I`.
#[derive(Debug, Clone)]
pub struct LbfgsBuffer {
    capacity: usize,
    dim: usize,
    s: VecDeque<Vec<f64>>,
    y: VecDeque<Vec<f64>>,
    /// `sy[i][j] = s_i^T y_j`, oldest pair first.
    sy: VecDeque<VecDeque<f64>>,
    /// `yy[i][j] = y_i^T y_j`.
    yy: VecDeque<VecDeque<f64>>,
}

impl LbfgsBuffer {
    pub fn new(dim: usize, capacity: usize) -> Self {
        Self {
            capacity,
            dim,
            s: VecDeque::with_capacity(capacity + 1),
            y: VecDeque::with_capacity(capacity + 1),
            sy: VecDeque::with_capacity(capacity + 1),
            yy: VecDeque::with_capacity(capacity + 1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        self.s
            .iter()
            .zip(&self.y)
            .map(|(s, y)| (s.as_slice(), y.as_slice()))
    }

    /// Appends a pair, evicting the oldest beyond capacity.
    pub fn push(&mut self, pair: &CurvaturePair) -> Result<()> {
        check_pair("lbfgs_push", self.dim, &pair.s, &pair.y)?;
        let sy_new = pair.sy();
        if pair.skipped || !(sy_new > 0.0) || !sy_new.is_finite() {
            return Err(Error::CurvatureCondition { sy: sy_new });
        }
        if self.capacity == 0 {
            return Ok(());
        }
        if self.s.len() == self.capacity {
            self.s.pop_front();
            self.y.pop_front();
            self.sy.pop_front();
            self.yy.pop_front();
            for row in self.sy.iter_mut().chain(self.yy.iter_mut()) {
                row.pop_front();
            }
        }
        for (i, (si, yi)) in self.s.iter().zip(&self.y).enumerate() {
            self.sy[i].push_back(dot(si, &pair.y));
            self.yy[i].push_back(dot(yi, &pair.y));
        }
        let mut sy_row: VecDeque<f64> = self.y.iter().map(|yj| dot(&pair.s, yj)).collect();
        sy_row.push_back(sy_new);
        let mut yy_row: VecDeque<f64> = self.y.iter().map(|yj| dot(&pair.y, yj)).collect();
        yy_row.push_back(dot(&pair.y, &pair.y));
        self.s.push_back(pair.s.clone());
        self.y.push_back(pair.y.clone());
        self.sy.push_back(sy_row);
        self.yy.push_back(yy_row);
        Ok(())
    }

    fn stacked(rows: &VecDeque<Vec<f64>>, dim: usize) -> Matrix {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            data.extend_from_slice(r);
        }
        Matrix::from_vec(rows.len(), dim, data).expect("consistent pair lengths")
    }

    /// `H V` through the compact representation; `V` is `dim x n`.
    pub fn apply_compact(&self, v: &Matrix) -> Result<Matrix> {
        if v.rows() != self.dim {
            return Err(dim_err(
                "lbfgs_apply_compact",
                format!("V has {} rows, pairs have dimension {}", v.rows(), self.dim),
            ));
        }
        let k = self.len();
        if k == 0 {
            return Ok(v.clone());
        }
        let n = v.cols();
        let s = Self::stacked(&self.s, self.dim);
        let y = Self::stacked(&self.y, self.dim);

        // First product: [S^T V; Y^T V].
        let mut sv = Matrix::zeros(k, n);
        gemm_view(1.0, View::of(&s, false), View::of(v, false), 0.0, &mut sv);
        let mut yv = Matrix::zeros(k, n);
        gemm_view(1.0, View::of(&y, false), View::of(v, false), 0.0, &mut yv);

        // u = R^{-1} S^T V with R = triu(S^T Y).
        let mut u = sv;
        for col in 0..n {
            for i in (0..k).rev() {
                let mut acc = u[(i, col)];
                for j in (i + 1)..k {
                    acc -= self.sy[i][j] * u[(j, col)];
                }
                u[(i, col)] = acc / self.sy[i][i];
            }
        }
        // w = (D + Y^T Y) u - Y^T V, then top = R^{-T} w.
        let mut top = Matrix::zeros(k, n);
        for i in 0..k {
            for col in 0..n {
                let mut acc = self.sy[i][i] * u[(i, col)] - yv[(i, col)];
                for j in 0..k {
                    acc += self.yy[i][j] * u[(j, col)];
                }
                top[(i, col)] = acc;
            }
        }
        for col in 0..n {
            for i in 0..k {
                let mut acc = top[(i, col)];
                for j in 0..i {
                    acc -= self.sy[j][i] * top[(j, col)];
                }
                top[(i, col)] = acc / self.sy[i][i];
            }
        }
        if !u.is_finite() || !top.is_finite() {
            log::warn!("compact L-BFGS middle system is singular; using two-loop recursion");
            return Ok(self.apply_columns_two_loop(v));
        }

        // Second product: V + S top - Y u.
        let mut out = v.clone();
        gemm_view(
            1.0,
            View::of(&s, true),
            View::of(&top, false),
            1.0,
            &mut out,
        );
        gemm_view(-1.0, View::of(&y, true), View::of(&u, false), 1.0, &mut out);
        Ok(out)
    }

    fn apply_columns_two_loop(&self, v: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(v.rows(), v.cols());
        for j in 0..v.cols() {
            let col = self.apply_two_loop(&v.col_to_vec(j));
            for (i, val) in col.into_iter().enumerate() {
                out[(i, j)] = val;
            }
        }
        out
    }

    /// Classical two-loop recursion with `H₀ = I`.
    pub fn apply_two_loop(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.dim, "two-loop dimension");
        let k = self.len();
        let mut q = v.to_vec();
        let mut alphas = vec![0.0; k];
        for i in (0..k).rev() {
            let rho = 1.0 / self.sy[i][i];
            alphas[i] = rho * dot(&self.s[i], &q);
            axpy(-alphas[i], &self.y[i], &mut q);
        }
        for i in 0..k {
            let rho = 1.0 / self.sy[i][i];
            let beta = rho * dot(&self.y[i], &q);
            axpy(alphas[i] - beta, &self.s[i], &mut q);
        }
        q
    }

    /// Dense `H` (for diagnostics on small layers).
    pub fn materialize(&self) -> Matrix {
        self.apply_compact(&Matrix::identity(self.dim))
            .expect("identity has matching rows")
    }
}

impl InverseOperator for LbfgsBuffer {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply_vec(&self, v: &[f64]) -> Vec<f64> {
        self.apply_compact(&Matrix::column(v))
            .expect("dimension checked by caller")
            .into_vec()
    }
}

/// Hessian-action BFGS tracking of `(A + λ_A I)^{-1}` where `A` is a moving
/// average of `E[ā ā^T]`.
#[derive(Debug, Clone)]
pub struct HessianActionState {
    pub a: Matrix,
    pub ha: Matrix,
    pub lambda_a: f64,
    pub beta: f64,
}

impl HessianActionState {
    pub fn new(a: Matrix, ha: Matrix, lambda_a: f64, beta: f64) -> Self {
        Self {
            a,
            ha,
            lambda_a,
            beta,
        }
    }

    /// One update; returns `false` (state untouched) when `ā = 0`.
    /// `H_a` is not rescaled by `1/β`.
    pub fn step(&mut self, a_outer_mean: &Matrix, a_bar: &[f64]) -> Result<bool> {
        if a_outer_mean.shape() != self.a.shape() || a_bar.len() != self.a.rows() {
            return Err(dim_err(
                "hessian_action_step",
                format!(
                    "A {:?}, mean outer {:?}, ā {}",
                    self.a.shape(),
                    a_outer_mean.shape(),
                    a_bar.len()
                ),
            ));
        }
        if a_bar.iter().all(|&v| v == 0.0) {
            return Ok(false);
        }
        self.a.decay_toward(self.beta, a_outer_mean)?;
        let s = self.ha.matvec(a_bar);
        let mut y = self.a.matvec(&s);
        axpy(self.lambda_a, &s, &mut y);
        bfgs_inverse_update_in_place(&mut self.ha, &s, &y)?;
        Ok(true)
    }
}
