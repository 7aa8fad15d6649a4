//! Independent oracles and runtime bound monitors.
//!
//! The oracles here recompute quantities by routes that do not share code
//! with the kernels they check: finite differences for gradients and
//! Hessians, dense inversion for rank-one updates, and the two-loop
//! recursion for compact L-BFGS.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{dim_err, Result};
use crate::linalg::{dot, gemm, kron, spd_inverse, symmetric_eigenvalues, Matrix};
use crate::mlp::{loss_only, Activation, DataBatch, LossKind, NetworkModel};
use crate::optim::{GFactor, KbfgsOptimizer, Optimizer, StepMetrics};
use crate::qn::{
    broyden_update, double_damp, powell_damp_h, powell_damp_identity,
    sherman_morrison_rank1_inverse, LbfgsBuffer,
};

/// Central differences of [`loss_only`] for every weight entry. The
/// denominator is the perturbation actually representable in floating
/// point.
pub fn finite_diff_gradient(
    model: &NetworkModel,
    batch: &DataBatch,
    h: f64,
) -> Result<Vec<Matrix>> {
    let mut probe = model.clone();
    let mut grads = Vec::with_capacity(model.weights.len());
    for l in 0..model.weights.len() {
        let (rows, cols) = model.weights[l].shape();
        let mut g = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                let w = model.weights[l][(i, j)];
                let (up, down) = (w + h, w - h);
                probe.weights[l][(i, j)] = up;
                let f_up = loss_only(&probe, batch)?;
                probe.weights[l][(i, j)] = down;
                let f_down = loss_only(&probe, batch)?;
                probe.weights[l][(i, j)] = w;
                g[(i, j)] = (f_up - f_down) / (up - down);
            }
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Finite-difference curvature of one layer for a single sample.
#[derive(Debug, Clone)]
pub struct LayerHessianCheck {
    /// Hessian of the loss w.r.t. `vec(W_l)` (columns stacked).
    pub hessian: Matrix,
    /// Hessian of the loss w.r.t. the pre-activation `h_l`.
    pub g_fd: Matrix,
    /// Homogeneous layer input `ā_{l-1}`.
    pub a_bar: Vec<f64>,
    pub l2: f64,
}

impl LayerHessianCheck {
    /// `(ā ā^T) ⊗ G + η I`.
    pub fn kronecker_form(&self) -> Matrix {
        let n = self.a_bar.len();
        let outer = Matrix::from_fn(n, n, |i, j| self.a_bar[i] * self.a_bar[j]);
        let mut k = kron(&outer, &self.g_fd);
        k.add_to_diagonal(self.l2);
        k
    }

    pub fn relative_error(&self) -> f64 {
        self.hessian.rel_diff(&self.kronecker_form())
    }
}

fn second_difference<F>(x: &mut [f64], i: usize, j: usize, h: f64, f: &mut F) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let (xi, xj) = (x[i], x[j]);
    let mut eval = |di: f64, dj: f64, x: &mut [f64]| -> Result<f64> {
        x[i] = xi + di;
        x[j] += dj;
        let v = f(x);
        x[i] = xi;
        x[j] = xj;
        v
    };
    let pp = eval(h, h, x)?;
    let pm = eval(h, -h, x)?;
    let mp = eval(-h, h, x)?;
    let mm = eval(-h, -h, x)?;
    Ok((pp - pm - mp + mm) / (4.0 * h * h))
}

fn fd_hessian<F>(x0: &[f64], h: f64, mut f: F) -> Result<Matrix>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = second_difference(&mut x, i, j, h, &mut f)?;
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

/// Plain per-sample forward pass through layers `from..`, starting at the
/// given pre-activation of layer `from`.
fn loss_from_preactivation(model: &NetworkModel, from: usize, h: &[f64], target: &[f64]) -> f64 {
    let mut a: Vec<f64> = h
        .iter()
        .map(|&v| model.layers[from].activation.apply(v))
        .collect();
    for l in from + 1..model.layers.len() {
        let w = &model.weights[l];
        let act = model.layers[l].activation;
        a = (0..w.rows())
            .map(|r| {
                let row = w.row(r);
                let z: f64 = row[..a.len()]
                    .iter()
                    .zip(&a)
                    .map(|(x, y)| x * y)
                    .sum::<f64>()
                    + row[a.len()];
                act.apply(z)
            })
            .collect();
    }
    a.iter()
        .zip(target)
        .map(|(&o, &t)| model.loss.unit_loss(o, t))
        .sum()
}

fn preactivations_and_input(model: &NetworkModel, x: &[f64], layer: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = x.to_vec();
    for l in 0..model.layers.len() {
        let w = &model.weights[l];
        let mut a_bar = a.clone();
        a_bar.push(1.0);
        let h: Vec<f64> = (0..w.rows()).map(|r| dot(w.row(r), &a_bar)).collect();
        if l == layer {
            return (h, a_bar);
        }
        a = h
            .iter()
            .map(|&v| model.layers[l].activation.apply(v))
            .collect();
    }
    unreachable!("layer index checked by caller")
}

/// Finite-difference Hessian of the single-sample loss w.r.t. `vec(W_l)`
/// together with the finite-difference `G_l` w.r.t. `h_l`.
pub fn finite_diff_layer_hessian(
    model: &NetworkModel,
    batch: &DataBatch,
    layer: usize,
    h: f64,
) -> Result<LayerHessianCheck> {
    if batch.len() != 1 {
        return Err(dim_err(
            "finite_diff_layer_hessian",
            format!("{} samples, need 1", batch.len()),
        ));
    }
    if layer >= model.layers.len() {
        return Err(dim_err(
            "finite_diff_layer_hessian",
            format!("layer {layer} out of range"),
        ));
    }
    let (rows, cols) = model.weights[layer].shape();
    let mut probe = model.clone();
    let w0 = model.weights[layer].vec_columns();
    let hessian = fd_hessian(&w0, h, |v| {
        probe.weights[layer] = Matrix::from_vec_columns(rows, cols, v);
        loss_only(&probe, batch)
    })?;

    let (h0, a_bar) = preactivations_and_input(model, batch.inputs.row(0), layer);
    let target = batch.targets.row(0);
    let g_fd = fd_hessian(&h0, h, |hv| {
        Ok(loss_from_preactivation(model, layer, hv, target))
    })?;

    Ok(LayerHessianCheck {
        hessian,
        g_fd,
        a_bar,
        l2: model.l2,
    })
}

/// Outcome of a randomized oracle suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: String,
    pub trials: usize,
    pub failures: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

struct Tally {
    name: String,
    trials: usize,
    failures: usize,
    max_error: f64,
    tolerance: f64,
    clock: Instant,
}

impl Tally {
    fn new(name: &str, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            trials: 0,
            failures: 0,
            max_error: 0.0,
            tolerance,
            clock: Instant::now(),
        }
    }

    fn record(&mut self, err: f64) {
        self.trials += 1;
        if !(err <= self.tolerance) {
            self.failures += 1;
        }
        if err.is_nan() || err > self.max_error {
            self.max_error = err;
        }
    }

    fn finish(self) -> SuiteReport {
        SuiteReport {
            name: self.name,
            trials: self.trials,
            failures: self.failures,
            max_error: self.max_error,
            tolerance: self.tolerance,
            seconds: self.clock.elapsed().as_secs_f64(),
        }
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> Matrix {
    let m = Matrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut a = gemm(&m, &m, true, false).expect("square");
    a.scale(1.0 / d as f64);
    a.add_to_diagonal(0.1 + rng.random::<f64>());
    a
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    diff.sqrt() / dot(b, b).sqrt().max(f64::MIN_POSITIVE)
}

/// Double-damping guarantees: after the first stage `s̃^T y >= μ₁ y^T H y`,
/// after the second `s̃^T ỹ >= μ₂ s̃^T s̃`. The reported error is the
/// relative shortfall of each inequality.
pub fn double_damping_suite(draws: usize, dmax: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::new("double_damping", 1e-12);
    for _ in 0..draws {
        let d = rng.random_range(1..=dmax);
        let h = random_spd(&mut rng, d);
        let s = normal_vec(&mut rng, d);
        let y = normal_vec(&mut rng, d);
        let mu1 = rng.random_range(0.01..0.99);
        let mu2 = rng.random_range(0.01..0.99);
        let err = match powell_damp_h(&s, &y, &h, mu1) {
            Ok((st, _)) => {
                let yhy = dot(&y, &h.matvec(&y));
                let need1 = mu1 * yhy;
                let short1 = (need1 - dot(&st, &y)).max(0.0) / need1.abs().max(f64::MIN_POSITIVE);
                match powell_damp_identity(&st, &y, mu2) {
                    Ok((yt, _)) => {
                        let need2 = mu2 * dot(&st, &st);
                        let short2 = (need2 - dot(&st, &yt)).max(0.0) / need2;
                        short1.max(short2)
                    }
                    Err(_) => f64::INFINITY,
                }
            }
            Err(_) => f64::INFINITY,
        };
        tally.record(err);
    }
    tally.finish()
}

/// Hessian-action equivalence: with `s = H a`, `y = (A + c a a^T) s`, every
/// Broyden-family update of `H = A^{-1}` equals `(A + c a a^T)^{-1}`.
pub fn broyden_equivalence_suite(trials: usize, dmax: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::new("broyden_rank_one_equivalence", 1e-8);
    let cs = [0.5, 1.0, 2.0];
    let phis = [0.0, 0.5, 1.0];
    for t in 0..trials {
        let d = rng.random_range(1..=dmax);
        let a_mat = random_spd(&mut rng, d);
        let h = spd_inverse(&a_mat).expect("spd");
        let a = normal_vec(&mut rng, d);
        let c = cs[t % 3];
        let phi = phis[(t / 3) % 3];
        let mut a_plus = a_mat.clone();
        a_plus
            .add_scaled(c, &Matrix::from_fn(d, d, |i, j| a[i] * a[j]))
            .expect("same shape");
        let exact = spd_inverse(&a_plus).expect("spd");
        let sm = sherman_morrison_rank1_inverse(&h, &a, c).expect("valid");
        let s = h.matvec(&a);
        let y = a_plus.matvec(&s);
        let err = match broyden_update(&h, &s, &y, phi) {
            Ok(b) => b
                .rel_diff(&exact)
                .max(sm.rel_diff(&exact))
                .max(b.rel_diff(&sm)),
            Err(_) => f64::INFINITY,
        };
        tally.record(err);
    }
    tally.finish()
}

/// Compact representation against the two-loop recursion on random
/// damped pair streams.
pub fn lbfgs_equivalence_suite(
    memories: &[usize],
    dims: &[usize],
    states: usize,
    seed: u64,
) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::new("compact_vs_two_loop", 1e-10);
    for &p in memories {
        for &d in dims {
            for _ in 0..states {
                let buf = random_lbfgs_state(&mut rng, d, p);
                let v = Matrix::from_fn(d, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
                let compact = buf.apply_compact(&v).expect("matching rows");
                let mut worst = 0.0f64;
                for j in 0..v.cols() {
                    let two = buf.apply_two_loop(&v.col_to_vec(j));
                    let e = rel(&compact.col_to_vec(j), &two);
                    worst = if e.is_nan() { f64::NAN } else { worst.max(e) };
                }
                tally.record(worst);
            }
        }
    }
    tally.finish()
}

/// A buffer filled with `p + extra` double-damped pairs, so older pairs
/// have been evicted.
pub fn random_lbfgs_state(rng: &mut ChaCha8Rng, d: usize, p: usize) -> LbfgsBuffer {
    let mut buf = LbfgsBuffer::new(d, p);
    let pushes = p + rng.random_range(0..=p.min(10));
    let mu2 = rng.random_range(0.05..1.0);
    let mut done = 0;
    while done < pushes {
        let s = normal_vec(rng, d);
        let y = normal_vec(rng, d);
        if let Ok(pair) = double_damp(&s, &y, &buf, 0.2, mu2) {
            if buf.push(&pair).is_ok() {
                done += 1;
            }
        }
    }
    buf
}

/// Extreme eigenvalues of a small symmetric matrix.
pub fn eigen_extremes(m: &Matrix) -> Result<(f64, f64)> {
    let ev = symmetric_eigenvalues(m)?;
    Ok((ev[0], ev[ev.len() - 1]))
}

/// Per-layer observations accumulated by [`BoundMonitor`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerMonitor {
    pub ha_extremes: Option<(f64, f64)>,
    pub hg_extremes: Option<(f64, f64)>,
    pub dd_pairs: usize,
    pub dd_satisfied: usize,
    pub skipped: usize,
    pub steps: usize,
}

impl LayerMonitor {
    pub fn dd_fraction(&self) -> Option<f64> {
        (self.dd_pairs > 0).then(|| self.dd_satisfied as f64 / self.dd_pairs as f64)
    }

    pub fn skip_fraction(&self) -> Option<f64> {
        (self.steps > 0).then(|| self.skipped as f64 / self.steps as f64)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MonitorReport {
    pub layers: Vec<LayerMonitor>,
    pub violations: Vec<String>,
}

impl MonitorReport {
    pub fn min_dd_fraction(&self) -> Option<f64> {
        self.layers
            .iter()
            .filter_map(LayerMonitor::dd_fraction)
            .reduce(f64::min)
    }
}

/// Observer for K-BFGS runs. Never mutates the optimizer.
#[derive(Debug, Clone)]
pub struct BoundMonitor {
    mu1: f64,
    max_dim: usize,
    /// `[1/(1 + d_l + λ_A), 1/λ_A]` per layer when the interval applies.
    ha_interval: Option<Vec<(f64, f64)>>,
    report: MonitorReport,
}

impl BoundMonitor {
    pub const SLACK: f64 = 1e-6;

    /// `inputs_bounded` states that every data input lies in `[-1, 1]`.
    pub fn new(
        opt: &KbfgsOptimizer,
        model: &NetworkModel,
        max_dim: usize,
        inputs_bounded: bool,
    ) -> Self {
        let bounded_hidden = model.layers[..model.layers.len() - 1]
            .iter()
            .all(|s| matches!(s.activation, Activation::Sigmoid | Activation::Tanh));
        let lambda_a = opt.config.damping_split();
        let ha_interval =
            (opt.config.exact_a_inversion && bounded_hidden && inputs_bounded).then(|| {
                model
                    .layers
                    .iter()
                    .map(|s| (1.0 / (1.0 + s.in_dim as f64 + lambda_a), 1.0 / lambda_a))
                    .collect()
            });
        Self {
            mu1: opt.config.mu1,
            max_dim,
            ha_interval,
            report: MonitorReport {
                layers: vec![LayerMonitor::default(); model.layers.len()],
                violations: Vec::new(),
            },
        }
    }

    pub fn ha_interval(&self) -> Option<&[(f64, f64)]> {
        self.ha_interval.as_deref()
    }

    pub fn observe_step(&mut self, metrics: &StepMetrics) {
        for (mon, m) in self.report.layers.iter_mut().zip(&metrics.layers) {
            mon.steps += 1;
            if m.skipped {
                mon.skipped += 1;
            }
            if let Some(ok) = m.dd_ok(self.mu1) {
                mon.dd_pairs += 1;
                if ok {
                    mon.dd_satisfied += 1;
                }
            }
        }
    }

    /// Eigenvalue extremes of `H_a`, `H_g` on layers up to `max_dim`, with
    /// bound checks.
    pub fn observe_state(&mut self, opt: &KbfgsOptimizer, label: &str) {
        for (l, st) in opt.layers.iter().enumerate() {
            let ha = st.a_factor.ha();
            if ha.rows() <= self.max_dim {
                match eigen_extremes(ha) {
                    Ok((lo, hi)) => {
                        self.report.layers[l].ha_extremes = Some((lo, hi));
                        if let Some(iv) = &self.ha_interval {
                            let (a, b) = iv[l];
                            if lo < a * (1.0 - Self::SLACK) || hi > b * (1.0 + Self::SLACK) {
                                self.report.violations.push(format!(
                                    "{label}: layer {l} H_a spectrum [{lo:e}, {hi:e}] outside [{a:e}, {b:e}]"
                                ));
                            }
                        }
                        if lo <= 0.0 {
                            self.report.violations.push(format!(
                                "{label}: layer {l} H_a not positive definite ({lo:e})"
                            ));
                        }
                    }
                    Err(e) => self
                        .report
                        .violations
                        .push(format!("{label}: layer {l} H_a: {e}")),
                }
            }
            if st.s_ma.len() <= self.max_dim {
                let dense = st.g_factor.to_dense();
                match eigen_extremes(&dense) {
                    Ok((lo, hi)) => {
                        self.report.layers[l].hg_extremes = Some((lo, hi));
                        if lo <= 0.0 {
                            self.report.violations.push(format!(
                                "{label}: layer {l} H_g not positive definite ({lo:e})"
                            ));
                        }
                        if let GFactor::Limited(buf) = &st.g_factor {
                            if dense.rows() <= 64 {
                                let floor = (1.0 + 1.0 / self.mu1).powi(-(buf.capacity() as i32));
                                if lo < floor * (1.0 - Self::SLACK) {
                                    self.report.violations.push(format!(
                                        "{label}: layer {l} H_g minimum {lo:e} below {floor:e}"
                                    ));
                                }
                            }
                        }
                    }
                    Err(e) => self
                        .report
                        .violations
                        .push(format!("{label}: layer {l} H_g: {e}")),
                }
            }
        }
    }

    pub fn report(&self) -> &MonitorReport {
        &self.report
    }

    pub fn into_report(self) -> MonitorReport {
        self.report
    }
}

/// A fixed smooth network for oracle checks.
pub fn oracle_network(
    widths: &[usize],
    hidden: Activation,
    output: Activation,
    loss: LossKind,
    seed: u64,
) -> Result<NetworkModel> {
    let mut acts = vec![hidden; widths.len() - 2];
    acts.push(output);
    let layers = crate::mlp::chain(widths, &acts)?;
    let mut model = NetworkModel::init(layers, loss, 0.0, seed)?;
    // Nonzero biases so every column of each weight is exercised.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for w in &mut model.weights {
        let c = w.cols() - 1;
        for r in 0..w.rows() {
            w[(r, c)] = rng.random_range(-0.5..0.5);
        }
    }
    Ok(model)
}

/// Backward-pass gradients against central differences on two smooth
/// `[8, 6, 4, 6, 8]` autoencoders: tanh with MSE, and tanh with a sigmoid
/// output under binary entropy. Error is the per-layer relative Frobenius
/// distance.
pub fn gradient_check_suite(seeds: &[u64], h: f64) -> Result<SuiteReport> {
    let mut tally = Tally::new("gradient_finite_difference", 1e-5);
    let widths = [8, 6, 4, 6, 8];
    for &seed in seeds {
        for (out_act, loss) in [
            (Activation::Linear, LossKind::Mse),
            (Activation::Sigmoid, LossKind::BinaryEntropy),
        ] {
            let mut model = oracle_network(&widths, Activation::Tanh, out_act, loss, seed)?;
            model.l2 = 1e-5;
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(100));
            let x = Matrix::from_fn(4, 8, |_, _| rng.random::<f64>());
            let batch = DataBatch::new(x.clone(), x)?;
            let fd = finite_diff_gradient(&model, &batch, h)?;
            let bp = crate::mlp::forward_backward(&model, &batch)?.gradients();
            for (a, b) in fd.iter().zip(&bp) {
                tally.record(a.rel_diff(b));
            }
        }
    }
    Ok(tally.finish())
}

/// Single-sample Hessian blocks against `(ā ā^T) ⊗ G` on a `[5, 4, 3]`
/// sigmoid network, every layer.
pub fn kronecker_hessian_suite(seeds: &[u64], h: f64) -> Result<SuiteReport> {
    let mut tally = Tally::new("kronecker_layer_hessian", 1e-4);
    for &seed in seeds {
        let model = oracle_network(
            &[5, 4, 3],
            Activation::Sigmoid,
            Activation::Sigmoid,
            LossKind::BinaryEntropy,
            seed,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(200));
        let x = Matrix::from_fn(1, 5, |_, _| rng.random::<f64>());
        let y = Matrix::from_fn(1, 3, |_, _| f64::from(u8::from(rng.random::<bool>())));
        let batch = DataBatch::new(x, y)?;
        for l in 0..model.layers.len() {
            let chk = finite_diff_layer_hessian(&model, &batch, l, h)?;
            tally.record(chk.relative_error().max(chk.hessian.max_asymmetry()));
        }
    }
    Ok(tally.finish())
}

fn kbfgs_monitor_setup(
    widths: &[usize],
    acts: &[Activation],
    cfg: crate::optim::KbfgsConfig,
    seed: u64,
) -> Result<(
    NetworkModel,
    KbfgsOptimizer,
    crate::data::Dataset,
    crate::data::BatchSampler,
)> {
    let layers = crate::mlp::chain(widths, acts)?;
    let model = NetworkModel::init(layers, LossKind::BinaryEntropy, 1e-5, seed)?;
    let data = crate::data::synthetic_autoencoder(
        seed,
        500,
        widths[0],
        crate::data::SyntheticKind::Binary,
    );
    let mut opt = KbfgsOptimizer::new(&model, cfg)?;
    opt.warm_start(&model, &data, 50, None)?;
    let sampler = crate::data::BatchSampler::new(data.len(), 50, seed.wrapping_add(1))?;
    Ok((model, opt, data, sampler))
}

/// Exact-`A` skip mode on a sigmoid `[16, 8, 16]` net: every `H_a`
/// eigenvalue stays in `[1/(1 + d_l + λ_A), 1/λ_A]`. The error is the
/// largest relative excursion outside the interval.
pub fn ha_spectrum_suite(iterations: usize, lambda_a: f64, seed: u64) -> Result<SuiteReport> {
    let cfg = crate::optim::KbfgsConfig {
        alpha: 0.1,
        lambda: lambda_a * lambda_a,
        use_lbfgs: true,
        skip_variant: true,
        exact_a_inversion: true,
        ..Default::default()
    };
    let (mut model, mut opt, data, mut sampler) = kbfgs_monitor_setup(
        &[16, 8, 16],
        &[Activation::Sigmoid, Activation::Sigmoid],
        cfg,
        seed,
    )?;
    let mut tally = Tally::new("ha_spectrum_interval", BoundMonitor::SLACK);
    let intervals: Vec<(f64, f64)> = model
        .layers
        .iter()
        .map(|s| (1.0 / (1.0 + s.in_dim as f64 + lambda_a), 1.0 / lambda_a))
        .collect();
    let check = |opt: &KbfgsOptimizer, tally: &mut Tally| -> Result<()> {
        for (st, &(lo, hi)) in opt.layers.iter().zip(&intervals) {
            let (emin, emax) = eigen_extremes(st.a_factor.ha())?;
            let below = (lo - emin).max(0.0) / lo;
            let above = (emax - hi).max(0.0) / hi;
            tally.record(below.max(above));
        }
        Ok(())
    };
    check(&opt, &mut tally)?;
    for _ in 0..iterations {
        let b = sampler.next_batch(&data);
        opt.step(&mut model, &b)?;
        check(&opt, &mut tally)?;
    }
    Ok(tally.finish())
}

/// Dense skip-mode run: each applied `H_g` update satisfies
/// `λ_max(B+) <= λ_max(B) (1 + 1/μ₁)` with `B = H_g^{-1}`. The error is the
/// relative excess over the bound.
pub fn norm_growth_suite(iterations: usize, seed: u64) -> Result<SuiteReport> {
    use Activation::{Linear, Relu, Sigmoid};
    let cfg = crate::optim::KbfgsConfig {
        alpha: 0.3,
        skip_variant: true,
        ..Default::default()
    };
    let mu1 = cfg.mu1;
    let (mut model, mut opt, data, mut sampler) = kbfgs_monitor_setup(
        &[16, 12, 6, 12, 16],
        &[Relu, Linear, Relu, Sigmoid],
        cfg,
        seed,
    )?;
    let mut tally = Tally::new("bfgs_norm_growth", 1e-8);
    for _ in 0..iterations {
        let before: Vec<Matrix> = opt.layers.iter().map(|s| s.g_factor.to_dense()).collect();
        let b = sampler.next_batch(&data);
        let metrics = opt.step(&mut model, &b)?;
        for ((st, h_old), m) in opt.layers.iter().zip(&before).zip(&metrics.layers) {
            if m.skipped || m.dd_ratio.is_none() {
                continue;
            }
            let b_old = 1.0 / eigen_extremes(h_old)?.0;
            let b_new = 1.0 / eigen_extremes(&st.g_factor.to_dense())?.0;
            tally.record((b_new / (b_old * (1.0 + 1.0 / mu1)) - 1.0).max(0.0));
        }
    }
    Ok(tally.finish())
}

/// Every oracle suite at its full size.
pub fn run_all(seed: u64) -> Result<Vec<SuiteReport>> {
    let seeds: Vec<u64> = (0..10).map(|i| seed.wrapping_add(i)).collect();
    Ok(vec![
        double_damping_suite(100_000, 50, seed),
        broyden_equivalence_suite(1000, 20, seed),
        lbfgs_equivalence_suite(&[1, 5, 100], &[3, 50, 200], 100, seed),
        gradient_check_suite(&seeds, 1e-5)?,
        kronecker_hessian_suite(&seeds[..5], 1e-4)?,
        ha_spectrum_suite(200, 0.316, seed)?,
        norm_growth_suite(200, seed)?,
    ])
}

/// `name,trials,failures,max_error,tolerance,seconds,passed`.
pub fn summary_csv(reports: &[SuiteReport]) -> String {
    let mut out = String::from("check,trials,failures,max_error,tolerance,seconds,passed\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{:.8e},{:.8e},{:.8e},{}\n",
            r.name,
            r.trials,
            r.failures,
            r.max_error,
            r.tolerance,
            r.seconds,
            u8::from(r.passed())
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{forward_backward, LayerSpec};

    fn toy_linear() -> NetworkModel {
        NetworkModel::from_weights(
            vec![LayerSpec::new(1, 1, Activation::Linear)],
            vec![Matrix::from_rows(&[&[1.0, 0.0]])],
            LossKind::Mse,
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn fd_gradient_hand_cases() {
        let batch =
            DataBatch::new(Matrix::from_rows(&[&[1.0]]), Matrix::from_rows(&[&[0.0]])).unwrap();
        let g = finite_diff_gradient(&toy_linear(), &batch, 1e-5).unwrap();
        assert!(g[0].max_abs_diff(&Matrix::from_rows(&[&[1.0, 1.0]])) < 1e-9);

        let zero = NetworkModel::from_weights(
            vec![LayerSpec::new(2, 2, Activation::Linear)],
            vec![Matrix::zeros(2, 3)],
            LossKind::Mse,
            0.0,
        )
        .unwrap();
        let b = DataBatch::new(Matrix::zeros(1, 2), Matrix::zeros(1, 2)).unwrap();
        let g = finite_diff_gradient(&zero, &b, 1e-5).unwrap();
        assert!(g[0].max_abs() < 1e-12);
    }

    #[test]
    fn fd_gradient_matches_backward_on_tanh_net() {
        let model = oracle_network(
            &[4, 3, 4],
            Activation::Tanh,
            Activation::Linear,
            LossKind::Mse,
            1,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Matrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0));
        let batch = DataBatch::new(x.clone(), x).unwrap();
        let fd = finite_diff_gradient(&model, &batch, 1e-5).unwrap();
        let bp = forward_backward(&model, &batch).unwrap().gradients();
        for (a, b) in fd.iter().zip(&bp) {
            assert!(a.rel_diff(b) < 1e-5);
        }
    }

    #[test]
    fn linear_layer_hessian_is_closed_form() {
        let model = NetworkModel::from_weights(
            vec![LayerSpec::new(2, 2, Activation::Linear)],
            vec![Matrix::from_rows(&[&[0.3, -0.2, 0.1], &[0.5, 0.4, -0.3]])],
            LossKind::Mse,
            0.0,
        )
        .unwrap();
        let b = DataBatch::new(
            Matrix::from_rows(&[&[0.7, -1.2]]),
            Matrix::from_rows(&[&[0.1, 0.2]]),
        )
        .unwrap();
        let chk = finite_diff_layer_hessian(&model, &b, 0, 1e-3).unwrap();
        assert!(chk.g_fd.max_abs_diff(&Matrix::identity(2)) < 1e-6);
        let a = [0.7, -1.2, 1.0];
        let expected = kron(
            &Matrix::from_fn(3, 3, |i, j| a[i] * a[j]),
            &Matrix::identity(2),
        );
        assert!(chk.hessian.max_abs_diff(&expected) < 1e-6);
        assert!(chk.hessian.max_asymmetry() <= 1e-6);
    }

    #[test]
    fn sigmoid_layer_hessian_is_kronecker() {
        let model = oracle_network(
            &[5, 4, 3],
            Activation::Sigmoid,
            Activation::Sigmoid,
            LossKind::BinaryEntropy,
            3,
        )
        .unwrap();
        let b = DataBatch::new(
            Matrix::from_rows(&[&[0.2, 0.9, 0.1, 0.5, 0.7]]),
            Matrix::from_rows(&[&[1.0, 0.0, 1.0]]),
        )
        .unwrap();
        for l in 0..2 {
            let chk = finite_diff_layer_hessian(&model, &b, l, 1e-4).unwrap();
            assert!(
                chk.relative_error() < 1e-4,
                "layer {l}: {}",
                chk.relative_error()
            );
        }
    }

    #[test]
    fn suites_pass_small() {
        assert!(double_damping_suite(500, 10, 1).passed());
        assert!(broyden_equivalence_suite(60, 8, 2).passed());
        assert!(lbfgs_equivalence_suite(&[1, 5], &[3, 20], 5, 3).passed());
    }

    #[test]
    fn broyden_equivalence_hand_case() {
        let h = Matrix::identity(2);
        let s = h.matvec(&[1.0, 0.0]);
        let y = Matrix::diag(&[2.0, 1.0]).matvec(&s);
        for phi in [0.0, 0.5, 1.0] {
            let b = broyden_update(&h, &s, &y, phi).unwrap();
            assert!(b.max_abs_diff(&Matrix::diag(&[0.5, 1.0])) < 1e-15);
        }
        let sm = sherman_morrison_rank1_inverse(&h, &[0.0, 0.0], 1.0).unwrap();
        assert_eq!(sm, h);
    }

    #[test]
    fn empty_and_single_pair_buffers() {
        let buf = LbfgsBuffer::new(3, 0);
        let v = Matrix::from_fn(3, 2, |i, j| (i + j) as f64);
        assert_eq!(buf.apply_compact(&v).unwrap(), v);
        assert_eq!(buf.apply_two_loop(&[1.0, 2.0, 3.0]), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn fresh_monitor_sees_identity() {
        let model = oracle_network(
            &[6, 4, 6],
            Activation::Sigmoid,
            Activation::Sigmoid,
            LossKind::BinaryEntropy,
            0,
        )
        .unwrap();
        let opt = KbfgsOptimizer::new(
            &model,
            crate::optim::KbfgsConfig {
                lambda: 0.25,
                exact_a_inversion: true,
                ..Default::default()
            },
        )
        .unwrap();
        let mut mon = BoundMonitor::new(&opt, &model, 64, true);
        mon.observe_state(&opt, "init");
        for l in &mon.report().layers {
            assert_eq!(l.hg_extremes, Some((1.0, 1.0)));
            let (_, hi) = l.ha_extremes.unwrap();
            assert!(hi <= 2.0 + 1e-12);
        }
        assert!(mon.report().violations.is_empty());
    }
}
