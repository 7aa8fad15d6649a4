//! Per-iteration optimizer drivers.
//!
//! K-BFGS keeps, per layer, a Kronecker pair `H_g ⊗ H_a` approximating the
//! inverse Hessian block and steps with `p = H_g ∇f̂ H_a`. `H_g` is refreshed
//! from damped pre-activation pairs; `H_a` tracks `(A + λ_A I)^{-1}` either by
//! Hessian-action BFGS or by exact inversion.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{gemm_view, spd_inverse, Matrix, View};
use crate::mlp::{
    apply_step, forward_backward_with, sample_predictive_targets, BatchTrace, DataBatch,
    NetworkModel, TraceOptions,
};
use crate::qn::{
    bfgs_inverse_update_in_place, curvature_ratio, dd_skip_predicate, double_damp,
    HessianActionState, InverseOperator, LbfgsBuffer,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KbfgsConfig {
    pub alpha: f64,
    /// Total damping; split as `λ_A = λ_G = √λ`.
    pub lambda: f64,
    pub beta: f64,
    pub mu1: f64,
    pub use_lbfgs: bool,
    /// Stored pairs for the limited-memory `H_g`.
    pub memory: usize,
    pub skip_variant: bool,
    pub exact_a_inversion: bool,
    pub lr_decay_exponent: f64,
    pub double_grad: bool,
}

impl Default for KbfgsConfig {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            lambda: 0.3,
            beta: 0.9,
            mu1: 0.2,
            use_lbfgs: false,
            memory: 100,
            skip_variant: false,
            exact_a_inversion: false,
            lr_decay_exponent: 0.75,
            double_grad: false,
        }
    }
}

impl KbfgsConfig {
    pub fn damping_split(&self) -> f64 {
        self.lambda.sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        positive("alpha", self.alpha)?;
        positive("lambda", self.lambda)?;
        open_unit("beta", self.beta, true)?;
        open_unit("mu1", self.mu1, false)?;
        if self.use_lbfgs && self.memory == 0 {
            return Err(Error::Config("memory must be at least 1".into()));
        }
        if self.skip_variant && !(self.lr_decay_exponent > 0.5 && self.lr_decay_exponent < 1.0) {
            return Err(Error::Config(format!(
                "lr_decay_exponent must lie in (0.5, 1), got {}",
                self.lr_decay_exponent
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KfacConfig {
    pub alpha: f64,
    pub lambda: f64,
    pub beta: f64,
    /// Inverses are recomputed every `inversion_period` steps after the
    /// first `inversion_period`.
    pub inversion_period: usize,
}

impl Default for KfacConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lambda: 3.0,
            beta: 0.9,
            inversion_period: 20,
        }
    }
}

impl KfacConfig {
    pub fn validate(&self) -> Result<()> {
        positive("alpha", self.alpha)?;
        positive("lambda", self.lambda)?;
        open_unit("beta", self.beta, true)?;
        if self.inversion_period == 0 {
            return Err(Error::Config("inversion_period must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FirstOrderKind {
    Sgdm,
    Adam,
    Rmsprop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FirstOrderConfig {
    pub alpha: f64,
    /// Momentum for SGD-m, first-moment decay for Adam.
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for FirstOrderConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-4,
            beta1: 0.9,
            beta2: 0.9,
            epsilon: 1e-4,
        }
    }
}

impl FirstOrderConfig {
    pub fn sgdm_default() -> Self {
        Self {
            alpha: 0.03,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        positive("alpha", self.alpha)?;
        open_unit("beta1", self.beta1, true)?;
        open_unit("beta2", self.beta2, true)?;
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be > 0, got {v}")))
    }
}

fn open_unit(name: &str, v: f64, allow_zero: bool) -> Result<()> {
    let low_ok = if allow_zero { v >= 0.0 } else { v > 0.0 };
    if low_ok && v < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")))
    }
}

/// Per-layer curvature bookkeeping for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStepMetrics {
    pub theta1: f64,
    pub theta2: f64,
    /// `H_g` was left unchanged this step.
    pub skipped: bool,
    /// `ỹ^T H ỹ / s̃^T ỹ` for the damped pair, when a pair was formed.
    pub dd_ratio: Option<f64>,
}

impl LayerStepMetrics {
    fn untouched() -> Self {
        Self {
            theta1: 1.0,
            theta2: 1.0,
            skipped: false,
            dd_ratio: None,
        }
    }

    /// Whether the damped pair satisfied `ratio <= 2/μ₁`.
    pub fn dd_ok(&self, mu1: f64) -> Option<bool> {
        self.dd_ratio.map(|r| r <= 2.0 / mu1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    /// Minibatch loss before the step.
    pub loss: f64,
    pub layers: Vec<LayerStepMetrics>,
    pub seconds: f64,
}

pub trait Optimizer {
    fn name(&self) -> String;

    /// Curvature estimation before the first update, over at most
    /// `max_batches` contiguous batches of `batch_size` (all when `None`).
    fn warm_start(
        &mut self,
        model: &NetworkModel,
        data: &Dataset,
        batch_size: usize,
        max_batches: Option<usize>,
    ) -> Result<()>;

    fn step(&mut self, model: &mut NetworkModel, batch: &DataBatch) -> Result<StepMetrics>;

    /// `μ₁` for curvature-pair methods, used to judge `dd_ratio`.
    fn mu1(&self) -> Option<f64> {
        None
    }
}

/// Contiguous warm-start batches; a dataset smaller than one batch is used
/// whole.
pub fn warm_batches(
    data: &Dataset,
    batch_size: usize,
    max_batches: Option<usize>,
) -> Vec<DataBatch> {
    let n = data.len();
    if n == 0 {
        return Vec::new();
    }
    let size = batch_size.clamp(1, n);
    let mut count = n / size;
    if let Some(limit) = max_batches {
        count = count.min(limit.max(1));
    }
    (0..count)
        .map(|b| data.slice(b * size, (b + 1) * size))
        .collect()
}

/// Mean of the current gradient and the cached second-pass gradient.
pub fn double_grad_average(current: &Matrix, previous: Option<&Matrix>) -> Result<Matrix> {
    match previous {
        None => Ok(current.clone()),
        Some(prev) => {
            let mut out = current.scaled(0.5);
            out.add_scaled(0.5, prev)?;
            Ok(out)
        }
    }
}

/// `H_g V H_a` where `H_g` may be limited-memory.
fn precondition(hg: &GFactor, v: &Matrix, ha: &Matrix) -> Result<Matrix> {
    let left = match hg {
        GFactor::Dense(h) => {
            let mut out = Matrix::zeros(h.rows(), v.cols());
            gemm_view(1.0, View::of(h, false), View::of(v, false), 0.0, &mut out);
            out
        }
        GFactor::Limited(buf) => buf.apply_compact(v)?,
    };
    let mut out = Matrix::zeros(left.rows(), ha.cols());
    gemm_view(
        1.0,
        View::of(&left, false),
        View::of(ha, false),
        0.0,
        &mut out,
    );
    Ok(out)
}

#[derive(Debug, Clone)]
pub enum AFactor {
    /// `H_a` tracked by Hessian-action BFGS.
    HessianAction(HessianActionState),
    /// Moving average `A` and `H_a = (A + λ_A I)^{-1}` recomputed each step.
    Exact { a: Matrix, ha: Matrix },
}

impl AFactor {
    pub fn ha(&self) -> &Matrix {
        match self {
            AFactor::HessianAction(st) => &st.ha,
            AFactor::Exact { ha, .. } => ha,
        }
    }
}

#[derive(Debug, Clone)]
pub enum GFactor {
    Dense(Matrix),
    Limited(LbfgsBuffer),
}

impl GFactor {
    pub fn operator(&self) -> &dyn InverseOperator {
        match self {
            GFactor::Dense(h) => h,
            GFactor::Limited(b) => b,
        }
    }

    /// Dense form of `H_g`.
    pub fn to_dense(&self) -> Matrix {
        match self {
            GFactor::Dense(h) => h.clone(),
            GFactor::Limited(b) => b.materialize(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct KbfgsLayerState {
    pub grad_ma: Matrix,
    pub a_factor: AFactor,
    pub g_factor: GFactor,
    pub s_ma: Vec<f64>,
    pub y_ma: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct KbfgsOptimizer {
    pub config: KbfgsConfig,
    pub layers: Vec<KbfgsLayerState>,
    /// Second-pass gradients of the previous step, for `double_grad`.
    prev_second_grads: Option<Vec<Matrix>>,
    iteration: usize,
}

impl KbfgsOptimizer {
    pub fn new(model: &NetworkModel, config: KbfgsConfig) -> Result<Self> {
        config.validate()?;
        let lambda_a = config.damping_split();
        let layers = model
            .layers
            .iter()
            .map(|spec| {
                let (out_dim, in_h) = (spec.out_dim, spec.in_dim + 1);
                let a = Matrix::zeros(in_h, in_h);
                let ha = Matrix::scaled_identity(in_h, 1.0 / lambda_a);
                KbfgsLayerState {
                    grad_ma: Matrix::zeros(out_dim, in_h),
                    a_factor: if config.exact_a_inversion {
                        AFactor::Exact { a, ha }
                    } else {
                        AFactor::HessianAction(HessianActionState::new(
                            a,
                            ha,
                            lambda_a,
                            config.beta,
                        ))
                    },
                    g_factor: if config.use_lbfgs {
                        GFactor::Limited(LbfgsBuffer::new(out_dim, config.memory))
                    } else {
                        GFactor::Dense(Matrix::identity(out_dim))
                    },
                    s_ma: vec![0.0; out_dim],
                    y_ma: vec![0.0; out_dim],
                }
            })
            .collect();
        Ok(Self {
            config,
            layers,
            prev_second_grads: None,
            iteration: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    fn step_size(&self) -> f64 {
        if self.config.skip_variant {
            self.config.alpha * (self.iteration as f64).powf(-self.config.lr_decay_exponent)
        } else {
            self.config.alpha
        }
    }

    fn update_g_factor(
        state: &mut KbfgsLayerState,
        config: &KbfgsConfig,
        s: &[f64],
        y: &[f64],
    ) -> Result<LayerStepMetrics> {
        let mu2 = config.damping_split();
        let pair = match double_damp(s, y, state.g_factor.operator(), config.mu1, mu2) {
            Ok(p) => p,
            Err(Error::DegeneratePair(why)) => {
                log::debug!("skipping H_g update: {why}");
                return Ok(LayerStepMetrics {
                    skipped: true,
                    ..LayerStepMetrics::untouched()
                });
            }
            Err(e) => return Err(e),
        };
        let ratio = curvature_ratio(&pair, state.g_factor.operator());
        let mut metrics = LayerStepMetrics {
            theta1: pair.theta1,
            theta2: pair.theta2,
            skipped: false,
            dd_ratio: Some(ratio),
        };
        if config.skip_variant && !dd_skip_predicate(&pair, state.g_factor.operator(), config.mu1) {
            metrics.skipped = true;
            return Ok(metrics);
        }
        let applied = match &mut state.g_factor {
            GFactor::Dense(h) => bfgs_inverse_update_in_place(h, &pair.s, &pair.y),
            GFactor::Limited(buf) => buf.push(&pair),
        };
        match applied {
            Ok(()) => {}
            Err(Error::CurvatureCondition { sy }) => {
                log::debug!("skipping H_g update: s^T y = {sy:e}");
                metrics.skipped = true;
            }
            Err(e) => return Err(e),
        }
        Ok(metrics)
    }

    fn update_a_factor(
        state: &mut KbfgsLayerState,
        config: &KbfgsConfig,
        a_outer_mean: &Matrix,
        a_bar: &[f64],
    ) -> Result<()> {
        match &mut state.a_factor {
            AFactor::HessianAction(st) => {
                st.step(a_outer_mean, a_bar)?;
            }
            AFactor::Exact { a, ha } => {
                a.decay_toward(config.beta, a_outer_mean)?;
                let mut lm = a.clone();
                lm.add_to_diagonal(config.damping_split());
                *ha = spd_inverse(&lm)?;
            }
        }
        Ok(())
    }
}

fn input_stats_only() -> TraceOptions {
    TraceOptions {
        input_outer: true,
        grad_outer: false,
    }
}

/// Mean of `E[ā ā^T]` per layer over the warm-start batches.
fn warm_input_factors(model: &NetworkModel, batches: &[DataBatch]) -> Result<Vec<Matrix>> {
    let mut sums: Vec<Matrix> = model
        .layers
        .iter()
        .map(|s| Matrix::zeros(s.in_dim + 1, s.in_dim + 1))
        .collect();
    for b in batches {
        let trace = forward_backward_with(model, b, input_stats_only())?;
        for (sum, lt) in sums.iter_mut().zip(&trace.layers) {
            sum.add_scaled(1.0, lt.a_outer_mean.as_ref().expect("requested"))?;
        }
    }
    let inv = 1.0 / batches.len().max(1) as f64;
    sums.iter_mut().for_each(|m| m.scale(inv));
    Ok(sums)
}

impl Optimizer for KbfgsOptimizer {
    fn name(&self) -> String {
        let mut name = String::from("kbfgs");
        if self.config.use_lbfgs {
            name.push_str("-l");
        }
        if self.config.skip_variant {
            name.push_str("-skip");
        }
        name
    }

    fn mu1(&self) -> Option<f64> {
        Some(self.config.mu1)
    }

    fn warm_start(
        &mut self,
        model: &NetworkModel,
        data: &Dataset,
        batch_size: usize,
        max_batches: Option<usize>,
    ) -> Result<()> {
        let batches = warm_batches(data, batch_size, max_batches);
        let factors = warm_input_factors(model, &batches)?;
        let lambda_a = self.config.damping_split();
        for (state, a) in self.layers.iter_mut().zip(factors) {
            let mut lm = a.clone();
            lm.add_to_diagonal(lambda_a);
            let ha = spd_inverse(&lm)?;
            state.a_factor = match &state.a_factor {
                AFactor::Exact { .. } => AFactor::Exact { a, ha },
                AFactor::HessianAction(st) => {
                    AFactor::HessianAction(HessianActionState::new(a, ha, st.lambda_a, st.beta))
                }
            };
            state.grad_ma.scale(0.0);
            let d = state.s_ma.len();
            state.g_factor = match &state.g_factor {
                GFactor::Dense(_) => GFactor::Dense(Matrix::identity(d)),
                GFactor::Limited(b) => GFactor::Limited(LbfgsBuffer::new(d, b.capacity())),
            };
        }
        Ok(())
    }

    fn step(&mut self, model: &mut NetworkModel, batch: &DataBatch) -> Result<StepMetrics> {
        let clock = Instant::now();
        self.iteration += 1;
        let cfg = self.config.clone();

        let first = forward_backward_with(model, batch, input_stats_only())?;

        let mut directions = Vec::with_capacity(self.layers.len());
        for (l, (state, lt)) in self.layers.iter_mut().zip(&first.layers).enumerate() {
            let grad = if cfg.double_grad {
                let prev = self.prev_second_grads.as_ref().map(|g| &g[l]);
                double_grad_average(&lt.grad_mean, prev)?
            } else {
                lt.grad_mean.clone()
            };
            let effective = if cfg.skip_variant {
                grad
            } else {
                state.grad_ma.decay_toward(cfg.beta, &grad)?;
                state.grad_ma.clone()
            };
            directions.push(precondition(
                &state.g_factor,
                &effective,
                state.a_factor.ha(),
            )?);
        }
        apply_step(model, &directions, self.step_size())?;

        let second = forward_backward_with(model, batch, TraceOptions::GRADIENT_ONLY)?;

        let mut layer_metrics = Vec::with_capacity(self.layers.len());
        for (state, (before, after)) in self
            .layers
            .iter_mut()
            .zip(first.layers.iter().zip(&second.layers))
        {
            for i in 0..state.s_ma.len() {
                state.s_ma[i] = cfg.beta * state.s_ma[i]
                    + (1.0 - cfg.beta) * (after.h_bar[i] - before.h_bar[i]);
                state.y_ma[i] = cfg.beta * state.y_ma[i]
                    + (1.0 - cfg.beta) * (after.g_bar[i] - before.g_bar[i]);
            }
            let (s, y) = (state.s_ma.clone(), state.y_ma.clone());
            layer_metrics.push(Self::update_g_factor(state, &cfg, &s, &y)?);
            Self::update_a_factor(
                state,
                &cfg,
                before.a_outer_mean.as_ref().expect("requested"),
                &before.a_bar_prev,
            )?;
        }
        if cfg.double_grad {
            self.prev_second_grads = Some(second.gradients());
        }

        Ok(StepMetrics {
            loss: first.loss,
            layers: layer_metrics,
            seconds: clock.elapsed().as_secs_f64(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct KfacLayerState {
    pub grad_ma: Matrix,
    pub a: Matrix,
    pub g: Matrix,
    pub ha: Matrix,
    pub hg: Matrix,
}

#[derive(Debug, Clone)]
pub struct KfacOptimizer {
    pub config: KfacConfig,
    pub layers: Vec<KfacLayerState>,
    rng: ChaCha8Rng,
    iteration: usize,
}

impl KfacOptimizer {
    pub fn new(model: &NetworkModel, config: KfacConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layers = model
            .layers
            .iter()
            .map(|s| {
                let (o, i) = (s.out_dim, s.in_dim + 1);
                KfacLayerState {
                    grad_ma: Matrix::zeros(o, i),
                    a: Matrix::zeros(i, i),
                    g: Matrix::zeros(o, o),
                    ha: Matrix::identity(i),
                    hg: Matrix::identity(o),
                }
            })
            .collect();
        Ok(Self {
            config,
            layers,
            rng: ChaCha8Rng::seed_from_u64(seed),
            iteration: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    fn sampled_trace(&mut self, model: &NetworkModel, inputs: &Matrix) -> Result<BatchTrace> {
        let targets = sample_predictive_targets(model, inputs, &mut self.rng)?;
        let sampled = DataBatch {
            inputs: inputs.clone(),
            targets,
        };
        forward_backward_with(model, &sampled, TraceOptions::ALL)
    }

    fn invert_factors(&mut self) -> Result<()> {
        let shift = self.config.lambda.sqrt();
        for st in &mut self.layers {
            let mut a = st.a.clone();
            a.add_to_diagonal(shift);
            st.ha = spd_inverse(&a)?;
            let mut g = st.g.clone();
            g.add_to_diagonal(shift);
            st.hg = spd_inverse(&g)?;
        }
        Ok(())
    }
}

impl Optimizer for KfacOptimizer {
    fn name(&self) -> String {
        "kfac".into()
    }

    fn warm_start(
        &mut self,
        model: &NetworkModel,
        data: &Dataset,
        batch_size: usize,
        max_batches: Option<usize>,
    ) -> Result<()> {
        let batches = warm_batches(data, batch_size, max_batches);
        for st in &mut self.layers {
            st.a.scale(0.0);
            st.g.scale(0.0);
            st.grad_ma.scale(0.0);
        }
        for b in &batches {
            let trace = self.sampled_trace(model, &b.inputs)?;
            for (st, lt) in self.layers.iter_mut().zip(&trace.layers) {
                st.a.add_scaled(1.0, lt.a_outer_mean.as_ref().expect("requested"))?;
                st.g.add_scaled(1.0, lt.g_outer_mean.as_ref().expect("requested"))?;
            }
        }
        let inv = 1.0 / batches.len().max(1) as f64;
        for st in &mut self.layers {
            st.a.scale(inv);
            st.g.scale(inv);
        }
        self.invert_factors()
    }

    fn step(&mut self, model: &mut NetworkModel, batch: &DataBatch) -> Result<StepMetrics> {
        let clock = Instant::now();
        self.iteration += 1;
        let beta = self.config.beta;

        let first = forward_backward_with(model, batch, TraceOptions::GRADIENT_ONLY)?;
        let mut directions = Vec::with_capacity(self.layers.len());
        for (st, lt) in self.layers.iter_mut().zip(&first.layers) {
            st.grad_ma.decay_toward(beta, &lt.grad_mean)?;
            let mut left = Matrix::zeros(st.hg.rows(), st.grad_ma.cols());
            gemm_view(
                1.0,
                View::of(&st.hg, false),
                View::of(&st.grad_ma, false),
                0.0,
                &mut left,
            );
            let mut p = Matrix::zeros(left.rows(), st.ha.cols());
            gemm_view(
                1.0,
                View::of(&left, false),
                View::of(&st.ha, false),
                0.0,
                &mut p,
            );
            directions.push(p);
        }
        apply_step(model, &directions, self.config.alpha)?;

        let second = self.sampled_trace(model, &batch.inputs)?;
        for (st, lt) in self.layers.iter_mut().zip(&second.layers) {
            st.a.decay_toward(beta, lt.a_outer_mean.as_ref().expect("requested"))?;
            st.g.decay_toward(beta, lt.g_outer_mean.as_ref().expect("requested"))?;
        }
        let t = self.config.inversion_period;
        if self.iteration <= t || self.iteration.is_multiple_of(t) {
            self.invert_factors()?;
        }

        Ok(StepMetrics {
            loss: first.loss,
            layers: vec![LayerStepMetrics::untouched(); self.layers.len()],
            seconds: clock.elapsed().as_secs_f64(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct FirstOrderOptimizer {
    pub kind: FirstOrderKind,
    pub config: FirstOrderConfig,
    pub m1: Vec<Matrix>,
    pub m2: Vec<Matrix>,
    t: u32,
}

impl FirstOrderOptimizer {
    pub fn new(
        model: &NetworkModel,
        kind: FirstOrderKind,
        config: FirstOrderConfig,
    ) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Matrix> = model
            .weights
            .iter()
            .map(|w| Matrix::zeros(w.rows(), w.cols()))
            .collect();
        Ok(Self {
            kind,
            config,
            m1: zeros.clone(),
            m2: zeros,
            t: 0,
        })
    }
}

impl Optimizer for FirstOrderOptimizer {
    fn name(&self) -> String {
        match self.kind {
            FirstOrderKind::Sgdm => "sgdm",
            FirstOrderKind::Adam => "adam",
            FirstOrderKind::Rmsprop => "rmsprop",
        }
        .into()
    }

    /// RMSprop starts `m2` at the mean squared minibatch gradient; the
    /// other methods have no curvature to estimate.
    fn warm_start(
        &mut self,
        model: &NetworkModel,
        data: &Dataset,
        batch_size: usize,
        max_batches: Option<usize>,
    ) -> Result<()> {
        if self.kind != FirstOrderKind::Rmsprop {
            return Ok(());
        }
        let batches = warm_batches(data, batch_size, max_batches);
        self.m2.iter_mut().for_each(|m| m.scale(0.0));
        for b in &batches {
            let trace = forward_backward_with(model, b, TraceOptions::GRADIENT_ONLY)?;
            for (m2, lt) in self.m2.iter_mut().zip(&trace.layers) {
                for (acc, g) in m2.as_mut_slice().iter_mut().zip(lt.grad_mean.as_slice()) {
                    *acc += g * g;
                }
            }
        }
        let inv = 1.0 / batches.len().max(1) as f64;
        self.m2.iter_mut().for_each(|m| m.scale(inv));
        Ok(())
    }

    fn step(&mut self, model: &mut NetworkModel, batch: &DataBatch) -> Result<StepMetrics> {
        let clock = Instant::now();
        self.t += 1;
        let c = &self.config;
        let trace = forward_backward_with(model, batch, TraceOptions::GRADIENT_ONLY)?;
        let mut directions = Vec::with_capacity(trace.layers.len());
        for (l, lt) in trace.layers.iter().enumerate() {
            let g = lt.grad_mean.as_slice();
            let m1 = self.m1[l].as_mut_slice();
            let m2 = self.m2[l].as_mut_slice();
            let mut p = vec![0.0; g.len()];
            match self.kind {
                FirstOrderKind::Sgdm => {
                    for i in 0..g.len() {
                        m1[i] = c.beta1 * m1[i] + g[i];
                        p[i] = m1[i];
                    }
                }
                FirstOrderKind::Rmsprop => {
                    for i in 0..g.len() {
                        m2[i] = c.beta2 * m2[i] + (1.0 - c.beta2) * g[i] * g[i];
                        p[i] = g[i] / (m2[i].sqrt() + c.epsilon);
                    }
                }
                FirstOrderKind::Adam => {
                    let bc1 = 1.0 - c.beta1.powi(self.t as i32);
                    let bc2 = 1.0 - c.beta2.powi(self.t as i32);
                    for i in 0..g.len() {
                        m1[i] = c.beta1 * m1[i] + (1.0 - c.beta1) * g[i];
                        m2[i] = c.beta2 * m2[i] + (1.0 - c.beta2) * g[i] * g[i];
                        p[i] = (m1[i] / bc1) / ((m2[i] / bc2).sqrt() + c.epsilon);
                    }
                }
            }
            let w = &model.weights[l];
            directions.push(Matrix::from_vec(w.rows(), w.cols(), p)?);
        }
        apply_step(model, &directions, c.alpha)?;
        Ok(StepMetrics {
            loss: trace.loss,
            layers: vec![LayerStepMetrics::untouched(); trace.layers.len()],
            seconds: clock.elapsed().as_secs_f64(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_autoencoder, SyntheticKind};
    use crate::linalg::{kron, symmetric_eigenvalues};
    use crate::mlp::{chain, forward_backward, Activation, LayerSpec, LossKind};

    fn toy_linear() -> NetworkModel {
        NetworkModel::from_weights(
            vec![LayerSpec::new(1, 1, Activation::Linear)],
            vec![Matrix::from_rows(&[&[1.0, 0.0]])],
            LossKind::Mse,
            0.0,
        )
        .unwrap()
    }

    fn toy_batch() -> DataBatch {
        DataBatch::new(Matrix::from_rows(&[&[1.0]]), Matrix::from_rows(&[&[0.0]])).unwrap()
    }

    fn small_net(seed: u64, act: Activation) -> (NetworkModel, Dataset) {
        let layers = chain(&[8, 5, 8], &[act, Activation::Sigmoid]).unwrap();
        let model = NetworkModel::init(layers, LossKind::BinaryEntropy, 1e-5, seed).unwrap();
        let data = synthetic_autoencoder(seed, 64, 8, SyntheticKind::Binary);
        (model, data)
    }

    #[test]
    fn warm_start_single_sample_hand_inverse() {
        let model = toy_linear();
        let data = Dataset::autoencoder(Matrix::from_rows(&[&[1.0]]), "one");
        let cfg = KbfgsConfig {
            lambda: 0.25,
            ..KbfgsConfig::default()
        };
        let mut opt = KbfgsOptimizer::new(&model, cfg).unwrap();
        opt.warm_start(&model, &data, 1, None).unwrap();
        // A = [[1,1],[1,1]], λ_A = 0.5 → (A + 0.5 I)^{-1} = [[1.5,-1],[-1,1.5]] / 1.25
        let expected = Matrix::from_rows(&[&[1.2, -0.8], &[-0.8, 1.2]]);
        let st = &opt.layers[0];
        assert!(st.a_factor.ha().max_abs_diff(&expected) < 1e-14);
        assert_eq!(st.g_factor.to_dense(), Matrix::identity(1));
        assert_eq!(st.grad_ma, Matrix::zeros(1, 2));
    }

    #[test]
    fn identity_preconditioner_reduces_to_sgd() {
        let mut model = toy_linear();
        let cfg = KbfgsConfig {
            alpha: 0.1,
            beta: 0.0,
            ..KbfgsConfig::default()
        };
        let mut opt = KbfgsOptimizer::new(&model, cfg).unwrap();
        for st in &mut opt.layers {
            if let AFactor::HessianAction(h) = &mut st.a_factor {
                h.ha = Matrix::identity(2);
            }
        }
        let grad = forward_backward(&model, &toy_batch()).unwrap().gradients();
        let before = model.weights[0].clone();
        opt.step(&mut model, &toy_batch()).unwrap();
        let mut expected = before;
        expected.add_scaled(-0.1, &grad[0]).unwrap();
        assert_eq!(model.weights[0], expected);
    }

    #[test]
    fn applied_step_matches_kronecker_product() {
        let (mut model, data) = small_net(2, Activation::Tanh);
        let mut opt = KbfgsOptimizer::new(&model, KbfgsConfig::default()).unwrap();
        opt.warm_start(&model, &data, 16, None).unwrap();
        let batch = data.slice(0, 16);
        for _ in 0..3 {
            opt.step(&mut model, &batch).unwrap();
        }
        let snapshot = opt.clone();
        let trace = forward_backward(&model, &batch).unwrap();
        let before = model.weights.clone();
        opt.step(&mut model, &batch).unwrap();
        let alpha = opt.config.alpha;
        for (l, st) in snapshot.layers.iter().enumerate() {
            let mut g = st.grad_ma.clone();
            g.decay_toward(0.9, &trace.layers[l].grad_mean).unwrap();
            let big = kron(st.a_factor.ha(), &st.g_factor.to_dense());
            let vec_p = big.matvec(&g.vec_columns());
            let p = Matrix::from_vec_columns(g.rows(), g.cols(), &vec_p);
            let mut delta = before[l].clone();
            delta.add_scaled(-1.0, &model.weights[l]).unwrap();
            delta.scale(1.0 / alpha);
            assert!(delta.max_abs_diff(&p) <= 1e-12 * (1.0 + p.max_abs()));
        }
    }

    #[test]
    fn hessian_action_keeps_ha_positive_definite() {
        let (mut model, data) = small_net(3, Activation::Relu);
        let mut opt = KbfgsOptimizer::new(&model, KbfgsConfig::default()).unwrap();
        opt.warm_start(&model, &data, 16, None).unwrap();
        let mut sampler = crate::data::BatchSampler::new(data.len(), 16, 0).unwrap();
        for _ in 0..20 {
            let b = sampler.next_batch(&data);
            opt.step(&mut model, &b).unwrap();
            for st in &opt.layers {
                assert!(symmetric_eigenvalues(st.a_factor.ha()).unwrap()[0] > 0.0);
            }
        }
    }

    #[test]
    fn trajectories_are_bit_identical() {
        for cfg in [
            KbfgsConfig::default(),
            KbfgsConfig {
                use_lbfgs: true,
                memory: 4,
                double_grad: true,
                ..KbfgsConfig::default()
            },
            KbfgsConfig {
                use_lbfgs: true,
                skip_variant: true,
                exact_a_inversion: true,
                ..KbfgsConfig::default()
            },
        ] {
            let run = || {
                let (mut model, data) = small_net(5, Activation::Tanh);
                let mut opt = KbfgsOptimizer::new(&model, cfg.clone()).unwrap();
                opt.warm_start(&model, &data, 16, None).unwrap();
                let mut sampler = crate::data::BatchSampler::new(data.len(), 16, 1).unwrap();
                let mut traj = Vec::new();
                for _ in 0..10 {
                    let b = sampler.next_batch(&data);
                    opt.step(&mut model, &b).unwrap();
                    traj.push(model.weights.clone());
                }
                traj
            };
            assert_eq!(run(), run());
        }
    }

    #[test]
    fn skip_variant_decays_learning_rate() {
        let model = toy_linear();
        let mut opt = KbfgsOptimizer::new(
            &model,
            KbfgsConfig {
                alpha: 1.0,
                skip_variant: true,
                ..KbfgsConfig::default()
            },
        )
        .unwrap();
        opt.iteration = 16;
        assert!((opt.step_size() - 16f64.powf(-0.75)).abs() < 1e-15);
    }

    #[test]
    fn double_grad_cases() {
        let g = Matrix::from_rows(&[&[1.0, -2.0]]);
        assert_eq!(double_grad_average(&g, None).unwrap(), g);
        assert_eq!(double_grad_average(&g, Some(&g)).unwrap(), g);
        let neg = g.scaled(-1.0);
        assert_eq!(
            double_grad_average(&g, Some(&neg)).unwrap(),
            Matrix::zeros(1, 2)
        );
    }

    #[test]
    fn config_validation() {
        let bad = KbfgsConfig {
            lambda: 0.0,
            ..KbfgsConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = KfacConfig {
            lambda: -1.0,
            ..KfacConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn kfac_factors_stay_psd_and_period_one() {
        let (mut model, data) = small_net(7, Activation::Tanh);
        let cfg = KfacConfig {
            alpha: 0.1,
            lambda: 0.1,
            inversion_period: 1,
            ..KfacConfig::default()
        };
        let mut opt = KfacOptimizer::new(&model, cfg, 0).unwrap();
        opt.warm_start(&model, &data, 16, None).unwrap();
        let mut sampler = crate::data::BatchSampler::new(data.len(), 16, 0).unwrap();
        for _ in 0..50 {
            let b = sampler.next_batch(&data);
            opt.step(&mut model, &b).unwrap();
            for st in &opt.layers {
                assert!(symmetric_eigenvalues(&st.a).unwrap()[0] >= -1e-10);
                assert!(symmetric_eigenvalues(&st.g).unwrap()[0] >= -1e-10);
                let mut g = st.g.clone();
                g.add_to_diagonal(0.1f64.sqrt());
                assert!(spd_inverse(&g).unwrap().max_abs_diff(&st.hg) < 1e-12);
            }
        }
    }

    #[test]
    fn kfac_large_damping_limit() {
        let mut model = toy_linear();
        let lambda = 1e8;
        let cfg = KfacConfig {
            alpha: 1.0,
            lambda,
            beta: 0.0,
            inversion_period: 1,
        };
        let mut opt = KfacOptimizer::new(&model, cfg, 0).unwrap();
        for st in &mut opt.layers {
            st.ha = Matrix::scaled_identity(2, 1.0 / (1.0 + lambda.sqrt()));
            st.hg = Matrix::scaled_identity(1, 1.0 / (1.0 + lambda.sqrt()));
        }
        let grad = forward_backward(&model, &toy_batch()).unwrap().gradients();
        let before = model.weights[0].clone();
        opt.step(&mut model, &toy_batch()).unwrap();
        let mut delta = before;
        delta.add_scaled(-1.0, &model.weights[0]).unwrap();
        let expected = grad[0].scaled(1.0 / lambda);
        assert!(delta.rel_diff(&expected) < 1e-3);
    }

    #[test]
    fn adam_first_step_has_magnitude_alpha() {
        let mut model = toy_linear();
        let cfg = FirstOrderConfig {
            alpha: 0.01,
            epsilon: 1e-12,
            ..FirstOrderConfig::default()
        };
        let mut opt = FirstOrderOptimizer::new(&model, FirstOrderKind::Adam, cfg).unwrap();
        let before = model.weights[0].clone();
        opt.step(&mut model, &toy_batch()).unwrap();
        for (b, a) in before.as_slice().iter().zip(model.weights[0].as_slice()) {
            assert!(((b - a) - 0.01).abs() < 1e-9);
        }
    }

    #[test]
    fn sgdm_without_momentum_is_sgd() {
        let mut model = toy_linear();
        let cfg = FirstOrderConfig {
            alpha: 0.1,
            beta1: 0.0,
            ..FirstOrderConfig::default()
        };
        let mut opt = FirstOrderOptimizer::new(&model, FirstOrderKind::Sgdm, cfg).unwrap();
        let grad = forward_backward(&model, &toy_batch()).unwrap().gradients();
        opt.step(&mut model, &toy_batch()).unwrap();
        let mut expected = Matrix::from_rows(&[&[1.0, 0.0]]);
        expected.add_scaled(-0.1, &grad[0]).unwrap();
        assert_eq!(model.weights[0], expected);
    }

    #[test]
    fn rmsprop_warm_started_step() {
        let mut model = toy_linear();
        let data = Dataset::new(
            Matrix::from_rows(&[&[1.0]]),
            Matrix::from_rows(&[&[0.0]]),
            "one",
        )
        .unwrap();
        let cfg = FirstOrderConfig {
            alpha: 0.1,
            epsilon: 1e-3,
            ..FirstOrderConfig::default()
        };
        let mut opt = FirstOrderOptimizer::new(&model, FirstOrderKind::Rmsprop, cfg).unwrap();
        opt.warm_start(&model, &data, 1, None).unwrap();
        let grad = forward_backward(&model, &toy_batch()).unwrap().gradients();
        assert_eq!(opt.m2[0].as_slice(), &[1.0, 1.0]);
        let before = model.weights[0].clone();
        opt.step(&mut model, &toy_batch()).unwrap();
        for i in 0..2 {
            let g = grad[0].as_slice()[i];
            let step = before.as_slice()[i] - model.weights[0].as_slice()[i];
            assert!((step - 0.1 * g / (g.abs() + 1e-3)).abs() < 1e-15);
        }
    }
}
