//! Fully-connected feed-forward networks with the bias folded into the last
//! column of each weight matrix.
//!
//! A batch is processed as matrices whose rows are samples. For layer `l`
//! the homogeneous input is `Ā_{l-1} = [A_{l-1}, 1]`, the pre-activation is
//! `H_l = Ā_{l-1} W_l^T` and the output is `A_l = φ_l(H_l)`. The backward
//! pass produces the per-sample pre-activation gradients `g_l(i)`, from which
//! every averaged quantity in [`BatchTrace`] is derived.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::linalg::{gemm_view, gram_mean, Matrix, View};

/// Clamp applied to network outputs before taking logarithms.
pub const OUTPUT_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Linear,
}

impl Activation {
    #[inline]
    pub fn apply(self, h: f64) -> f64 {
        match self {
            Activation::Relu => h.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-h).exp()),
            Activation::Tanh => h.tanh(),
            Activation::Linear => h,
        }
    }

    /// Derivative given the pre-activation `h` and the output `a = φ(h)`.
    /// The ReLU subgradient at zero is zero.
    #[inline]
    pub fn derivative(self, h: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if h > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Tanh => 1.0 - a * a,
            Activation::Linear => 1.0,
        }
    }

    pub fn is_smooth(self) -> bool {
        !matches!(self, Activation::Relu)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    BinaryEntropy,
    Mse,
}

impl LossKind {
    /// Loss of one output unit.
    #[inline]
    pub fn unit_loss(self, a: f64, y: f64) -> f64 {
        match self {
            LossKind::BinaryEntropy => {
                let a = a.clamp(OUTPUT_CLAMP, 1.0 - OUTPUT_CLAMP);
                -(y * a.ln() + (1.0 - y) * (1.0 - a).ln())
            }
            LossKind::Mse => 0.5 * (a - y) * (a - y),
        }
    }

    /// Derivative of [`unit_loss`](Self::unit_loss) with respect to `a`; zero
    /// where the clamp is active.
    #[inline]
    pub fn unit_grad(self, a: f64, y: f64) -> f64 {
        match self {
            LossKind::BinaryEntropy => {
                if a <= OUTPUT_CLAMP || a >= 1.0 - OUTPUT_CLAMP {
                    0.0
                } else {
                    (1.0 - y) / (1.0 - a) - y / a
                }
            }
            LossKind::Mse => a - y,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
        }
    }
}

/// Builds a layer chain from widths and one activation per layer.
pub fn chain(widths: &[usize], activations: &[Activation]) -> Result<Vec<LayerSpec>> {
    if widths.len() < 2 || activations.len() != widths.len() - 1 {
        return Err(Error::Config(format!(
            "{} widths need {} activations, got {}",
            widths.len(),
            widths.len().saturating_sub(1),
            activations.len()
        )));
    }
    Ok(widths
        .windows(2)
        .zip(activations)
        .map(|(w, &act)| LayerSpec::new(w[0], w[1], act))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataBatch {
    /// One sample per row.
    pub inputs: Matrix,
    pub targets: Matrix,
}

impl DataBatch {
    pub fn new(inputs: Matrix, targets: Matrix) -> Result<Self> {
        if inputs.rows() != targets.rows() {
            return Err(dim_err(
                "DataBatch",
                format!("{} inputs vs {} targets", inputs.rows(), targets.rows()),
            ));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    pub layers: Vec<LayerSpec>,
    /// `W_l` is `out_dim x (in_dim + 1)`; the last column is the bias.
    pub weights: Vec<Matrix>,
    pub loss: LossKind,
    /// Coefficient `η` of the `(η/2)||θ||²` penalty.
    pub l2: f64,
}

impl NetworkModel {
    /// Glorot-uniform weights with zero biases.
    pub fn init(layers: Vec<LayerSpec>, loss: LossKind, l2: f64, seed: u64) -> Result<Self> {
        validate_layers(&layers)?;
        if !(l2 >= 0.0 && l2.is_finite()) {
            return Err(Error::Config(format!(
                "l2 coefficient must be >= 0, got {l2}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = layers
            .iter()
            .map(|spec| {
                let bound = (6.0 / (spec.in_dim + spec.out_dim) as f64).sqrt();
                Matrix::from_fn(spec.out_dim, spec.in_dim + 1, |_, j| {
                    if j == spec.in_dim {
                        0.0
                    } else {
                        rng.random_range(-bound..=bound)
                    }
                })
            })
            .collect();
        Ok(Self {
            layers,
            weights,
            loss,
            l2,
        })
    }

    pub fn from_weights(
        layers: Vec<LayerSpec>,
        weights: Vec<Matrix>,
        loss: LossKind,
        l2: f64,
    ) -> Result<Self> {
        validate_layers(&layers)?;
        if weights.len() != layers.len() {
            return Err(dim_err(
                "NetworkModel",
                format!("{} weights for {} layers", weights.len(), layers.len()),
            ));
        }
        for (l, (w, s)) in weights.iter().zip(&layers).enumerate() {
            if w.shape() != (s.out_dim, s.in_dim + 1) {
                return Err(dim_err(
                    "NetworkModel",
                    format!("layer {l}: weight {:?} for spec {s:?}", w.shape()),
                ));
            }
        }
        Ok(Self {
            layers,
            weights,
            loss,
            l2,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.as_slice().len()).sum()
    }

    fn penalty(&self) -> f64 {
        if self.l2 == 0.0 {
            return 0.0;
        }
        let sq: f64 = self
            .weights
            .iter()
            .flat_map(|w| w.as_slice())
            .map(|v| v * v)
            .sum();
        0.5 * self.l2 * sq
    }

    fn check_batch(&self, batch: &DataBatch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if batch.inputs.cols() != self.input_dim() || batch.targets.cols() != self.output_dim() {
            return Err(dim_err(
                "forward",
                format!(
                    "batch {}->{} for network {}->{}",
                    batch.inputs.cols(),
                    batch.targets.cols(),
                    self.input_dim(),
                    self.output_dim()
                ),
            ));
        }
        Ok(())
    }

    /// Network outputs for each input row.
    pub fn predict(&self, inputs: &Matrix) -> Result<Matrix> {
        if inputs.cols() != self.input_dim() {
            return Err(dim_err(
                "predict",
                format!("input width {} vs {}", inputs.cols(), self.input_dim()),
            ));
        }
        let mut a = homogeneous(inputs);
        let mut out = None;
        for (l, (spec, w)) in self.layers.iter().zip(&self.weights).enumerate() {
            let h = affine(&a, w);
            let act = activate(&h, spec.activation, l)?;
            if l + 1 == self.layers.len() {
                out = Some(act);
            } else {
                a = homogeneous(&act);
            }
        }
        Ok(out.expect("network has at least one layer"))
    }
}

fn validate_layers(layers: &[LayerSpec]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::Config("network needs at least one layer".into()));
    }
    for (l, s) in layers.iter().enumerate() {
        if s.in_dim == 0 || s.out_dim == 0 {
            return Err(Error::Config(format!("layer {l} has a zero dimension")));
        }
    }
    for (l, pair) in layers.windows(2).enumerate() {
        if pair[0].out_dim != pair[1].in_dim {
            return Err(Error::Config(format!(
                "layer {l} outputs {} but layer {} expects {}",
                pair[0].out_dim,
                l + 1,
                pair[1].in_dim
            )));
        }
    }
    Ok(())
}

/// Appends a column of ones.
fn homogeneous(x: &Matrix) -> Matrix {
    let (m, d) = x.shape();
    let mut out = Matrix::zeros(m, d + 1);
    for i in 0..m {
        let row = out.row_mut(i);
        row[..d].copy_from_slice(x.row(i));
        row[d] = 1.0;
    }
    out
}

/// `Ā W^T`
fn affine(a_hom: &Matrix, w: &Matrix) -> Matrix {
    let mut h = Matrix::zeros(a_hom.rows(), w.rows());
    gemm_view(1.0, View::of(a_hom, false), View::of(w, true), 0.0, &mut h);
    h
}

fn activate(h: &Matrix, act: Activation, layer: usize) -> Result<Matrix> {
    let mut a = h.clone();
    for v in a.as_mut_slice() {
        *v = act.apply(*v);
        if !v.is_finite() {
            return Err(Error::NumericalDivergence { layer });
        }
    }
    Ok(a)
}

/// Which optional second-moment statistics a pass should collect.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TraceOptions {
    pub input_outer: bool,
    pub grad_outer: bool,
}

impl TraceOptions {
    pub const ALL: TraceOptions = TraceOptions {
        input_outer: true,
        grad_outer: true,
    };
    pub const GRADIENT_ONLY: TraceOptions = TraceOptions {
        input_outer: false,
        grad_outer: false,
    };
}

#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Mean homogeneous input `ā_{l-1}` (length `in_dim + 1`).
    pub a_bar_prev: Vec<f64>,
    /// Mean of `ā_{l-1} ā_{l-1}^T`.
    pub a_outer_mean: Option<Matrix>,
    /// Mean pre-activation.
    pub h_bar: Vec<f64>,
    /// Mean pre-activation gradient.
    pub g_bar: Vec<f64>,
    /// Mean of `g g^T`.
    pub g_outer_mean: Option<Matrix>,
    /// Mean of `g ā^T` plus `η W_l`.
    pub grad_mean: Matrix,
}

#[derive(Debug, Clone)]
pub struct BatchTrace {
    pub layers: Vec<LayerTrace>,
    /// Mean per-sample loss plus the L2 penalty.
    pub loss: f64,
}

impl BatchTrace {
    pub fn gradients(&self) -> Vec<Matrix> {
        self.layers.iter().map(|l| l.grad_mean.clone()).collect()
    }
}

pub fn forward_backward(model: &NetworkModel, batch: &DataBatch) -> Result<BatchTrace> {
    forward_backward_with(model, batch, TraceOptions::ALL)
}

pub fn forward_backward_with(
    model: &NetworkModel,
    batch: &DataBatch,
    opts: TraceOptions,
) -> Result<BatchTrace> {
    model.check_batch(batch)?;
    let m = batch.len();
    let inv_m = 1.0 / m as f64;
    let n_layers = model.layers.len();

    let mut inputs = Vec::with_capacity(n_layers);
    let mut pre = Vec::with_capacity(n_layers);
    let mut post = Vec::with_capacity(n_layers);
    let mut a_hom = homogeneous(&batch.inputs);
    for (l, (spec, w)) in model.layers.iter().zip(&model.weights).enumerate() {
        let h = affine(&a_hom, w);
        let a = activate(&h, spec.activation, l)?;
        let next = homogeneous(&a);
        inputs.push(std::mem::replace(&mut a_hom, next));
        pre.push(h);
        post.push(a);
    }

    let output = post.last().expect("nonempty network");
    let mut data_loss = 0.0;
    let mut d_a = Matrix::zeros(m, model.output_dim());
    for i in 0..m {
        let (a_row, y_row) = (output.row(i), batch.targets.row(i));
        let mut sample = 0.0;
        for (n, (&a, &y)) in a_row.iter().zip(y_row).enumerate() {
            sample += model.loss.unit_loss(a, y);
            d_a[(i, n)] = model.loss.unit_grad(a, y);
        }
        data_loss += sample;
    }
    let loss = data_loss * inv_m + model.penalty();
    if !loss.is_finite() {
        return Err(Error::NumericalDivergence {
            layer: n_layers - 1,
        });
    }

    let mut traces: Vec<Option<LayerTrace>> = vec![None; n_layers];
    for l in (0..n_layers).rev() {
        let spec = model.layers[l];
        let w = &model.weights[l];
        let h = &pre[l];
        let a = &post[l];
        // g = Da ⊙ φ'(h), reusing the Da buffer.
        let mut g = d_a;
        for ((gv, &hv), &av) in g
            .as_mut_slice()
            .iter_mut()
            .zip(h.as_slice())
            .zip(a.as_slice())
        {
            *gv *= spec.activation.derivative(hv, av);
        }
        if !g.is_finite() {
            return Err(Error::NumericalDivergence { layer: l });
        }
        let a_prev = &inputs[l];

        let mut grad = w.scaled(model.l2);
        gemm_view(
            inv_m,
            View::of(&g, true),
            View::of(a_prev, false),
            1.0,
            &mut grad,
        );

        d_a = Matrix::zeros(m, spec.in_dim);
        if l > 0 {
            gemm_view(
                1.0,
                View::of(&g, false),
                View::leading_cols(w, spec.in_dim),
                0.0,
                &mut d_a,
            );
        }

        traces[l] = Some(LayerTrace {
            a_bar_prev: a_prev.column_means(),
            a_outer_mean: if opts.input_outer {
                Some(gram_mean(a_prev)?)
            } else {
                None
            },
            h_bar: h.column_means(),
            g_bar: g.column_means(),
            g_outer_mean: if opts.grad_outer {
                Some(gram_mean(&g)?)
            } else {
                None
            },
            grad_mean: grad,
        });
    }

    Ok(BatchTrace {
        layers: traces.into_iter().map(|t| t.expect("filled")).collect(),
        loss,
    })
}

/// Loss of the model on the batch: mean per-sample loss plus `(η/2)||θ||²`.
pub fn loss_only(model: &NetworkModel, batch: &DataBatch) -> Result<f64> {
    Ok(data_loss_sum(model, batch)? / batch.len() as f64 + model.penalty())
}

/// Sum of per-sample losses without the penalty; used for chunked
/// evaluation over a whole dataset.
pub fn data_loss_sum(model: &NetworkModel, batch: &DataBatch) -> Result<f64> {
    model.check_batch(batch)?;
    let out = model.predict(&batch.inputs)?;
    let mut total = 0.0;
    for i in 0..batch.len() {
        let sample: f64 = out
            .row(i)
            .iter()
            .zip(batch.targets.row(i))
            .map(|(&a, &y)| model.loss.unit_loss(a, y))
            .sum();
        total += sample;
    }
    if !total.is_finite() {
        return Err(Error::NumericalDivergence {
            layer: model.layers.len() - 1,
        });
    }
    Ok(total)
}

/// Penalty term alone, for callers that accumulate [`data_loss_sum`].
pub fn l2_penalty(model: &NetworkModel) -> f64 {
    model.penalty()
}

/// `W_l <- W_l - alpha * p_l` for every layer.
pub fn apply_step(model: &mut NetworkModel, directions: &[Matrix], alpha: f64) -> Result<()> {
    if directions.len() != model.weights.len() {
        return Err(dim_err(
            "apply_step",
            format!(
                "{} directions for {} layers",
                directions.len(),
                model.weights.len()
            ),
        ));
    }
    for (w, p) in model.weights.iter().zip(directions) {
        if w.shape() != p.shape() {
            return Err(dim_err(
                "apply_step",
                format!("direction {:?} for weight {:?}", p.shape(), w.shape()),
            ));
        }
    }
    for (w, p) in model.weights.iter_mut().zip(directions) {
        w.add_scaled(-alpha, p)?;
    }
    Ok(())
}

/// Targets drawn from the model's predictive distribution: Bernoulli per
/// unit for binary entropy, unit-variance Gaussian around the output for MSE.
pub fn sample_predictive_targets<R: Rng + ?Sized>(
    model: &NetworkModel,
    inputs: &Matrix,
    rng: &mut R,
) -> Result<Matrix> {
    let mut out = model.predict(inputs)?;
    match model.loss {
        LossKind::BinaryEntropy => {
            for v in out.as_mut_slice() {
                let p = v.clamp(0.0, 1.0);
                let draw = Bernoulli::new(p).expect("p in [0,1]").sample(rng);
                *v = if draw { 1.0 } else { 0.0 };
            }
        }
        LossKind::Mse => {
            for v in out.as_mut_slice() {
                let noise: f64 = StandardNormal.sample(rng);
                *v += noise;
            }
        }
    }
    Ok(out)
}
