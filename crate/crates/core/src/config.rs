//! Experiment configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticKind;
use crate::error::{Error, Result};
use crate::mlp::{chain, Activation, LayerSpec, LossKind};
use crate::optim::{FirstOrderConfig, FirstOrderKind, KbfgsConfig, KfacConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSpec {
    Idx {
        train: PathBuf,
        test: Option<PathBuf>,
        train_limit: Option<usize>,
        test_limit: Option<usize>,
    },
    Csv {
        train: PathBuf,
        test: Option<PathBuf>,
    },
    Synthetic {
        #[serde(default = "default_synthetic_n")]
        n: usize,
        #[serde(default = "default_synthetic_test_n")]
        test_n: usize,
        #[serde(default = "default_synthetic_kind")]
        variant: SyntheticKind,
    },
}

fn default_synthetic_n() -> usize {
    2000
}

fn default_synthetic_test_n() -> usize {
    500
}

fn default_synthetic_kind() -> SyntheticKind {
    SyntheticKind::Binary
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub preset: Option<String>,
    pub widths: Option<Vec<usize>>,
    pub activations: Option<Vec<Activation>>,
    pub loss: Option<LossKind>,
}

/// Architecture presets: widths, activations and loss.
pub fn preset(name: &str) -> Option<(Vec<usize>, Vec<Activation>, LossKind)> {
    use Activation::{Linear, Relu, Sigmoid};
    let (widths, acts, loss) = match name {
        "mnist-ae" => (
            vec![784, 1000, 500, 250, 30, 250, 500, 1000, 784],
            vec![Relu, Relu, Relu, Linear, Relu, Relu, Relu, Sigmoid],
            LossKind::BinaryEntropy,
        ),
        "faces-ae" => (
            vec![625, 2000, 1000, 500, 30, 500, 1000, 2000, 625],
            vec![Relu, Relu, Relu, Linear, Relu, Relu, Relu, Linear],
            LossKind::Mse,
        ),
        "curves-ae" => (
            vec![784, 400, 200, 100, 50, 25, 6, 25, 50, 100, 200, 400, 784],
            vec![
                Relu, Relu, Relu, Relu, Relu, Linear, Relu, Relu, Relu, Relu, Relu, Sigmoid,
            ],
            LossKind::BinaryEntropy,
        ),
        "tiny-ae" => (
            vec![16, 12, 6, 12, 16],
            vec![Relu, Linear, Relu, Sigmoid],
            LossKind::BinaryEntropy,
        ),
        _ => return None,
    };
    Some((widths, acts, loss))
}

impl ModelSpec {
    pub fn preset(name: &str) -> Self {
        Self {
            preset: Some(name.into()),
            ..Self::default()
        }
    }

    pub fn resolve(&self) -> Result<(Vec<LayerSpec>, LossKind)> {
        let (widths, acts, loss) = match (&self.preset, &self.widths) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "model: give either preset or widths, not both".into(),
                ))
            }
            (Some(name), None) => {
                let (w, a, l) = preset(name)
                    .ok_or_else(|| Error::Config(format!("model: unknown preset {name:?}")))?;
                if self.activations.is_some() {
                    return Err(Error::Config(
                        "model: activations cannot override a preset".into(),
                    ));
                }
                (w, a, self.loss.unwrap_or(l))
            }
            (None, Some(w)) => {
                let a = self
                    .activations
                    .clone()
                    .ok_or_else(|| Error::Config("model: widths require activations".into()))?;
                (w.clone(), a, self.loss.unwrap_or(LossKind::BinaryEntropy))
            }
            (None, None) => return Err(Error::Config("model: preset or widths required".into())),
        };
        let layers = chain(&widths, &acts).map_err(|e| Error::Config(format!("model: {e}")))?;
        Ok((layers, loss))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdmConfig {
    pub alpha: f64,
    pub momentum: f64,
}

impl Default for SgdmConfig {
    fn default() -> Self {
        Self {
            alpha: 0.03,
            momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerSpec {
    Kbfgs(KbfgsConfig),
    Kfac(KfacConfig),
    Sgdm(SgdmConfig),
    Adam(FirstOrderConfig),
    Rmsprop(FirstOrderConfig),
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec::Kbfgs(KbfgsConfig::default())
    }
}

impl OptimizerSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            OptimizerSpec::Kbfgs(c) => c.validate(),
            OptimizerSpec::Kfac(c) => c.validate(),
            OptimizerSpec::Sgdm(_) => self.first_order().expect("first order").1.validate(),
            OptimizerSpec::Adam(c) | OptimizerSpec::Rmsprop(c) => c.validate(),
        }
    }

    pub fn first_order(&self) -> Option<(FirstOrderKind, FirstOrderConfig)> {
        match self {
            OptimizerSpec::Sgdm(c) => Some((
                FirstOrderKind::Sgdm,
                FirstOrderConfig {
                    alpha: c.alpha,
                    beta1: c.momentum,
                    ..FirstOrderConfig::default()
                },
            )),
            OptimizerSpec::Adam(c) => Some((FirstOrderKind::Adam, c.clone())),
            OptimizerSpec::Rmsprop(c) => Some((FirstOrderKind::Rmsprop, c.clone())),
            _ => None,
        }
    }

    /// Copy with a different learning rate and, where it applies, damping
    /// (`λ` for curvature methods, `ε` for Adam/RMSprop).
    pub fn with_hyperparameters(&self, alpha: f64, damping: Option<f64>) -> Result<Self> {
        let mut out = self.clone();
        match &mut out {
            OptimizerSpec::Kbfgs(c) => {
                c.alpha = alpha;
                if let Some(d) = damping {
                    c.lambda = d;
                }
            }
            OptimizerSpec::Kfac(c) => {
                c.alpha = alpha;
                if let Some(d) = damping {
                    c.lambda = d;
                }
            }
            OptimizerSpec::Sgdm(c) => {
                if damping.is_some() {
                    return Err(Error::Config("grid: damping does not apply to sgdm".into()));
                }
                c.alpha = alpha;
            }
            OptimizerSpec::Adam(c) | OptimizerSpec::Rmsprop(c) => {
                c.alpha = alpha;
                if let Some(d) = damping {
                    c.epsilon = d;
                }
            }
        }
        out.validate()?;
        Ok(out)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub alpha: Vec<f64>,
    #[serde(default)]
    pub damping: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonitorSpec {
    pub enabled: bool,
    /// Layers whose factors exceed this size are not eigen-decomposed.
    pub max_dim: usize,
}

impl Default for MonitorSpec {
    fn default() -> Self {
        Self {
            enabled: false,
            max_dim: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSpec,
    #[serde(default = "default_model")]
    pub model: ModelSpec,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_l2")]
    pub l2: f64,
    /// Warm-start batches; the whole training set when absent.
    #[serde(default)]
    pub warm_start_batches: Option<usize>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub monitor: MonitorSpec,
}

fn default_model() -> ModelSpec {
    ModelSpec::preset("tiny-ae")
}

fn default_epochs() -> usize {
    20
}

fn default_batch_size() -> usize {
    1000
}

fn default_l2() -> f64 {
    1e-5
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    /// Config with every default filled in.
    pub fn new(data: DataSpec, model: ModelSpec, optimizer: OptimizerSpec) -> Self {
        Self {
            data,
            model,
            optimizer,
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            seed: 0,
            l2: default_l2(),
            warm_start_batches: None,
            out: default_out(),
            grid: None,
            monitor: MonitorSpec::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative data paths are taken relative to the
    /// file's directory.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.data {
            DataSpec::Idx { train, test, .. } | DataSpec::Csv { train, test } => {
                fix(train);
                if let Some(t) = test {
                    fix(t);
                }
            }
            DataSpec::Synthetic { .. } => {}
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.model.resolve()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::Config(format!("l2 must be >= 0, got {}", self.l2)));
        }
        if let DataSpec::Synthetic { n, .. } = self.data {
            if n == 0 {
                return Err(Error::Config("data: n must be at least 1".into()));
            }
        }
        if let Some(g) = &self.grid {
            if g.alpha.is_empty() {
                return Err(Error::Config("grid: alpha list is empty".into()));
            }
            for &a in &g.alpha {
                self.optimizer
                    .with_hyperparameters(a, g.damping.first().copied())?;
            }
            for &d in &g.damping {
                self.optimizer.with_hyperparameters(g.alpha[0], Some(d))?;
            }
        }
        Ok(())
    }
}
