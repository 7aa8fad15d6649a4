//! Training runs, per-epoch CSV metrics and grid search.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::{DataSpec, ExperimentConfig, OptimizerSpec};
use crate::data::{load_csv, load_idx, synthetic_autoencoder, BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::mlp::{data_loss_sum, l2_penalty, DataBatch, NetworkModel};
use crate::optim::{FirstOrderOptimizer, KbfgsOptimizer, KfacOptimizer, Optimizer, StepMetrics};
use crate::verify::{BoundMonitor, MonitorReport};

pub const CSV_HEADER: &str = "epoch,train_loss,test_error,wall_seconds,dd_fraction_min,dd_fraction_per_layer,skipped_updates,diverged";

const EVAL_CHUNK: usize = 1000;

/// Any of the supported optimizers.
#[derive(Debug, Clone)]
pub enum AnyOptimizer {
    Kbfgs(KbfgsOptimizer),
    Kfac(KfacOptimizer),
    FirstOrder(FirstOrderOptimizer),
}

impl AnyOptimizer {
    pub fn build(spec: &OptimizerSpec, model: &NetworkModel, seed: u64) -> Result<Self> {
        Ok(match spec {
            OptimizerSpec::Kbfgs(c) => AnyOptimizer::Kbfgs(KbfgsOptimizer::new(model, c.clone())?),
            OptimizerSpec::Kfac(c) => {
                AnyOptimizer::Kfac(KfacOptimizer::new(model, c.clone(), seed.wrapping_add(2))?)
            }
            _ => {
                let (kind, cfg) = spec.first_order().expect("remaining kinds are first order");
                AnyOptimizer::FirstOrder(FirstOrderOptimizer::new(model, kind, cfg)?)
            }
        })
    }

    fn inner(&mut self) -> &mut dyn Optimizer {
        match self {
            AnyOptimizer::Kbfgs(o) => o,
            AnyOptimizer::Kfac(o) => o,
            AnyOptimizer::FirstOrder(o) => o,
        }
    }

    fn inner_ref(&self) -> &dyn Optimizer {
        match self {
            AnyOptimizer::Kbfgs(o) => o,
            AnyOptimizer::Kfac(o) => o,
            AnyOptimizer::FirstOrder(o) => o,
        }
    }
}

impl Optimizer for AnyOptimizer {
    fn name(&self) -> String {
        self.inner_ref().name()
    }

    fn warm_start(
        &mut self,
        model: &NetworkModel,
        data: &Dataset,
        batch_size: usize,
        max_batches: Option<usize>,
    ) -> Result<()> {
        self.inner()
            .warm_start(model, data, batch_size, max_batches)
    }

    fn step(&mut self, model: &mut NetworkModel, batch: &DataBatch) -> Result<StepMetrics> {
        self.inner().step(model, batch)
    }

    fn mu1(&self) -> Option<f64> {
        self.inner_ref().mu1()
    }
}

/// Training and test sets for a config.
pub fn load_data(cfg: &ExperimentConfig, input_dim: usize) -> Result<(Dataset, Option<Dataset>)> {
    let (train, test) = match &cfg.data {
        DataSpec::Idx {
            train,
            test,
            train_limit,
            test_limit,
        } => {
            let mut tr = load_idx(train, true)?;
            if let Some(n) = train_limit {
                tr = tr.truncated(*n);
            }
            let te = match test {
                Some(p) => {
                    let mut t = load_idx(p, true)?;
                    if let Some(n) = test_limit {
                        t = t.truncated(*n);
                    }
                    Some(t)
                }
                None => None,
            };
            (tr, te)
        }
        DataSpec::Csv { train, test } => (
            load_csv(train, true)?,
            test.as_deref().map(|p| load_csv(p, true)).transpose()?,
        ),
        DataSpec::Synthetic { n, test_n, variant } => {
            let all =
                synthetic_autoencoder(cfg.seed.wrapping_add(3), n + test_n, input_dim, *variant);
            let train = all.slice(0, *n);
            let test = all.slice(*n, n + test_n);
            (
                Dataset::new(train.inputs, train.targets, all.name.clone())?,
                (*test_n > 0)
                    .then(|| Dataset::new(test.inputs, test.targets, all.name.clone()))
                    .transpose()?,
            )
        }
    };
    for d in std::iter::once(&train).chain(test.as_ref()) {
        if d.input_dim() != input_dim {
            return Err(Error::Config(format!(
                "data {:?} has {} features, model expects {input_dim}",
                d.name,
                d.input_dim()
            )));
        }
    }
    Ok((train, test))
}

/// Full-set loss (mean per-sample loss plus penalty) without touching the
/// model.
pub fn evaluate_loss(model: &NetworkModel, data: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    let mut start = 0;
    while start < data.len() {
        let end = (start + EVAL_CHUNK).min(data.len());
        total += data_loss_sum(model, &data.slice(start, end))?;
        start = end;
    }
    Ok(total / data.len() as f64 + l2_penalty(model))
}

/// Mean over samples of the summed squared reconstruction error.
pub fn evaluate_squared_error(model: &NetworkModel, data: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    let mut start = 0;
    while start < data.len() {
        let end = (start + EVAL_CHUNK).min(data.len());
        let b = data.slice(start, end);
        let out = model.predict(&b.inputs)?;
        total += out
            .as_slice()
            .iter()
            .zip(b.targets.as_slice())
            .map(|(a, y)| (a - y) * (a - y))
            .sum::<f64>();
        start = end;
    }
    if !total.is_finite() {
        return Err(Error::NumericalDivergence {
            layer: model.layers.len() - 1,
        });
    }
    Ok(total / data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub train_loss: f64,
    pub test_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_error: Option<f64>,
    /// Training time since the start of warm start, evaluation excluded.
    pub wall_seconds: f64,
    pub dd_fraction: Vec<Option<f64>>,
    pub skipped_updates: usize,
    pub diverged: bool,
}

impl EpochRecord {
    pub fn dd_fraction_min(&self) -> Option<f64> {
        self.dd_fraction.iter().flatten().copied().reduce(f64::min)
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(fmt_num).unwrap_or_default();
        let per_layer: Vec<String> = self.dd_fraction.iter().map(|v| opt(*v)).collect();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            fmt_num(self.train_loss),
            opt(self.test_error),
            fmt_num(self.wall_seconds),
            opt(self.dd_fraction_min()),
            if self.dd_fraction.iter().all(Option::is_none) {
                String::new()
            } else {
                per_layer.join(";")
            },
            self.skipped_updates,
            u8::from(self.diverged)
        )
    }
}

/// Nine significant digits.
pub fn fmt_num(v: f64) -> String {
    format!("{v:.8e}")
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub optimizer: String,
    /// Evaluation after warm start, before any update.
    pub initial: Evaluation,
    pub records: Vec<EpochRecord>,
    /// Set when the run stopped on a non-finite value.
    pub divergence: Option<String>,
    pub csv_path: PathBuf,
    pub model: NetworkModel,
    pub monitor: Option<MonitorReport>,
}

impl RunOutcome {
    pub fn diverged(&self) -> bool {
        self.divergence.is_some()
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.train_loss)
    }

    /// Lowest finite training loss over the epochs and the epoch it was
    /// reached; the post-warm-start value when no epoch ran.
    pub fn best_train_loss(&self) -> Option<(f64, usize)> {
        let best = self
            .records
            .iter()
            .filter(|r| r.train_loss.is_finite())
            .map(|r| (r.train_loss, r.epoch))
            .reduce(|a, b| if b.0 < a.0 { b } else { a });
        match best {
            Some(b) => Some(b),
            None if self.records.is_empty() && self.initial.train_loss.is_finite() => {
                Some((self.initial.train_loss, 0))
            }
            None => None,
        }
    }
}

fn evaluate(model: &NetworkModel, train: &Dataset, test: Option<&Dataset>) -> Result<Evaluation> {
    Ok(Evaluation {
        train_loss: evaluate_loss(model, train)?,
        test_error: test.map(|t| evaluate_squared_error(model, t)).transpose()?,
    })
}

/// Trains per the config and writes `<out>/metrics.csv`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let (layers, loss) = cfg.model.resolve()?;
    let model = NetworkModel::init(layers, loss, cfg.l2, cfg.seed)?;
    let (train, test) = load_data(cfg, model.input_dim())?;
    run_with_data(cfg, model, &train, test.as_ref(), &cfg.out)
}

struct EpochTally {
    dd_pairs: Vec<usize>,
    dd_ok: Vec<usize>,
    skipped: usize,
}

impl EpochTally {
    fn new(layers: usize) -> Self {
        Self {
            dd_pairs: vec![0; layers],
            dd_ok: vec![0; layers],
            skipped: 0,
        }
    }

    fn add(&mut self, m: &StepMetrics, mu1: Option<f64>) {
        for (l, lm) in m.layers.iter().enumerate() {
            if lm.skipped {
                self.skipped += 1;
            }
            if let Some(ok) = mu1.and_then(|mu| lm.dd_ok(mu)) {
                self.dd_pairs[l] += 1;
                self.dd_ok[l] += usize::from(ok);
            }
        }
    }

    fn fractions(&self) -> Vec<Option<f64>> {
        self.dd_pairs
            .iter()
            .zip(&self.dd_ok)
            .map(|(&n, &k)| (n > 0).then(|| k as f64 / n as f64))
            .collect()
    }
}

/// Runs training on already loaded data, writing metrics into `out`.
pub fn run_with_data(
    cfg: &ExperimentConfig,
    mut model: NetworkModel,
    train: &Dataset,
    test: Option<&Dataset>,
    out: &Path,
) -> Result<RunOutcome> {
    fs::create_dir_all(out)?;
    let csv_path = out.join("metrics.csv");
    let mut csv = BufWriter::new(File::create(&csv_path)?);
    writeln!(csv, "{CSV_HEADER}")?;
    csv.flush()?;

    let mut opt = AnyOptimizer::build(&cfg.optimizer, &model, cfg.seed)?;
    let mut sampler = BatchSampler::new(train.len(), cfg.batch_size, cfg.seed.wrapping_add(1))?;
    let mu1 = opt.mu1();
    let inputs_bounded = train.inputs.max_abs() <= 1.0;
    let mut monitor = match (&opt, cfg.monitor.enabled) {
        (AnyOptimizer::Kbfgs(k), true) => Some(BoundMonitor::new(
            k,
            &model,
            cfg.monitor.max_dim,
            inputs_bounded,
        )),
        _ => None,
    };

    let mut train_seconds = 0.0;
    let clock = Instant::now();
    opt.warm_start(&model, train, cfg.batch_size, cfg.warm_start_batches)?;
    train_seconds += clock.elapsed().as_secs_f64();

    let mut outcome = RunOutcome {
        optimizer: opt.name(),
        initial: Evaluation {
            train_loss: f64::NAN,
            test_error: None,
        },
        records: Vec::new(),
        divergence: None,
        csv_path: csv_path.clone(),
        model: model.clone(),
        monitor: None,
    };
    match evaluate(&model, train, test) {
        Ok(e) => outcome.initial = e,
        Err(e @ Error::NumericalDivergence { .. }) => outcome.divergence = Some(e.to_string()),
        Err(e) => return Err(e),
    }
    if let (Some(mon), AnyOptimizer::Kbfgs(k)) = (monitor.as_mut(), &opt) {
        mon.observe_state(k, "epoch 0");
    }

    let per_epoch = sampler.batches_per_epoch();
    for epoch in 1..=cfg.epochs {
        if outcome.divergence.is_some() {
            break;
        }
        let mut tally = EpochTally::new(model.layers.len());
        let clock = Instant::now();
        let mut failure = None;
        for _ in 0..per_epoch {
            let batch = sampler.next_batch(train);
            match opt.step(&mut model, &batch) {
                Ok(m) => {
                    tally.add(&m, mu1);
                    if let Some(mon) = monitor.as_mut() {
                        mon.observe_step(&m);
                    }
                }
                Err(e @ Error::NumericalDivergence { .. }) => {
                    failure = Some(e.to_string());
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        train_seconds += clock.elapsed().as_secs_f64();

        let eval = match failure {
            Some(_) => None,
            None => match evaluate(&model, train, test) {
                Ok(e) => Some(e),
                Err(e @ Error::NumericalDivergence { .. }) => {
                    failure = Some(e.to_string());
                    None
                }
                Err(e) => return Err(e),
            },
        };
        if let (Some(mon), AnyOptimizer::Kbfgs(k)) = (monitor.as_mut(), &opt) {
            mon.observe_state(k, &format!("epoch {epoch}"));
        }
        let record = EpochRecord {
            epoch,
            train_loss: eval.map_or(f64::NAN, |e| e.train_loss),
            test_error: eval.and_then(|e| e.test_error),
            wall_seconds: train_seconds,
            dd_fraction: tally.fractions(),
            skipped_updates: tally.skipped,
            diverged: failure.is_some(),
        };
        writeln!(csv, "{}", record.csv_row())?;
        csv.flush()?;
        log::info!(
            "{} epoch {epoch}: train loss {:.6e}",
            outcome.optimizer,
            record.train_loss
        );
        outcome.records.push(record);
        outcome.divergence = failure;
    }

    outcome.model = model;
    outcome.monitor = monitor.map(BoundMonitor::into_report);
    if let Some(rep) = &outcome.monitor {
        write_monitor_csv(&out.join("monitor.csv"), rep)?;
    }
    Ok(outcome)
}

fn write_monitor_csv(path: &Path, rep: &MonitorReport) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(
        f,
        "layer,ha_min,ha_max,hg_min,hg_max,dd_fraction,skip_fraction"
    )?;
    let opt = |v: Option<f64>| v.map(fmt_num).unwrap_or_default();
    for (l, m) in rep.layers.iter().enumerate() {
        writeln!(
            f,
            "{l},{},{},{},{},{},{}",
            opt(m.ha_extremes.map(|e| e.0)),
            opt(m.ha_extremes.map(|e| e.1)),
            opt(m.hg_extremes.map(|e| e.0)),
            opt(m.hg_extremes.map(|e| e.1)),
            opt(m.dd_fraction()),
            opt(m.skip_fraction()),
        )?;
    }
    for v in &rep.violations {
        log::warn!("bound violation: {v}");
    }
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub alpha: f64,
    pub damping: Option<f64>,
    pub best: Option<(f64, usize)>,
    pub diverged: bool,
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOutcome {
    pub cells: Vec<GridCell>,
    /// Index of the cell with the lowest training loss.
    pub best: Option<usize>,
    pub summary_path: PathBuf,
}

fn cell_dir_name(alpha: f64, damping: Option<f64>) -> String {
    match damping {
        Some(d) => format!("alpha_{alpha:e}_damping_{d:e}"),
        None => format!("alpha_{alpha:e}"),
    }
}

/// One run per `(α, damping)` pair, then `<out>/grid_summary.csv`.
pub fn run_grid(cfg: &ExperimentConfig) -> Result<GridOutcome> {
    cfg.validate()?;
    let grid = cfg
        .grid
        .as_ref()
        .ok_or_else(|| Error::Config("grid section missing".into()))?;
    let (layers, loss) = cfg.model.resolve()?;
    let base_model = NetworkModel::init(layers, loss, cfg.l2, cfg.seed)?;
    let (train, test) = load_data(cfg, base_model.input_dim())?;
    fs::create_dir_all(&cfg.out)?;

    let dampings: Vec<Option<f64>> = if grid.damping.is_empty() {
        vec![None]
    } else {
        grid.damping.iter().copied().map(Some).collect()
    };
    let mut cells = Vec::new();
    for &alpha in &grid.alpha {
        for &damping in &dampings {
            let mut cell_cfg = cfg.clone();
            cell_cfg.optimizer = cfg.optimizer.with_hyperparameters(alpha, damping)?;
            cell_cfg.grid = None;
            let dir = cfg.out.join(cell_dir_name(alpha, damping));
            cell_cfg.out = dir.clone();
            let outcome =
                run_with_data(&cell_cfg, base_model.clone(), &train, test.as_ref(), &dir)?;
            cells.push(GridCell {
                alpha,
                damping,
                best: outcome.best_train_loss(),
                diverged: outcome.diverged(),
                dir,
            });
        }
    }
    let best = cells
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.best.map(|b| (i, b.0)))
        .reduce(|a, b| if b.1 < a.1 { b } else { a })
        .map(|(i, _)| i);

    let summary_path = cfg.out.join("grid_summary.csv");
    let mut f = BufWriter::new(File::create(&summary_path)?);
    writeln!(f, "alpha,damping,min_train_loss,best_epoch,diverged,best")?;
    for (i, c) in cells.iter().enumerate() {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            fmt_num(c.alpha),
            c.damping.map(fmt_num).unwrap_or_default(),
            c.best.map(|b| fmt_num(b.0)).unwrap_or_default(),
            c.best.map(|b| b.1.to_string()).unwrap_or_default(),
            u8::from(c.diverged),
            u8::from(best == Some(i)),
        )?;
    }
    f.flush()?;
    Ok(GridOutcome {
        cells,
        best,
        summary_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelSpec, OptimizerSpec};
    use crate::data::SyntheticKind;
    use crate::optim::KbfgsConfig;

    fn tiny(out: &Path, epochs: usize) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(
            DataSpec::Synthetic {
                n: 200,
                test_n: 50,
                variant: SyntheticKind::Binary,
            },
            ModelSpec::preset("tiny-ae"),
            OptimizerSpec::Kbfgs(KbfgsConfig::default()),
        );
        cfg.batch_size = 50;
        cfg.epochs = epochs;
        cfg.out = out.to_path_buf();
        cfg
    }

    #[test]
    fn three_epochs_three_rows() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&tiny(dir.path(), 3)).unwrap();
        let text = fs::read_to_string(&out.csv_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(out.records.iter().all(|r| r.train_loss.is_finite()));
        assert!(!text.contains('\r'));
    }

    #[test]
    fn zero_epochs_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&tiny(dir.path(), 0)).unwrap();
        assert_eq!(
            fs::read_to_string(&out.csv_path).unwrap(),
            format!("{CSV_HEADER}\n")
        );
        assert!(out.initial.train_loss.is_finite());
    }

    #[test]
    fn evaluation_does_not_move_weights() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path(), 2);
        let a = run_experiment(&cfg).unwrap();
        // Same trajectory with no evaluation at all: train manually.
        let (layers, loss) = cfg.model.resolve().unwrap();
        let mut model = NetworkModel::init(layers, loss, cfg.l2, cfg.seed).unwrap();
        let (train, _) = load_data(&cfg, model.input_dim()).unwrap();
        let mut opt = AnyOptimizer::build(&cfg.optimizer, &model, cfg.seed).unwrap();
        let mut sampler = BatchSampler::new(train.len(), cfg.batch_size, cfg.seed + 1).unwrap();
        opt.warm_start(&model, &train, cfg.batch_size, None)
            .unwrap();
        for _ in 0..2 * sampler.batches_per_epoch() {
            let b = sampler.next_batch(&train);
            opt.step(&mut model, &b).unwrap();
        }
        assert_eq!(model.weights, a.model.weights);
    }

    #[test]
    fn grid_one_by_one_matches_single_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(&dir.path().join("grid"), 2);
        cfg.grid = Some(crate::config::GridSpec {
            alpha: vec![0.3],
            damping: vec![0.3],
        });
        let g = run_grid(&cfg).unwrap();
        assert_eq!(g.cells.len(), 1);
        assert_eq!(g.best, Some(0));
        let single = run_experiment(&tiny(&dir.path().join("single"), 2)).unwrap();
        let strip = |p: &Path| -> Vec<String> {
            fs::read_to_string(p)
                .unwrap()
                .lines()
                .map(|l| {
                    let mut f: Vec<&str> = l.split(',').collect();
                    f[3] = "";
                    f.join(",")
                })
                .collect()
        };
        assert_eq!(
            strip(&g.cells[0].dir.join("metrics.csv")),
            strip(&single.csv_path)
        );
        let summary = fs::read_to_string(&g.summary_path).unwrap();
        assert_eq!(summary.lines().count(), 2);
    }

    #[test]
    fn grid_best_is_argmin() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path(), 2);
        cfg.grid = Some(crate::config::GridSpec {
            alpha: vec![0.01, 0.3],
            damping: vec![0.3, 1.0],
        });
        let g = run_grid(&cfg).unwrap();
        let min = g
            .cells
            .iter()
            .filter_map(|c| c.best.map(|b| b.0))
            .fold(f64::INFINITY, f64::min);
        assert_eq!(g.cells[g.best.unwrap()].best.unwrap().0, min);
    }

    #[test]
    fn monitor_file_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path(), 1);
        cfg.monitor.enabled = true;
        let out = run_experiment(&cfg).unwrap();
        let rep = out.monitor.unwrap();
        assert_eq!(rep.layers.len(), 4);
        assert!(dir.path().join("monitor.csv").exists());
    }
}
