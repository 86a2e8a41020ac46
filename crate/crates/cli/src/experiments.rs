//! The experiment commands. Each returns its CSV rows; a failed cell becomes
//! a row with a non-empty `error` column and the remaining cells still run.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, ensure, Context, Result};
use serde::Serialize;
use srr_core::train::EvalSpec;
use srr_core::{
    data, train, Dataset, LossSpec, Metric, Network, PerturbationSpec, PgdConfig, Regime, RiskEstimate, TrainHistory,
};

use crate::config::ExperimentConfig;
use crate::spec::{CellSpec, DataSpec, Source, Split, TrainSpec};

pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

impl DataSpec {
    pub fn load(&self) -> Result<Splits> {
        let pick = |prefix: &str, size: usize| -> Result<Dataset> {
            let full = data::load_mnist(&self.mnist_dir, prefix)
                .with_context(|| format!("loading MNIST `{prefix}` from {}", self.mnist_dir.display()))?;
            if size == 0 || size == full.len() {
                Ok(full)
            } else {
                Ok(full.subset(size, self.subset_seed)?)
            }
        };
        Ok(Splits {
            train: pick("train", self.train_size)?,
            test: pick("t10k", self.test_size)?,
        })
    }
}

/// Loaded datasets and trained networks, reused across cells.
#[derive(Default)]
pub struct Cache {
    data: HashMap<DataSpec, Splits>,
    nets: HashMap<String, Network>,
}

impl Cache {
    pub fn splits(&mut self, spec: &DataSpec) -> Result<&Splits> {
        if !self.data.contains_key(spec) {
            let loaded = spec.load()?;
            self.data.insert(spec.clone(), loaded);
        }
        Ok(&self.data[spec])
    }

    /// Network a cell is evaluated on: trained from its spec (memoized) or
    /// read from disk.
    pub fn network(&mut self, cell: &CellSpec) -> Result<Network> {
        match &cell.source {
            Source::File(path) => Network::load(path).with_context(|| format!("loading {}", path.display())),
            Source::Trained(t) => {
                let key = format!("{:?} | {t:?} | {}", cell.data, cell.seed);
                if let Some(net) = self.nets.get(&key) {
                    return Ok(net.clone());
                }
                let splits = self.splits(&cell.data)?;
                let (net, _) = train_network(t, cell.seed, splits, Vec::new(), t.epochs)?;
                self.nets.insert(key, net.clone());
                Ok(net)
            }
        }
    }

    /// Re-executes one cell from its spec.
    pub fn run_cell(&mut self, cell: &CellSpec) -> Result<RiskEstimate> {
        let net = self.network(cell)?;
        let splits = self.splits(&cell.data)?;
        Ok(cell.metric.evaluate(&net, splits.get(cell.split), cell.seed)?)
    }
}

pub fn train_network(
    spec: &TrainSpec,
    seed: u64,
    splits: &Splits,
    eval: Vec<EvalSpec>,
    eval_every: usize,
) -> Result<(Network, TrainHistory)> {
    let mut sizes = vec![splits.train.dim()];
    sizes.extend(&spec.hidden);
    sizes.push(splits.train.class_count());
    let net = Network::init(&sizes, seed)?;
    let mut config = spec.config(seed);
    config.eval = eval;
    config.eval_every = eval_every;
    Ok(train(net, &splits.train, &splits.test, &config)?)
}

/// Estimate columns shared by every row type.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub estimate: Result<RiskEstimate, String>,
    pub wall_time: f64,
}

impl Outcome {
    fn measure(f: impl FnOnce() -> Result<RiskEstimate>) -> Self {
        let started = Instant::now();
        let estimate = f().map_err(|e| format!("{e:#}"));
        Outcome {
            estimate,
            wall_time: started.elapsed().as_secs_f64(),
        }
    }

    fn failed(error: &str) -> Self {
        Outcome {
            estimate: Err(error.to_string()),
            wall_time: 0.0,
        }
    }

    fn mean(&self) -> Option<f64> {
        self.estimate.as_ref().ok().map(|e| e.mean)
    }

    fn std_error(&self) -> Option<f64> {
        self.estimate.as_ref().ok().map(|e| e.std_error)
    }

    fn n_terms(&self) -> Option<usize> {
        self.estimate.as_ref().ok().map(|e| e.n_terms)
    }

    fn error(&self) -> String {
        self.estimate.as_ref().err().cloned().unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub train_eps: f64,
    pub eval_eps: f64,
    pub seed: u64,
    pub mean: Option<f64>,
    pub std_error: Option<f64>,
    pub n_terms: Option<usize>,
    pub wall_time: f64,
    pub spec: String,
    pub error: String,
}

/// `value` is a risk (error rate); accuracy is `1 - value`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatrixRow {
    pub training_method: String,
    pub metric: String,
    pub split: String,
    pub seed: u64,
    pub value: Option<f64>,
    pub std_error: Option<f64>,
    pub n_terms: Option<usize>,
    pub wall_time: f64,
    pub spec: String,
    pub error: String,
}

/// `wall_time` is seconds since the start of training.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WeightedRow {
    pub regime: String,
    pub epoch: usize,
    pub metric: String,
    pub split: String,
    pub seed: u64,
    pub value: Option<f64>,
    pub std_error: Option<f64>,
    pub n_terms: Option<usize>,
    pub wall_time: f64,
    pub spec: String,
    pub error: String,
}

/// One estimate from `train` (with `epoch`) or `eval` (epoch left empty).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EstimateRow {
    pub epoch: Option<usize>,
    pub metric: String,
    pub split: String,
    pub seed: u64,
    pub mean: Option<f64>,
    pub std_error: Option<f64>,
    pub n_terms: Option<usize>,
    pub wall_time: f64,
    pub spec: String,
    pub error: String,
}

/// Rows that may record a failure.
pub trait CellRow {
    fn failed(&self) -> bool;
}

macro_rules! cell_row {
    ($($t:ty),*) => {
        $(impl CellRow for $t {
            fn failed(&self) -> bool {
                !self.error.is_empty()
            }
        })*
    };
}
cell_row!(SweepRow, MatrixRow, WeightedRow, EstimateRow);

fn log(msg: impl AsRef<str>) {
    eprintln!("[srr] {}", msg.as_ref());
}

impl ExperimentConfig {
    pub fn data_spec(&self) -> DataSpec {
        DataSpec {
            mnist_dir: self.data.mnist_dir.clone(),
            train_size: self.data.train_size,
            test_size: self.data.test_size,
            subset_seed: self.data.subset_seed,
        }
    }

    fn train_spec(&self, regime: Regime, loss: LossSpec, learning_rate: f64) -> TrainSpec {
        TrainSpec {
            hidden: self.model.hidden.clone(),
            regime,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate,
            momentum: self.train.momentum,
            loss,
        }
    }
}

/// Loads the configured data, or the error message every cell will carry.
fn load_splits(cfg: &ExperimentConfig) -> Result<Splits, String> {
    let spec = cfg.data_spec();
    log(format!("loading MNIST from {}", spec.mnist_dir.display()));
    spec.load().map_err(|e| format!("{e:#}"))
}

fn train_cell(
    splits: &Result<Splits, String>,
    spec: &TrainSpec,
    seed: u64,
    eval: Vec<EvalSpec>,
    eval_every: usize,
) -> Result<(Network, TrainHistory), String> {
    let splits = splits.as_ref().map_err(Clone::clone)?;
    let started = Instant::now();
    log(format!("training `{}` seed {seed}", spec.regime));
    let out = train_network(spec, seed, splits, eval, eval_every).map_err(|e| format!("training failed: {e:#}"));
    log(format!("  done in {:.1}s", started.elapsed().as_secs_f64()));
    out
}

fn evaluate(
    net: &Result<(Network, TrainHistory), String>,
    splits: &Result<Splits, String>,
    metric: &Metric,
    split: Split,
    seed: u64,
) -> Outcome {
    match (net, splits) {
        (Ok((net, _)), Ok(splits)) => Outcome::measure(|| Ok(metric.evaluate(net, splits.get(split), seed)?)),
        (Err(e), _) | (_, Err(e)) => Outcome::failed(e),
    }
}

fn linf(eps: f64, clip: bool) -> Result<PerturbationSpec> {
    Ok(PerturbationSpec::uniform_linf(eps)?.clipped(clip))
}

/// A-TSRM on the test set over an evaluation grid, for one network per
/// training radius and seed. Radius 0 is natural training.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let s = &cfg.sweep;
    let loss = cfg.train_loss()?;
    let eval_specs = s
        .eval_eps
        .iter()
        .map(|&e| Ok((e, linf(e, s.clip)?)))
        .collect::<Result<Vec<_>>>()?;
    let splits = load_splits(cfg);
    let mut rows = Vec::new();
    for &train_eps in &s.train_eps {
        let regime = if train_eps == 0.0 {
            Regime::Natural
        } else {
            Regime::Corruption(linf(train_eps, s.clip)?)
        };
        let train_spec = cfg.train_spec(regime, loss.clone(), cfg.train.learning_rate);
        for &seed in &cfg.run.seeds {
            let net = train_cell(&splits, &train_spec, seed, Vec::new(), cfg.train.epochs);
            for (eval_eps, pert) in &eval_specs {
                let metric = Metric::accuracy_tsrm(*pert, s.samples);
                let outcome = evaluate(&net, &splits, &metric, Split::Test, seed);
                let spec = CellSpec {
                    data: cfg.data_spec(),
                    source: Source::Trained(train_spec.clone()),
                    metric,
                    split: Split::Test,
                    seed,
                };
                rows.push(SweepRow {
                    train_eps,
                    eval_eps: *eval_eps,
                    seed,
                    mean: outcome.mean(),
                    std_error: outcome.std_error(),
                    n_terms: outcome.n_terms(),
                    wall_time: outcome.wall_time,
                    spec: spec.to_string(),
                    error: outcome.error(),
                });
            }
        }
    }
    Ok(rows)
}

/// Natural, two corruption radii and PGD training, each evaluated on
/// natural error, A-TSRM at both radii and PGD adversarial error, on both
/// splits.
pub fn run_matrix(cfg: &ExperimentConfig) -> Result<Vec<MatrixRow>> {
    cfg.validate()?;
    let m = &cfg.matrix;
    let loss = cfg.train_loss()?;
    let pgd = PgdConfig::new(m.eps1, m.pgd_steps)?;
    let methods = [
        ("natural".to_string(), Regime::Natural),
        (
            format!("corruption_{}", m.eps1),
            Regime::Corruption(linf(m.eps1, false)?),
        ),
        (
            format!("corruption_{}", m.eps2),
            Regime::Corruption(linf(m.eps2, false)?),
        ),
        (format!("pgd_{}", m.eps1), Regime::Pgd(pgd)),
    ];
    let metrics = [
        ("natural".to_string(), Metric::natural(LossSpec::ZeroOne)),
        (
            format!("atsrm_{}", m.eps1),
            Metric::accuracy_tsrm(linf(m.eps1, false)?, m.samples),
        ),
        (
            format!("atsrm_{}", m.eps2),
            Metric::accuracy_tsrm(linf(m.eps2, false)?, m.samples),
        ),
        (
            format!("adversarial_{}", m.eps1),
            Metric::Adversarial {
                loss: LossSpec::ZeroOne,
                pgd,
            },
        ),
    ];
    let splits = load_splits(cfg);
    let mut rows = Vec::new();
    for (method, regime) in &methods {
        let train_spec = cfg.train_spec(regime.clone(), loss.clone(), cfg.train.learning_rate);
        for &seed in &cfg.run.seeds {
            let net = train_cell(&splits, &train_spec, seed, Vec::new(), cfg.train.epochs);
            for (name, metric) in &metrics {
                for split in [Split::Train, Split::Test] {
                    let outcome = evaluate(&net, &splits, metric, split, seed);
                    let spec = CellSpec {
                        data: cfg.data_spec(),
                        source: Source::Trained(train_spec.clone()),
                        metric: metric.clone(),
                        split,
                        seed,
                    };
                    rows.push(MatrixRow {
                        training_method: method.clone(),
                        metric: name.clone(),
                        split: split.to_string(),
                        seed,
                        value: outcome.mean(),
                        std_error: outcome.std_error(),
                        n_terms: outcome.n_terms(),
                        wall_time: outcome.wall_time,
                        spec: spec.to_string(),
                        error: outcome.error(),
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// Epochs at which a run of `epochs` with snapshots every `every` epochs
/// records metrics.
fn snapshot_epochs(epochs: usize, every: usize) -> Vec<usize> {
    (1..=epochs).filter(|e| e % every == 0 || *e == epochs).collect()
}

/// Learning curves of natural and Gaussian-corruption training under a
/// class-weighted cross-entropy loss.
pub fn run_weighted(cfg: &ExperimentConfig) -> Result<Vec<WeightedRow>> {
    cfg.validate()?;
    let w = &cfg.weighted;
    let splits = load_splits(cfg);
    let classes = splits.as_ref().map(|s| s.train.class_count()).unwrap_or(10);
    let loss = LossSpec::weighted_class(classes, w.class, w.weight)?;
    let noise = PerturbationSpec::gaussian(w.sigma)?;
    let metrics = [
        ("natural_risk", Metric::natural(loss.clone())),
        (
            "srr",
            Metric::Risk {
                loss: loss.clone(),
                perturbation: noise,
                samples: w.samples,
            },
        ),
    ];
    let eval: Vec<EvalSpec> = metrics.iter().map(|(n, m)| EvalSpec::new(*n, m.clone())).collect();
    let mut rows = Vec::new();
    for (name, regime) in [("natural", Regime::Natural), ("corruption", Regime::Corruption(noise))] {
        let train_spec = cfg.train_spec(regime, loss.clone(), w.learning_rate);
        for &seed in &cfg.run.seeds {
            let run = train_cell(&splits, &train_spec, seed, eval.clone(), w.eval_every);
            for epoch in snapshot_epochs(train_spec.epochs, w.eval_every) {
                let snapshot = run.as_ref().map_err(Clone::clone).and_then(|(_, h)| {
                    h.snapshots
                        .iter()
                        .find(|s| s.epoch == epoch)
                        .ok_or_else(|| format!("no snapshot at epoch {epoch}"))
                });
                for (metric_name, metric) in &metrics {
                    for split in [Split::Train, Split::Test] {
                        let (outcome, wall_time) = match &snapshot {
                            Ok(s) => {
                                let list = if split == Split::Train { &s.train } else { &s.test };
                                let est = list
                                    .iter()
                                    .find(|(n, _)| n == metric_name)
                                    .map(|(_, e)| e.clone())
                                    .ok_or_else(|| format!("snapshot lacks `{metric_name}`"));
                                (est, s.wall_time)
                            }
                            Err(e) => (Err(e.clone()), 0.0),
                        };
                        let outcome = Outcome {
                            estimate: outcome,
                            wall_time,
                        };
                        let spec = CellSpec {
                            data: cfg.data_spec(),
                            source: Source::Trained(TrainSpec {
                                epochs: epoch,
                                ..train_spec.clone()
                            }),
                            metric: metric.clone(),
                            split,
                            seed,
                        };
                        rows.push(WeightedRow {
                            regime: name.to_string(),
                            epoch,
                            metric: metric_name.to_string(),
                            split: split.to_string(),
                            seed,
                            value: outcome.mean(),
                            std_error: outcome.std_error(),
                            n_terms: outcome.n_terms(),
                            wall_time: outcome.wall_time,
                            spec: spec.to_string(),
                            error: outcome.error(),
                        });
                    }
                }
            }
        }
    }
    Ok(rows)
}

/// Where `train` stores the network of `seed`: next to the CSV output.
pub fn network_path(output: &Path, seed: u64) -> PathBuf {
    let stem = output
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .filter(|s| s != "-")
        .unwrap_or_else(|| "network".into());
    output.with_file_name(format!("{stem}_seed{seed}.srrnet"))
}

/// Trains one network per seed with the `[train]` settings, recording the
/// `[eval]` metrics on both splits at every snapshot, and saves each
/// network next to the output file.
pub fn run_train(cfg: &ExperimentConfig) -> Result<Vec<EstimateRow>> {
    cfg.validate()?;
    let metrics = cfg.eval_metrics()?;
    let eval: Vec<EvalSpec> = metrics
        .iter()
        .map(|m| EvalSpec::new(m.to_string(), m.clone()))
        .collect();
    let train_spec = cfg.train_spec(cfg.regime()?, cfg.train_loss()?, cfg.train.learning_rate);
    let splits = load_splits(cfg);
    let mut rows = Vec::new();
    for &seed in &cfg.run.seeds {
        let mut run = train_cell(&splits, &train_spec, seed, eval.clone(), cfg.train.eval_every);
        if let Ok((net, _)) = &run {
            let path = network_path(&cfg.run.output, seed);
            if let Err(e) = net.save(&path) {
                run = Err(format!("saving {}: {e}", path.display()));
            } else {
                log(format!("  saved {}", path.display()));
            }
        }
        for epoch in snapshot_epochs(cfg.train.epochs, cfg.train.eval_every) {
            let snapshot = run.as_ref().map_err(Clone::clone).and_then(|(_, h)| {
                h.snapshots
                    .iter()
                    .find(|s| s.epoch == epoch)
                    .ok_or_else(|| format!("no snapshot at epoch {epoch}"))
            });
            for metric in &metrics {
                let name = metric.to_string();
                for split in [Split::Train, Split::Test] {
                    let (estimate, wall_time) = match &snapshot {
                        Ok(s) => {
                            let list = if split == Split::Train { &s.train } else { &s.test };
                            let est = list
                                .iter()
                                .find(|(n, _)| *n == name)
                                .map(|(_, e)| e.clone())
                                .ok_or_else(|| format!("snapshot lacks `{name}`"));
                            (est, s.wall_time)
                        }
                        Err(e) => (Err(e.clone()), 0.0),
                    };
                    let outcome = Outcome { estimate, wall_time };
                    let spec = CellSpec {
                        data: cfg.data_spec(),
                        source: Source::Trained(TrainSpec {
                            epochs: epoch,
                            ..train_spec.clone()
                        }),
                        metric: metric.clone(),
                        split,
                        seed,
                    };
                    rows.push(estimate_row(Some(epoch), &name, split, seed, &outcome, &spec));
                }
            }
        }
    }
    Ok(rows)
}

fn estimate_row(
    epoch: Option<usize>,
    metric: &str,
    split: Split,
    seed: u64,
    outcome: &Outcome,
    spec: &CellSpec,
) -> EstimateRow {
    EstimateRow {
        epoch,
        metric: metric.to_string(),
        split: split.to_string(),
        seed,
        mean: outcome.mean(),
        std_error: outcome.std_error(),
        n_terms: outcome.n_terms(),
        wall_time: outcome.wall_time,
        spec: spec.to_string(),
        error: outcome.error(),
    }
}

/// Evaluates the network at `eval.network` on every `[eval]` metric, split
/// and seed.
pub fn run_eval(cfg: &ExperimentConfig) -> Result<Vec<EstimateRow>> {
    cfg.validate()?;
    let path = cfg
        .eval
        .network
        .clone()
        .ok_or_else(|| anyhow!("eval needs eval.network (or --network)"))?;
    let metrics = cfg.eval_metrics()?;
    let split_list = cfg.eval_splits()?;
    ensure!(!split_list.is_empty(), "eval.splits is empty");
    let splits = load_splits(cfg);
    let net = Network::load(&path)
        .map(|n| (n, TrainHistory::default()))
        .map_err(|e| format!("loading {}: {e}", path.display()));
    let mut rows = Vec::new();
    for &seed in &cfg.run.seeds {
        for metric in &metrics {
            for &split in &split_list {
                let outcome = evaluate(&net, &splits, metric, split, seed);
                let spec = CellSpec {
                    data: cfg.data_spec(),
                    source: Source::File(path.clone()),
                    metric: metric.clone(),
                    split,
                    seed,
                };
                rows.push(estimate_row(None, &metric.to_string(), split, seed, &outcome, &spec));
            }
        }
    }
    Ok(rows)
}

/// Outcome of re-running one recorded row.
#[derive(Clone, Debug)]
pub struct Replay {
    pub line: usize,
    pub spec: String,
    pub recorded: f64,
    pub reproduced: Result<f64, String>,
}

impl Replay {
    pub fn matches(&self) -> bool {
        matches!(self.reproduced, Ok(v) if v.to_bits() == self.recorded.to_bits())
    }
}

/// Re-executes every successful row of a CSV written by this tool and
/// compares the recomputed value bit for bit.
pub fn replay_csv(path: &Path, cache: &mut Cache) -> Result<Vec<Replay>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let spec_col = col("spec").context("CSV has no `spec` column")?;
    let value_col = col("mean")
        .or_else(|| col("value"))
        .context("CSV has no `mean` or `value` column")?;
    let error_col = col("error");
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        if error_col.is_some_and(|c| !record[c].is_empty()) {
            continue;
        }
        let spec_text = record[spec_col].to_string();
        let recorded: f64 = record[value_col]
            .parse()
            .with_context(|| format!("row {}: bad value `{}`", i + 2, &record[value_col]))?;
        let reproduced = spec_text
            .parse::<CellSpec>()
            .and_then(|spec| cache.run_cell(&spec))
            .map(|e| e.mean)
            .map_err(|e| format!("{e:#}"));
        out.push(Replay {
            line: i + 2,
            spec: spec_text,
            recorded,
            reproduced,
        });
    }
    Ok(out)
}
