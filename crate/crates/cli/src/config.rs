//! Experiment configuration: a TOML file of flat keys grouped in sections,
//! overridable key by key from the command line.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use srr_core::{LossSpec, Metric, Regime};

use crate::spec::Split;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub matrix: MatrixSection,
    pub weighted: WeightedSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    /// CSV destination; `-` writes to stdout.
    pub output: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seeds: vec![0, 1, 2],
            output: PathBuf::from("results.csv"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory holding the four MNIST IDX files, optionally gzipped.
    pub mnist_dir: PathBuf,
    /// Stratified training subset size; 0 keeps all 60000.
    pub train_size: usize,
    /// Stratified test subset size; 0 keeps all 10000.
    pub test_size: usize,
    pub subset_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            mnist_dir: PathBuf::from("data/mnist"),
            train_size: 10_000,
            test_size: 0,
            subset_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { hidden: vec![256] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// `natural`, `corruption <perturbation>` or `pgd eps=<e> steps=<n>`.
    pub regime: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub loss: String,
    pub eval_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            regime: "natural".into(),
            epochs: 10,
            batch_size: 128,
            learning_rate: 0.1,
            momentum: 0.9,
            loss: "cross_entropy".into(),
            eval_every: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Each entry is `<loss> | <perturbation> k=<samples>` or
    /// `<loss> | pgd eps=<e> steps=<n>`.
    pub metrics: Vec<String>,
    pub splits: Vec<String>,
    /// Serialized network for the `eval` command.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub network: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            metrics: vec!["zero_one | dirac".into(), "zero_one | uniform_linf 0.3 k=100".into()],
            splits: vec!["test".into()],
            network: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// 0 means natural training.
    pub train_eps: Vec<f64>,
    pub eval_eps: Vec<f64>,
    pub samples: usize,
    pub clip: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            train_eps: vec![0.0, 0.1, 0.3, 0.5, 0.7],
            eval_eps: log_grid(1e-3, 0.7, 8),
            samples: 100,
            clip: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixSection {
    pub eps1: f64,
    pub eps2: f64,
    pub pgd_steps: usize,
    pub samples: usize,
}

impl Default for MatrixSection {
    fn default() -> Self {
        MatrixSection {
            eps1: 0.157,
            eps2: 0.5,
            pgd_steps: 7,
            samples: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightedSection {
    pub sigma: f64,
    pub class: usize,
    pub weight: f64,
    pub samples: usize,
    /// Replaces `train.learning_rate`: the heavy class weight makes the
    /// default rate diverge.
    pub learning_rate: f64,
    pub eval_every: usize,
}

impl Default for WeightedSection {
    fn default() -> Self {
        WeightedSection {
            sigma: 0.3,
            class: 8,
            weight: 100.0,
            samples: 100,
            learning_rate: 0.01,
            eval_every: 1,
        }
    }
}

/// `n` points spaced evenly in log scale from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| {
                if i == 0 {
                    lo
                } else if i == n - 1 {
                    hi
                } else {
                    (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp()
                }
            })
            .collect(),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).context("parsing config")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    /// Applies `section.key=value`. The value is read as a TOML literal and
    /// falls back to a plain string, so `train.regime=pgd eps=0.1 steps=7`
    /// needs no quoting.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .with_context(|| format!("override `{assignment}` is not key=value"))?;
        let Some((section, key)) = path.trim().split_once('.') else {
            bail!("override key `{path}` must look like section.key");
        };
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
        let mut table = toml::Table::try_from(&*self)?;
        let entry = table
            .entry(section.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        let Some(section_table) = entry.as_table_mut() else {
            bail!("`{section}` is not a section");
        };
        section_table.insert(key.to_string(), value);
        *self = table
            .try_into()
            .with_context(|| format!("applying override `{assignment}`"))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.run.seeds.is_empty(), "run.seeds must list at least one seed");
        ensure!(self.train.epochs > 0, "train.epochs must be positive");
        ensure!(self.train.batch_size > 0, "train.batch_size must be positive");
        ensure!(self.train.learning_rate > 0.0, "train.learning_rate must be positive");
        ensure!(
            (0.0..1.0).contains(&self.train.momentum),
            "train.momentum must lie in [0, 1)"
        );
        ensure!(self.train.eval_every > 0, "train.eval_every must be positive");
        self.regime()?;
        self.train_loss()?;
        self.eval_metrics()?;
        self.eval_splits()?;
        for &e in self.sweep.train_eps.iter() {
            ensure!(
                e.is_finite() && e >= 0.0,
                "sweep.train_eps entries must be non-negative, got {e}"
            );
        }
        for &e in self.sweep.eval_eps.iter() {
            ensure!(
                e.is_finite() && e > 0.0,
                "sweep.eval_eps entries must be positive, got {e}"
            );
        }
        ensure!(self.sweep.samples > 0, "sweep.samples must be positive");
        ensure!(
            self.matrix.eps1 > 0.0 && self.matrix.eps2 > 0.0,
            "matrix eps values must be positive"
        );
        ensure!(self.matrix.pgd_steps > 0, "matrix.pgd_steps must be positive");
        ensure!(self.matrix.samples > 0, "matrix.samples must be positive");
        ensure!(self.weighted.sigma > 0.0, "weighted.sigma must be positive");
        ensure!(self.weighted.weight > 0.0, "weighted.weight must be positive");
        ensure!(self.weighted.samples > 0, "weighted.samples must be positive");
        ensure!(
            self.weighted.learning_rate > 0.0,
            "weighted.learning_rate must be positive"
        );
        ensure!(self.weighted.eval_every > 0, "weighted.eval_every must be positive");
        Ok(())
    }

    pub fn regime(&self) -> Result<Regime> {
        self.train.regime.parse().context("train.regime")
    }

    pub fn train_loss(&self) -> Result<LossSpec> {
        let loss: LossSpec = self.train.loss.parse().context("train.loss")?;
        ensure!(
            loss.is_differentiable(),
            "train.loss must be differentiable, got `{loss}`"
        );
        Ok(loss)
    }

    pub fn eval_metrics(&self) -> Result<Vec<Metric>> {
        self.eval
            .metrics
            .iter()
            .map(|m| m.parse().with_context(|| format!("eval.metrics entry `{m}`")))
            .collect()
    }

    pub fn eval_splits(&self) -> Result<Vec<Split>> {
        self.eval.splits.iter().map(|s| s.parse()).collect()
    }
}
