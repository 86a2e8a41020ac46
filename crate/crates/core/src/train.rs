//! Natural, corruption and PGD-adversarial training.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::LossSpec;
use crate::nn::{Network, ParamGrads, SgdState};
use crate::perturb::PerturbationSpec;
use crate::risk::{pgd_from, pgd_start, Metric, PgdConfig, RiskEstimate};
use crate::rng::{self, Domain};

#[derive(Clone, Debug, PartialEq)]
pub enum Regime {
    Natural,
    /// One fresh draw from the perturbation distribution per point per epoch.
    Corruption(PerturbationSpec),
    /// Gradients taken at the PGD adversarial example of each point.
    Pgd(PgdConfig),
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regime::Natural => f.write_str("natural"),
            Regime::Corruption(spec) => write!(f, "corruption {spec}"),
            Regime::Pgd(cfg) => write!(f, "{cfg}"),
        }
    }
}

impl FromStr for Regime {
    type Err = Error;

    /// `natural`, `corruption <perturbation>` or `pgd ...`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "natural" {
            Ok(Regime::Natural)
        } else if let Some(spec) = s.strip_prefix("corruption ") {
            Ok(Regime::Corruption(spec.parse()?))
        } else if s.starts_with("pgd") {
            Ok(Regime::Pgd(s.parse()?))
        } else {
            Err(Error::Config(format!("unrecognised training regime `{s}`")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSpec {
    pub name: String,
    pub metric: Metric,
}

impl EvalSpec {
    pub fn new(name: impl Into<String>, metric: Metric) -> Self {
        EvalSpec {
            name: name.into(),
            metric,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub loss: LossSpec,
    /// Evaluate every this many epochs; the final epoch is always evaluated.
    pub eval_every: usize,
    pub eval: Vec<EvalSpec>,
}

impl TrainConfig {
    pub fn new(regime: Regime, epochs: usize, seed: u64) -> Self {
        TrainConfig {
            regime,
            epochs,
            batch_size: 128,
            learning_rate: 0.1,
            momentum: 0.9,
            seed,
            loss: LossSpec::CrossEntropy,
            eval_every: epochs.max(1),
            eval: Vec::new(),
        }
    }

    pub fn validate(&self, train_len: usize) -> Result<()> {
        self.loss.require_differentiable()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 || self.batch_size > train_len {
            return Err(Error::Config(format!(
                "batch size {} must lie in 1..={train_len}",
                self.batch_size
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        if let Regime::Pgd(cfg) = &self.regime {
            cfg.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    /// Number of completed epochs.
    pub epoch: usize,
    pub train: Vec<(String, RiskEstimate)>,
    pub test: Vec<(String, RiskEstimate)>,
    /// Seconds since training started.
    pub wall_time: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub snapshots: Vec<Snapshot>,
    /// Mean training loss of each epoch, at the inputs actually trained on.
    pub epoch_losses: Vec<f64>,
    /// Perturbation draws consumed per training point.
    pub draw_counts: Vec<u32>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&Snapshot> {
        self.snapshots.last()
    }

    /// Train-minus-test gap of the named metric at the last snapshot.
    pub fn generalization_gap(&self, name: &str) -> Result<f64> {
        let snap = self
            .last()
            .ok_or_else(|| Error::Config("history has no snapshots".into()))?;
        let find = |rows: &[(String, RiskEstimate)]| {
            rows.iter()
                .find(|(n, _)| n == name)
                .map(|(_, e)| e.clone())
                .ok_or_else(|| Error::Config(format!("no metric named `{name}`")))
        };
        generalization_gap(&find(&snap.train)?, &find(&snap.test)?)
    }
}

/// `train.mean - test.mean`; both estimates must come from the same metric.
pub fn generalization_gap(train: &RiskEstimate, test: &RiskEstimate) -> Result<f64> {
    let (a, b) = (&train.spec, &test.spec);
    if a.loss != b.loss || a.threat != b.threat || a.seed != b.seed {
        return Err(Error::Config(
            "generalization gap needs the same metric on both splits".into(),
        ));
    }
    Ok(train.mean - test.mean)
}

/// Evaluates `metric` on both splits and returns `(gap, train, test)`.
pub fn measure_gap(
    net: &Network,
    train: &Dataset,
    test: &Dataset,
    metric: &Metric,
    seed: u64,
) -> Result<(f64, RiskEstimate, RiskEstimate)> {
    let a = metric.evaluate(net, train, seed)?;
    let b = metric.evaluate(net, test, seed)?;
    Ok((generalization_gap(&a, &b)?, a, b))
}

fn with_context(err: Error, epoch: usize, batch: usize) -> Error {
    match err {
        Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch}, batch {batch}: {msg}")),
        other => other,
    }
}

/// Trains `net` with minibatch SGD under `config.regime`.
pub fn train(
    mut net: Network,
    train_data: &Dataset,
    test_data: &Dataset,
    config: &TrainConfig,
) -> Result<(Network, TrainHistory)> {
    config.validate(train_data.len())?;
    config.loss.validate(net.output_dim())?;
    for data in [train_data, test_data] {
        if data.dim() != net.input_dim() {
            return Err(Error::shape("dataset dimension", net.input_dim(), data.dim()));
        }
        if data.class_count() != net.output_dim() {
            return Err(Error::shape("dataset classes", net.output_dim(), data.class_count()));
        }
    }

    let started = Instant::now();
    let n = train_data.len();
    let d = train_data.dim();
    let seed = config.seed;
    let mut sgd = SgdState::new(&net, config.learning_rate, config.momentum)?;
    let mut grads = ParamGrads::zeros_like(&net);
    let mut history = TrainHistory {
        draw_counts: vec![0; n],
        ..TrainHistory::default()
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut xs = Vec::with_capacity(config.batch_size * d);
    let mut ys = Vec::with_capacity(config.batch_size);

    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(seed, Domain::Shuffle, epoch as u64, 0));
        let mut epoch_loss = 0.0;

        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            xs.clear();
            ys.clear();
            ys.extend(batch.iter().map(|&i| train_data.label(i)));
            match &config.regime {
                Regime::Natural => {
                    for &i in batch {
                        xs.extend_from_slice(train_data.input(i));
                    }
                }
                Regime::Corruption(spec) => {
                    xs.resize(batch.len() * d, 0.0);
                    for (r, &i) in batch.iter().enumerate() {
                        let mut rng = rng::stream(seed, Domain::Corruption, i as u64, epoch as u64);
                        spec.sample_into(train_data.input(i), &mut rng, &mut xs[r * d..(r + 1) * d]);
                        history.draw_counts[i] += 1;
                    }
                }
                Regime::Pgd(cfg) => {
                    let mut centers = Vec::with_capacity(batch.len() * d);
                    for &i in batch {
                        let x = train_data.input(i);
                        centers.extend_from_slice(x);
                        let mut rng = rng::stream(seed, Domain::PgdStart, i as u64, epoch as u64);
                        xs.extend(pgd_start(x, cfg, &mut rng));
                    }
                    let start = std::mem::take(&mut xs);
                    xs = pgd_from(&net, &centers, start, &ys, cfg, &config.loss)
                        .map_err(|e| with_context(e, epoch, b))?;
                }
            }

            grads.fill_zero();
            let total = net
                .accumulate_gradients(&xs, &ys, &config.loss, &mut grads)
                .map_err(|e| with_context(e, epoch, b))?;
            grads.scale(1.0 / batch.len() as f64);
            net.sgd_step(&grads, &mut sgd).map_err(|e| with_context(e, epoch, b))?;
            epoch_loss += total;
        }

        history.epoch_losses.push(epoch_loss / n as f64);
        let done = epoch + 1;
        if done % config.eval_every == 0 || done == config.epochs {
            history
                .snapshots
                .push(snapshot(&net, train_data, test_data, config, done, started)?);
        }
    }
    Ok((net, history))
}

fn snapshot(
    net: &Network,
    train_data: &Dataset,
    test_data: &Dataset,
    config: &TrainConfig,
    epoch: usize,
    started: Instant,
) -> Result<Snapshot> {
    let eval = |data: &Dataset| {
        config
            .eval
            .iter()
            .map(|e| Ok((e.name.clone(), e.metric.evaluate(net, data, config.seed)?)))
            .collect::<Result<Vec<_>>>()
    };
    Ok(Snapshot {
        epoch,
        train: eval(train_data)?,
        test: eval(test_data)?,
        wall_time: started.elapsed().as_secs_f64(),
    })
}
