//! Monte Carlo risk estimators.
//!
//! All estimators average per-term losses that are computed independently
//! and then reduced serially in `(point, sample)` order. Draw `j` for point
//! `n` always comes from `rng::stream(seed, domain, n, j)`, so results do not
//! depend on how the work is split across threads.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{parse_num, property_margin, LossSpec};
use crate::nn::{Network, BLOCK_ROWS};
use crate::perturb::{in_linf_ball, PerturbationSpec};
use crate::rng::{self, Domain};

/// Points handed to one worker at a time.
const POINTS_PER_TASK: usize = 16;

/// What kind of input distribution an estimate averaged over.
#[derive(Clone, Debug, PartialEq)]
pub enum Threat {
    /// Unperturbed inputs.
    Natural,
    /// Random perturbations, `samples` per point.
    Random { spec: PerturbationSpec, samples: usize },
    /// PGD worst case.
    Pgd(PgdConfig),
    /// Exhaustive grid over the L-inf ball.
    Grid { eps: f64, points_per_dim: usize },
}

impl fmt::Display for Threat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Threat::Natural => f.write_str("natural"),
            Threat::Random { spec, samples } => write!(f, "{spec} k={samples}"),
            Threat::Pgd(cfg) => write!(f, "{cfg}"),
            Threat::Grid { eps, points_per_dim } => write!(f, "grid eps={eps} points={points_per_dim}"),
        }
    }
}

/// Provenance of a [`RiskEstimate`].
#[derive(Clone, Debug, PartialEq)]
pub struct EstimateSpec {
    pub loss: LossSpec,
    pub threat: Threat,
    pub points: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RiskEstimate {
    pub mean: f64,
    /// Sample standard deviation of the terms over `sqrt(n_terms)`.
    pub std_error: f64,
    pub n_terms: usize,
    pub spec: EstimateSpec,
}

impl RiskEstimate {
    pub fn from_terms(terms: &[f64], spec: EstimateSpec) -> Self {
        let n = terms.len();
        let mean = terms.iter().sum::<f64>() / n as f64;
        let std_error = if n > 1 {
            let ss: f64 = terms.iter().map(|t| (t - mean) * (t - mean)).sum();
            (ss / (n - 1) as f64).sqrt() / (n as f64).sqrt()
        } else {
            0.0
        };
        RiskEstimate {
            mean,
            std_error,
            n_terms: n,
            spec,
        }
    }

    /// `sqrt(se_a^2 + se_b^2)`
    pub fn joint_std_error(&self, other: &RiskEstimate) -> f64 {
        self.std_error.hypot(other.std_error)
    }
}

/// Settings for the projected-gradient attack on an L-inf ball.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PgdConfig {
    pub eps: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
}

impl PgdConfig {
    /// Step size `2.5 * eps / steps` with a random start.
    pub fn new(eps: f64, steps: usize) -> Result<Self> {
        Self::with_step(eps, steps, 2.5 * eps / steps.max(1) as f64, true)
    }

    pub fn with_step(eps: f64, steps: usize, step_size: f64, random_start: bool) -> Result<Self> {
        let cfg = PgdConfig {
            eps,
            steps,
            step_size,
            random_start,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `eps = 0` is accepted and makes the attack the identity.
    pub fn validate(&self) -> Result<()> {
        if !(self.eps.is_finite() && self.eps >= 0.0) {
            return Err(Error::Config(format!("pgd eps must be non-negative, got {}", self.eps)));
        }
        if self.steps == 0 {
            return Err(Error::Config("pgd needs at least one step".into()));
        }
        if !(self.step_size.is_finite() && (self.step_size > 0.0 || self.eps == 0.0)) {
            return Err(Error::Config(format!(
                "pgd step size must be positive, got {}",
                self.step_size
            )));
        }
        Ok(())
    }
}

impl fmt::Display for PgdConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "pgd eps={} steps={} step={} random_start={}",
            self.eps, self.steps, self.step_size, self.random_start
        )
    }
}

impl FromStr for PgdConfig {
    type Err = Error;

    /// `pgd eps=<e> steps=<n>` with optional `step=<s>` and
    /// `random_start=<bool>`; omitted fields take the [`PgdConfig::new`]
    /// defaults.
    fn from_str(s: &str) -> Result<Self> {
        let mut words = s.split_whitespace();
        if words.next() != Some("pgd") {
            return Err(Error::Config(format!("expected `pgd ...`, got `{s}`")));
        }
        let (mut eps, mut steps, mut step, mut random_start) = (None, None, None, true);
        for word in words {
            let (key, value) = word
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{word}`")))?;
            match key {
                "eps" => eps = Some(parse_num::<f64>(key, value)?),
                "steps" => steps = Some(parse_num::<usize>(key, value)?),
                "step" => step = Some(parse_num::<f64>(key, value)?),
                "random_start" => random_start = parse_num(key, value)?,
                _ => return Err(Error::Config(format!("unknown pgd field `{key}`"))),
            }
        }
        let eps = eps.ok_or_else(|| Error::Config("pgd needs eps".into()))?;
        let steps = steps.unwrap_or(7);
        let step = step.unwrap_or(2.5 * eps / steps.max(1) as f64);
        Self::with_step(eps, steps, step, random_start)
    }
}

fn check_compatible(net: &Network, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Domain("empty dataset".into()));
    }
    if data.dim() != net.input_dim() {
        return Err(Error::shape("dataset dimension", net.input_dim(), data.dim()));
    }
    if data.class_count() != net.output_dim() {
        return Err(Error::shape("dataset classes", net.output_dim(), data.class_count()));
    }
    Ok(())
}

fn point_chunks(n: usize) -> Vec<Range<usize>> {
    (0..n)
        .step_by(POINTS_PER_TASK)
        .map(|s| s..(s + POINTS_PER_TASK).min(n))
        .collect()
}

/// Runs `work` over point ranges in parallel and concatenates in order.
fn par_points<F>(n: usize, work: F) -> Result<Vec<f64>>
where
    F: Fn(Range<usize>) -> Result<Vec<f64>> + Sync + Send,
{
    let parts = point_chunks(n).into_par_iter().map(&work).collect::<Result<Vec<_>>>()?;
    Ok(parts.concat())
}

/// Loss of each data point at its unperturbed input.
pub(crate) fn natural_terms(net: &Network, data: &Dataset, loss: &LossSpec) -> Result<Vec<f64>> {
    par_points(data.len(), |range| {
        let d = data.dim();
        let m = net.output_dim();
        let logits = net.forward_batch(&data.inputs()[range.start * d..range.end * d], range.len())?;
        range
            .enumerate()
            .map(|(j, n)| loss.value(&logits[j * m..(j + 1) * m], data.label(n)))
            .collect()
    })
}

/// `term(logits, y)` for `samples` draws around every point, ordered by
/// point then draw.
fn perturbed_terms<T>(
    net: &Network,
    data: &Dataset,
    spec: &PerturbationSpec,
    samples: usize,
    seed: u64,
    term: T,
) -> Result<Vec<f64>>
where
    T: Fn(&[f64], usize) -> Result<f64> + Sync,
{
    let d = data.dim();
    let m = net.output_dim();
    par_points(data.len(), |range| {
        let rows: Vec<(usize, usize)> = range.flat_map(|n| (0..samples).map(move |j| (n, j))).collect();
        let mut out = Vec::with_capacity(rows.len());
        let mut buf = vec![0.0; BLOCK_ROWS * d];
        for block in rows.chunks(BLOCK_ROWS) {
            for (r, &(n, j)) in block.iter().enumerate() {
                let mut rng = rng::stream(seed, Domain::Estimate, n as u64, j as u64);
                spec.sample_into(data.input(n), &mut rng, &mut buf[r * d..(r + 1) * d]);
            }
            let logits = net.forward_batch(&buf[..block.len() * d], block.len())?;
            for (r, &(n, _)) in block.iter().enumerate() {
                out.push(term(&logits[r * m..(r + 1) * m], data.label(n))?);
            }
        }
        Ok(out)
    })
}

fn violation(logits: &[f64], y: usize) -> Result<f64> {
    Ok(if property_margin(logits, y)? >= 0.0 { 1.0 } else { 0.0 })
}

/// Average loss over the dataset at the unperturbed inputs.
pub fn empirical_risk(net: &Network, data: &Dataset, loss: &LossSpec) -> Result<RiskEstimate> {
    check_compatible(net, data)?;
    loss.validate(net.output_dim())?;
    let terms = natural_terms(net, data, loss)?;
    Ok(RiskEstimate::from_terms(
        &terms,
        EstimateSpec {
            loss: loss.clone(),
            threat: Threat::Natural,
            points: data.len(),
            seed: 0,
        },
    ))
}

/// Statistically robust risk: the loss averaged over the data and over
/// `samples` perturbations of each point.
///
/// A Dirac perturbation is deterministic, so its draws collapse to a single
/// evaluation per point and the result equals [`empirical_risk`].
pub fn srr_estimate(
    net: &Network,
    data: &Dataset,
    spec: &PerturbationSpec,
    loss: &LossSpec,
    samples: usize,
    seed: u64,
) -> Result<RiskEstimate> {
    if samples == 0 {
        return Err(Error::Config("need at least one sample per point".into()));
    }
    if spec.is_dirac() && !spec.clip_to_unit_box() {
        return empirical_risk(net, data, loss);
    }
    check_compatible(net, data)?;
    loss.validate(net.output_dim())?;
    let terms = perturbed_terms(net, data, spec, samples, seed, |l, y| loss.value(l, y))?;
    Ok(RiskEstimate::from_terms(
        &terms,
        EstimateSpec {
            loss: loss.clone(),
            threat: Threat::Random { spec: *spec, samples },
            points: data.len(),
            seed,
        },
    ))
}

/// Total statistical robustness metric: probability that a perturbed input
/// violates the property (here, is misclassified). With the violation event
/// defined by the classification margin this is the accuracy version.
pub fn tsrm_estimate(
    net: &Network,
    data: &Dataset,
    spec: &PerturbationSpec,
    samples: usize,
    seed: u64,
) -> Result<RiskEstimate> {
    if samples == 0 {
        return Err(Error::Config("need at least one sample per point".into()));
    }
    check_compatible(net, data)?;
    let seedless = spec.is_dirac() && !spec.clip_to_unit_box();
    let terms = if seedless {
        par_points(data.len(), |range| {
            let d = data.dim();
            let m = net.output_dim();
            let logits = net.forward_batch(&data.inputs()[range.start * d..range.end * d], range.len())?;
            range
                .enumerate()
                .map(|(j, n)| violation(&logits[j * m..(j + 1) * m], data.label(n)))
                .collect()
        })?
    } else {
        perturbed_terms(net, data, spec, samples, seed, violation)?
    };
    let threat = if seedless {
        Threat::Natural
    } else {
        Threat::Random { spec: *spec, samples }
    };
    Ok(RiskEstimate::from_terms(
        &terms,
        EstimateSpec {
            loss: LossSpec::ZeroOne,
            threat,
            points: data.len(),
            seed: if seedless { 0 } else { seed },
        },
    ))
}

/// Probability that a draw around a single input violates the property,
/// with the binomial standard error `sqrt(p (1 - p) / samples)`.
pub fn pointwise_violation_prob(
    net: &Network,
    x: &[f64],
    y: usize,
    spec: &PerturbationSpec,
    samples: usize,
    seed: u64,
) -> Result<RiskEstimate> {
    if samples == 0 {
        return Err(Error::Config("need at least one sample".into()));
    }
    if x.len() != net.input_dim() {
        return Err(Error::shape("input length", net.input_dim(), x.len()));
    }
    let data = Dataset::new(x.to_vec(), vec![y], x.len(), net.output_dim())?;
    let terms = perturbed_terms(net, &data, spec, samples, seed, violation)?;
    let p = terms.iter().sum::<f64>() / samples as f64;
    Ok(RiskEstimate {
        mean: p,
        std_error: (p * (1.0 - p) / samples as f64).sqrt(),
        n_terms: samples,
        spec: EstimateSpec {
            loss: LossSpec::ZeroOne,
            threat: Threat::Random { spec: *spec, samples },
            points: 1,
            seed,
        },
    })
}

/// Loss the attack ascends: `loss` itself when differentiable, otherwise
/// cross-entropy.
fn attack_loss(loss: &LossSpec) -> LossSpec {
    if loss.is_differentiable() {
        loss.clone()
    } else {
        LossSpec::CrossEntropy
    }
}

/// Projected signed-gradient ascent on a batch of inputs, starting from
/// `start` and staying in the L-inf ball around `centers`.
pub(crate) fn pgd_from(
    net: &Network,
    centers: &[f64],
    mut start: Vec<f64>,
    ys: &[usize],
    cfg: &PgdConfig,
    loss: &LossSpec,
) -> Result<Vec<f64>> {
    loss.require_differentiable()?;
    cfg.validate()?;
    let eps = cfg.eps;
    project(&mut start, centers, eps);
    if eps == 0.0 {
        return Ok(start);
    }
    for _ in 0..cfg.steps {
        let (_, grad) = net.input_gradients(&start, ys, loss)?;
        for ((x, &g), &c) in start.iter_mut().zip(&grad).zip(centers) {
            let dir = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            *x = (*x + cfg.step_size * dir).clamp(c - eps, c + eps);
        }
    }
    Ok(start)
}

fn project(xs: &mut [f64], centers: &[f64], eps: f64) {
    for (x, &c) in xs.iter_mut().zip(centers) {
        *x = x.clamp(c - eps, c + eps);
    }
}

/// Uniform point in the ball, or the center itself without a random start.
pub(crate) fn pgd_start<R: Rng + ?Sized>(x: &[f64], cfg: &PgdConfig, rng: &mut R) -> Vec<f64> {
    if cfg.random_start && cfg.eps > 0.0 {
        PerturbationSpec::uniform_linf(cfg.eps)
            .expect("eps checked positive")
            .sample(x, rng)
    } else {
        x.to_vec()
    }
}

/// PGD adversarial example for one input.
pub fn pgd_attack<R: Rng + ?Sized>(
    net: &Network,
    x: &[f64],
    y: usize,
    cfg: &PgdConfig,
    loss: &LossSpec,
    rng: &mut R,
) -> Result<Vec<f64>> {
    loss.require_differentiable()?;
    cfg.validate()?;
    let start = pgd_start(x, cfg, rng);
    let adv = pgd_from(net, x, start, &[y], cfg, loss)?;
    debug_assert!(in_linf_ball(x, &adv, cfg.eps));
    Ok(adv)
}

/// PGD adversarial examples for every point in `data`; point `n` starts
/// from `rng::stream(seed, Attack, n, 0)`.
pub fn pgd_dataset(net: &Network, data: &Dataset, cfg: &PgdConfig, loss: &LossSpec, seed: u64) -> Result<Vec<f64>> {
    check_compatible(net, data)?;
    let d = data.dim();
    par_points(data.len(), |range| {
        let centers = &data.inputs()[range.start * d..range.end * d];
        let mut start = Vec::with_capacity(centers.len());
        for n in range.clone() {
            let mut rng = rng::stream(seed, Domain::Attack, n as u64, 0);
            start.extend(pgd_start(data.input(n), cfg, &mut rng));
        }
        pgd_from(net, centers, start, &data.labels()[range], cfg, loss)
    })
}

/// Adversarial risk lower bound: `loss_eval` at the PGD point of each
/// input. The attack ascends cross-entropy when `loss_eval` is 0-1.
pub fn adversarial_risk(
    net: &Network,
    data: &Dataset,
    cfg: &PgdConfig,
    loss_eval: &LossSpec,
    seed: u64,
) -> Result<RiskEstimate> {
    check_compatible(net, data)?;
    loss_eval.validate(net.output_dim())?;
    let adv = pgd_dataset(net, data, cfg, &attack_loss(loss_eval), seed)?;
    let m = net.output_dim();
    let logits = net.forward_batch(&adv, data.len())?;
    let terms = (0..data.len())
        .map(|n| loss_eval.value(&logits[n * m..(n + 1) * m], data.label(n)))
        .collect::<Result<Vec<_>>>()?;
    Ok(RiskEstimate::from_terms(
        &terms,
        EstimateSpec {
            loss: loss_eval.clone(),
            threat: Threat::Pgd(*cfg),
            points: data.len(),
            seed,
        },
    ))
}

/// Exact-on-the-grid worst case over the L-inf ball: for each point the max
/// loss over a `points_per_dim`-per-axis grid that includes the corners,
/// plus the center. Only for inputs of dimension at most 3.
pub fn brute_force_adversarial_risk(
    net: &Network,
    data: &Dataset,
    eps: f64,
    points_per_dim: usize,
    loss: &LossSpec,
) -> Result<RiskEstimate> {
    check_compatible(net, data)?;
    loss.validate(net.output_dim())?;
    let d = data.dim();
    if d > 3 {
        return Err(Error::Capability(format!(
            "brute-force search is limited to 3 input dimensions, got {d}"
        )));
    }
    if !(eps.is_finite() && eps >= 0.0) {
        return Err(Error::Config(format!("eps must be non-negative, got {eps}")));
    }
    let g = if eps == 0.0 { 1 } else { points_per_dim.max(1) };
    let cells = g.pow(d as u32);
    let m = net.output_dim();
    let terms = (0..data.len())
        .map(|n| {
            let x = data.input(n);
            let mut grid = Vec::with_capacity((cells + 1) * d);
            grid.extend_from_slice(x);
            for cell in 0..cells {
                let mut rest = cell;
                for &c in x {
                    let j = rest % g;
                    rest /= g;
                    grid.push(grid_coord(c, eps, j, g));
                }
            }
            let logits = net.forward_batch(&grid, cells + 1)?;
            let mut worst = f64::NEG_INFINITY;
            for r in 0..=cells {
                worst = worst.max(loss.value(&logits[r * m..(r + 1) * m], data.label(n))?);
            }
            Ok(worst)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RiskEstimate::from_terms(
        &terms,
        EstimateSpec {
            loss: loss.clone(),
            threat: Threat::Grid { eps, points_per_dim: g },
            points: data.len(),
            seed: 0,
        },
    ))
}

/// `j`-th of `g` evenly spaced values on `[c - eps, c + eps]`; the end
/// points are the same rounded bounds the attack clamps to.
fn grid_coord(c: f64, eps: f64, j: usize, g: usize) -> f64 {
    let (lo, hi) = (c - eps, c + eps);
    if g == 1 {
        c
    } else if j == 0 {
        lo
    } else if j == g - 1 {
        hi
    } else {
        lo + (hi - lo) * (j as f64 / (g - 1) as f64)
    }
}

/// A named evaluation: a loss under either random perturbations or a PGD
/// attack.
#[derive(Clone, Debug, PartialEq)]
pub enum Metric {
    /// [`srr_estimate`]; with a Dirac perturbation this is the natural risk.
    Risk {
        loss: LossSpec,
        perturbation: PerturbationSpec,
        samples: usize,
    },
    /// [`adversarial_risk`].
    Adversarial { loss: LossSpec, pgd: PgdConfig },
}

impl Metric {
    pub fn natural(loss: LossSpec) -> Self {
        Metric::Risk {
            loss,
            perturbation: PerturbationSpec::dirac(),
            samples: 1,
        }
    }

    /// 0-1 loss under `perturbation`.
    pub fn accuracy_tsrm(perturbation: PerturbationSpec, samples: usize) -> Self {
        Metric::Risk {
            loss: LossSpec::ZeroOne,
            perturbation,
            samples,
        }
    }

    pub fn loss(&self) -> &LossSpec {
        match self {
            Metric::Risk { loss, .. } | Metric::Adversarial { loss, .. } => loss,
        }
    }

    pub fn evaluate(&self, net: &Network, data: &Dataset, seed: u64) -> Result<RiskEstimate> {
        match self {
            Metric::Risk {
                loss,
                perturbation,
                samples,
            } => srr_estimate(net, data, perturbation, loss, *samples, seed),
            Metric::Adversarial { loss, pgd } => adversarial_risk(net, data, pgd, loss, seed),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Risk {
                loss,
                perturbation,
                samples,
            } => write!(f, "{loss} | {perturbation} k={samples}"),
            Metric::Adversarial { loss, pgd } => write!(f, "{loss} | {pgd}"),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    /// `<loss> | <perturbation> [k=<samples>]` or `<loss> | pgd ...`, the
    /// same shape [`fmt::Display`] writes.
    fn from_str(s: &str) -> Result<Self> {
        let (loss, threat) = s
            .split_once('|')
            .ok_or_else(|| Error::Config(format!("expected `<loss> | <threat>`, got `{s}`")))?;
        let loss: LossSpec = loss.trim().parse()?;
        let threat = threat.trim();
        if threat.starts_with("pgd") {
            return Ok(Metric::Adversarial {
                loss,
                pgd: threat.parse()?,
            });
        }
        let (perturbation, samples) = match threat.rsplit_once(' ') {
            Some((rest, k)) if k.starts_with("k=") => (rest, parse_num("k", &k[2..])?),
            _ => (threat, 1),
        };
        if samples == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        Ok(Metric::Risk {
            loss,
            perturbation: perturbation.parse()?,
            samples,
        })
    }
}
