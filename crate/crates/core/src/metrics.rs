//! Pointwise losses and the violation property.
//!
//! Tie convention: a wrong class whose logit equals the true-class logit is
//! a violation. This makes `zero_one_loss(l, y) == 1` exactly when
//! `property_margin(l, y) >= 0`. [`argmax`] breaks ties toward the lowest
//! index and is what we report as the predicted class.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum LossSpec {
    ZeroOne,
    CrossEntropy,
    /// Cross-entropy scaled by a per-class weight.
    WeightedCrossEntropy(Vec<f64>),
}

impl LossSpec {
    /// Weighted cross-entropy with explicit per-class weights.
    pub fn weighted(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Config("weighted loss needs at least one class".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::Config(format!(
                "class weights must be positive and finite, got {w}"
            )));
        }
        Ok(LossSpec::WeightedCrossEntropy(weights))
    }

    /// Unit weights everywhere except `class`, which gets `weight`.
    pub fn weighted_class(class_count: usize, class: usize, weight: f64) -> Result<Self> {
        if class >= class_count {
            return Err(Error::Config(format!(
                "weighted class {class} out of range for {class_count} classes"
            )));
        }
        let mut weights = vec![1.0; class_count];
        weights[class] = weight;
        Self::weighted(weights)
    }

    pub fn is_differentiable(&self) -> bool {
        !matches!(self, LossSpec::ZeroOne)
    }

    pub(crate) fn require_differentiable(&self) -> Result<()> {
        if self.is_differentiable() {
            Ok(())
        } else {
            Err(Error::NonDifferentiableLoss(self.to_string()))
        }
    }

    /// Checks the spec against the number of classes it will be used with.
    pub fn validate(&self, class_count: usize) -> Result<()> {
        if let LossSpec::WeightedCrossEntropy(w) = self {
            if w.len() != class_count {
                return Err(Error::Config(format!(
                    "{} class weights given for {class_count} classes",
                    w.len()
                )));
            }
        }
        Ok(())
    }

    pub fn value(&self, logits: &[f64], y: usize) -> Result<f64> {
        match self {
            LossSpec::ZeroOne => zero_one_loss(logits, y),
            LossSpec::CrossEntropy => cross_entropy(logits, y),
            LossSpec::WeightedCrossEntropy(w) => weighted_cross_entropy(logits, y, w),
        }
    }

    /// Loss value, with its gradient w.r.t. the logits written into `grad`.
    pub(crate) fn value_and_grad(&self, logits: &[f64], y: usize, grad: &mut [f64]) -> Result<f64> {
        let scale = match self {
            LossSpec::ZeroOne => return Err(Error::NonDifferentiableLoss(self.to_string())),
            LossSpec::CrossEntropy => None,
            LossSpec::WeightedCrossEntropy(w) => {
                check_weights(logits, w)?;
                Some(w[y])
            }
        };
        check_logits(logits, y)?;
        let (max, sum) = shifted_exp_sum(logits);
        let ce = (max - logits[y]) + sum.ln();
        for (g, &l) in grad.iter_mut().zip(logits) {
            *g = (l - max).exp() / sum;
        }
        grad[y] -= 1.0;
        match scale {
            None => Ok(ce),
            Some(w) => {
                for g in grad.iter_mut() {
                    *g *= w;
                }
                Ok(w * ce)
            }
        }
    }
}

fn check_weights(logits: &[f64], w: &[f64]) -> Result<()> {
    if w.len() != logits.len() {
        return Err(Error::shape("class weights", logits.len(), w.len()));
    }
    if let Some(bad) = w.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
        return Err(Error::Config(format!(
            "class weights must be positive and finite, got {bad}"
        )));
    }
    Ok(())
}

fn check_logits(logits: &[f64], y: usize) -> Result<()> {
    if y >= logits.len() {
        return Err(Error::Domain(format!(
            "class index {y} out of range for {} logits",
            logits.len()
        )));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::Numeric("logits".into()));
    }
    Ok(())
}

/// `(max, sum_i exp(l_i - max))`.
fn shifted_exp_sum(logits: &[f64]) -> (f64, f64) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum = logits.iter().map(|&l| (l - max).exp()).sum();
    (max, sum)
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate().skip(1) {
        if l > logits[best] {
            best = i;
        }
    }
    best
}

pub fn zero_one_loss(logits: &[f64], y: usize) -> Result<f64> {
    check_logits(logits, y)?;
    let ly = logits[y];
    let violated = logits.iter().enumerate().any(|(i, &l)| i != y && l >= ly);
    Ok(if violated { 1.0 } else { 0.0 })
}

/// `-log softmax(logits)[y]`, evaluated through log-sum-exp.
pub fn cross_entropy(logits: &[f64], y: usize) -> Result<f64> {
    check_logits(logits, y)?;
    let (max, sum) = shifted_exp_sum(logits);
    Ok((max - logits[y]) + sum.ln())
}

pub fn weighted_cross_entropy(logits: &[f64], y: usize, weights: &[f64]) -> Result<f64> {
    check_weights(logits, weights)?;
    Ok(weights[y] * cross_entropy(logits, y)?)
}

/// Margin of the best wrong class over the true class. Non-negative values
/// are violations.
pub fn property_margin(logits: &[f64], y: usize) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::Domain("property margin needs at least two classes".into()));
    }
    check_logits(logits, y)?;
    let best_other = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != y)
        .map(|(_, &l)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(best_other - logits[y])
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossSpec::ZeroOne => f.write_str("zero_one"),
            LossSpec::CrossEntropy => f.write_str("cross_entropy"),
            LossSpec::WeightedCrossEntropy(w) => {
                let heavy: Vec<usize> = (0..w.len()).filter(|&i| w[i] != 1.0).collect();
                if heavy.len() == 1 {
                    let c = heavy[0];
                    write!(f, "weighted_ce class={c} weight={} classes={}", w[c], w.len())
                } else {
                    let joined: Vec<String> = w.iter().map(|x| x.to_string()).collect();
                    write!(f, "weighted_ce weights={}", joined.join(","))
                }
            }
        }
    }
}

impl FromStr for LossSpec {
    type Err = Error;

    /// Accepts `zero_one`, `cross_entropy`,
    /// `weighted_ce class=8 weight=100 [classes=10]` and
    /// `weighted_ce weights=1,1,...`.
    fn from_str(s: &str) -> Result<Self> {
        let mut words = s.split_whitespace();
        let kind = words.next().unwrap_or_default();
        let args: Vec<&str> = words.collect();
        match kind {
            "zero_one" | "0-1" if args.is_empty() => Ok(LossSpec::ZeroOne),
            "cross_entropy" | "ce" if args.is_empty() => Ok(LossSpec::CrossEntropy),
            "weighted_ce" => {
                let mut class = None;
                let mut weight = None;
                let mut classes = 10usize;
                let mut weights = None;
                for arg in args {
                    let (key, value) = arg
                        .split_once('=')
                        .ok_or_else(|| Error::Config(format!("expected key=value, got `{arg}`")))?;
                    match key {
                        "class" => class = Some(parse_num::<usize>(key, value)?),
                        "weight" => weight = Some(parse_num::<f64>(key, value)?),
                        "classes" => classes = parse_num::<usize>(key, value)?,
                        "weights" => {
                            weights = Some(
                                value
                                    .split(',')
                                    .map(|v| parse_num::<f64>(key, v))
                                    .collect::<Result<Vec<_>>>()?,
                            )
                        }
                        _ => return Err(Error::Config(format!("unknown weighted_ce key `{key}`"))),
                    }
                }
                match (weights, class, weight) {
                    (Some(w), None, None) => LossSpec::weighted(w),
                    (None, Some(c), Some(w)) => LossSpec::weighted_class(classes, c, w),
                    _ => Err(Error::Config(
                        "weighted_ce needs either weights=... or class=.. weight=..".into(),
                    )),
                }
            }
            _ => Err(Error::Config(format!("unrecognised loss `{s}`"))),
        }
    }
}

pub(crate) fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}
