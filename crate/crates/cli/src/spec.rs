//! Self-contained descriptions of a single CSV cell.
//!
//! A [`CellSpec`] renders as `key=value` pairs joined by `"; "` and parses
//! back to the same value, so any row can be re-executed from its `spec`
//! column alone.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Error, Result};
use srr_core::{LossSpec, Metric, Regime, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => bail!("split must be `train` or `test`, got `{other}`"),
        }
    }
}

/// Which MNIST files and which stratified subsets.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DataSpec {
    pub mnist_dir: PathBuf,
    /// 0 keeps the whole split.
    pub train_size: usize,
    pub test_size: usize,
    pub subset_seed: u64,
}

/// Everything that determines a trained network.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSpec {
    pub hidden: Vec<usize>,
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub loss: LossSpec,
}

impl TrainSpec {
    pub fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            loss: self.loss.clone(),
            ..TrainConfig::new(self.regime.clone(), self.epochs, seed)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    /// Trained from scratch with the cell's seed.
    Trained(TrainSpec),
    /// Loaded from a serialized network.
    File(PathBuf),
}

/// One estimate: where the network comes from, what is measured, on which
/// split, with which seed. The seed drives both training and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSpec {
    pub data: DataSpec,
    pub source: Source,
    pub metric: Metric,
    pub split: Split,
    pub seed: u64,
}

impl fmt::Display for CellSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = &self.data;
        write!(
            f,
            "mnist={}; train_size={}; test_size={}; subset_seed={}",
            d.mnist_dir.display(),
            d.train_size,
            d.test_size,
            d.subset_seed
        )?;
        match &self.source {
            Source::Trained(t) => {
                let hidden: Vec<String> = t.hidden.iter().map(|h| h.to_string()).collect();
                write!(
                    f,
                    "; hidden={}; regime={}; epochs={}; batch={}; lr={}; momentum={}; loss={}",
                    hidden.join(","),
                    t.regime,
                    t.epochs,
                    t.batch_size,
                    t.learning_rate,
                    t.momentum,
                    t.loss
                )?;
            }
            Source::File(path) => write!(f, "; network={}", path.display())?,
        }
        write!(f, "; metric={}; split={}; seed={}", self.metric, self.split, self.seed)
    }
}

fn field<T: FromStr>(map: &mut BTreeMap<String, String>, key: &str) -> Result<T>
where
    T::Err: Into<Error>,
{
    let raw = map.remove(key).ok_or_else(|| anyhow!("spec is missing `{key}`"))?;
    raw.parse::<T>()
        .map_err(Into::into)
        .with_context(|| format!("bad `{key}` value `{raw}`"))
}

impl FromStr for CellSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for part in s.split("; ") {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| anyhow!("spec part `{part}` is not key=value"))?;
            if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                bail!("spec repeats `{k}`");
            }
        }
        let data = DataSpec {
            mnist_dir: field(&mut map, "mnist")?,
            train_size: field(&mut map, "train_size")?,
            test_size: field(&mut map, "test_size")?,
            subset_seed: field(&mut map, "subset_seed")?,
        };
        let source = if map.contains_key("network") {
            Source::File(field(&mut map, "network")?)
        } else {
            let hidden_raw: String = field(&mut map, "hidden")?;
            let hidden = hidden_raw
                .split(',')
                .filter(|h| !h.is_empty())
                .map(|h| h.trim().parse().with_context(|| format!("bad hidden size `{h}`")))
                .collect::<Result<Vec<usize>>>()?;
            Source::Trained(TrainSpec {
                hidden,
                regime: field(&mut map, "regime")?,
                epochs: field(&mut map, "epochs")?,
                batch_size: field(&mut map, "batch")?,
                learning_rate: field(&mut map, "lr")?,
                momentum: field(&mut map, "momentum")?,
                loss: field(&mut map, "loss")?,
            })
        };
        let spec = CellSpec {
            data,
            source,
            metric: field(&mut map, "metric")?,
            split: field(&mut map, "split")?,
            seed: field(&mut map, "seed")?,
        };
        if let Some(extra) = map.keys().next() {
            bail!("unknown spec key `{extra}`");
        }
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use srr_core::{PerturbationSpec, PgdConfig};

    fn data() -> DataSpec {
        DataSpec {
            mnist_dir: PathBuf::from("data/mnist"),
            train_size: 10_000,
            test_size: 0,
            subset_seed: 3,
        }
    }

    #[test]
    fn trained_cells_round_trip() {
        let spec = CellSpec {
            data: data(),
            source: Source::Trained(TrainSpec {
                hidden: vec![256],
                regime: Regime::Pgd(PgdConfig::new(0.157, 7).unwrap()),
                epochs: 10,
                batch_size: 128,
                learning_rate: 0.1,
                momentum: 0.9,
                loss: LossSpec::weighted_class(10, 8, 100.0).unwrap(),
            }),
            metric: Metric::accuracy_tsrm(PerturbationSpec::uniform_linf(0.3).unwrap(), 100),
            split: Split::Test,
            seed: 2,
        };
        let text = spec.to_string();
        assert_eq!(text.parse::<CellSpec>().unwrap(), spec, "{text}");
    }

    #[test]
    fn file_cells_round_trip() {
        let spec = CellSpec {
            data: data(),
            source: Source::File(PathBuf::from("/tmp/net.srrnet")),
            metric: Metric::natural(LossSpec::CrossEntropy),
            split: Split::Train,
            seed: 0,
        };
        assert_eq!(spec.to_string().parse::<CellSpec>().unwrap(), spec);
    }

    #[test]
    fn linear_models_have_empty_hidden_list() {
        let spec = CellSpec {
            data: data(),
            source: Source::Trained(TrainSpec {
                hidden: vec![],
                regime: Regime::Natural,
                epochs: 1,
                batch_size: 8,
                learning_rate: 0.5,
                momentum: 0.0,
                loss: LossSpec::CrossEntropy,
            }),
            metric: Metric::natural(LossSpec::ZeroOne),
            split: Split::Train,
            seed: 9,
        };
        assert_eq!(spec.to_string().parse::<CellSpec>().unwrap(), spec);
    }

    #[test]
    fn malformed_specs_are_rejected() {
        let good = CellSpec {
            data: data(),
            source: Source::File(PathBuf::from("n")),
            metric: Metric::natural(LossSpec::ZeroOne),
            split: Split::Test,
            seed: 0,
        }
        .to_string();
        assert!(format!("{good}; extra=1").parse::<CellSpec>().is_err());
        assert!(good.replace("split=test", "split=dev").parse::<CellSpec>().is_err());
        assert!(good.replace("; seed=0", "").parse::<CellSpec>().is_err());
        assert!("nonsense".parse::<CellSpec>().is_err());
    }
}
