//! Perturbation distributions `p(x' | x)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::metrics::parse_num;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PerturbationKind {
    /// No perturbation: `x' = x`.
    Dirac,
    /// Each coordinate uniform on `[x_i - eps, x_i + eps]`.
    UniformLinf { eps: f64 },
    /// `x' = x + sigma * z`, `z` standard normal.
    GaussianIso { sigma: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbationSpec {
    kind: PerturbationKind,
    clip_to_unit_box: bool,
}

impl PerturbationSpec {
    pub fn dirac() -> Self {
        PerturbationSpec {
            kind: PerturbationKind::Dirac,
            clip_to_unit_box: false,
        }
    }

    pub fn uniform_linf(eps: f64) -> Result<Self> {
        check_positive("eps", eps)?;
        Ok(PerturbationSpec {
            kind: PerturbationKind::UniformLinf { eps },
            clip_to_unit_box: false,
        })
    }

    pub fn gaussian(sigma: f64) -> Result<Self> {
        check_positive("sigma", sigma)?;
        Ok(PerturbationSpec {
            kind: PerturbationKind::GaussianIso { sigma },
            clip_to_unit_box: false,
        })
    }

    /// `uniform_linf(eps)`, or Dirac when `eps == 0`.
    pub fn linf_or_dirac(eps: f64) -> Result<Self> {
        if eps == 0.0 {
            Ok(Self::dirac())
        } else {
            Self::uniform_linf(eps)
        }
    }

    /// Clamp samples to `[0, 1]` after perturbing.
    pub fn clipped(mut self, clip: bool) -> Self {
        self.clip_to_unit_box = clip;
        self
    }

    pub fn kind(&self) -> PerturbationKind {
        self.kind
    }

    pub fn clip_to_unit_box(&self) -> bool {
        self.clip_to_unit_box
    }

    pub fn is_dirac(&self) -> bool {
        self.kind == PerturbationKind::Dirac
    }

    /// Writes one draw `x' ~ p(. | x)` into `out`.
    pub fn sample_into<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R, out: &mut [f64]) {
        debug_assert_eq!(x.len(), out.len());
        match self.kind {
            PerturbationKind::Dirac => out.copy_from_slice(x),
            PerturbationKind::UniformLinf { eps } => {
                for (o, &xi) in out.iter_mut().zip(x) {
                    let u: f64 = rng.random();
                    *o = (xi + eps * (2.0 * u - 1.0)).clamp(xi - eps, xi + eps);
                }
            }
            PerturbationKind::GaussianIso { sigma } => {
                for (o, &xi) in out.iter_mut().zip(x) {
                    let z: f64 = StandardNormal.sample(rng);
                    *o = xi + sigma * z;
                }
            }
        }
        if self.clip_to_unit_box {
            for o in out.iter_mut() {
                *o = o.clamp(0.0, 1.0);
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.sample_into(x, rng, &mut out);
        out
    }

    /// Whether `x_prime` can be drawn around `x`. The L-inf boundary is
    /// included.
    pub fn in_support(&self, x: &[f64], x_prime: &[f64]) -> Result<bool> {
        if x.len() != x_prime.len() {
            return Err(Error::shape("perturbed input", x.len(), x_prime.len()));
        }
        Ok(match self.kind {
            PerturbationKind::Dirac => x == x_prime,
            PerturbationKind::UniformLinf { eps } => in_linf_ball(x, x_prime, eps),
            PerturbationKind::GaussianIso { .. } => true,
        })
    }
}

/// Boundary-inclusive membership in the L-inf ball, using the same rounded
/// bounds the samplers clamp to.
pub(crate) fn in_linf_ball(center: &[f64], point: &[f64], eps: f64) -> bool {
    center.iter().zip(point).all(|(&c, &p)| p >= c - eps && p <= c + eps)
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive and finite, got {v}")))
    }
}

impl fmt::Display for PerturbationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            PerturbationKind::Dirac => f.write_str("dirac")?,
            PerturbationKind::UniformLinf { eps } => write!(f, "uniform_linf {eps}")?,
            PerturbationKind::GaussianIso { sigma } => write!(f, "gaussian {sigma}")?,
        }
        if self.clip_to_unit_box {
            f.write_str(" clip")?;
        }
        Ok(())
    }
}

impl FromStr for PerturbationSpec {
    type Err = Error;

    /// `dirac`, `uniform_linf <eps>`, `gaussian <sigma>`, each optionally
    /// followed by `clip`.
    fn from_str(s: &str) -> Result<Self> {
        let mut words: Vec<&str> = s.split_whitespace().collect();
        let clip = words.last() == Some(&"clip");
        if clip {
            words.pop();
        }
        let spec = match words.as_slice() {
            ["dirac"] | ["none"] => Self::dirac(),
            ["uniform_linf", eps] => Self::uniform_linf(parse_num("eps", eps)?)?,
            ["gaussian", sigma] | ["gaussian_iso", sigma] => Self::gaussian(parse_num("sigma", sigma)?)?,
            _ => return Err(Error::Config(format!("unrecognised perturbation `{s}`"))),
        };
        Ok(spec.clipped(clip))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};

    #[test]
    fn dirac_is_identity() {
        let x = [0.1, -3.0, 7.25, 0.0];
        let mut rng = stream(0, Domain::User, 0, 0);
        let spec = PerturbationSpec::dirac();
        assert_eq!(spec.sample(&x, &mut rng), x.to_vec());
        assert!(spec.in_support(&x, &x).unwrap());
        assert!(!spec.in_support(&x, &[0.1, -3.0, 7.25, 1e-300]).unwrap());
    }

    #[test]
    fn uniform_moments_and_bounds() {
        let eps = 0.3;
        let spec = PerturbationSpec::uniform_linf(eps).unwrap();
        let dim = 4;
        let n = 10_000;
        let zero = vec![0.0; dim];
        let mut rng = stream(1, Domain::User, 0, 0);
        let mut sums = vec![0.0; dim];
        let mut max_abs = 0.0f64;
        for _ in 0..n {
            let s = spec.sample(&zero, &mut rng);
            assert!(spec.in_support(&zero, &s).unwrap());
            for (acc, v) in sums.iter_mut().zip(&s) {
                *acc += v;
                max_abs = max_abs.max(v.abs());
            }
        }
        let tol = 3.0 * (2.0 * eps / 12f64.sqrt()) / 100.0;
        for s in sums {
            assert!((s / n as f64).abs() <= tol);
        }
        assert!(max_abs <= eps);
    }

    #[test]
    fn gaussian_variance() {
        let spec = PerturbationSpec::gaussian(0.3).unwrap();
        let n = 10_000;
        let mut rng = stream(2, Domain::User, 0, 0);
        let draws: Vec<f64> = (0..n).map(|_| spec.sample(&[0.0], &mut rng)[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - 0.09).abs() <= 0.05 * 0.09, "variance {var}");
    }

    #[test]
    fn support_examples() {
        let x = [0.5, 0.5];
        let spec = PerturbationSpec::uniform_linf(0.1).unwrap();
        assert!(spec.in_support(&x, &[0.5 + 0.1, 0.5]).unwrap());
        assert!(!spec.in_support(&x, &[0.5 + 0.11, 0.5]).unwrap());
        assert!(PerturbationSpec::gaussian(0.2)
            .unwrap()
            .in_support(&x, &[1e6, -1e6])
            .unwrap());
        assert!(matches!(spec.in_support(&x, &[0.5]), Err(Error::Shape { .. })));
    }

    #[test]
    fn clipping_keeps_unit_box() {
        let spec = PerturbationSpec::gaussian(2.0).unwrap().clipped(true);
        let mut rng = stream(3, Domain::User, 0, 0);
        let s = spec.sample(&[0.0, 0.5, 1.0], &mut rng);
        assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(!PerturbationSpec::gaussian(2.0).unwrap().clip_to_unit_box());
    }

    #[test]
    fn same_stream_same_samples() {
        let spec = PerturbationSpec::uniform_linf(0.2).unwrap();
        let x = [0.3; 5];
        let a = spec.sample(&x, &mut stream(4, Domain::Corruption, 9, 2));
        let b = spec.sample(&x, &mut stream(4, Domain::Corruption, 9, 2));
        let c = spec.sample(&x, &mut stream(4, Domain::Corruption, 9, 3));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_non_positive_parameters() {
        assert!(PerturbationSpec::uniform_linf(0.0).is_err());
        assert!(PerturbationSpec::gaussian(-1.0).is_err());
        assert!(PerturbationSpec::uniform_linf(f64::NAN).is_err());
    }

    #[test]
    fn parse_and_display() {
        for text in ["dirac", "uniform_linf 0.3", "gaussian 0.3", "uniform_linf 0.157 clip"] {
            let spec: PerturbationSpec = text.parse().unwrap();
            assert_eq!(spec.to_string(), text);
        }
        assert!("uniform_linf".parse::<PerturbationSpec>().is_err());
        assert!("uniform_linf -1".parse::<PerturbationSpec>().is_err());
        assert!("dirac 0.1".parse::<PerturbationSpec>().is_err());
    }

    proptest::proptest! {
        #[test]
        fn bounded_samples_stay_in_support(
            x in proptest::collection::vec(-2.0f64..2.0, 1..16),
            eps in 1e-6f64..1.0,
            seed in 0u64..1000,
            clip: bool,
        ) {
            let spec = PerturbationSpec::uniform_linf(eps).unwrap();
            let mut rng = stream(seed, Domain::User, 0, 0);
            let s = spec.sample(&x, &mut rng);
            proptest::prop_assert!(spec.in_support(&x, &s).unwrap());
            let d = PerturbationSpec::dirac().clipped(clip && x.iter().all(|v| (0.0..=1.0).contains(v)));
            let s = d.sample(&x, &mut rng);
            proptest::prop_assert!(d.in_support(&x, &s).unwrap());
        }
    }
}
