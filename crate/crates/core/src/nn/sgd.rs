use super::{Network, ParamGrads};
use crate::error::{Error, Result};

/// Heavy-ball SGD: `v <- mu * v + g`, `theta <- theta - lr * v`.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    learning_rate: f64,
    momentum: f64,
    velocity: ParamGrads,
}

impl SgdState {
    pub fn new(net: &Network, learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate.is_finite() && learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(SgdState {
            learning_rate,
            momentum,
            velocity: ParamGrads::zeros_like(net),
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn velocity(&self) -> &ParamGrads {
        &self.velocity
    }
}

impl Network {
    /// Applies one update in place. Nothing is modified if `grads` contains
    /// a non-finite entry.
    pub fn sgd_step(&mut self, grads: &ParamGrads, state: &mut SgdState) -> Result<()> {
        grads.check_congruent(self)?;
        state.velocity.check_congruent(self)?;
        if !grads.is_finite() {
            return Err(Error::Numeric("gradient".into()));
        }
        let (lr, mu) = (state.learning_rate, state.momentum);
        for ((layer, g), v) in self
            .layers
            .iter_mut()
            .zip(grads.layers())
            .zip(state.velocity.layers_mut())
        {
            let params = layer.weights.iter_mut().chain(layer.bias.iter_mut());
            let vel = v.weights.iter_mut().chain(v.bias.iter_mut());
            let grad = g.weights.iter().chain(&g.bias);
            for ((p, v), g) in params.zip(vel).zip(grad) {
                *v = mu * *v + g;
                *p -= lr * *v;
            }
            layer.sync_transpose();
        }
        if self
            .layers
            .iter()
            .any(|l| l.weights.iter().chain(&l.bias).any(|p| !p.is_finite()))
        {
            return Err(Error::Numeric("parameters after update".into()));
        }
        Ok(())
    }
}
