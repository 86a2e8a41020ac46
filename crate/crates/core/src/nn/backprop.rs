//! Reverse-mode gradients for [`Network`].

use super::kernel::gemm_acc;
use super::{relu, Network};
use crate::error::{Error, Result};
use crate::metrics::LossSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Parameter gradients, laid out exactly like the network's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    layers: Vec<LayerGrads>,
}

impl ParamGrads {
    pub fn zeros_like(net: &Network) -> Self {
        ParamGrads {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn layers(&self) -> &[LayerGrads] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerGrads] {
        &mut self.layers
    }

    /// All entries, layer by layer, weights before bias.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.iter_mut() {
            *g *= factor;
        }
    }

    pub fn fill_zero(&mut self) {
        for g in self.iter_mut() {
            *g = 0.0;
        }
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|g| g.is_finite())
    }

    pub(crate) fn check_congruent(&self, net: &Network) -> Result<()> {
        if self.layers.len() != net.layers.len() {
            return Err(Error::shape("gradient layers", net.layers.len(), self.layers.len()));
        }
        for (g, l) in self.layers.iter().zip(&net.layers) {
            if g.weights.len() != l.weights.len() {
                return Err(Error::shape("gradient weights", l.weights.len(), g.weights.len()));
            }
            if g.bias.len() != l.bias.len() {
                return Err(Error::shape("gradient bias", l.bias.len(), g.bias.len()));
            }
        }
        Ok(())
    }
}

impl Network {
    /// Loss at `(x, y)` and its exact gradient w.r.t. every parameter.
    pub fn backward_params(&self, x: &[f64], y: usize, loss: &LossSpec) -> Result<(f64, ParamGrads)> {
        let mut grads = ParamGrads::zeros_like(self);
        let value = self.accumulate_gradients(x, &[y], loss, &mut grads)?;
        Ok((value, grads))
    }

    /// Gradient of the loss w.r.t. the input `x`.
    pub fn grad_input(&self, x: &[f64], y: usize, loss: &LossSpec) -> Result<Vec<f64>> {
        let (_, grad) = self.input_gradients(x, &[y], loss)?;
        Ok(grad)
    }

    /// Adds the per-example parameter gradients of a batch into `grads`
    /// (summed in example order) and returns the summed loss.
    pub fn accumulate_gradients(
        &self,
        xs: &[f64],
        ys: &[usize],
        loss: &LossSpec,
        grads: &mut ParamGrads,
    ) -> Result<f64> {
        self.prepare(xs, ys, loss)?;
        grads.check_congruent(self)?;
        let d = self.input_dim();
        let mut losses = Vec::with_capacity(ys.len());
        for start in (0..ys.len()).step_by(super::BLOCK_ROWS) {
            let end = (start + super::BLOCK_ROWS).min(ys.len());
            self.backprop_block(
                &xs[start * d..end * d],
                &ys[start..end],
                loss,
                Some(&mut *grads),
                None,
                &mut losses,
            )?;
        }
        Ok(losses.iter().sum())
    }

    /// Per-example losses and input gradients for a batch (row-major).
    pub fn input_gradients(&self, xs: &[f64], ys: &[usize], loss: &LossSpec) -> Result<(Vec<f64>, Vec<f64>)> {
        self.prepare(xs, ys, loss)?;
        let d = self.input_dim();
        let mut losses = Vec::with_capacity(ys.len());
        let mut grads = vec![0.0; xs.len()];
        for start in (0..ys.len()).step_by(super::BLOCK_ROWS) {
            let end = (start + super::BLOCK_ROWS).min(ys.len());
            self.backprop_block(
                &xs[start * d..end * d],
                &ys[start..end],
                loss,
                None,
                Some(&mut grads[start * d..end * d]),
                &mut losses,
            )?;
        }
        Ok((losses, grads))
    }

    fn prepare(&self, xs: &[f64], ys: &[usize], loss: &LossSpec) -> Result<()> {
        loss.require_differentiable()?;
        loss.validate(self.output_dim())?;
        self.check_input(xs, ys.len())
    }

    fn backprop_block(
        &self,
        xs: &[f64],
        ys: &[usize],
        loss: &LossSpec,
        mut grads: Option<&mut ParamGrads>,
        input_grad: Option<&mut [f64]>,
        losses: &mut Vec<f64>,
    ) -> Result<()> {
        let rows = ys.len();
        let depth = self.layers.len();

        // acts[k] is the output of layer k (post-ReLU for hidden layers).
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(depth);
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::new();
            layer.affine(if k == 0 { xs } else { &acts[k - 1] }, rows, &mut z);
            if k + 1 < depth {
                relu(&mut z);
            }
            acts.push(z);
        }

        let m = self.output_dim();
        let logits = &acts[depth - 1];
        let mut delta = vec![0.0; rows * m];
        for (b, &y) in ys.iter().enumerate() {
            let range = b * m..(b + 1) * m;
            let value = loss.value_and_grad(&logits[range.clone()], y, &mut delta[range])?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("loss {value}")));
            }
            losses.push(value);
        }

        let want_input = input_grad.is_some();
        for k in (0..depth).rev() {
            let layer = &self.layers[k];
            let (n_in, n_out) = (layer.inputs, layer.outputs);
            let input: &[f64] = if k == 0 { xs } else { &acts[k - 1] };

            if let Some(g) = grads.as_deref_mut() {
                let lg = &mut g.layers[k];
                // dW[o, i] += sum_b delta[b, o] * input[b, i]
                gemm_acc(&mut lg.weights, n_out, n_in, rows, &delta, 1, n_out, input);
                for b in 0..rows {
                    for (gb, &d) in lg.bias.iter_mut().zip(&delta[b * n_out..(b + 1) * n_out]) {
                        if d != 0.0 {
                            *gb += d;
                        }
                    }
                }
            }

            if k == 0 && !want_input {
                break;
            }
            // prev[b, i] = sum_o delta[b, o] * w[o, i]
            let mut prev = vec![0.0; rows * n_in];
            gemm_acc(&mut prev, rows, n_in, n_out, &delta, n_out, 1, &layer.weights);
            if k > 0 {
                // ReLU derivative, taken as 0 at 0.
                for (p, &a) in prev.iter_mut().zip(input) {
                    if a <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }

        if let Some(out) = input_grad {
            out.copy_from_slice(&delta);
        }
        Ok(())
    }
}
