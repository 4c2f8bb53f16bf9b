//! Toy models: stacks of adapter sites with tanh between them.
//!
//! Stands in for a full network at desk scale. Every linear map carries an
//! adapter, all sites share one `AdapterConfig`, and a single rank applies
//! to the whole stack in any given pass.

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, AdapterGrads, DynamicLoraLayer, ForwardContext};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Rng};

/// Task head applied after the last layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Regression: raw outputs, mean-squared-error loss.
    Identity,
    /// Classification: softmax over rows, cross-entropy loss.
    Softmax,
}

/// Loss selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

/// Everything the model backward pass needs from a forward pass.
pub struct ModelContext {
    rank: usize,
    layer_ctxs: Vec<ForwardContext>,
    /// Post-tanh activations between layers (one per gap).
    hidden: Vec<Matrix>,
}

impl ModelContext {
    pub fn rank(&self) -> usize {
        self.rank
    }
}

/// Ordered adapter sites interleaved with tanh, plus a task head.
#[derive(Clone, Debug)]
pub struct ToyModel {
    layers: Vec<DynamicLoraLayer>,
    head: Head,
}

impl ToyModel {
    pub fn new(layers: Vec<DynamicLoraLayer>, head: Head) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::EmptyInput {
                context: "model layer list",
            });
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::ShapeMismatch {
                    op: "model layer composition",
                    left: (pair[0].out_dim(), pair[0].in_dim()),
                    right: (pair[1].out_dim(), pair[1].in_dim()),
                });
            }
            if pair[0].config() != pair[1].config() {
                return Err(Error::InvalidArgument {
                    context: "all layers must share one adapter config".into(),
                });
            }
        }
        Ok(ToyModel { layers, head })
    }

    /// Single-site model over a quantized base; the common toy shape.
    pub fn single(
        base: crate::quant::QuantizedMatrix,
        config: AdapterConfig,
        head: Head,
        rng: &mut Rng,
    ) -> Result<Self> {
        let layer = DynamicLoraLayer::new(base, config, rng)?;
        ToyModel::new(vec![layer], head)
    }

    pub fn layers(&self) -> &[DynamicLoraLayer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [DynamicLoraLayer] {
        &mut self.layers
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("nonempty").out_dim()
    }

    pub fn adapter_config(&self) -> &AdapterConfig {
        self.layers[0].config()
    }

    pub fn r_max(&self) -> usize {
        self.adapter_config().r_max
    }

    pub fn set_dq_cache(&mut self, enabled: bool) -> Result<()> {
        for layer in &mut self.layers {
            layer.set_dq_cache(enabled)?;
        }
        Ok(())
    }

    /// Forward at rank `b`, keeping what backward needs. Dropout is active
    /// when a generator is supplied.
    pub fn forward_train(
        &self,
        x: &Matrix,
        rank: usize,
        mut train_rng: Option<&mut Rng>,
    ) -> Result<(Matrix, ModelContext)> {
        let last = self.layers.len() - 1;
        let mut layer_ctxs = Vec::with_capacity(self.layers.len());
        let mut hidden = Vec::with_capacity(last);
        let mut current = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (h, ctx) = layer.forward(&current, rank, train_rng.as_deref_mut())?;
            layer_ctxs.push(ctx);
            current = if i < last {
                let activated = h.map(|v| v.tanh());
                hidden.push(activated.clone());
                activated
            } else {
                h
            };
        }
        Ok((
            current,
            ModelContext {
                rank,
                layer_ctxs,
                hidden,
            },
        ))
    }

    /// Deterministic forward with dropout off; contexts discarded.
    pub fn forward_eval(&self, x: &Matrix, rank: usize) -> Result<Matrix> {
        let (out, _) = self.forward_train(x, rank, None)?;
        Ok(out)
    }

    /// Backpropagate `grad_out` through the stack. Returns per-layer
    /// truncated gradients, first layer first.
    pub fn backward(&self, ctx: ModelContext, grad_out: &Matrix) -> Result<Vec<AdapterGrads>> {
        let last = self.layers.len() - 1;
        let mut grads: Vec<Option<AdapterGrads>> = (0..self.layers.len()).map(|_| None).collect();
        let mut g = grad_out.clone();
        let mut layer_ctxs = ctx.layer_ctxs;
        for i in (0..self.layers.len()).rev() {
            let layer_ctx = layer_ctxs.pop().expect("one context per layer");
            if i < last {
                // d tanh(h) / d h = 1 - tanh(h)^2, with tanh(h) cached
                let a = &ctx.hidden[i];
                let deriv = a.map(|v| 1.0 - v * v);
                g = g.hadamard(&deriv)?;
            }
            let layer_grads = self.layers[i].backward(layer_ctx, &g)?;
            g = layer_grads.input.clone();
            grads[i] = Some(layer_grads);
        }
        Ok(grads.into_iter().map(|g| g.expect("filled")).collect())
    }
}

/// Loss value (f64) and its gradient with respect to the model output.
pub fn loss_and_grad(kind: LossKind, output: &Matrix, targets: &Matrix) -> Result<(f64, Matrix)> {
    if output.shape() != targets.shape() {
        return Err(Error::ShapeMismatch {
            op: "loss",
            left: output.shape(),
            right: targets.shape(),
        });
    }
    match kind {
        LossKind::Mse => {
            let count = output.len() as f64;
            let mut sum = 0.0f64;
            let mut grad = Vec::with_capacity(output.len());
            for (&o, &t) in output.data().iter().zip(targets.data()) {
                let d = f64::from(o) - f64::from(t);
                sum += d * d;
                grad.push((2.0 * d / count) as f32);
            }
            let grad = Matrix::from_vec(output.rows(), output.cols(), grad)?;
            Ok((sum / count, grad))
        }
        LossKind::CrossEntropy => {
            // softmax over rows per column; targets are one-hot columns
            let (m, n) = output.shape();
            let mut grad = Matrix::zeros(m, n)?;
            let mut loss = 0.0f64;
            for j in 0..n {
                let mut maxv = f64::NEG_INFINITY;
                for i in 0..m {
                    maxv = maxv.max(f64::from(output.at(i, j)));
                }
                let mut denom = 0.0f64;
                for i in 0..m {
                    denom += (f64::from(output.at(i, j)) - maxv).exp();
                }
                let log_denom = denom.ln();
                for i in 0..m {
                    let logit = f64::from(output.at(i, j)) - maxv;
                    let p = (logit - log_denom).exp();
                    let y = f64::from(targets.at(i, j));
                    loss -= y * (logit - log_denom);
                    grad.set(i, j, ((p - y) / n as f64) as f32);
                }
            }
            Ok((loss / n as f64, grad))
        }
    }
}

/// Mean squared error between a prediction and targets, in f64.
pub fn mse(prediction: &Matrix, targets: &Matrix) -> Result<f64> {
    if prediction.shape() != targets.shape() {
        return Err(Error::ShapeMismatch {
            op: "mse",
            left: prediction.shape(),
            right: targets.shape(),
        });
    }
    let sum: f64 = prediction
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&a, &b)| {
            let d = f64::from(a) - f64::from(b);
            d * d
        })
        .sum();
    Ok(sum / prediction.len() as f64)
}

/// Fraction of columns whose argmax matches the target argmax.
pub fn accuracy(prediction: &Matrix, targets: &Matrix) -> Result<f64> {
    if prediction.shape() != targets.shape() {
        return Err(Error::ShapeMismatch {
            op: "accuracy",
            left: prediction.shape(),
            right: targets.shape(),
        });
    }
    let (m, n) = prediction.shape();
    let argmax = |mat: &Matrix, j: usize| -> usize {
        let mut best = 0;
        for i in 1..m {
            if mat.at(i, j) > mat.at(best, j) {
                best = i;
            }
        }
        best
    };
    let hits = (0..n)
        .filter(|&j| argmax(prediction, j) == argmax(targets, j))
        .count();
    Ok(hits as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::quantize;

    fn small_model(dims: &[usize], r_max: usize, seed: u64) -> ToyModel {
        let mut rng = Rng::new(seed);
        let cfg = AdapterConfig {
            r_min: 1,
            r_max,
            alpha: 16.0,
            dropout_p: 0.0,
            distribution: crate::adapter::RankDistribution::Uniform,
        };
        let mut layers = Vec::new();
        for w in dims.windows(2) {
            let base_w = Matrix::gaussian(&mut rng, w[1], w[0], 0.0, 0.3).unwrap();
            let base = quantize(&base_w, 64, 256).unwrap();
            let mut layer = DynamicLoraLayer::new(base, cfg.clone(), &mut rng).unwrap();
            let up = Matrix::gaussian(&mut rng, w[1], r_max, 0.0, 0.3).unwrap();
            *layer.params_mut().1 = up;
            layers.push(layer);
        }
        ToyModel::new(layers, Head::Identity).unwrap()
    }

    #[test]
    fn rejects_non_composing_layers() {
        let mut rng = Rng::new(1);
        let cfg = AdapterConfig {
            r_max: 2,
            dropout_p: 0.0,
            ..AdapterConfig::default()
        };
        let a = DynamicLoraLayer::new(
            quantize(&Matrix::zeros(4, 3).unwrap(), 64, 256).unwrap(),
            cfg.clone(),
            &mut rng,
        )
        .unwrap();
        let b = DynamicLoraLayer::new(
            quantize(&Matrix::zeros(4, 5).unwrap(), 64, 256).unwrap(),
            cfg,
            &mut rng,
        )
        .unwrap();
        assert!(ToyModel::new(vec![a, b], Head::Identity).is_err());
    }

    #[test]
    fn mse_loss_and_grad_match_finite_differences() {
        let mut rng = Rng::new(5);
        let out = Matrix::gaussian(&mut rng, 3, 4, 0.0, 1.0).unwrap();
        let tgt = Matrix::gaussian(&mut rng, 3, 4, 0.0, 1.0).unwrap();
        let (loss, grad) = loss_and_grad(LossKind::Mse, &out, &tgt).unwrap();
        assert!(loss >= 0.0);
        let eps = 1e-3f32;
        for i in 0..3 {
            for j in 0..4 {
                let mut hi = out.clone();
                hi.set(i, j, out.at(i, j) + eps);
                let (lh, _) = loss_and_grad(LossKind::Mse, &hi, &tgt).unwrap();
                let mut lo = out.clone();
                lo.set(i, j, out.at(i, j) - eps);
                let (ll, _) = loss_and_grad(LossKind::Mse, &lo, &tgt).unwrap();
                let fd = (lh - ll) / (2.0 * f64::from(eps));
                assert!(
                    (f64::from(grad.at(i, j)) - fd).abs() <= 1e-4,
                    "({i},{j}): {} vs {}",
                    grad.at(i, j),
                    fd
                );
            }
        }
    }

    #[test]
    fn cross_entropy_loss_and_grad_match_finite_differences() {
        let mut rng = Rng::new(6);
        let out = Matrix::gaussian(&mut rng, 4, 3, 0.0, 1.0).unwrap();
        let mut tgt = Matrix::zeros(4, 3).unwrap();
        tgt.set(1, 0, 1.0);
        tgt.set(3, 1, 1.0);
        tgt.set(0, 2, 1.0);
        let (loss, grad) = loss_and_grad(LossKind::CrossEntropy, &out, &tgt).unwrap();
        assert!(loss >= 0.0 && loss.is_finite());
        let eps = 1e-3f32;
        for i in 0..4 {
            for j in 0..3 {
                let mut hi = out.clone();
                hi.set(i, j, out.at(i, j) + eps);
                let (lh, _) = loss_and_grad(LossKind::CrossEntropy, &hi, &tgt).unwrap();
                let mut lo = out.clone();
                lo.set(i, j, out.at(i, j) - eps);
                let (ll, _) = loss_and_grad(LossKind::CrossEntropy, &lo, &tgt).unwrap();
                let fd = (lh - ll) / (2.0 * f64::from(eps));
                assert!(
                    (f64::from(grad.at(i, j)) - fd).abs() <= 1e-4,
                    "({i},{j}): {} vs {}",
                    grad.at(i, j),
                    fd
                );
            }
        }
    }

    #[test]
    fn stacked_backward_matches_finite_differences() {
        // two layers with a tanh in between; check d loss / d down of layer 0
        let model = small_model(&[3, 5, 2], 2, 11);
        let mut rng = Rng::new(12);
        let x = Matrix::gaussian(&mut rng, 3, 4, 0.0, 1.0).unwrap();
        let y = Matrix::gaussian(&mut rng, 2, 4, 0.0, 1.0).unwrap();
        let b = 2;

        let (out, ctx) = model.forward_train(&x, b, None).unwrap();
        let (_, grad_out) = loss_and_grad(LossKind::Mse, &out, &y).unwrap();
        let grads = model.backward(ctx, &grad_out).unwrap();

        let loss_of = |m: &ToyModel| -> f64 {
            let o = m.forward_eval(&x, b).unwrap();
            mse(&o, &y).unwrap()
        };
        let eps = 1e-3f32;
        for r in 0..b {
            for k in 0..3 {
                let mut hi = model.clone();
                let v = hi.layers()[0].down().at(r, k);
                hi.layers_mut()[0].params_mut().0.set(r, k, v + eps);
                let mut lo = model.clone();
                lo.layers_mut()[0].params_mut().0.set(r, k, v - eps);
                let fd = (loss_of(&hi) - loss_of(&lo)) / (2.0 * f64::from(eps));
                let got = f64::from(grads[0].down.at(r, k));
                assert!(
                    (got - fd).abs() <= 2e-3 * fd.abs().max(1.0),
                    "layer0 down ({r},{k}): analytic {got} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn accuracy_counts_argmax_matches() {
        let pred = Matrix::from_vec(2, 3, vec![0.9, 0.2, 0.4, 0.1, 0.8, 0.6]).unwrap();
        let tgt = Matrix::from_vec(2, 3, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let acc = accuracy(&pred, &tgt).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-12);
    }
}
