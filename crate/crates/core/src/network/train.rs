//! Plain SGD on the squared similarity error.

use crate::error::{Error, Result};
use crate::network::{vjp, Layer, LayerGrads, NetworkGraph};
use crate::tensor::{Rng, Tensor};

/// Hyperparameters for [`train_mse`].
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Classical momentum coefficient; 0 is plain SGD.
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 10_000,
            learning_rate: 0.004,
            batch_size: 64,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(
                "learning rate must be finite and non-negative".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !((0.0..1.0).contains(&self.momentum)) {
            return Err(Error::InvalidArgument(
                "momentum must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// One training example: an input pair and its target similarity.
#[derive(Clone, Debug)]
pub struct TrainPair {
    pub x: Tensor,
    pub xp: Tensor,
    pub target: f64,
}

/// Minimizes the mean squared error `(y(x, x') - t)^2` by stochastic gradient
/// descent, presenting `batch_size` uniformly sampled pairs per iteration.
///
/// Returns the trained graph and the mean squared error over the full
/// dataset after the last update. Training stops with an error if the batch
/// loss becomes non-finite.
pub fn train_mse(
    net: &NetworkGraph,
    pairs: &[TrainPair],
    cfg: &TrainConfig,
) -> Result<(NetworkGraph, f64)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    let mut net = net.clone();
    let mut rng = Rng::new(cfg.seed);
    let nl = net.layers().len();
    let mut velocity: Vec<Option<LayerGrads>> = vec![None; nl];

    for it in 0..cfg.iterations {
        let mut acc: Vec<Option<LayerGrads>> = vec![None; nl];
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            let pair = &pairs[rng.below(pairs.len())];
            let acts_x = net.forward(&pair.x)?;
            let acts_xp = net.forward(&pair.xp)?;
            let fx = acts_x.last().unwrap();
            let fxp = acts_xp.last().unwrap();
            let y = fx.dot(fxp)?;
            let err = y - pair.target;
            batch_loss += err * err;

            // d loss / d phi(x) = 2 e phi(x'), and symmetrically for x'.
            let cot_x = fxp.scale(2.0 * err);
            let cot_xp = fx.scale(2.0 * err);
            let (_, gx) = vjp(&net, &acts_x, &cot_x, true)?;
            let (_, gxp) = vjp(&net, &acts_xp, &cot_xp, true)?;
            accumulate(&mut acc, gx);
            accumulate(&mut acc, gxp);
        }
        batch_loss /= cfg.batch_size as f64;
        if !batch_loss.is_finite() {
            return Err(Error::TrainingDiverged { iteration: it });
        }
        let scale = 1.0 / cfg.batch_size as f64;
        if cfg.momentum == 0.0 {
            apply_sgd(&mut net, &acc, cfg.learning_rate * scale);
        } else {
            // v <- beta v + g_batch; w <- w - lr v
            for (slot, g) in velocity.iter_mut().zip(&acc) {
                match (slot.as_mut(), g) {
                    (_, None) => {}
                    (None, Some(g)) => {
                        *slot = Some(LayerGrads {
                            weight: g.weight.scale(scale),
                            bias: g.bias.as_ref().map(|b| b.scale(scale)),
                        });
                    }
                    (Some(v), Some(g)) => {
                        for (vv, gv) in v.weight.data_mut().iter_mut().zip(g.weight.data()) {
                            *vv = cfg.momentum * *vv + gv * scale;
                        }
                        if let (Some(vb), Some(gb)) = (v.bias.as_mut(), g.bias.as_ref()) {
                            for (vv, gv) in vb.data_mut().iter_mut().zip(gb.data()) {
                                *vv = cfg.momentum * *vv + gv * scale;
                            }
                        }
                    }
                }
            }
            apply_sgd(&mut net, &velocity, cfg.learning_rate);
        }
    }

    let final_mse = dataset_mse(&net, pairs)?;
    if !final_mse.is_finite() {
        return Err(Error::TrainingDiverged {
            iteration: cfg.iterations,
        });
    }
    Ok((net, final_mse))
}

/// Mean squared error of the similarity model over a dataset.
pub fn dataset_mse(net: &NetworkGraph, pairs: &[TrainPair]) -> Result<f64> {
    let mut loss = 0.0;
    for pair in pairs {
        let y = net.features(&pair.x)?.dot(&net.features(&pair.xp)?)?;
        let e = y - pair.target;
        loss += e * e;
    }
    Ok(loss / pairs.len() as f64)
}

fn accumulate(acc: &mut [Option<LayerGrads>], grads: Vec<Option<LayerGrads>>) {
    for (slot, g) in acc.iter_mut().zip(grads) {
        let Some(g) = g else { continue };
        match slot {
            None => *slot = Some(g),
            Some(s) => {
                for (a, b) in s.weight.data_mut().iter_mut().zip(g.weight.data()) {
                    *a += b;
                }
                if let (Some(sb), Some(gb)) = (s.bias.as_mut(), g.bias.as_ref()) {
                    for (a, b) in sb.data_mut().iter_mut().zip(gb.data()) {
                        *a += b;
                    }
                }
            }
        }
    }
}

fn apply_sgd(net: &mut NetworkGraph, acc: &[Option<LayerGrads>], step: f64) {
    for (layer, g) in net.layers_mut().iter_mut().zip(acc) {
        let Some(g) = g else { continue };
        match layer {
            Layer::Dense { weight, bias } | Layer::Conv2D { weight, bias, .. } => {
                for (w, gw) in weight.data_mut().iter_mut().zip(g.weight.data()) {
                    *w -= step * gw;
                }
                if let (Some(b), Some(gb)) = (bias.as_mut(), g.bias.as_ref()) {
                    for (bv, gv) in b.data_mut().iter_mut().zip(gb.data()) {
                        *bv -= step * gv;
                    }
                }
            }
            Layer::LinearProjection { weight } => {
                for (w, gw) in weight.data_mut().iter_mut().zip(g.weight.data()) {
                    *w -= step * gw;
                }
            }
            _ => {}
        }
    }
}
