//! Mini-batch training of propensity models on binary cross-entropy.

use std::f64::consts::PI;

use rand::seq::SliceRandom;

use super::model::PropensityModel;
use super::net::{backward_batch, forward_batch, Mode, Tensor, BN_MOMENTUM};
use super::spec::{ConvNetSpec, LrSchedule, Optimizer, TrainConfig};
use crate::dgp::logistic;
use crate::error::{Error, Result};
use crate::raster::{Flips, Raster};
use crate::rng;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Trained model plus its loss history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PropensityModel,
    /// Mean training loss of each epoch, measured before each batch's update.
    pub loss_trace: Vec<f64>,
    /// Mean loss of the final model over the full training set in
    /// inference mode, without augmentation.
    pub final_loss: f64,
}

/// `-[t ln p + (1 - t) ln(1 - p)]` with `p = logistic(z)`.
pub fn bce_from_logit(z: f64, t: u8) -> f64 {
    let softplus = z.max(0.0) + (-z.abs()).exp().ln_1p();
    softplus - f64::from(t) * z
}

/// Mean binary cross-entropy of `model` on a dataset.
pub fn mean_bce(model: &PropensityModel, rasters: &[Raster], labels: &[u8]) -> Result<f64> {
    let mut total = 0.0;
    for (r, &t) in rasters.iter().zip(labels) {
        total += bce_from_logit(model.logit(r)?, t);
    }
    Ok(total / rasters.len() as f64)
}

pub(crate) fn learning_rate(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    match cfg.lr_schedule {
        LrSchedule::Constant => cfg.base_lr,
        LrSchedule::Cosine => cfg.base_lr * 0.5 * (1.0 + (PI * step as f64 / total as f64).cos()),
    }
}

struct OptimizerState {
    kind: Optimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptimizerState {
    fn new(kind: Optimizer, n: usize) -> Self {
        OptimizerState { kind, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::AdamNesterov => {
                self.t += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(self.t);
                let c1_next = 1.0 - ADAM_BETA1.powi(self.t + 1);
                let c2 = 1.0 - ADAM_BETA2.powi(self.t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
                    self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = ADAM_BETA1 * self.m[i] / c1_next + (1.0 - ADAM_BETA1) * g / c1;
                    let v_hat = self.v[i] / c2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

fn check_data(rasters: &[Raster], labels: &[u8]) -> Result<(usize, usize, usize)> {
    if rasters.len() != labels.len() {
        return Err(Error::invalid(format!("{} rasters but {} labels", rasters.len(), labels.len())));
    }
    if rasters.len() < 2 {
        return Err(Error::degenerate("training needs at least two scenes"));
    }
    if labels.iter().any(|&t| t > 1) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    let treated = labels.iter().filter(|&&t| t == 1).count();
    if treated == 0 || treated == labels.len() {
        return Err(Error::degenerate("training data contains a single class"));
    }
    let shape = rasters[0].shape();
    if let Some(i) = rasters.iter().position(|r| r.shape() != shape) {
        return Err(Error::invalid(format!("raster {i} differs in shape from raster 0")));
    }
    Ok(shape)
}

/// Mean loss of one batch and its gradient with respect to the parameters.
///
/// With `training` set, batch normalization uses the batch's statistics
/// exactly as a training step would; otherwise the running statistics.
pub fn batch_loss_and_gradient(
    model: &PropensityModel,
    rasters: &[Raster],
    labels: &[u8],
    training: bool,
) -> Result<(f64, Vec<f64>)> {
    if rasters.is_empty() || rasters.len() != labels.len() {
        return Err(Error::invalid("batch needs matching, non-empty rasters and labels"));
    }
    let tensors = rasters.iter().map(|r| model.tensor(r)).collect::<Result<Vec<Tensor>>>()?;
    let inputs: Vec<&Tensor> = tensors.iter().collect();
    let mode = if training { Mode::Train } else { Mode::Infer };
    let layout = model.layout();
    let (caches, stats) = forward_batch(layout, model.params(), model.state(), &inputs, mode);
    let b = rasters.len() as f64;
    let mut loss = 0.0;
    let dlogit: Vec<f64> = caches
        .iter()
        .zip(labels)
        .map(|(c, &t)| {
            loss += bce_from_logit(c.logit, t);
            (logistic(c.logit) - f64::from(t)) / b
        })
        .collect();
    let mut grad = vec![0.0; model.params().len()];
    backward_batch(layout, model.params(), model.state(), &inputs, &caches, &stats, &dlogit, mode, &mut grad, false);
    Ok((loss / b, grad))
}

/// Trains a freshly initialized model of architecture `spec`.
pub fn train(rasters: &[Raster], labels: &[u8], spec: &ConvNetSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let shape = check_data(rasters, labels)?;
    cfg.validate()?;
    let mut model = PropensityModel::initialized(spec.clone(), shape, cfg.seed)?;
    if !spec.head_norm {
        standardize_head(&mut model, rasters)?;
    }
    train_from(model, rasters, labels, cfg)
}

/// Replaces the running statistics of the pooled-feature normalization with
/// the exact mean and unbiased variance over the training set, so inference
/// does not lag behind the last parameter updates.
fn recalibrate_head_norm(model: &mut PropensityModel, tensors: &[Tensor]) {
    let Some(off) = model.layout().head_norm else { return };
    let d = model.layout().head.cin;
    let inputs: Vec<&Tensor> = tensors.iter().collect();
    let pooled: Vec<Vec<f64>> = inputs
        .chunks(64)
        .flat_map(|chunk| {
            forward_batch(model.layout(), model.params(), model.state(), chunk, Mode::Infer)
                .0
                .into_iter()
                .map(|c| c.pooled)
        })
        .collect();
    let n = pooled.len() as f64;
    let state = model.state_mut();
    for j in 0..d {
        let mean = pooled.iter().map(|g| g[j]).sum::<f64>() / n;
        let ss = pooled.iter().map(|g| (g[j] - mean).powi(2)).sum::<f64>();
        state[off + j] = mean;
        state[off + d + j] = if pooled.len() > 1 { ss / (n - 1.0) } else { 1.0 };
    }
}

/// Rescales the map feeding the global pool so each pooled feature has unit
/// variance over `rasters`, then sets the head bias so the initial logits
/// are centred. The pooled maxima of a random filter sit far from zero with
/// a small spread; absorbing that into the first-order optimizer's steps
/// would take many updates.
pub fn standardize_head(model: &mut PropensityModel, rasters: &[Raster]) -> Result<()> {
    let layout = model.layout().clone();
    let d = layout.head.cin;
    let n = rasters.len() as f64;
    let mut pooled = Vec::with_capacity(rasters.len());
    for r in rasters {
        let t = model.tensor(r)?;
        let (caches, _) = forward_batch(&layout, model.params(), model.state(), &[&t], Mode::Infer);
        pooled.push(caches[0].pooled.clone());
    }
    let mean: Vec<f64> = (0..d).map(|j| pooled.iter().map(|g| g[j]).sum::<f64>() / n).collect();
    let sd: Vec<f64> =
        (0..d).map(|j| (pooled.iter().map(|g| (g[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt()).collect();
    if mean.iter().chain(&sd).any(|v| !v.is_finite()) {
        return Err(Error::degenerate("pooled features are not finite"));
    }
    // Positive rescaling commutes with ReLU, max pooling and the global max.
    let scale: Vec<f64> = sd.iter().map(|&s| if s > 1e-12 { 1.0 / s } else { 1.0 }).collect();
    let params = model.params_mut();
    let mut scale_rows = |w_off: usize, b_off: usize, row_len: usize| {
        for (j, &a) in scale.iter().enumerate() {
            params[w_off + j * row_len..w_off + (j + 1) * row_len].iter_mut().for_each(|v| *v *= a);
            params[b_off + j] *= a;
        }
    };
    match (&layout.projection, layout.convs.last()) {
        (Some((proj, _, _)), _) => scale_rows(proj.w_off, proj.b_off, proj.cin),
        (None, Some(last)) => match last.bn {
            Some((gamma, beta, _)) => scale_rows(gamma, beta, 1),
            None => scale_rows(last.w_off, last.b_off, last.cin * last.k * last.k),
        },
        (None, None) => unreachable!("validated specs have a convolution"),
    }
    let hd = &layout.head;
    let weights = model.params()[hd.w_off..hd.w_off + d].to_vec();
    let bias = -(0..d).map(|j| weights[j] * mean[j] * scale[j]).sum::<f64>();
    model.set_head(&weights, bias)
}

/// Continues training from `model`'s current parameters.
pub fn train_from(
    mut model: PropensityModel,
    rasters: &[Raster],
    labels: &[u8],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    check_data(rasters, labels)?;
    cfg.validate()?;
    let tensors = rasters.iter().map(|r| model.tensor(r)).collect::<Result<Vec<Tensor>>>()?;
    let n = tensors.len();
    let batch = cfg.batch_size.min(n);
    let per_epoch = n.div_ceil(batch);
    let total_steps = per_epoch * cfg.epochs;
    let shuffle_seed = rng::derive_seed(cfg.seed, &[rng::tag("shuffle")]);
    let flip_seed = rng::derive_seed(cfg.seed, &[rng::tag("flips")]);

    let mut opt = OptimizerState::new(cfg.optimizer, model.params().len());
    let mut grad = vec![0.0; model.params().len()];
    let mut order: Vec<usize> = (0..n).collect();
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(shuffle_seed, epoch as u64));
        let mut flip_rng = rng::stream(flip_seed, epoch as u64);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let flipped: Vec<Tensor>;
            let inputs: Vec<&Tensor> = if cfg.augment_flips {
                flipped = chunk.iter().map(|&i| tensors[i].flipped(Flips::sample(&mut flip_rng))).collect();
                flipped.iter().collect()
            } else {
                chunk.iter().map(|&i| &tensors[i]).collect()
            };
            let layout = model.layout();
            let (caches, stats) = forward_batch(layout, model.params(), model.state(), &inputs, Mode::Train);
            let b = chunk.len() as f64;
            let mut dlogit = Vec::with_capacity(chunk.len());
            for (cache, &i) in caches.iter().zip(chunk) {
                let t = labels[i];
                epoch_loss += bce_from_logit(cache.logit, t);
                dlogit.push((logistic(cache.logit) - f64::from(t)) / b);
            }
            grad.fill(0.0);
            backward_batch(
                layout,
                model.params(),
                model.state(),
                &inputs,
                &caches,
                &stats,
                &dlogit,
                Mode::Train,
                &mut grad,
                false,
            );
            let mut running: Vec<_> = layout
                .convs
                .iter()
                .zip(&stats)
                .filter_map(|(l, s)| Some((l.bn?.2, l.cout, s.as_ref()?.clone())))
                .collect();
            if let (Some(off), Some(Some(s))) = (layout.head_norm, stats.get(layout.convs.len())) {
                running.push((off, layout.head.cin, s.clone()));
            }
            for (off, cout, s) in running {
                let unbias = if s.count > 1 { s.count as f64 / (s.count - 1) as f64 } else { 1.0 };
                let state = model.state_mut();
                for c in 0..cout {
                    state[off + c] = BN_MOMENTUM * state[off + c] + (1.0 - BN_MOMENTUM) * s.mean[c];
                    state[off + cout + c] =
                        BN_MOMENTUM * state[off + cout + c] + (1.0 - BN_MOMENTUM) * s.var[c] * unbias;
                }
            }
            let lr = learning_rate(cfg, step, total_steps);
            opt.step(model.params_mut(), &grad, lr);
            step += 1;
        }
        let epoch_loss = epoch_loss / n as f64;
        if !epoch_loss.is_finite() || model.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence { epoch: epoch + 1 });
        }
        loss_trace.push(epoch_loss);
    }
    recalibrate_head_norm(&mut model, &tensors);
    let final_loss = mean_bce(&model, rasters, labels)?;
    if !final_loss.is_finite() {
        return Err(Error::Divergence { epoch: cfg.epochs });
    }
    Ok(TrainOutcome { model, loss_trace, final_loss })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_matches_direct_formula() {
        for &z in &[-12.0, -2.0, 0.0, 0.7, 12.0] {
            let p = logistic(z);
            for t in [0u8, 1] {
                let direct = -(f64::from(t) * p.ln() + (1.0 - f64::from(t)) * (1.0 - p).ln());
                let stable = bce_from_logit(z, t);
                assert!((direct - stable).abs() < 1e-9 * direct.abs().max(1.0), "z={z} t={t}");
            }
        }
        assert!((bce_from_logit(0.0, 1) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig { base_lr: 0.5, lr_schedule: LrSchedule::Cosine, ..Default::default() };
        assert_eq!(learning_rate(&cfg, 0, 10), 0.5);
        assert!((learning_rate(&cfg, 5, 10) - 0.25).abs() < 1e-15);
        assert!(learning_rate(&cfg, 10, 10).abs() < 1e-15);
        let flat = TrainConfig { lr_schedule: LrSchedule::Constant, ..cfg };
        assert_eq!(learning_rate(&flat, 7, 10), 0.5);
    }

    #[test]
    fn nadam_first_step_moves_by_learning_rate() {
        let mut opt = OptimizerState::new(Optimizer::AdamNesterov, 2);
        let mut p = vec![1.0, -1.0];
        opt.step(&mut p, &[0.3, -2.0], 0.01);
        // with zero history the corrected first moment reduces to
        // g * (beta1 (1 - beta1) / (1 - beta1^2) + 1), and v_hat = g^2
        let scale = ADAM_BETA1 * (1.0 - ADAM_BETA1) / (1.0 - ADAM_BETA1 * ADAM_BETA1) + 1.0;
        assert!((p[0] - (1.0 - 0.01 * scale)).abs() < 1e-9);
        assert!((p[1] - (-1.0 + 0.01 * scale)).abs() < 1e-9);
    }
}
