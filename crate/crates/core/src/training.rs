//! Two-stage training: cosine-annealed Adam with decoupled weight decay, then
//! constant-rate fine-tuning from the best stage-one parameters. Batch size 1,
//! fixed sample order, early stopping on validation PSNR.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::image::Image;
use crate::metrics::{self, MetricError};
use crate::networks::ModelParams;
use crate::numerics::{NumericsError, Tape, Tensor, Var};
use crate::pfbs::{HeadInputs, PfbsError, Reconstructor};
use crate::projector::Sinogram;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0} dataset is empty")]
    EmptyDataset(&'static str),
    #[error("training and validation geometries differ")]
    GeometryMismatch,
    #[error("non-finite loss at epoch {epoch}, sample {sample}")]
    NonFinite { epoch: usize, sample: usize },
    #[error("sample {sample}: {source}")]
    Reconstruction {
        sample: usize,
        #[source]
        source: PfbsError,
    },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("invalid training config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    /// Floor of the stage-one cosine schedule.
    pub min_lr: f64,
    pub weight_decay: f64,
    pub max_epochs_per_stage: usize,
    pub patience: usize,
    pub param_reg_weight: f64,
    pub epsilon_center: f64,
    pub mu_center: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_lr: 2e-4,
            stage2_lr: 1e-5,
            min_lr: 0.0,
            weight_decay: 1e-5,
            max_epochs_per_stage: 20,
            patience: 5,
            param_reg_weight: 1e-3,
            epsilon_center: 1.25,
            mu_center: 0.05,
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.stage1_lr > 0.0 && self.stage2_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.stage1_lr) {
            return bad("min_lr must lie in [0, stage1_lr]");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.weight_decay >= 0.0 && self.param_reg_weight >= 0.0) {
            return bad("weight_decay and param_reg_weight must be non-negative");
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }
}

/// `lr_min + (lr0 - lr_min) (1 + cos(pi epoch / total)) / 2`.
pub fn cosine_lr(epoch: usize, total: usize, lr0: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = epoch.min(total) as f64 / total as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// `MSE(pred, gt) + w ((eps - eps_c)^2 + (mu - mu_c)^2)`.
pub fn loss_value(pred: &Image, gt: &Image, epsilon: f64, mu_mean: f64, cfg: &TrainConfig) -> Result<f64, MetricError> {
    let mse = metrics::mse(pred, gt)?;
    let reg = (epsilon - cfg.epsilon_center).powi(2) + (mu_mean - cfg.mu_center).powi(2);
    Ok(mse + cfg.param_reg_weight * reg)
}

/// The same loss recorded on a tape.
pub fn loss_on_tape(
    tape: &mut Tape,
    pred: Var,
    gt: &Image,
    epsilon: Var,
    mu_mean: Var,
    cfg: &TrainConfig,
) -> Result<Var, NumericsError> {
    let gt = tape.constant(gt.to_tensor());
    let diff = tape.sub(pred, gt)?;
    let sq = tape.square(diff);
    let mse = tape.mean(sq);
    if cfg.param_reg_weight == 0.0 {
        return Ok(mse);
    }
    let de = tape.offset(epsilon, -cfg.epsilon_center);
    let de2 = tape.square(de);
    let dm = tape.offset(mu_mean, -cfg.mu_center);
    let dm2 = tape.square(dm);
    let reg = tape.add(de2, dm2)?;
    let reg = tape.scale(reg, cfg.param_reg_weight);
    tape.add(mse, reg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One Adam update with decoupled weight decay.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64, weight_decay: f64) {
    assert_eq!(params.len(), grads.len(), "gradient count");
    assert_eq!(params.len(), state.m.len(), "optimizer state size");
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let (p, g) = (p.data_mut(), g.data());
        let (m, v) = (m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * weight_decay * p[i];
            p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(|g| g.dot(g)).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns
/// whether clipping happened.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> bool {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale_in_place(s));
        true
    } else {
        false
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: u8,
    pub lr: f64,
    pub train_loss: f64,
    pub val_psnr: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub val_mean_mu: f64,
    pub clipped_steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn best_val_psnr(&self) -> Option<f64> {
        self.records.iter().map(|r| r.val_psnr).reduce(f64::max)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "epoch,stage,lr,train_loss,val_psnr,epsilon,alpha,val_mean_mu,clipped_steps"
        )?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{}",
                r.epoch,
                r.stage,
                r.lr,
                r.train_loss,
                r.val_psnr,
                r.epsilon,
                r.alpha,
                r.val_mean_mu,
                r.clipped_steps
            )?;
        }
        Ok(())
    }
}

/// Loss and whether the gradient was clipped, for one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Owns the parameters and optimizer state between steps.
pub struct Trainer<'r> {
    pub reconstructor: &'r Reconstructor,
    pub cfg: TrainConfig,
    pub params: ModelParams,
    pub adam: AdamState,
}

impl<'r> Trainer<'r> {
    pub fn new(reconstructor: &'r Reconstructor, cfg: TrainConfig, params: ModelParams) -> Self {
        let adam = AdamState::new(params.tensors());
        Self {
            reconstructor,
            cfg,
            params,
            adam,
        }
    }

    /// Loss and parameter gradients for one training pair.
    pub fn loss_and_gradient(&self, y: &Sinogram, gt: &Image) -> Result<(f64, Vec<Tensor>), PfbsError> {
        let cfg = &self.cfg;
        let out = self.reconstructor.value_and_gradient(y, &self.params, |tape, b, h: HeadInputs| {
            let eps = b.epsilon(tape);
            loss_on_tape(tape, h.output, gt, eps, h.mu_mean, cfg)
        })?;
        Ok((out.loss, out.gradients))
    }

    pub fn step(&mut self, y: &Sinogram, gt: &Image, lr: f64) -> Result<StepOutcome, PfbsError> {
        let (loss, mut grads) = self.loss_and_gradient(y, gt)?;
        let grad_norm = global_norm(&grads);
        let clipped = match self.cfg.clip_norm {
            Some(c) => clip_global_norm(&mut grads, c),
            None => false,
        };
        adam_step(self.params.tensors_mut(), &grads, &mut self.adam, lr, self.cfg.weight_decay);
        Ok(StepOutcome {
            loss,
            grad_norm,
            clipped,
        })
    }

    pub fn reset_optimizer(&mut self) {
        self.adam = AdamState::new(self.params.tensors());
    }
}

/// Mean validation PSNR and mean predicted `mu` of `params` on `ds`.
pub fn validate(reconstructor: &Reconstructor, params: &ModelParams, ds: &Dataset) -> Result<(f64, f64), TrainError> {
    let mut psnr_sum = 0.0;
    let mut mu_sum = 0.0;
    for (i, s) in ds.samples.iter().enumerate() {
        let rec = reconstructor
            .reconstruct(&s.noisy, params)
            .map_err(|source| TrainError::Reconstruction { sample: i, source })?;
        psnr_sum += metrics::psnr(&rec.image, &s.ground_truth)?;
        mu_sum += rec.trace.mean_mu().unwrap_or(f64::NAN);
    }
    let n = ds.samples.len() as f64;
    Ok((psnr_sum / n, mu_sum / n))
}

/// Mean FBP PSNR on `ds`, the baseline the trained model is compared with.
pub fn fbp_psnr(reconstructor: &Reconstructor, ds: &Dataset) -> Result<f64, TrainError> {
    let mut sum = 0.0;
    for (i, s) in ds.samples.iter().enumerate() {
        let x = reconstructor
            .fbp(&s.noisy)
            .map_err(|source| TrainError::Reconstruction { sample: i, source })?;
        sum += metrics::psnr(&x, &s.ground_truth)?;
    }
    Ok(sum / ds.samples.len() as f64)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation PSNR seen.
    pub params: ModelParams,
    pub history: TrainHistory,
    pub best_val_psnr: f64,
}

fn check_datasets(train: &Dataset, val: &Dataset, r: &Reconstructor) -> Result<(), TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyDataset("training"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }
    if train.geometry != val.geometry || &train.geometry != r.geometry() {
        return Err(TrainError::GeometryMismatch);
    }
    Ok(())
}

/// Runs both stages from `init` and returns the best parameters.
///
/// `on_epoch` is called after every validated epoch.
pub fn train(
    reconstructor: &Reconstructor,
    train_ds: &Dataset,
    val_ds: &Dataset,
    cfg: &TrainConfig,
    init: ModelParams,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    check_datasets(train_ds, val_ds, reconstructor)?;
    let mut history = TrainHistory::default();
    let mut trainer = Trainer::new(reconstructor, cfg.clone(), init);
    let (init_psnr, _) = validate(reconstructor, &trainer.params, val_ds)?;
    let mut best = (init_psnr, trainer.params.clone());
    let mut epoch = 0;

    for stage in [1u8, 2u8] {
        if stage == 2 {
            trainer.params = best.1.clone();
            trainer.reset_optimizer();
        }
        let mut since_best = 0;
        for e in 0..cfg.max_epochs_per_stage {
            let lr = match stage {
                1 => cosine_lr(e, cfg.max_epochs_per_stage, cfg.stage1_lr, cfg.min_lr),
                _ => cfg.stage2_lr,
            };
            let mut loss_sum = 0.0;
            let mut clipped_steps = 0;
            for (i, s) in train_ds.samples.iter().enumerate() {
                let out = trainer
                    .step(&s.noisy, &s.ground_truth, lr)
                    .map_err(|source| match source {
                        PfbsError::NonFinite { .. } => TrainError::NonFinite { epoch, sample: i },
                        source => TrainError::Reconstruction { sample: i, source },
                    })?;
                if !out.loss.is_finite() {
                    return Err(TrainError::NonFinite { epoch, sample: i });
                }
                loss_sum += out.loss;
                clipped_steps += out.clipped as usize;
            }
            let (val_psnr, val_mean_mu) = validate(reconstructor, &trainer.params, val_ds)?;
            let rec = EpochRecord {
                epoch,
                stage,
                lr,
                train_loss: loss_sum / train_ds.len() as f64,
                val_psnr,
                epsilon: trainer.params.epsilon(),
                alpha: trainer.params.alpha(),
                val_mean_mu,
                clipped_steps,
            };
            on_epoch(&rec);
            history.records.push(rec);
            epoch += 1;
            if val_psnr > best.0 {
                best = (val_psnr, trainer.params.clone());
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
    }
    Ok(TrainOutcome {
        params: best.1,
        history,
        best_val_psnr: best.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 20, 2e-4, 1e-6), 2e-4);
        assert!((cosine_lr(20, 20, 2e-4, 1e-6) - 1e-6).abs() < 1e-18);
        assert!((cosine_lr(10, 20, 2e-4, 1e-6) - (2e-4 + 1e-6) / 2.0).abs() < 1e-18);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut p = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        let g = vec![Tensor::new(vec![3], vec![0.3, -7.0, 1e-3]).unwrap()];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, 1e-2, 0.0);
        let expect = [1.0 - 1e-2, -2.0 + 1e-2, 0.5 - 1e-2];
        for (a, b) in p[0].data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn adam_zero_gradient() {
        let orig = Tensor::new(vec![2], vec![3.0, -1.5]).unwrap();
        let g = vec![Tensor::zeros(&[2])];
        let mut p = vec![orig.clone()];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, 0.1, 0.0);
        assert_eq!(p[0], orig);
        adam_step(&mut p, &g, &mut st, 0.1, 0.5);
        let shrink = 1.0 - 0.1 * 0.5;
        for (a, b) in p[0].data().iter().zip([3.0 * shrink, -1.5 * shrink]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![
            Tensor::new(vec![2], vec![3.0, 0.0]).unwrap(),
            Tensor::new(vec![1], vec![4.0]).unwrap(),
        ];
        assert!(clip_global_norm(&mut g, 1.0));
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
        assert!(!clip_global_norm(&mut g, 2.0));
    }

    #[test]
    fn loss_examples() {
        let cfg = TrainConfig::default();
        let gt = Image::from_fn(4, 4, |r, c| (r * c) as f64);
        assert_eq!(loss_value(&gt, &gt, 1.25, 0.05, &cfg).unwrap(), 0.0);
        let shifted = Image::from_fn(4, 4, |r, c| (r * c) as f64 + 0.3);
        let l = loss_value(&shifted, &gt, 1.25, 0.05, &cfg).unwrap();
        assert!((l - 0.09).abs() < 1e-15);
        let l = loss_value(&gt, &gt, 1.35, 0.07, &cfg).unwrap();
        assert!((l - 1e-3 * (0.01 + 0.0004)).abs() < 1e-15);
    }

    #[test]
    fn tape_loss_matches_value() {
        let cfg = TrainConfig::default();
        let gt = Image::from_fn(3, 5, |r, c| (r + 2 * c) as f64 * 0.1);
        let pred = Image::from_fn(3, 5, |r, c| (r * c) as f64 * 0.05);
        let mut tape = Tape::new();
        let p = tape.leaf(pred.to_tensor());
        let e = tape.leaf(Tensor::scalar(1.4));
        let m = tape.leaf(Tensor::scalar(0.02));
        let l = loss_on_tape(&mut tape, p, &gt, e, m, &cfg).unwrap();
        let direct = loss_value(&pred, &gt, 1.4, 0.02, &cfg).unwrap();
        assert!((tape.value(l).item() - direct).abs() < 1e-15);
        let g = tape.backward(l).unwrap();
        assert!((g.wrt(e).item() - 2e-3 * 0.15).abs() < 1e-15);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.patience = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.stage2_lr = 0.0;
        assert!(cfg.validate().is_err());
    }
}
