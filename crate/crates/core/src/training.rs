//! Two-phase optimization of the denoiser: full training with single
//! conditions, then psi-only finetuning with multiple conditions.
//!
//! Per-sample forward/backward passes run in parallel across the batch;
//! gradients are reduced in batch-index order, and all randomness is drawn
//! from one stream before the parallel section, so results are bitwise
//! identical for any thread count.

use crate::diffusion::{noise_mse, q_sample, sample_noise_field, NoiseSchedule};
use crate::error::{Error, Result};
use crate::network::{
    backward_latent, build_fusion_plan, field_to_vol, forward_latent, DenoiserModel,
    FusionStrategy,
};
use crate::nn::store::Grads;
use crate::nn::{ParamId, Vol};
use crate::volume::{normalize_field, FieldKind, VoxelField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainPhase {
    /// Train everything except psi, one scan per example.
    Single,
    /// Freeze everything except psi, multiple scans per example.
    MultiFinetune,
}

/// What to do when a shape offers fewer than two scans during finetuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MissingMulti {
    Skip,
    Error,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub phase: TrainPhase,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Global-norm gradient clip; 0 disables.
    pub grad_clip: f64,
    pub checkpoint_interval: u64,
    pub log_interval: u64,
    pub seed: u64,
    /// Occupancy threshold for fusion masks, voxel units.
    pub tau: f32,
    /// Fusion variant used during multi-condition finetuning.
    pub fusion: FusionStrategy,
    pub missing_multi: MissingMulti,
}

impl TrainConfig {
    pub fn desk_default(phase: TrainPhase) -> Self {
        Self {
            phase,
            learning_rate: 1e-4,
            batch_size: 8,
            max_steps: 1000,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            grad_clip: 0.0,
            checkpoint_interval: 0,
            log_interval: 50,
            seed: 0,
            tau: 3.0,
            fusion: FusionStrategy::OccupancyAware,
            missing_multi: MissingMulti::Skip,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Parameter("learning_rate must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// One training example: normalized ground truth plus its partial scans
/// (raw TSDF for occupancy masks, normalized for the network).
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub gt_latent: Vol<f32>,
    pub scans_raw: Vec<VoxelField>,
    pub scans_latent: Vec<Vol<f32>>,
}

impl TrainSample {
    pub fn prepare(gt: &VoxelField, scans: Vec<VoxelField>) -> Result<Self> {
        if gt.kind() != FieldKind::Tudf {
            return Err(Error::KindMismatch {
                expected: "TUDF",
                got: gt.kind(),
            });
        }
        if scans.is_empty() {
            return Err(Error::Parameter("sample needs at least one scan".into()));
        }
        let gt_latent = field_to_vol::<f32>(&normalize_field(gt)?);
        let scans_latent = scans
            .iter()
            .map(|s| Ok(field_to_vol::<f32>(&normalize_field(s)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            gt_latent,
            scans_raw: scans,
            scans_latent,
        })
    }
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

pub fn write_loss_log(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut out = String::from("step,loss,grad_norm,lr\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.loss, r.grad_norm, r.lr));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// First-order adaptive-moment optimizer over a masked parameter subset.
struct Adam {
    m: Grads<f32>,
    v: Grads<f32>,
    step: u64,
}

impl Adam {
    fn new(model: &DenoiserModel<f32>) -> Self {
        Self {
            m: model.store.zeros_like(),
            v: model.store.zeros_like(),
            step: 0,
        }
    }

    fn update(
        &mut self,
        model: &mut DenoiserModel<f32>,
        grads: &Grads<f32>,
        mask: &[bool],
        cfg: &TrainConfig,
    ) {
        self.step += 1;
        let b1 = cfg.beta1 as f32;
        let b2 = cfg.beta2 as f32;
        let bc1 = 1.0 - (cfg.beta1).powi(self.step as i32);
        let bc2 = 1.0 - (cfg.beta2).powi(self.step as i32);
        let lr = cfg.learning_rate as f32;
        let wd = cfg.weight_decay as f32;
        let eps = 1e-8f32;
        for i in 0..mask.len() {
            if !mask[i] {
                continue;
            }
            let id = ParamId(i);
            let g = grads.get(id);
            let m = self.m.get_mut(id);
            for (mi, &gi) in m.iter_mut().zip(g) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
            }
            let v = self.v.get_mut(id);
            for (vi, &gi) in v.iter_mut().zip(g) {
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            }
            let p = model.store.get_mut(id);
            let m = self.m.get(id);
            let v = self.v.get(id);
            for ((pi, &mi), (&vi, &gi)) in
                p.iter_mut().zip(m).zip(v.iter().zip(g))
            {
                let mhat = mi / bc1 as f32;
                let vhat = vi / bc2 as f32;
                let mut delta = mhat / (vhat.sqrt() + eps);
                if wd > 0.0 {
                    delta += wd * *pi;
                }
                *pi -= lr * delta;
            }
        }
    }
}

fn trainable_mask(model: &DenoiserModel<f32>, phase: TrainPhase) -> Vec<bool> {
    let psi: Vec<usize> = model.psi_param_ids().iter().map(|id| id.0).collect();
    (0..model.store.len())
        .map(|i| match phase {
            TrainPhase::Single => !psi.contains(&i),
            TrainPhase::MultiFinetune => psi.contains(&i),
        })
        .collect()
}

/// Work order for one batch element, drawn from the main RNG before the
/// parallel section.
struct BatchDraw {
    sample_idx: usize,
    scan_subset: Vec<usize>,
    t: usize,
    eps: VoxelField,
}

fn drain_one_step(
    model: &DenoiserModel<f32>,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    samples: &[TrainSample],
    draws: Vec<BatchDraw>,
) -> Result<(f64, Grads<f32>, Vec<usize>)> {
    let results: Vec<Result<(f64, Grads<f32>)>> = draws
        .par_iter()
        .map(|draw| {
            let sample = &samples[draw.sample_idx];
            let x0 = &sample.gt_latent;
            let eps = field_to_vol::<f32>(&draw.eps);
            let ab = sched.alpha_bar(draw.t);
            let c0 = ab.sqrt() as f32;
            let ce = (1.0 - ab).sqrt() as f32;
            let mut x_t = Vol::zeros(1, x0.res);
            for ((xt, &x), &e) in x_t.data.iter_mut().zip(&x0.data).zip(&eps.data) {
                *xt = c0 * x + ce * e;
            }

            let conds: Vec<Vol<f32>> = draw
                .scan_subset
                .iter()
                .map(|&j| sample.scans_latent[j].clone())
                .collect();
            let plan = if draw.scan_subset.len() > 1 {
                let raw: Vec<&VoxelField> = draw
                    .scan_subset
                    .iter()
                    .map(|&j| &sample.scans_raw[j])
                    .collect();
                let taus = vec![cfg.tau; raw.len()];
                Some(build_fusion_plan::<f32>(&model.cfg, &raw, &taus, cfg.fusion)?)
            } else {
                None
            };

            let (eps_hat, cache) = forward_latent(model, &x_t, draw.t, &conds, plan, None);
            let loss = noise_mse(&eps_hat.data, &eps.data);
            let n = eps.data.len() as f32;
            let mut d_eps = Vol::zeros(1, x0.res);
            for (d, (&a, &b)) in d_eps
                .data
                .iter_mut()
                .zip(eps_hat.data.iter().zip(&eps.data))
            {
                *d = 2.0 * (a - b) / n;
            }
            let mut grads = model.store.zeros_like();
            backward_latent(model, &cache, &d_eps, &mut grads);
            Ok((loss, grads))
        })
        .collect();

    let mut total = model.store.zeros_like();
    let mut loss_acc = 0.0;
    for r in results {
        let (loss, g) = r?;
        loss_acc += loss;
        total.accumulate(&g);
    }
    let b = draws.len() as f64;
    total.scale(1.0 / b as f32);
    let ts = draws.iter().map(|d| d.t).collect();
    Ok((loss_acc / b, total, ts))
}

fn t_histogram(ts: &[usize], t_max: usize) -> Vec<u64> {
    let mut hist = vec![0u64; 10];
    for &t in ts {
        let bin = ((t - 1) * 10 / t_max).min(9);
        hist[bin] += 1;
    }
    hist
}

fn run_training(
    model: &mut DenoiserModel<f32>,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    samples: &[TrainSample],
    on_log: &mut dyn FnMut(&LogRow),
    on_checkpoint: &mut dyn FnMut(&DenoiserModel<f32>, u64) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Parameter("empty dataset".into()));
    }
    if !sched.terminal_is_noise() {
        return Err(Error::Parameter(
            "schedule terminal state is not close enough to pure noise".into(),
        ));
    }
    if cfg.phase == TrainPhase::MultiFinetune {
        let any_multi = samples.iter().any(|s| s.scans_raw.len() >= 2);
        if !any_multi {
            return Err(Error::Parameter(
                "finetuning requires shapes with at least two scans".into(),
            ));
        }
        if cfg.missing_multi == MissingMulti::Error
            && samples.iter().any(|s| s.scans_raw.len() < 2)
        {
            return Err(Error::Parameter(
                "a shape offers fewer than two scans and missing_multi=error".into(),
            ));
        }
    }

    let mask = trainable_mask(model, cfg.phase);
    let mut adam = Adam::new(model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let res = model.cfg.resolution;

    for step in 1..=cfg.max_steps {
        // All randomness for this step, drawn sequentially.
        let mut draws = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let sample_idx = loop {
                let idx = rng.gen_range(0..samples.len());
                if cfg.phase == TrainPhase::Single || samples[idx].scans_raw.len() >= 2 {
                    break idx;
                }
                // MissingMulti::Skip: resample a shape that has >= 2 scans.
            };
            let n_scans = samples[sample_idx].scans_raw.len();
            let scan_subset = match cfg.phase {
                TrainPhase::Single => vec![rng.gen_range(0..n_scans)],
                TrainPhase::MultiFinetune => {
                    let m = rng.gen_range(2..=n_scans);
                    let mut order: Vec<usize> = (0..n_scans).collect();
                    for i in (1..order.len()).rev() {
                        let j = rng.gen_range(0..=i);
                        order.swap(i, j);
                    }
                    order.truncate(m);
                    order
                }
            };
            let t = rng.gen_range(1..=sched.num_steps());
            let eps = sample_noise_field(res, 3.0, &mut rng);
            draws.push(BatchDraw {
                sample_idx,
                scan_subset,
                t,
                eps,
            });
        }

        let (loss, mut grads, ts) = drain_one_step(model, sched, cfg, samples, draws)?;
        let grad_norm = grads.global_norm();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                grad_norm,
                t_histogram: t_histogram(&ts, sched.num_steps()),
            });
        }
        if cfg.grad_clip > 0.0 && grad_norm > cfg.grad_clip {
            grads.scale((cfg.grad_clip / grad_norm) as f32);
        }
        adam.update(model, &grads, &mask, cfg);

        if cfg.log_interval > 0 && (step % cfg.log_interval == 0 || step == cfg.max_steps) {
            on_log(&LogRow {
                step,
                loss,
                grad_norm,
                lr: cfg.learning_rate,
            });
        }
        if cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0 {
            on_checkpoint(model, step)?;
        }
    }
    Ok(())
}

/// Phase 1: optimize every parameter except psi with single-scan conditions.
pub fn train_single(
    model: &mut DenoiserModel<f32>,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    samples: &[TrainSample],
    on_log: &mut dyn FnMut(&LogRow),
    on_checkpoint: &mut dyn FnMut(&DenoiserModel<f32>, u64) -> Result<()>,
) -> Result<()> {
    let cfg = TrainConfig {
        phase: TrainPhase::Single,
        ..cfg.clone()
    };
    run_training(model, sched, &cfg, samples, on_log, on_checkpoint)
}

/// Phase 2: freeze everything except psi and finetune it with multi-scan
/// fusion.
pub fn finetune_fusion(
    model: &mut DenoiserModel<f32>,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    samples: &[TrainSample],
    on_log: &mut dyn FnMut(&LogRow),
    on_checkpoint: &mut dyn FnMut(&DenoiserModel<f32>, u64) -> Result<()>,
) -> Result<()> {
    let cfg = TrainConfig {
        phase: TrainPhase::MultiFinetune,
        ..cfg.clone()
    };
    run_training(model, sched, &cfg, samples, on_log, on_checkpoint)
}
