//! The dual-branch denoiser: a 3D U-Net over the corrupted complete shape,
//! an encoder-only control branch over partial scan(s), hierarchical
//! feature aggregation into the decoder, and occupancy-aware multi-scan
//! fusion.

mod checkpoint;
mod forward;
pub mod fusion;
mod model;

pub use checkpoint::{load_checkpoint, load_checkpoint_compatible, save_checkpoint, CheckpointMeta};
pub use forward::{backward_latent, forward_latent, FeatureProbe, ForwardCache, FusionPlan};
pub use fusion::OccupancyPyramid;
pub use model::{count_parameters, init_model, AggOperator, DenoiserConfig, DenoiserModel};

use crate::error::{Error, Result};
use crate::nn::{Scalar, Vol};
use crate::volume::{normalize_field, FieldKind, VoxelField};

/// How multi-scan control features are fused before injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionStrategy {
    /// Occupancy-weighted average refined by psi (the full Eq. 5 path).
    OccupancyAware,
    /// Uniform 1/M weights, still refined by psi.
    SimpleAverage,
    /// Occupancy-weighted average without the psi refiner.
    NoPsi,
}

impl FusionStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionStrategy::OccupancyAware => "occ-aware",
            FusionStrategy::SimpleAverage => "simple-average",
            FusionStrategy::NoPsi => "no-psi",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "occ-aware" => Ok(FusionStrategy::OccupancyAware),
            "simple-average" => Ok(FusionStrategy::SimpleAverage),
            "no-psi" => Ok(FusionStrategy::NoPsi),
            other => Err(Error::Parameter(format!(
                "unknown fusion strategy '{other}' (use occ-aware|simple-average|no-psi)"
            ))),
        }
    }
}

/// Converts a 1-channel field into an engine volume.
pub fn field_to_vol<T: Scalar>(f: &VoxelField) -> Vol<T> {
    Vol::from_vec(
        1,
        f.resolution(),
        f.data().iter().map(|&v| T::from_f64(v as f64)).collect(),
    )
}

/// Wraps a 1-channel engine volume as a LATENT field.
pub fn vol_to_field(v: &Vol<f32>, truncation: f32) -> Result<VoxelField> {
    VoxelField::new(v.res, FieldKind::Latent, truncation, v.data.clone())
}

fn check_forward_inputs(
    model: &DenoiserModel<f32>,
    x_t: &VoxelField,
    t: usize,
    conds: &[&VoxelField],
) -> Result<()> {
    if conds.is_empty() {
        return Err(Error::Parameter("at least one condition required".into()));
    }
    if x_t.kind() != FieldKind::Latent {
        return Err(Error::KindMismatch {
            expected: "LATENT",
            got: x_t.kind(),
        });
    }
    if t < 1 {
        return Err(Error::Parameter("timestep must be >= 1".into()));
    }
    if x_t.resolution() != model.cfg.resolution {
        return Err(Error::Shape(format!(
            "x_t resolution {} does not match model resolution {}",
            x_t.resolution(),
            model.cfg.resolution
        )));
    }
    for c in conds {
        if c.kind() != FieldKind::Tsdf {
            return Err(Error::KindMismatch {
                expected: "TSDF",
                got: c.kind(),
            });
        }
        if c.resolution() != x_t.resolution() {
            return Err(Error::Shape(format!(
                "condition resolution {} does not match x_t resolution {}",
                c.resolution(),
                x_t.resolution()
            )));
        }
    }
    Ok(())
}

/// Builds the fusion plan (normalized weights per level) for a set of raw
/// TSDF scans under a strategy.
pub fn build_fusion_plan<T: Scalar>(
    model_cfg: &DenoiserConfig,
    conds: &[&VoxelField],
    taus: &[f32],
    strategy: FusionStrategy,
) -> Result<FusionPlan<T>> {
    let pyramid = match strategy {
        FusionStrategy::OccupancyAware | FusionStrategy::NoPsi => {
            OccupancyPyramid::from_scans(conds, taus, model_cfg.num_levels)?
        }
        FusionStrategy::SimpleAverage => OccupancyPyramid::uniform(
            conds.len(),
            conds[0].resolution(),
            model_cfg.num_levels,
        ),
    };
    let weights = (0..model_cfg.num_levels)
        .map(|i| {
            (0..conds.len())
                .map(|j| {
                    pyramid
                        .weights(i, j)
                        .iter()
                        .map(|&w| T::from_f64(w as f64))
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(FusionPlan {
        weights,
        use_psi: strategy != FusionStrategy::NoPsi,
    })
}

/// Predicts the corrupting noise for one corrupted shape conditioned on a
/// single raw TSDF scan (normalized internally).
pub fn forward_single(
    model: &DenoiserModel<f32>,
    x_t: &VoxelField,
    t: usize,
    c: &VoxelField,
) -> Result<VoxelField> {
    check_forward_inputs(model, x_t, t, &[c])?;
    let c_lat = normalize_field(c)?;
    let xv = field_to_vol::<f32>(x_t);
    let cv = field_to_vol::<f32>(&c_lat);
    let (out, _) = forward_latent(model, &xv, t, &[cv], None, None);
    vol_to_field(&out, x_t.truncation())
}

/// Predicts the corrupting noise conditioned on multiple raw TSDF scans,
/// fused by occupancy-aware feature averaging (or an ablation strategy).
pub fn forward_multi(
    model: &DenoiserModel<f32>,
    x_t: &VoxelField,
    t: usize,
    conds: &[&VoxelField],
    taus: &[f32],
    strategy: FusionStrategy,
) -> Result<VoxelField> {
    check_forward_inputs(model, x_t, t, conds)?;
    let plan = build_fusion_plan::<f32>(&model.cfg, conds, taus, strategy)?;
    let xv = field_to_vol::<f32>(x_t);
    let cvs: Vec<Vol<f32>> = conds
        .iter()
        .map(|c| Ok(field_to_vol::<f32>(&normalize_field(c)?)))
        .collect::<Result<_>>()?;
    let (out, _) = forward_latent(model, &xv, t, &cvs, Some(plan), None);
    vol_to_field(&out, x_t.truncation())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops::dot;
    use crate::nn::ParamId;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> DenoiserConfig {
        DenoiserConfig {
            resolution: 8,
            base_channels: 4,
            num_levels: 4,
            channel_mults: vec![1, 2, 4, 4],
            time_embed_dim: 16,
            aggregation_levels: vec![1, 2, 3, 4],
            agg_operator: AggOperator::Add,
        }
    }

    fn rand_vol<T: Scalar>(rng: &mut ChaCha8Rng, ch: usize, res: usize) -> Vol<T> {
        let mut v = Vol::zeros(ch, res);
        for x in v.data.iter_mut() {
            *x = T::from_f64(rng.gen_range(-1.0..1.0));
        }
        v
    }

    fn full_plan<T: Scalar>(cfg: &DenoiserConfig, m: usize) -> FusionPlan<T> {
        // All-ones pyramid normalized over M conditions.
        let weights = (0..cfg.num_levels)
            .map(|i| {
                let n = cfg.level_res(i).pow(3);
                (0..m)
                    .map(|_| vec![T::from_f64(1.0 / m as f64); n])
                    .collect()
            })
            .collect();
        FusionPlan {
            weights,
            use_psi: true,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = tiny_cfg();
        let a = init_model::<f32>(&cfg, 17).unwrap();
        let b = init_model::<f32>(&cfg, 17).unwrap();
        for ((_, _, da), (_, _, db)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(da.len(), db.len());
            for (x, y) in da.iter().zip(db) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let c = init_model::<f32>(&cfg, 18).unwrap();
        let differs = a
            .store
            .iter()
            .zip(c.store.iter())
            .any(|((_, _, da), (_, _, dc))| da.iter().zip(dc).any(|(x, y)| x != y));
        assert!(differs, "different seeds must give different parameters");
    }

    #[test]
    fn projections_start_at_zero_and_psi_is_identity() {
        let cfg = tiny_cfg();
        let model = init_model::<f64>(&cfg, 3).unwrap();
        for p in &model.proj {
            assert!(model.store.get(p.w).iter().all(|&v| v == 0.0));
            assert!(model.store.get(p.b).iter().all(|&v| v == 0.0));
        }
        assert!(model.store.get(model.proj_mid.w).iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (i, fuse) in model.fuse.iter().enumerate() {
            let v = rand_vol::<f64>(&mut rng, cfg.channels(i), 2);
            let (out, _) = forward::fuse_forward(&model.store, fuse, v.clone());
            for (a, b) in out.data.iter().zip(&v.data) {
                assert!((a - b).abs() < 1e-6, "psi must be the identity at init");
            }
        }
    }

    #[test]
    fn zero_init_control_neutrality_is_bitwise() {
        let cfg = tiny_cfg();
        let model = init_model::<f64>(&cfg, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x_t = rand_vol::<f64>(&mut rng, 1, 8);
        let c1 = rand_vol::<f64>(&mut rng, 1, 8);
        let c2 = rand_vol::<f64>(&mut rng, 1, 8);
        let (o1, _) = forward_latent(&model, &x_t, 5, &[c1], None, None);
        let (o2, _) = forward_latent(&model, &x_t, 5, &[c2], None, None);
        for (a, b) in o1.data.iter().zip(&o2.data) {
            assert_eq!(a.to_bits(), b.to_bits(), "condition must not leak at init");
        }
    }

    #[test]
    fn output_shape_matches_input() {
        let cfg = tiny_cfg();
        let model = init_model::<f32>(&cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x_t = rand_vol::<f32>(&mut rng, 1, 8);
        let c = rand_vol::<f32>(&mut rng, 1, 8);
        let (out, _) = forward_latent(&model, &x_t, 9, &[c], None, None);
        assert_eq!(out.ch, 1);
        assert_eq!(out.res, 8);
    }

    /// Randomizes every parameter so neutrality does not mask errors.
    fn randomize_params<T: Scalar>(model: &mut DenoiserModel<T>, rng: &mut ChaCha8Rng) {
        for i in 0..model.store.len() {
            let t = model.store.get_mut(ParamId(i));
            for v in t.iter_mut() {
                *v = T::from_f64(rng.gen_range(-0.2..0.2));
            }
        }
    }

    #[test]
    fn multi_with_one_full_condition_reduces_to_single() {
        let cfg = tiny_cfg();
        let mut model = init_model::<f64>(&cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        randomize_params(&mut model, &mut rng);
        // Restore psi identity (randomize_params scrambled l2).
        for f in model.fuse.iter().chain(std::iter::once(&model.fuse_mid)) {
            for v in model.store.get_mut(f.l2.w).iter_mut() {
                *v = 0.0;
            }
            for v in model.store.get_mut(f.l2.b).iter_mut() {
                *v = 0.0;
            }
        }
        let x_t = rand_vol::<f64>(&mut rng, 1, 8);
        let c = rand_vol::<f64>(&mut rng, 1, 8);
        let (single, _) = forward_latent(&model, &x_t, 3, &[c.clone()], None, None);
        let plan = full_plan::<f64>(&cfg, 1);
        let (multi, _) = forward_latent(&model, &x_t, 3, &[c], Some(plan), None);
        for (a, b) in single.data.iter().zip(&multi.data) {
            assert!((a - b).abs() <= 1e-5, "M=1 full-mask reduction: {a} vs {b}");
        }
    }

    #[test]
    fn duplicated_conditions_match_single_condition_weights() {
        let cfg = tiny_cfg();
        let mut model = init_model::<f64>(&cfg, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        randomize_params(&mut model, &mut rng);
        let x_t = rand_vol::<f64>(&mut rng, 1, 8);
        let c = rand_vol::<f64>(&mut rng, 1, 8);
        let (one, _) = forward_latent(
            &model,
            &x_t,
            7,
            &[c.clone()],
            Some(full_plan::<f64>(&cfg, 1)),
            None,
        );
        let (two, _) = forward_latent(
            &model,
            &x_t,
            7,
            &[c.clone(), c],
            Some(full_plan::<f64>(&cfg, 2)),
            None,
        );
        for (a, b) in one.data.iter().zip(&two.data) {
            assert_eq!(a.to_bits(), b.to_bits(), "duplication invariance");
        }
    }

    #[test]
    fn condition_order_is_bitwise_invariant() {
        let cfg = tiny_cfg();
        let mut model = init_model::<f64>(&cfg, 31).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        randomize_params(&mut model, &mut rng);
        let x_t = rand_vol::<f64>(&mut rng, 1, 8);
        let cs: Vec<Vol<f64>> = (0..3).map(|_| rand_vol::<f64>(&mut rng, 1, 8)).collect();

        let plan = full_plan::<f64>(&cfg, 3);
        let (fwd, _) = forward_latent(
            &model,
            &x_t,
            4,
            &[cs[0].clone(), cs[1].clone(), cs[2].clone()],
            Some(plan.clone()),
            None,
        );
        let (rev, _) = forward_latent(
            &model,
            &x_t,
            4,
            &[cs[2].clone(), cs[0].clone(), cs[1].clone()],
            Some(plan),
            None,
        );
        for (a, b) in fwd.data.iter().zip(&rev.data) {
            assert_eq!(a.to_bits(), b.to_bits(), "permutation invariance");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_cfg();
        let mut model = init_model::<f32>(&cfg, 41).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        randomize_params(&mut model, &mut rng);
        let x_t = rand_vol::<f32>(&mut rng, 1, 8);
        let c = rand_vol::<f32>(&mut rng, 1, 8);
        let (a, _) = forward_latent(&model, &x_t, 6, &[c.clone()], None, None);
        let (b, _) = forward_latent(&model, &x_t, 6, &[c], None, None);
        for (x, y) in a.data.iter().zip(&b.data) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    /// Whole-model finite-difference gradient check (f64, 8³, 4 channels).
    fn fd_check_model(multi: bool) {
        let cfg = tiny_cfg();
        let mut model = init_model::<f64>(&cfg, 51).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        randomize_params(&mut model, &mut rng);
        let x_t = rand_vol::<f64>(&mut rng, 1, 8);
        let conds: Vec<Vol<f64>> = (0..if multi { 2 } else { 1 })
            .map(|_| rand_vol::<f64>(&mut rng, 1, 8))
            .collect();
        let target = rand_vol::<f64>(&mut rng, 1, 8);
        let t = 7;
        let plan = if multi {
            Some(full_plan::<f64>(&cfg, conds.len()))
        } else {
            None
        };

        let loss = |model: &DenoiserModel<f64>| -> f64 {
            let (out, _) = forward_latent(model, &x_t, t, &conds, plan.clone(), None);
            let n = out.data.len() as f64;
            out.data
                .iter()
                .zip(&target.data)
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<f64>()
                / n
        };

        // Analytic gradients.
        let (out, cache) = forward_latent(&model, &x_t, t, &conds, plan.clone(), None);
        let n = out.data.len() as f64;
        let mut d_eps = Vol::zeros(1, 8);
        for (d, (&a, &b)) in d_eps.data.iter_mut().zip(out.data.iter().zip(&target.data)) {
            *d = 2.0 * (a - b) / n;
        }
        let mut grads = model.store.zeros_like();
        backward_latent(&model, &cache, &d_eps, &mut grads);

        // Central differences on 50 random parameters.
        let h = 1e-3;
        let mut checked = 0;
        let mut max_rel: f64 = 0.0;
        while checked < 50 {
            let pid = ParamId(rng.gen_range(0..model.store.len()));
            let len = model.store.get(pid).len();
            let idx = rng.gen_range(0..len);
            let ana = grads.get(pid)[idx];
            let orig = model.store.get(pid)[idx];
            model.store.get_mut(pid)[idx] = orig + h;
            let lp = loss(&model);
            model.store.get_mut(pid)[idx] = orig - h;
            let lm = loss(&model);
            model.store.get_mut(pid)[idx] = orig;
            let num = (lp - lm) / (2.0 * h);
            // Central differences at h=1e-3 cannot resolve gradients much
            // below ~1e-5 to 1e-3 relative accuracy; sample elsewhere.
            if num.abs() < 1e-5 && ana.abs() < 1e-5 {
                continue;
            }
            let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
            assert!(
                rel < 1e-3,
                "grad mismatch on {}[{idx}]: analytic {ana}, numeric {num}, rel {rel}",
                model.store.name(pid)
            );
            checked += 1;
        }
        assert!(max_rel < 1e-3, "max relative error {max_rel}");
    }

    #[test]
    fn gradients_match_finite_differences_single() {
        fd_check_model(false);
    }

    #[test]
    fn gradients_match_finite_differences_multi() {
        fd_check_model(true);
    }

    #[test]
    fn aggregation_is_spatially_local() {
        // A control-feature delta at voxel p must change the decoder input
        // at that level only at p (the injection path is 1x1).
        let cfg = tiny_cfg();
        let mut model = init_model::<f64>(&cfg, 61).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        randomize_params(&mut model, &mut rng);
        let x_t = rand_vol::<f64>(&mut rng, 1, 8);
        let c = rand_vol::<f64>(&mut rng, 1, 8);

        for level in 0..cfg.num_levels {
            let res = cfg.level_res(level);
            let p = (res * res * res) / 2; // an interior-ish voxel
            let probe = FeatureProbe {
                level,
                cond: 0,
                channel: 0,
                voxel: p,
                delta: 0.5,
            };
            let (_, base) = forward_latent(&model, &x_t, 3, &[c.clone()], None, None);
            let (_, perturbed) = forward_latent(&model, &x_t, 3, &[c.clone()], None, Some(&probe));
            let a = base.decoder_input(level);
            let b = perturbed.decoder_input(level);
            let plane = a.plane();
            let mut changed_at_p = false;
            for ch in 0..a.ch {
                for v in 0..plane {
                    let diff = (a.channel(ch)[v] - b.channel(ch)[v]).abs();
                    if v == p {
                        changed_at_p |= diff > 0.0;
                    } else {
                        assert_eq!(
                            diff, 0.0,
                            "level {level}: leak at channel {ch} voxel {v} (probe at {p})"
                        );
                    }
                }
            }
            assert!(changed_at_p, "level {level}: probe had no effect at p");
        }
    }

    #[test]
    fn parameter_count_increases_with_width() {
        let small = init_model::<f32>(&tiny_cfg(), 1).unwrap();
        let mut big_cfg = tiny_cfg();
        big_cfg.base_channels = 8;
        big_cfg.time_embed_dim = 32;
        let big = init_model::<f32>(&big_cfg, 1).unwrap();
        assert!(count_parameters(&big) > count_parameters(&small));
    }

    #[test]
    fn checkpoint_round_trip_reproduces_forward_bitwise() {
        let cfg = tiny_cfg();
        let mut model = init_model::<f32>(&cfg, 71).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        randomize_params(&mut model, &mut rng);
        let meta = CheckpointMeta {
            step: 1234,
            psi_finetuned: true,
            diffusion_t: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &meta, &path).unwrap();
        let (loaded, meta2) = load_checkpoint(&path).unwrap();
        assert_eq!(meta, meta2);

        let x_t = rand_vol::<f32>(&mut rng, 1, 8);
        let c = rand_vol::<f32>(&mut rng, 1, 8);
        let (a, _) = forward_latent(&model, &x_t, 5, &[c.clone()], None, None);
        let (b, _) = forward_latent(&loaded, &x_t, 5, &[c], None, None);
        for (x, y) in a.data.iter().zip(&b.data) {
            assert_eq!(x.to_bits(), y.to_bits());
        }

        // Mismatched architecture must be rejected.
        let mut other = tiny_cfg();
        other.resolution = 16;
        assert!(matches!(
            load_checkpoint_compatible(&path, &other),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn field_wrappers_validate_inputs() {
        let cfg = tiny_cfg();
        let model = init_model::<f32>(&cfg, 1).unwrap();
        let x_t = VoxelField::constant(8, FieldKind::Latent, 3.0, 0.0).unwrap();
        let c_bad = VoxelField::constant(8, FieldKind::Tudf, 3.0, 1.0).unwrap();
        assert!(forward_single(&model, &x_t, 1, &c_bad).is_err());
        let c = VoxelField::constant(8, FieldKind::Tsdf, 3.0, 1.0).unwrap();
        assert!(forward_single(&model, &x_t, 1, &c).is_ok());
        assert!(forward_multi(&model, &x_t, 1, &[], &[], FusionStrategy::OccupancyAware).is_err());
        let out = forward_multi(
            &model,
            &x_t,
            1,
            &[&c, &c],
            &[3.0, 3.0],
            FusionStrategy::OccupancyAware,
        )
        .unwrap();
        assert_eq!(out.resolution(), 8);
        assert_eq!(out.kind(), FieldKind::Latent);
    }

    #[test]
    fn weighted_probe_dot_sanity() {
        // Keep `dot` honest against a plain sequential sum.
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let a: Vec<f64> = (0..103).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..103).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = dot(&a, &b);
        let want: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((got - want).abs() < 1e-12);
    }
}
