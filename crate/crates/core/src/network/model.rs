//! Denoiser configuration, parameter layout, and initialization.

use crate::error::{Error, Result};
use crate::nn::ops::{Attention, Conv1, Conv3, GroupNorm, Linear, TConv2};
use crate::nn::{ParamId, ParamStore, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// How control features meet main-branch skip features at a decoder level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggOperator {
    /// Voxel-aligned addition (the default; combines only co-located voxels).
    Add,
    /// Channel concatenation (ablation variant; widens the decoder input).
    Concat,
}

impl AggOperator {
    pub fn as_str(self) -> &'static str {
        match self {
            AggOperator::Add => "add",
            AggOperator::Concat => "concat",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(AggOperator::Add),
            "concat" => Ok(AggOperator::Concat),
            other => Err(Error::Parameter(format!(
                "unknown aggregation operator '{other}' (use add|concat)"
            ))),
        }
    }
}

/// Architecture hyperparameters of the dual-branch denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    /// Grid edge length S; must be divisible by `2^(num_levels-1)`.
    pub resolution: usize,
    pub base_channels: usize,
    pub num_levels: usize,
    /// Per-level channel multipliers (length `num_levels`).
    pub channel_mults: Vec<usize>,
    pub time_embed_dim: usize,
    /// 1-based decoder levels that receive control features (1 = finest).
    pub aggregation_levels: Vec<usize>,
    pub agg_operator: AggOperator,
}

impl DenoiserConfig {
    /// Desk-scale defaults: 32³ grid, 16 base channels, four levels with
    /// multipliers (1,2,4,4), aggregation at every level.
    pub fn desk_default() -> Self {
        Self {
            resolution: 32,
            base_channels: 16,
            num_levels: 4,
            channel_mults: vec![1, 2, 4, 4],
            time_embed_dim: 64,
            aggregation_levels: vec![1, 2, 3, 4],
            agg_operator: AggOperator::Add,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_levels;
        if n == 0 {
            return Err(Error::Parameter("num_levels must be >= 1".into()));
        }
        if self.channel_mults.len() != n {
            return Err(Error::Parameter(format!(
                "need {n} channel multipliers, got {}",
                self.channel_mults.len()
            )));
        }
        let down = 1usize << (n - 1);
        if self.resolution % down != 0 || self.resolution < down {
            return Err(Error::Parameter(format!(
                "resolution {} not divisible by 2^{}",
                self.resolution,
                n - 1
            )));
        }
        if self.base_channels < 2 || self.time_embed_dim < 2 {
            return Err(Error::Parameter("channel widths too small".into()));
        }
        if self.base_channels % 2 != 0 {
            return Err(Error::Parameter("base_channels must be even".into()));
        }
        if self.aggregation_levels.is_empty() {
            return Err(Error::Parameter("aggregation_levels must be nonempty".into()));
        }
        for &l in &self.aggregation_levels {
            if l < 1 || l > n {
                return Err(Error::Parameter(format!(
                    "aggregation level {l} outside [1, {n}]"
                )));
            }
        }
        Ok(())
    }

    /// Channels at 0-based level index.
    pub fn channels(&self, i: usize) -> usize {
        self.base_channels * self.channel_mults[i]
    }

    /// Resolution at 0-based level index.
    pub fn level_res(&self, i: usize) -> usize {
        self.resolution >> i
    }

    /// Whether 0-based level `i` receives control features.
    pub fn aggregates(&self, i: usize) -> bool {
        self.aggregation_levels.contains(&(i + 1))
    }
}

/// Two 3x3x3 convolutions lifting a 1-channel field into feature space.
#[derive(Debug, Clone)]
pub struct PreBlock {
    pub conv1: Conv3,
    pub conv2: Conv3,
}

impl PreBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        ch: usize,
    ) -> Self {
        Self {
            conv1: Conv3::new(store, rng, &format!("{name}.conv1"), 1, ch, 1),
            conv2: Conv3::new(store, rng, &format!("{name}.conv2"), ch, ch, 1),
        }
    }
}

/// GroupNorm/SiLU/conv twice, with the time embedding added after the first
/// convolution and a 1x1 shortcut when the channel count changes.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub gn1: GroupNorm,
    pub conv1: Conv3,
    pub t_proj: Linear,
    pub gn2: GroupNorm,
    pub conv2: Conv3,
    pub shortcut: Option<Conv1>,
    pub ci: usize,
    pub co: usize,
}

impl ResBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        ci: usize,
        co: usize,
        time_dim: usize,
    ) -> Self {
        Self {
            gn1: GroupNorm::new(store, &format!("{name}.gn1"), ci),
            conv1: Conv3::new(store, rng, &format!("{name}.conv1"), ci, co, 1),
            t_proj: Linear::new(store, rng, &format!("{name}.temb"), time_dim, co),
            gn2: GroupNorm::new(store, &format!("{name}.gn2"), co),
            conv2: Conv3::new(store, rng, &format!("{name}.conv2"), co, co, 1),
            shortcut: if ci != co {
                Some(Conv1::new(store, rng, &format!("{name}.shortcut"), ci, co))
            } else {
                None
            },
            ci,
            co,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncLevel {
    pub rb: ResBlock,
    /// Stride-2 conv to the next (coarser) level; absent on the last level.
    pub down: Option<Conv3>,
}

#[derive(Debug, Clone)]
pub struct MidBlock {
    pub rb1: ResBlock,
    pub attn: Attention,
    pub rb2: ResBlock,
}

impl MidBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        ch: usize,
        time_dim: usize,
    ) -> Self {
        Self {
            rb1: ResBlock::new(store, rng, &format!("{name}.rb1"), ch, ch, time_dim),
            attn: Attention::new(store, rng, &format!("{name}.attn"), ch),
            rb2: ResBlock::new(store, rng, &format!("{name}.rb2"), ch, ch, time_dim),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecLevel {
    pub rb: ResBlock,
    /// Transposed conv to the next (finer) level; absent on the finest level.
    pub up: Option<TConv2>,
}

/// The fusion refiner psi: a per-voxel MLP with one hidden layer and a
/// residual connection, `psi(v) = v + W2 silu(W1 v + b1)`. Zero-initializing
/// W2 makes it the exact identity at init, so multi-condition finetuning
/// starts from single-condition behavior.
#[derive(Debug, Clone)]
pub struct FuseMlp {
    pub l1: Conv1,
    pub l2: Conv1,
}

impl FuseMlp {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        ch: usize,
    ) -> Self {
        Self {
            l1: Conv1::new(store, rng, &format!("{name}.l1"), ch, ch),
            l2: Conv1::new_zero(store, &format!("{name}.l2"), ch, ch),
        }
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.l1.w, self.l1.b, self.l2.w, self.l2.b]
    }
}

/// Parameters of the dual-branch denoiser.
#[derive(Debug, Clone)]
pub struct DenoiserModel<T> {
    pub cfg: DenoiserConfig,
    pub store: ParamStore<T>,
    pub t_l1: Linear,
    pub t_l2: Linear,
    pub pre_x: PreBlock,
    pub pre_c: PreBlock,
    pub enc_x: Vec<EncLevel>,
    pub enc_c: Vec<EncLevel>,
    pub mid_x: MidBlock,
    pub mid_c: MidBlock,
    /// Zero-initialized control-feature projections, one per level.
    pub proj: Vec<Conv1>,
    pub proj_mid: Conv1,
    /// Fusion refiners, one per level plus the middle.
    pub fuse: Vec<FuseMlp>,
    pub fuse_mid: FuseMlp,
    pub dec: Vec<DecLevel>,
    pub out_gn: GroupNorm,
    pub out_conv: Conv3,
}

impl<T: Scalar> DenoiserModel<T> {
    /// IDs of every psi (fusion refiner) parameter; the only tensors updated
    /// during multi-condition finetuning.
    pub fn psi_param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for f in &self.fuse {
            ids.extend(f.param_ids());
        }
        ids.extend(self.fuse_mid.param_ids());
        ids
    }

    /// Decoder-input channel count at 0-based level `i`.
    pub fn dec_in_channels(&self, i: usize) -> usize {
        let cfg = &self.cfg;
        let n = cfg.num_levels;
        let hin = if i == n - 1 {
            cfg.channels(n - 1)
        } else {
            cfg.channels(i)
        };
        let skip = match cfg.agg_operator {
            AggOperator::Add => cfg.channels(i),
            AggOperator::Concat => {
                cfg.channels(i) * if cfg.aggregates(i) { 2 } else { 1 }
            }
        };
        hin + skip
    }
}

/// Builds a model with fan-in-scaled uniform weights, zero-initialized
/// control projections, and identity-initialized fusion refiners.
/// Deterministic given the seed.
pub fn init_model<T: Scalar>(cfg: &DenoiserConfig, seed: u64) -> Result<DenoiserModel<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let td = cfg.time_embed_dim;
    let n = cfg.num_levels;

    let t_l1 = Linear::new(&mut store, &mut rng, "time.l1", cfg.base_channels, td);
    let t_l2 = Linear::new(&mut store, &mut rng, "time.l2", td, td);

    let pre_x = PreBlock::new(&mut store, &mut rng, "pre_x", cfg.base_channels);
    let pre_c = PreBlock::new(&mut store, &mut rng, "pre_c", cfg.base_channels);

    let mut enc_x = Vec::with_capacity(n);
    let mut enc_c = Vec::with_capacity(n);
    for branch in 0..2 {
        for i in 0..n {
            let prefix = if branch == 0 { "main" } else { "ctrl" };
            let ci = if i == 0 {
                cfg.base_channels
            } else {
                cfg.channels(i - 1)
            };
            let co = cfg.channels(i);
            let rb = ResBlock::new(
                &mut store,
                &mut rng,
                &format!("{prefix}.enc{i}.rb"),
                ci,
                co,
                td,
            );
            let down = if i < n - 1 {
                Some(Conv3::new(
                    &mut store,
                    &mut rng,
                    &format!("{prefix}.enc{i}.down"),
                    co,
                    co,
                    2,
                ))
            } else {
                None
            };
            if branch == 0 {
                enc_x.push(EncLevel { rb, down });
            } else {
                enc_c.push(EncLevel { rb, down });
            }
        }
    }

    let mid_ch = cfg.channels(n - 1);
    let mid_x = MidBlock::new(&mut store, &mut rng, "main.mid", mid_ch, td);
    let mid_c = MidBlock::new(&mut store, &mut rng, "ctrl.mid", mid_ch, td);

    let mut proj = Vec::with_capacity(n);
    for i in 0..n {
        let ch = cfg.channels(i);
        proj.push(Conv1::new_zero(&mut store, &format!("proj.l{i}"), ch, ch));
    }
    let proj_mid = Conv1::new_zero(&mut store, "proj.mid", mid_ch, mid_ch);

    let mut fuse = Vec::with_capacity(n);
    for i in 0..n {
        fuse.push(FuseMlp::new(
            &mut store,
            &mut rng,
            &format!("fuse.l{i}"),
            cfg.channels(i),
        ));
    }
    let fuse_mid = FuseMlp::new(&mut store, &mut rng, "fuse.mid", mid_ch);

    let mut dec = Vec::with_capacity(n);
    for i in 0..n {
        let co = cfg.channels(i);
        let up = if i > 0 {
            Some(TConv2::new(
                &mut store,
                &mut rng,
                &format!("dec{i}.up"),
                co,
                cfg.channels(i - 1),
            ))
        } else {
            None
        };
        dec.push(DecLevel {
            // dec_in_channels is not available before construction; compute
            // inline with the same formula.
            rb: {
                let hin = if i == n - 1 { cfg.channels(n - 1) } else { co };
                let skip = match cfg.agg_operator {
                    AggOperator::Add => co,
                    AggOperator::Concat => co * if cfg.aggregates(i) { 2 } else { 1 },
                };
                ResBlock::new(
                    &mut store,
                    &mut rng,
                    &format!("dec{i}.rb"),
                    hin + skip,
                    co,
                    td,
                )
            },
            up,
        });
    }

    let out_gn = GroupNorm::new(&mut store, "out.gn", cfg.base_channels);
    let out_conv = Conv3::new(&mut store, &mut rng, "out.conv", cfg.base_channels, 1, 1);

    Ok(DenoiserModel {
        cfg: cfg.clone(),
        store,
        t_l1,
        t_l2,
        pre_x,
        pre_c,
        enc_x,
        enc_c,
        mid_x,
        mid_c,
        proj,
        proj_mid,
        fuse,
        fuse_mid,
        dec,
        out_gn,
        out_conv,
    })
}

/// Total trainable parameter count.
pub fn count_parameters<T: Scalar>(model: &DenoiserModel<T>) -> usize {
    model.store.total_params()
}
