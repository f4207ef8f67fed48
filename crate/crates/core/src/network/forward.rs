//! Forward evaluation and parameter-gradient computation for the denoiser.
//!
//! The forward pass records exactly the tensors the hand-written backward
//! pass needs (block inputs, pre-activation buffers, normalization stats);
//! cheap elementwise values are recomputed during backprop instead of
//! cached. Both passes iterate in a fixed order, so gradients are bitwise
//! reproducible.

use super::model::{DenoiserModel, EncLevel, FuseMlp, MidBlock, PreBlock, ResBlock};
use crate::network::AggOperator;
use crate::nn::ops::{
    silu_bwd, silu_bwd_slice, silu_fwd, silu_fwd_slice, sum, timestep_embedding, AttnCache,
    GnStats,
};
use crate::nn::store::Grads;
use crate::nn::{ParamStore, Scalar, Vol};

/// Per-level, per-condition fusion weights in engine precision, plus whether
/// the psi refiner runs.
#[derive(Debug, Clone)]
pub struct FusionPlan<T> {
    /// `weights[level][cond]`, each at that level's resolution.
    pub weights: Vec<Vec<Vec<T>>>,
    pub use_psi: bool,
}

/// Test-only perturbation injected into a control feature right before its
/// projection, used to verify that aggregation combines only co-located
/// voxels.
#[derive(Debug, Clone, Copy)]
pub struct FeatureProbe {
    /// 0-based level; `usize::MAX` targets the middle block.
    pub level: usize,
    pub cond: usize,
    pub channel: usize,
    pub voxel: usize,
    pub delta: f64,
}

#[derive(Debug, Clone)]
pub struct PreCache<T> {
    x: Vol<T>,
    h1: Vol<T>,
}

#[derive(Debug, Clone)]
pub struct RbCache<T> {
    x: Vol<T>,
    s1: GnStats<T>,
    h: Vol<T>,
    s2: GnStats<T>,
}

#[derive(Debug, Clone)]
pub struct EncCache<T> {
    rb: RbCache<T>,
    /// Block output: the skip tensor, also the downsample input.
    out: Vol<T>,
}

#[derive(Debug, Clone)]
pub struct MidCache<T> {
    rb1: RbCache<T>,
    attn: AttnCache<T>,
    rb2: RbCache<T>,
}

#[derive(Debug, Clone)]
pub struct CtrlCache<T> {
    pre: PreCache<T>,
    enc: Vec<EncCache<T>>,
    mid: MidCache<T>,
    mid_out: Vol<T>,
}

#[derive(Debug, Clone)]
pub struct FuseCache<T> {
    v: Vol<T>,
    h1: Vol<T>,
}

#[derive(Debug, Clone)]
pub struct DecCache<T> {
    rb: RbCache<T>,
    /// Block output when an upsample follows (its backward needs the input).
    out: Option<Vol<T>>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub t: usize,
    temb_base: Vec<T>,
    e1: Vec<T>,
    temb: Vec<T>,
    silu_temb: Vec<T>,
    pre_x: PreCache<T>,
    enc_x: Vec<EncCache<T>>,
    mid_x: MidCache<T>,
    mid_x_out: Vol<T>,
    ctrl: Vec<CtrlCache<T>>,
    plan: Option<FusionPlan<T>>,
    fuse_cache: Vec<Option<FuseCache<T>>>,
    fuse_mid_cache: Option<FuseCache<T>>,
    dec: Vec<DecCache<T>>,
    out_h: Vol<T>,
    out_stats: GnStats<T>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Decoder input tensor at 0-based level `i` (the concatenated features
    /// entering that decoder block).
    pub fn decoder_input(&self, i: usize) -> &Vol<T> {
        &self.dec[i].rb.x
    }
}

fn pre_forward<T: Scalar>(
    store: &ParamStore<T>,
    pre: &PreBlock,
    x: &Vol<T>,
) -> (Vol<T>, PreCache<T>) {
    let h1 = pre.conv1.forward(store, x);
    let a = silu_fwd(&h1);
    let y = pre.conv2.forward(store, &a);
    (
        y,
        PreCache {
            x: x.clone(),
            h1,
        },
    )
}

fn pre_backward<T: Scalar>(
    store: &ParamStore<T>,
    pre: &PreBlock,
    cache: &PreCache<T>,
    dout: &Vol<T>,
    grads: &mut Grads<T>,
) -> Vol<T> {
    let a = silu_fwd(&cache.h1);
    let da = pre.conv2.backward(store, &a, dout, grads);
    let dh1 = silu_bwd(&cache.h1, &da);
    pre.conv1.backward(store, &cache.x, &dh1, grads)
}

fn rb_forward<T: Scalar>(
    store: &ParamStore<T>,
    rb: &ResBlock,
    x: Vol<T>,
    silu_temb: &[T],
) -> (Vol<T>, RbCache<T>) {
    let (n1, s1) = rb.gn1.forward(store, &x);
    let a1 = silu_fwd(&n1);
    let mut h = rb.conv1.forward(store, &a1);
    let tv = rb.t_proj.forward(store, silu_temb);
    for c in 0..rb.co {
        let add = tv[c];
        for v in h.channel_mut(c) {
            *v += add;
        }
    }
    let (n2, s2) = rb.gn2.forward(store, &h);
    let a2 = silu_fwd(&n2);
    let mut y = rb.conv2.forward(store, &a2);
    match &rb.shortcut {
        Some(sc) => y.add_assign(&sc.forward(store, &x)),
        None => y.add_assign(&x),
    }
    (y, RbCache { x, s1, h, s2 })
}

fn rb_backward<T: Scalar>(
    store: &ParamStore<T>,
    rb: &ResBlock,
    cache: &RbCache<T>,
    dout: &Vol<T>,
    grads: &mut Grads<T>,
    silu_temb: &[T],
    d_silu_temb: &mut [T],
) -> Vol<T> {
    let mut dx = match &rb.shortcut {
        Some(sc) => sc.backward(store, &cache.x, dout, grads),
        None => dout.clone(),
    };
    let n2 = rb.gn2.apply_with_stats(store, &cache.h, &cache.s2);
    let a2 = silu_fwd(&n2);
    let da2 = rb.conv2.backward(store, &a2, dout, grads);
    let dn2 = silu_bwd(&n2, &da2);
    let dh = rb.gn2.backward(store, &cache.h, &cache.s2, &dn2, grads);

    let dtv: Vec<T> = (0..rb.co).map(|c| sum(dh.channel(c))).collect();
    let dst = rb.t_proj.backward(store, silu_temb, &dtv, grads);
    for (a, b) in d_silu_temb.iter_mut().zip(dst) {
        *a += b;
    }

    let n1 = rb.gn1.apply_with_stats(store, &cache.x, &cache.s1);
    let a1 = silu_fwd(&n1);
    let da1 = rb.conv1.backward(store, &a1, &dh, grads);
    let dn1 = silu_bwd(&n1, &da1);
    let dx1 = rb.gn1.backward(store, &cache.x, &cache.s1, &dn1, grads);
    dx.add_assign(&dx1);
    dx
}

fn mid_forward<T: Scalar>(
    store: &ParamStore<T>,
    mid: &MidBlock,
    x: Vol<T>,
    silu_temb: &[T],
) -> (Vol<T>, MidCache<T>) {
    let (h1, rb1) = rb_forward(store, &mid.rb1, x, silu_temb);
    let (h2, attn) = mid.attn.forward(store, &h1);
    let (y, rb2) = rb_forward(store, &mid.rb2, h2, silu_temb);
    (y, MidCache { rb1, attn, rb2 })
}

fn mid_backward<T: Scalar>(
    store: &ParamStore<T>,
    mid: &MidBlock,
    cache: &MidCache<T>,
    dout: &Vol<T>,
    grads: &mut Grads<T>,
    silu_temb: &[T],
    d_silu_temb: &mut [T],
) -> Vol<T> {
    let d2 = rb_backward(store, &mid.rb2, &cache.rb2, dout, grads, silu_temb, d_silu_temb);
    let d1 = mid.attn.backward(store, &cache.attn, &d2, grads);
    rb_backward(store, &mid.rb1, &cache.rb1, &d1, grads, silu_temb, d_silu_temb)
}

fn encode<T: Scalar>(
    store: &ParamStore<T>,
    levels: &[EncLevel],
    input: Vol<T>,
    silu_temb: &[T],
) -> (Vec<EncCache<T>>, Vol<T>) {
    let n = levels.len();
    let mut caches = Vec::with_capacity(n);
    let mut h = input;
    for lvl in levels {
        let (y, rb) = rb_forward(store, &lvl.rb, h, silu_temb);
        h = match &lvl.down {
            Some(down) => down.forward(store, &y),
            None => y.clone(),
        };
        caches.push(EncCache { rb, out: y });
    }
    (caches, h)
}

/// Backward through an encoder chain. `d_skips[i]` is the gradient arriving
/// at each block output from skip consumers; `d_mid_in` arrives at the chain
/// output. Returns the gradient on the chain input.
fn encode_backward<T: Scalar>(
    store: &ParamStore<T>,
    levels: &[EncLevel],
    caches: &[EncCache<T>],
    mut d_skips: Vec<Vol<T>>,
    d_mid_in: Vol<T>,
    grads: &mut Grads<T>,
    silu_temb: &[T],
    d_silu_temb: &mut [T],
) -> Vol<T> {
    let n = levels.len();
    let mut d_next: Option<Vol<T>> = Some(d_mid_in);
    let mut d_input = None;
    for i in (0..n).rev() {
        let mut d_out = std::mem::replace(&mut d_skips[i], Vol::zeros(0, 0));
        if let Some(dn) = d_next.take() {
            match &levels[i].down {
                Some(down) => d_out.add_assign(&down.backward(store, &caches[i].out, &dn, grads)),
                None => d_out.add_assign(&dn),
            }
        }
        let dx = rb_backward(
            store,
            &levels[i].rb,
            &caches[i].rb,
            &d_out,
            grads,
            silu_temb,
            d_silu_temb,
        );
        if i == 0 {
            d_input = Some(dx);
        } else {
            d_next = Some(dx);
        }
    }
    d_input.unwrap()
}

pub(crate) fn fuse_forward<T: Scalar>(
    store: &ParamStore<T>,
    fuse: &FuseMlp,
    v: Vol<T>,
) -> (Vol<T>, FuseCache<T>) {
    let h1 = fuse.l1.forward(store, &v);
    let a = silu_fwd(&h1);
    let r = fuse.l2.forward(store, &a);
    let mut y = v.clone();
    y.add_assign(&r);
    (y, FuseCache { v, h1 })
}

fn fuse_backward<T: Scalar>(
    store: &ParamStore<T>,
    fuse: &FuseMlp,
    cache: &FuseCache<T>,
    dout: &Vol<T>,
    grads: &mut Grads<T>,
) -> Vol<T> {
    let a = silu_fwd(&cache.h1);
    let da = fuse.l2.backward(store, &a, dout, grads);
    let dh1 = silu_bwd(&cache.h1, &da);
    let mut dv = fuse.l1.backward(store, &cache.v, &dh1, grads);
    dv.add_assign(dout);
    dv
}

/// Weighted per-voxel sum over conditions with a canonical (value-sorted)
/// addend order, so the result is bitwise independent of condition order.
/// Two-addend sums are already commutative in IEEE arithmetic; three or more
/// are sorted before summing.
fn weighted_sum_sorted<T: Scalar>(parts: &[Vol<T>], weights: &[&[T]]) -> Vol<T> {
    let m = parts.len();
    let ch = parts[0].ch;
    let res = parts[0].res;
    let plane = parts[0].plane();
    let mut out = Vol::zeros(ch, res);
    match m {
        1 => {
            let w = weights[0];
            for c in 0..ch {
                let src = parts[0].channel(c);
                let dst = out.channel_mut(c);
                for v in 0..plane {
                    dst[v] = src[v] * w[v];
                }
            }
        }
        2 => {
            for c in 0..ch {
                let s0 = parts[0].channel(c);
                let s1 = parts[1].channel(c);
                let dst = out.channel_mut(c);
                for v in 0..plane {
                    dst[v] = s0[v] * weights[0][v] + s1[v] * weights[1][v];
                }
            }
        }
        _ => {
            let mut buf = vec![T::ZERO; m];
            for c in 0..ch {
                for v in 0..plane {
                    for (j, p) in parts.iter().enumerate() {
                        buf[j] = p.channel(c)[v] * weights[j][v];
                    }
                    buf.sort_by(|a, b| a.partial_cmp(b).expect("finite weights"));
                    let mut acc = T::ZERO;
                    for &b in buf.iter() {
                        acc += b;
                    }
                    out.channel_mut(c)[v] = acc;
                }
            }
        }
    }
    out
}

fn apply_probe<T: Scalar>(feat: &Vol<T>, probe: &FeatureProbe) -> Vol<T> {
    let mut f = feat.clone();
    let p = f.plane();
    f.data[probe.channel * p + probe.voxel] += T::from_f64(probe.delta);
    f
}

/// Full forward pass on engine tensors. `conds` are normalized 1-channel
/// latent volumes. With `plan = None` (single condition, Eq. 4 path) exactly
/// one condition is expected; with a plan the occupancy-weighted fusion
/// (Eq. 5 path) runs, refined by psi unless the plan disables it.
pub fn forward_latent<T: Scalar>(
    model: &DenoiserModel<T>,
    x_t: &Vol<T>,
    t: usize,
    conds: &[Vol<T>],
    plan: Option<FusionPlan<T>>,
    probe: Option<&FeatureProbe>,
) -> (Vol<T>, ForwardCache<T>) {
    assert!(!conds.is_empty(), "at least one condition required");
    if plan.is_none() {
        assert_eq!(conds.len(), 1, "single-condition path takes exactly one scan");
    }
    let store = &model.store;
    let cfg = &model.cfg;
    let n = cfg.num_levels;

    // Time embedding: two MLP layers over a sinusoidal base.
    let temb_base = timestep_embedding::<T>(t, cfg.base_channels);
    let e1 = model.t_l1.forward(store, &temb_base);
    let a1 = silu_fwd_slice(&e1);
    let temb = model.t_l2.forward(store, &a1);
    let silu_temb = silu_fwd_slice(&temb);

    // Main branch.
    let (px, pre_x_cache) = pre_forward(store, &model.pre_x, x_t);
    let (enc_x_cache, mid_in_x) = encode(store, &model.enc_x, px.clone(), &silu_temb);
    let (mid_x_out, mid_x_cache) = mid_forward(store, &model.mid_x, mid_in_x, &silu_temb);

    // Control branch, once per condition: f_j = pre_x(x_t) + pre_c(c_j).
    let mut ctrl = Vec::with_capacity(conds.len());
    for c in conds {
        let (pc, pre_cache) = pre_forward(store, &model.pre_c, c);
        let mut f = px.clone();
        f.add_assign(&pc);
        let (enc, mid_in_c) = encode(store, &model.enc_c, f, &silu_temb);
        let (mid_out, mid) = mid_forward(store, &model.mid_c, mid_in_c, &silu_temb);
        ctrl.push(CtrlCache {
            pre: pre_cache,
            enc,
            mid,
            mid_out,
        });
    }

    // Middle-block control injection (always active).
    let mut fuse_mid_cache = None;
    let mid_inject = match &plan {
        None => model.proj_mid.forward(store, &ctrl[0].mid_out),
        Some(p) => {
            let parts: Vec<Vol<T>> = ctrl
                .iter()
                .enumerate()
                .map(|(j, cc)| {
                    let feat = match probe {
                        Some(pr) if pr.level == usize::MAX && pr.cond == j => {
                            apply_probe(&cc.mid_out, pr)
                        }
                        _ => cc.mid_out.clone(),
                    };
                    model.proj_mid.forward(store, &feat)
                })
                .collect();
            let ws: Vec<&[T]> = (0..conds.len())
                .map(|j| p.weights[n - 1][j].as_slice())
                .collect();
            let fused = weighted_sum_sorted(&parts, &ws);
            if p.use_psi {
                let (refined, fc) = fuse_forward(store, &model.fuse_mid, fused);
                fuse_mid_cache = Some(fc);
                refined
            } else {
                fused
            }
        }
    };
    let mut h = mid_x_out.clone();
    h.add_assign(&mid_inject);

    // Decoder, coarse to fine.
    let mut dec_cache: Vec<Option<DecCache<T>>> = (0..n).map(|_| None).collect();
    let mut fuse_cache: Vec<Option<FuseCache<T>>> = (0..n).map(|_| None).collect();
    for i in (0..n).rev() {
        let base_skip = &enc_x_cache[i].out;
        let skip = if cfg.aggregates(i) {
            let inj = match &plan {
                None => {
                    let feat = match probe {
                        Some(pr) if pr.level == i && pr.cond == 0 => {
                            apply_probe(&ctrl[0].enc[i].out, pr)
                        }
                        _ => ctrl[0].enc[i].out.clone(),
                    };
                    model.proj[i].forward(store, &feat)
                }
                Some(p) => {
                    let parts: Vec<Vol<T>> = ctrl
                        .iter()
                        .enumerate()
                        .map(|(j, cc)| {
                            let feat = match probe {
                                Some(pr) if pr.level == i && pr.cond == j => {
                                    apply_probe(&cc.enc[i].out, pr)
                                }
                                _ => cc.enc[i].out.clone(),
                            };
                            model.proj[i].forward(store, &feat)
                        })
                        .collect();
                    let ws: Vec<&[T]> = (0..conds.len())
                        .map(|j| p.weights[i][j].as_slice())
                        .collect();
                    let fused = weighted_sum_sorted(&parts, &ws);
                    if p.use_psi {
                        let (refined, fc) = fuse_forward(store, &model.fuse[i], fused);
                        fuse_cache[i] = Some(fc);
                        refined
                    } else {
                        fused
                    }
                }
            };
            match cfg.agg_operator {
                AggOperator::Add => {
                    let mut s = base_skip.clone();
                    s.add_assign(&inj);
                    s
                }
                AggOperator::Concat => Vol::concat(base_skip, &inj),
            }
        } else {
            base_skip.clone()
        };

        let rb_in = Vol::concat(&h, &skip);
        let (y, rb) = rb_forward(store, &model.dec[i].rb, rb_in, &silu_temb);
        if i > 0 {
            h = model.dec[i].up.as_ref().unwrap().forward(store, &y);
            dec_cache[i] = Some(DecCache { rb, out: Some(y) });
        } else {
            h = y;
            dec_cache[i] = Some(DecCache { rb, out: None });
        }
    }
    let dec: Vec<DecCache<T>> = dec_cache.into_iter().map(|c| c.unwrap()).collect();

    // Output head: GroupNorm, SiLU, 3x3x3 conv to one channel.
    let (on, out_stats) = model.out_gn.forward(store, &h);
    let oa = silu_fwd(&on);
    let eps_hat = model.out_conv.forward(store, &oa);

    let cache = ForwardCache {
        t,
        temb_base,
        e1,
        temb,
        silu_temb,
        pre_x: pre_x_cache,
        enc_x: enc_x_cache,
        mid_x: mid_x_cache,
        mid_x_out,
        ctrl,
        plan,
        fuse_cache,
        fuse_mid_cache,
        dec,
        out_h: h,
        out_stats,
    };
    (eps_hat, cache)
}

/// Backprop through the whole network; accumulates parameter gradients and
/// returns the gradient with respect to `x_t`.
pub fn backward_latent<T: Scalar>(
    model: &DenoiserModel<T>,
    cache: &ForwardCache<T>,
    d_eps: &Vol<T>,
    grads: &mut Grads<T>,
) -> Vol<T> {
    let store = &model.store;
    let cfg = &model.cfg;
    let n = cfg.num_levels;
    let m = cache.ctrl.len();
    let silu_temb = &cache.silu_temb;
    let mut d_silu_temb = vec![T::ZERO; silu_temb.len()];

    // Output head.
    let on = model
        .out_gn
        .apply_with_stats(store, &cache.out_h, &cache.out_stats);
    let oa = silu_fwd(&on);
    let doa = model.out_conv.backward(store, &oa, d_eps, grads);
    let don = silu_bwd(&on, &doa);
    let mut d_rb_out = model
        .out_gn
        .backward(store, &cache.out_h, &cache.out_stats, &don, grads);

    // Gradients routed to main skips and control features.
    let mut d_main_skips: Vec<Vol<T>> = (0..n)
        .map(|i| Vol::zeros(cfg.channels(i), cfg.level_res(i)))
        .collect();
    let mut d_ctrl_skips: Vec<Vec<Vol<T>>> = (0..m)
        .map(|_| {
            (0..n)
                .map(|i| Vol::zeros(cfg.channels(i), cfg.level_res(i)))
                .collect()
        })
        .collect();

    let mut d_mid_inject = None;
    for i in 0..n {
        let d_rb_in = rb_backward(
            store,
            &model.dec[i].rb,
            &cache.dec[i].rb,
            &d_rb_out,
            grads,
            silu_temb,
            &mut d_silu_temb,
        );
        let hin = if i == n - 1 {
            cfg.channels(n - 1)
        } else {
            cfg.channels(i)
        };
        let (d_h_in, d_skip) = d_rb_in.split(hin);

        // Route the skip gradient.
        let (d_base, d_inj) = if cfg.aggregates(i) {
            match cfg.agg_operator {
                AggOperator::Add => (d_skip.clone(), Some(d_skip)),
                AggOperator::Concat => {
                    let (a, b) = d_skip.split(cfg.channels(i));
                    (a, Some(b))
                }
            }
        } else {
            (d_skip, None)
        };
        d_main_skips[i].add_assign(&d_base);

        if let Some(d_inj) = d_inj {
            match &cache.plan {
                None => {
                    let dc = model.proj[i].backward(
                        store,
                        &cache.ctrl[0].enc[i].out,
                        &d_inj,
                        grads,
                    );
                    d_ctrl_skips[0][i].add_assign(&dc);
                }
                Some(p) => {
                    let d_fused = if p.use_psi {
                        fuse_backward(
                            store,
                            &model.fuse[i],
                            cache.fuse_cache[i].as_ref().unwrap(),
                            &d_inj,
                            grads,
                        )
                    } else {
                        d_inj
                    };
                    for j in 0..m {
                        let w = &p.weights[i][j];
                        let mut dpart = d_fused.clone();
                        for c in 0..dpart.ch {
                            let ch = dpart.channel_mut(c);
                            for (v, dv) in ch.iter_mut().enumerate() {
                                *dv *= w[v];
                            }
                        }
                        let dc = model.proj[i].backward(
                            store,
                            &cache.ctrl[j].enc[i].out,
                            &dpart,
                            grads,
                        );
                        d_ctrl_skips[j][i].add_assign(&dc);
                    }
                }
            }
        }

        if i < n - 1 {
            d_rb_out = model.dec[i + 1].up.as_ref().unwrap().backward(
                store,
                cache.dec[i + 1].out.as_ref().unwrap(),
                &d_h_in,
                grads,
            );
        } else {
            d_mid_inject = Some(d_h_in);
        }
    }
    let d_mid_inject = d_mid_inject.unwrap();

    // Middle injection: gradient reaches both the main middle output and the
    // projected control middle features.
    let mut d_ctrl_mid: Vec<Vol<T>> = Vec::with_capacity(m);
    match &cache.plan {
        None => {
            let dc = model
                .proj_mid
                .backward(store, &cache.ctrl[0].mid_out, &d_mid_inject, grads);
            d_ctrl_mid.push(dc);
        }
        Some(p) => {
            let d_fused = if p.use_psi {
                fuse_backward(
                    store,
                    &model.fuse_mid,
                    cache.fuse_mid_cache.as_ref().unwrap(),
                    &d_mid_inject,
                    grads,
                )
            } else {
                d_mid_inject.clone()
            };
            for j in 0..m {
                let w = &p.weights[n - 1][j];
                let mut dpart = d_fused.clone();
                for c in 0..dpart.ch {
                    let ch = dpart.channel_mut(c);
                    for (v, dv) in ch.iter_mut().enumerate() {
                        *dv *= w[v];
                    }
                }
                let dc = model
                    .proj_mid
                    .backward(store, &cache.ctrl[j].mid_out, &dpart, grads);
                d_ctrl_mid.push(dc);
            }
        }
    }

    // Main middle and encoder.
    let d_mid_in_x = mid_backward(
        store,
        &model.mid_x,
        &cache.mid_x,
        &d_mid_inject,
        grads,
        silu_temb,
        &mut d_silu_temb,
    );
    let mut d_px = encode_backward(
        store,
        &model.enc_x,
        &cache.enc_x,
        d_main_skips,
        d_mid_in_x,
        grads,
        silu_temb,
        &mut d_silu_temb,
    );

    // Control branches.
    for j in 0..m {
        let d_mid_in_c = mid_backward(
            store,
            &model.mid_c,
            &cache.ctrl[j].mid,
            &d_ctrl_mid[j],
            grads,
            silu_temb,
            &mut d_silu_temb,
        );
        let d_skips = std::mem::take(&mut d_ctrl_skips[j]);
        let d_f = encode_backward(
            store,
            &model.enc_c,
            &cache.ctrl[j].enc,
            d_skips,
            d_mid_in_c,
            grads,
            silu_temb,
            &mut d_silu_temb,
        );
        // f_j = pre_x(x_t) + pre_c(c_j): both summands receive d_f.
        let _dc = pre_backward(store, &model.pre_c, &cache.ctrl[j].pre, &d_f, grads);
        d_px.add_assign(&d_f);
    }

    let d_x_t = pre_backward(store, &model.pre_x, &cache.pre_x, &d_px, grads);

    // Time-embedding MLPs.
    let d_temb = silu_bwd_slice(&cache.temb, &d_silu_temb);
    let a1 = silu_fwd_slice(&cache.e1);
    let d_a1 = model.t_l2.backward(store, &a1, &d_temb, grads);
    let d_e1 = silu_bwd_slice(&cache.e1, &d_a1);
    let _ = model.t_l1.backward(store, &cache.temb_base, &d_e1, grads);

    d_x_t
}
