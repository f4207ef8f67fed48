//! Layer primitives with hand-written forward/backward passes.
//!
//! Kernels are written against flat slices in a fixed iteration order, so
//! results are bitwise deterministic for a given input regardless of thread
//! count (parallelism happens above this module, across batch samples or
//! sampling chains). Reductions use fixed-width lane accumulators instead of
//! sequential sums so they vectorize without reassociation surprises.

use super::scalar::Scalar;
use super::store::{Grads, ParamId, ParamStore};
use super::vol::Vol;
use rand::Rng;

const LANES: usize = 16;

/// `out[i] += a * x[i]`.
#[inline]
fn axpy<T: Scalar>(out: &mut [T], a: T, x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v.mul_add(a, *o);
    }
}

/// Lane-accumulated dot product; deterministic for a given slice length.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [T::ZERO; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let ra = ca.remainder();
    let rb = cb.remainder();
    for (xa, xb) in ca.zip(cb) {
        for i in 0..LANES {
            lanes[i] = xa[i].mul_add(xb[i], lanes[i]);
        }
    }
    let mut s = T::ZERO;
    for l in lanes {
        s += l;
    }
    for (&x, &y) in ra.iter().zip(rb) {
        s = x.mul_add(y, s);
    }
    s
}

/// Lane-accumulated sum.
#[inline]
pub fn sum<T: Scalar>(a: &[T]) -> T {
    let mut lanes = [T::ZERO; LANES];
    let ca = a.chunks_exact(LANES);
    let ra = ca.remainder();
    for xa in ca {
        for i in 0..LANES {
            lanes[i] += xa[i];
        }
    }
    let mut s = T::ZERO;
    for l in lanes {
        s += l;
    }
    for &x in ra {
        s += x;
    }
    s
}

/// Fast exp: `2^k * P(f)` with `x*log2(e) = k + f`, `|f| <= 0.5`. Pure
/// arithmetic plus an exponent-bit scale, so it vectorizes and is
/// reproducible across runs. Relative error ~1e-7, plenty for activations.
#[inline(always)]
pub fn fexp<T: Scalar>(x: T) -> T {
    // Taylor coefficients of 2^f = exp(f ln 2).
    const C1: f64 = core::f64::consts::LN_2;
    const C2: f64 = 0.240226506959100712;
    const C3: f64 = 0.055504108664821580;
    const C4: f64 = 0.009618129107628477;
    const C5: f64 = 0.001333355814642844;
    const C6: f64 = 0.000154035303933816;
    const LOG2E: f64 = core::f64::consts::LOG2_E;

    let y = x.to_f64() * LOG2E;
    let y = y.clamp(-125.0, 125.0);
    let k = (y + 0.5).floor();
    let f = y - k;
    let mut p = C6;
    p = p * f + C5;
    p = p * f + C4;
    p = p * f + C3;
    p = p * f + C2;
    p = p * f + C1;
    p = p * f + 1.0;
    let scale = f64::from_bits(((k as i64 + 1023) as u64) << 52);
    T::from_f64(p * scale)
}

#[inline(always)]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::ONE / (T::ONE + fexp(-x))
}

/// Zero-pads every channel of `x` by one voxel on all sides; returns the
/// padded buffer (channels contiguous) and the padded edge length.
fn pad1<T: Scalar>(x: &Vol<T>) -> (Vec<T>, usize) {
    let r = x.res;
    let pr = r + 2;
    let pp = pr * pr * pr;
    let mut out = vec![T::ZERO; x.ch * pp];
    for c in 0..x.ch {
        let src = x.channel(c);
        let dst = &mut out[c * pp..(c + 1) * pp];
        for z in 0..r {
            for y in 0..r {
                let s = (z * r + y) * r;
                let d = ((z + 1) * pr + (y + 1)) * pr + 1;
                dst[d..d + r].copy_from_slice(&src[s..s + r]);
            }
        }
    }
    (out, pr)
}

/// 3x3x3 convolution, stride 1 (same padding) or stride 2 (halves the
/// resolution). Weights are `[co][ci][kz][ky][kx]`.
#[derive(Debug, Clone)]
pub struct Conv3 {
    pub w: ParamId,
    pub b: ParamId,
    pub ci: usize,
    pub co: usize,
    pub stride: usize,
}

impl Conv3 {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        ci: usize,
        co: usize,
        stride: usize,
    ) -> Self {
        assert!(stride == 1 || stride == 2);
        let w = store.alloc_uniform(
            &format!("{name}.w"),
            &[co, ci, 3, 3, 3],
            ci * 27,
            rng,
        );
        let b = store.alloc(&format!("{name}.b"), &[co]);
        Self { w, b, ci, co, stride }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Vol<T>) -> Vol<T> {
        debug_assert_eq!(x.ch, self.ci);
        let (pad, pr) = pad1(x);
        let w = store.get(self.w);
        let b = store.get(self.b);
        if self.stride == 1 {
            conv3_s1(&pad, pr, x.res, self.ci, self.co, w, Some(b))
        } else {
            conv3_s2(&pad, pr, x.res, self.ci, self.co, w, Some(b))
        }
    }

    /// Returns the input gradient; accumulates weight/bias gradients.
    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Vol<T>,
        dout: &Vol<T>,
        grads: &mut Grads<T>,
    ) -> Vol<T> {
        let w = store.get(self.w);
        let (pad_x, pr) = pad1(x);

        // Weight and bias gradients.
        {
            let pr2 = pr * pr;
            let h = dout.res;
            if self.stride == 1 {
                // Same padded-plane trick as the forward pass: seam cells of
                // the padded dout are zero, so full-range dots are exact.
                let (pad_d, _) = pad1(dout);
                let pp = pr2 * pr;
                let lo = pr2 + pr + 1;
                let n = pp - 2 * lo;
                for co in 0..self.co {
                    let dch = &pad_d[co * pp..(co + 1) * pp];
                    let dinterior = &dch[lo..lo + n];
                    let dw = grads.get_mut(self.w);
                    for ci in 0..self.ci {
                        let pch = &pad_x[ci * pp..(ci + 1) * pp];
                        let wbase = (co * self.ci + ci) * 27;
                        for kz in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let delta = (kz as isize - 1) * pr2 as isize
                                        + (ky as isize - 1) * pr as isize
                                        + (kx as isize - 1);
                                    let start = (lo as isize + delta) as usize;
                                    dw[wbase + (kz * 3 + ky) * 3 + kx] +=
                                        dot(dinterior, &pch[start..start + n]);
                                }
                            }
                        }
                    }
                    grads.get_mut(self.b)[co] += sum(dout.channel(co));
                }
            } else {
                for co in 0..self.co {
                    let dch = dout.channel(co);
                    let dw = grads.get_mut(self.w);
                    for ci in 0..self.ci {
                        let pch = &pad_x[ci * pr2 * pr..(ci + 1) * pr2 * pr];
                        let wbase = (co * self.ci + ci) * 27;
                        for kz in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let mut acc = T::ZERO;
                                    for oz in 0..h {
                                        for oy in 0..h {
                                            let d = (oz * h + oy) * h;
                                            let srow = (2 * oz + kz) * pr2 + (2 * oy + ky) * pr + kx;
                                            for ox in 0..h {
                                                acc = dch[d + ox]
                                                    .mul_add(pch[srow + 2 * ox], acc);
                                            }
                                        }
                                    }
                                    dw[wbase + (kz * 3 + ky) * 3 + kx] += acc;
                                }
                            }
                        }
                    }
                    grads.get_mut(self.b)[co] += sum(dout.channel(co));
                }
            }
        }

        // Input gradient.
        if self.stride == 1 {
            // Full correlation: convolve padded dout with the flipped,
            // transposed kernel.
            let mut wf = vec![T::ZERO; w.len()];
            for co in 0..self.co {
                for ci in 0..self.ci {
                    for kz in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                wf[(((ci * self.co + co) * 3 + kz) * 3 + ky) * 3 + kx] = w
                                    [(((co * self.ci + ci) * 3 + (2 - kz)) * 3 + (2 - ky)) * 3
                                        + (2 - kx)];
                            }
                        }
                    }
                }
            }
            let (pad_d, prd) = pad1(dout);
            conv3_s1(&pad_d, prd, dout.res, self.co, self.ci, &wf, None)
        } else {
            // Scatter into a padded buffer, then crop the interior.
            let r = x.res;
            let h = dout.res;
            let pr2 = pr * pr;
            let mut dpad = vec![T::ZERO; self.ci * pr2 * pr];
            for co in 0..self.co {
                let dch = dout.channel(co);
                for ci in 0..self.ci {
                    let dp = &mut dpad[ci * pr2 * pr..(ci + 1) * pr2 * pr];
                    let wbase = (co * self.ci + ci) * 27;
                    for kz in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let wv = w[wbase + (kz * 3 + ky) * 3 + kx];
                                for oz in 0..h {
                                    for oy in 0..h {
                                        let d = (oz * h + oy) * h;
                                        let s = (2 * oz + kz) * pr2 + (2 * oy + ky) * pr + kx;
                                        for ox in 0..h {
                                            dp[s + 2 * ox] = dch[d + ox].mul_add(wv, dp[s + 2 * ox]);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let mut din = Vol::zeros(self.ci, r);
            for ci in 0..self.ci {
                let dp = &dpad[ci * pr2 * pr..(ci + 1) * pr2 * pr];
                let dst = din.channel_mut(ci);
                for z in 0..r {
                    for y in 0..r {
                        let d = (z * r + y) * r;
                        let s = ((z + 1) * pr + (y + 1)) * pr + 1;
                        dst[d..d + r].copy_from_slice(&dp[s..s + r]);
                    }
                }
            }
            din
        }
    }
}

/// Stride-1 core: accumulates into a padded output buffer with long
/// contiguous passes (seam cells compute junk that the final crop discards),
/// nine taps per pass so the inner loop is a straight run of FMAs.
fn conv3_s1<T: Scalar>(
    pad: &[T],
    pr: usize,
    r: usize,
    ci_n: usize,
    co_n: usize,
    w: &[T],
    bias: Option<&[T]>,
) -> Vol<T> {
    let pr2 = pr * pr;
    let pp = pr2 * pr;
    // First/last writable padded index so every shifted read stays in range.
    let lo = pr2 + pr + 1;
    let n = pp - 2 * lo;
    let mut out = Vol::zeros(co_n, r);
    let mut opad = vec![T::ZERO; pp];
    for co in 0..co_n {
        let bv = bias.map(|b| b[co]).unwrap_or(T::ZERO);
        for v in opad.iter_mut() {
            *v = bv;
        }
        for ci in 0..ci_n {
            let pch = &pad[ci * pp..(ci + 1) * pp];
            let wk = &w[(co * ci_n + ci) * 27..(co * ci_n + ci) * 27 + 27];
            for kz in 0..3 {
                // Source slices for the 9 (ky, kx) taps of this kz plane.
                let mut srcs: [&[T]; 9] = [&[]; 9];
                let mut ws = [T::ZERO; 9];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let delta = (kz as isize - 1) * pr2 as isize
                            + (ky as isize - 1) * pr as isize
                            + (kx as isize - 1);
                        let start = (lo as isize + delta) as usize;
                        srcs[ky * 3 + kx] = &pch[start..start + n];
                        ws[ky * 3 + kx] = wk[(kz * 3 + ky) * 3 + kx];
                    }
                }
                let dst = &mut opad[lo..lo + n];
                for j in 0..n {
                    let mut acc = dst[j];
                    acc = srcs[0][j].mul_add(ws[0], acc);
                    acc = srcs[1][j].mul_add(ws[1], acc);
                    acc = srcs[2][j].mul_add(ws[2], acc);
                    acc = srcs[3][j].mul_add(ws[3], acc);
                    acc = srcs[4][j].mul_add(ws[4], acc);
                    acc = srcs[5][j].mul_add(ws[5], acc);
                    acc = srcs[6][j].mul_add(ws[6], acc);
                    acc = srcs[7][j].mul_add(ws[7], acc);
                    acc = srcs[8][j].mul_add(ws[8], acc);
                    dst[j] = acc;
                }
            }
        }
        let och = out.channel_mut(co);
        for z in 0..r {
            for y in 0..r {
                let d = (z * r + y) * r;
                let s = ((z + 1) * pr + (y + 1)) * pr + 1;
                och[d..d + r].copy_from_slice(&opad[s..s + r]);
            }
        }
    }
    out
}

fn conv3_s2<T: Scalar>(
    pad: &[T],
    pr: usize,
    r: usize,
    ci_n: usize,
    co_n: usize,
    w: &[T],
    bias: Option<&[T]>,
) -> Vol<T> {
    let h = r / 2;
    let pr2 = pr * pr;
    let pp = pr2 * pr;
    let mut out = Vol::zeros(co_n, h);
    for co in 0..co_n {
        let och = out.channel_mut(co);
        if let Some(b) = bias {
            let bv = b[co];
            for v in och.iter_mut() {
                *v = bv;
            }
        }
        for ci in 0..ci_n {
            let pch = &pad[ci * pp..(ci + 1) * pp];
            let wk = &w[(co * ci_n + ci) * 27..(co * ci_n + ci) * 27 + 27];
            for kz in 0..3 {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = wk[(kz * 3 + ky) * 3 + kx];
                        for oz in 0..h {
                            for oy in 0..h {
                                let srow = (2 * oz + kz) * pr2 + (2 * oy + ky) * pr + kx;
                                let drow = (oz * h + oy) * h;
                                for ox in 0..h {
                                    och[drow + ox] =
                                        pch[srow + 2 * ox].mul_add(wv, och[drow + ox]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// 1x1x1 convolution (per-voxel channel mix).
#[derive(Debug, Clone)]
pub struct Conv1 {
    pub w: ParamId,
    pub b: ParamId,
    pub ci: usize,
    pub co: usize,
}

impl Conv1 {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        ci: usize,
        co: usize,
    ) -> Self {
        let w = store.alloc_uniform(&format!("{name}.w"), &[co, ci], ci, rng);
        let b = store.alloc(&format!("{name}.b"), &[co]);
        Self { w, b, ci, co }
    }

    /// Zero-initialized variant (control-feature projections start neutral).
    pub fn new_zero<T: Scalar>(store: &mut ParamStore<T>, name: &str, ci: usize, co: usize) -> Self {
        let w = store.alloc(&format!("{name}.w"), &[co, ci]);
        let b = store.alloc(&format!("{name}.b"), &[co]);
        Self { w, b, ci, co }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Vol<T>) -> Vol<T> {
        debug_assert_eq!(x.ch, self.ci);
        let w = store.get(self.w);
        let b = store.get(self.b);
        let mut out = Vol::zeros(self.co, x.res);
        for co in 0..self.co {
            let och = out.channel_mut(co);
            let bv = b[co];
            for v in och.iter_mut() {
                *v = bv;
            }
            for ci in 0..self.ci {
                axpy(och, w[co * self.ci + ci], x.channel(ci));
            }
        }
        out
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Vol<T>,
        dout: &Vol<T>,
        grads: &mut Grads<T>,
    ) -> Vol<T> {
        let w = store.get(self.w);
        {
            let dw = grads.get_mut(self.w);
            for co in 0..self.co {
                let dch = dout.channel(co);
                for ci in 0..self.ci {
                    dw[co * self.ci + ci] += dot(dch, x.channel(ci));
                }
            }
            let db = grads.get_mut(self.b);
            for co in 0..self.co {
                db[co] += sum(dout.channel(co));
            }
        }
        let mut din = Vol::zeros(self.ci, x.res);
        for co in 0..self.co {
            let dch = dout.channel(co);
            for ci in 0..self.ci {
                axpy(din.channel_mut(ci), w[co * self.ci + ci], dch);
            }
        }
        din
    }
}

/// 2x2x2 transposed convolution, stride 2 (doubles the resolution). Each
/// output voxel receives exactly one input contribution per channel.
#[derive(Debug, Clone)]
pub struct TConv2 {
    pub w: ParamId,
    pub b: ParamId,
    pub ci: usize,
    pub co: usize,
}

impl TConv2 {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        ci: usize,
        co: usize,
    ) -> Self {
        let w = store.alloc_uniform(&format!("{name}.w"), &[co, ci, 2, 2, 2], ci, rng);
        let b = store.alloc(&format!("{name}.b"), &[co]);
        Self { w, b, ci, co }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Vol<T>) -> Vol<T> {
        let r = x.res;
        let o = 2 * r;
        let w = store.get(self.w);
        let b = store.get(self.b);
        let mut out = Vol::zeros(self.co, o);
        for co in 0..self.co {
            let och = out.channel_mut(co);
            let bv = b[co];
            for v in och.iter_mut() {
                *v = bv;
            }
            for ci in 0..self.ci {
                let xch = x.channel(ci);
                let wbase = (co * self.ci + ci) * 8;
                for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let wv = w[wbase + (dz * 2 + dy) * 2 + dx];
                            for z in 0..r {
                                for y in 0..r {
                                    let s = (z * r + y) * r;
                                    let d = ((2 * z + dz) * o + (2 * y + dy)) * o + dx;
                                    for x_ in 0..r {
                                        och[d + 2 * x_] = xch[s + x_].mul_add(wv, och[d + 2 * x_]);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Vol<T>,
        dout: &Vol<T>,
        grads: &mut Grads<T>,
    ) -> Vol<T> {
        let r = x.res;
        let o = 2 * r;
        let w = store.get(self.w);
        {
            for co in 0..self.co {
                let dch = dout.channel(co);
                let dw = grads.get_mut(self.w);
                for ci in 0..self.ci {
                    let xch = x.channel(ci);
                    let wbase = (co * self.ci + ci) * 8;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let mut acc = T::ZERO;
                                for z in 0..r {
                                    for y in 0..r {
                                        let s = (z * r + y) * r;
                                        let d = ((2 * z + dz) * o + (2 * y + dy)) * o + dx;
                                        for x_ in 0..r {
                                            acc = xch[s + x_].mul_add(dch[d + 2 * x_], acc);
                                        }
                                    }
                                }
                                dw[wbase + (dz * 2 + dy) * 2 + dx] += acc;
                            }
                        }
                    }
                }
                grads.get_mut(self.b)[co] += sum(dout.channel(co));
            }
        }
        let mut din = Vol::zeros(self.ci, r);
        for co in 0..self.co {
            let dch = dout.channel(co);
            for ci in 0..self.ci {
                let dst = din.channel_mut(ci);
                let wbase = (co * self.ci + ci) * 8;
                for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let wv = w[wbase + (dz * 2 + dy) * 2 + dx];
                            for z in 0..r {
                                for y in 0..r {
                                    let s = (z * r + y) * r;
                                    let d = ((2 * z + dz) * o + (2 * y + dy)) * o + dx;
                                    for x_ in 0..r {
                                        dst[s + x_] = dch[d + 2 * x_].mul_add(wv, dst[s + x_]);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        din
    }
}

/// Group normalization over (channels-in-group, all voxels) with per-channel
/// affine. Uses min(8, channels) groups.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub ch: usize,
    pub groups: usize,
}

pub const GN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GnStats<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

impl GroupNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, ch: usize) -> Self {
        let groups = ch.min(8);
        assert_eq!(ch % groups, 0, "channels must divide into groups");
        let gamma = store.alloc_const(&format!("{name}.gamma"), &[ch], 1.0);
        let beta = store.alloc(&format!("{name}.beta"), &[ch]);
        Self { gamma, beta, ch, groups }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Vol<T>) -> (Vol<T>, GnStats<T>) {
        let cpg = self.ch / self.groups;
        let p = x.plane();
        let m = (cpg * p) as f64;
        let mut mean = Vec::with_capacity(self.groups);
        let mut inv_std = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let span = &x.data[g * cpg * p..(g + 1) * cpg * p];
            let mu = sum(span).to_f64() / m;
            let mut var = 0.0f64;
            {
                let mut lanes = [0.0f64; LANES];
                let chunks = span.chunks_exact(LANES);
                let rem = chunks.remainder();
                for ck in chunks {
                    for i in 0..LANES {
                        let d = ck[i].to_f64() - mu;
                        lanes[i] += d * d;
                    }
                }
                for l in lanes {
                    var += l;
                }
                for &v in rem {
                    let d = v.to_f64() - mu;
                    var += d * d;
                }
            }
            var /= m;
            mean.push(T::from_f64(mu));
            inv_std.push(T::from_f64(1.0 / (var + GN_EPS).sqrt()));
        }
        let stats = GnStats { mean, inv_std };
        let out = self.apply_with_stats(store, x, &stats);
        (out, stats)
    }

    /// Re-applies normalization with cached statistics (used to recompute
    /// activations cheaply during the backward pass).
    pub fn apply_with_stats<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Vol<T>,
        stats: &GnStats<T>,
    ) -> Vol<T> {
        let cpg = self.ch / self.groups;
        let gamma = store.get(self.gamma);
        let beta = store.get(self.beta);
        let mut out = Vol::zeros(self.ch, x.res);
        for c in 0..self.ch {
            let g = c / cpg;
            let mu = stats.mean[g];
            let is = stats.inv_std[g];
            let a = gamma[c] * is;
            let b = beta[c] - gamma[c] * mu * is;
            let src = x.channel(c);
            let dst = out.channel_mut(c);
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s.mul_add(a, b);
            }
        }
        out
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Vol<T>,
        stats: &GnStats<T>,
        dout: &Vol<T>,
        grads: &mut Grads<T>,
    ) -> Vol<T> {
        let cpg = self.ch / self.groups;
        let p = x.plane();
        let m = T::from_f64((cpg * p) as f64);
        let gamma = store.get(self.gamma);
        let mut din = Vol::zeros(self.ch, x.res);

        for g in 0..self.groups {
            let mu = stats.mean[g];
            let is = stats.inv_std[g];
            // S1 = sum(dxhat), S2 = sum(dxhat * xhat) over the group.
            let mut s1 = T::ZERO;
            let mut s2 = T::ZERO;
            for c in g * cpg..(g + 1) * cpg {
                let gc = gamma[c];
                let xch = x.channel(c);
                let dch = dout.channel(c);
                let mut l1 = [T::ZERO; LANES];
                let mut l2 = [T::ZERO; LANES];
                let cx = xch.chunks_exact(LANES);
                let cd = dch.chunks_exact(LANES);
                let rx = cx.remainder();
                let rd = cd.remainder();
                for (xa, da) in cx.zip(cd) {
                    for i in 0..LANES {
                        let dxh = da[i] * gc;
                        let xh = (xa[i] - mu) * is;
                        l1[i] += dxh;
                        l2[i] = dxh.mul_add(xh, l2[i]);
                    }
                }
                for i in 0..LANES {
                    s1 += l1[i];
                    s2 += l2[i];
                }
                for (&xv, &dv) in rx.iter().zip(rd) {
                    let dxh = dv * gc;
                    s1 += dxh;
                    s2 = dxh.mul_add((xv - mu) * is, s2);
                }
            }
            let s1m = s1 / m;
            let s2m = s2 / m;
            for c in g * cpg..(g + 1) * cpg {
                let gc = gamma[c];
                let xch = x.channel(c);
                let dch = dout.channel(c);
                // Parameter gradients.
                let mut dgm = T::ZERO;
                let mut dbt = T::ZERO;
                {
                    let mut lg = [T::ZERO; LANES];
                    let mut lb = [T::ZERO; LANES];
                    let cx = xch.chunks_exact(LANES);
                    let cd = dch.chunks_exact(LANES);
                    let rx = cx.remainder();
                    let rd = cd.remainder();
                    for (xa, da) in cx.zip(cd) {
                        for i in 0..LANES {
                            let xh = (xa[i] - mu) * is;
                            lg[i] = da[i].mul_add(xh, lg[i]);
                            lb[i] += da[i];
                        }
                    }
                    for i in 0..LANES {
                        dgm += lg[i];
                        dbt += lb[i];
                    }
                    for (&xv, &dv) in rx.iter().zip(rd) {
                        dgm = dv.mul_add((xv - mu) * is, dgm);
                        dbt += dv;
                    }
                }
                grads.get_mut(self.gamma)[c] += dgm;
                grads.get_mut(self.beta)[c] += dbt;

                let dst = din.channel_mut(c);
                for ((d, &xv), &dv) in dst.iter_mut().zip(xch).zip(dch) {
                    let xh = (xv - mu) * is;
                    let dxh = dv * gc;
                    *d = is * (dxh - s1m - xh * s2m);
                }
            }
        }
        din
    }
}

/// SiLU activation `x * sigmoid(x)`, elementwise.
pub fn silu_fwd<T: Scalar>(x: &Vol<T>) -> Vol<T> {
    let mut out = x.clone();
    for v in out.data.iter_mut() {
        *v = *v * sigmoid(*v);
    }
    out
}

pub fn silu_bwd<T: Scalar>(x: &Vol<T>, dout: &Vol<T>) -> Vol<T> {
    let mut din = Vol::zeros(x.ch, x.res);
    for ((d, &xv), &dv) in din.data.iter_mut().zip(&x.data).zip(&dout.data) {
        let s = sigmoid(xv);
        *d = dv * s * (T::ONE + xv * (T::ONE - s));
    }
    din
}

pub fn silu_fwd_slice<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

pub fn silu_bwd_slice<T: Scalar>(x: &[T], dout: &[T]) -> Vec<T> {
    x.iter()
        .zip(dout)
        .map(|(&xv, &dv)| {
            let s = sigmoid(xv);
            dv * s * (T::ONE + xv * (T::ONE - s))
        })
        .collect()
}

/// Dense layer `y = W x + b` on plain vectors (time embeddings).
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub ni: usize,
    pub no: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        ni: usize,
        no: usize,
    ) -> Self {
        let w = store.alloc_uniform(&format!("{name}.w"), &[no, ni], ni, rng);
        let b = store.alloc(&format!("{name}.b"), &[no]);
        Self { w, b, ni, no }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &[T]) -> Vec<T> {
        let w = store.get(self.w);
        let b = store.get(self.b);
        (0..self.no)
            .map(|o| dot(&w[o * self.ni..(o + 1) * self.ni], x) + b[o])
            .collect()
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &[T],
        dout: &[T],
        grads: &mut Grads<T>,
    ) -> Vec<T> {
        let w = store.get(self.w);
        {
            let dw = grads.get_mut(self.w);
            for o in 0..self.no {
                let dv = dout[o];
                for i in 0..self.ni {
                    dw[o * self.ni + i] = x[i].mul_add(dv, dw[o * self.ni + i]);
                }
            }
            let db = grads.get_mut(self.b);
            for o in 0..self.no {
                db[o] += dout[o];
            }
        }
        let mut din = vec![T::ZERO; self.ni];
        for o in 0..self.no {
            let dv = dout[o];
            for i in 0..self.ni {
                din[i] = w[o * self.ni + i].mul_add(dv, din[i]);
            }
        }
        din
    }
}

/// Single-head dot-product self-attention over flattened voxels, with a
/// pre-norm and a residual connection. Only used at the coarsest resolution,
/// where the token count is tiny.
#[derive(Debug, Clone)]
pub struct Attention {
    pub gn: GroupNorm,
    pub q: Conv1,
    pub k: Conv1,
    pub v: Conv1,
    pub proj: Conv1,
    pub ch: usize,
}

#[derive(Debug, Clone)]
pub struct AttnCache<T> {
    pub x: Vol<T>,
    pub stats: GnStats<T>,
    pub xn: Vol<T>,
    pub qv: Vol<T>,
    pub kv: Vol<T>,
    pub vv: Vol<T>,
    /// Row-softmax probabilities, `[n][n]`.
    pub probs: Vec<T>,
    pub att_out: Vol<T>,
}

impl Attention {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        ch: usize,
    ) -> Self {
        Self {
            gn: GroupNorm::new(store, &format!("{name}.gn"), ch),
            q: Conv1::new(store, rng, &format!("{name}.q"), ch, ch),
            k: Conv1::new(store, rng, &format!("{name}.k"), ch, ch),
            v: Conv1::new(store, rng, &format!("{name}.v"), ch, ch),
            proj: Conv1::new(store, rng, &format!("{name}.proj"), ch, ch),
            ch,
        }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Vol<T>) -> (Vol<T>, AttnCache<T>) {
        let n = x.plane();
        let c = self.ch;
        let (xn, stats) = self.gn.forward(store, x);
        let qv = self.q.forward(store, &xn);
        let kv = self.k.forward(store, &xn);
        let vv = self.v.forward(store, &xn);
        let scale = T::from_f64(1.0 / (c as f64).sqrt());

        // scores[i][j] = q_i . k_j * scale, softmax over j.
        let mut probs = vec![T::ZERO; n * n];
        for i in 0..n {
            let row = &mut probs[i * n..(i + 1) * n];
            for j in 0..n {
                let mut acc = T::ZERO;
                for cc in 0..c {
                    acc = qv.data[cc * n + i].mul_add(kv.data[cc * n + j], acc);
                }
                row[j] = acc * scale;
            }
            let mut mx = row[0];
            for &v in row.iter() {
                mx = mx.maxv(v);
            }
            let mut z = T::ZERO;
            for v in row.iter_mut() {
                *v = fexp(*v - mx);
                z += *v;
            }
            let inv = z.recip();
            for v in row.iter_mut() {
                *v *= inv;
            }
        }

        let mut att = Vol::zeros(c, x.res);
        for cc in 0..c {
            let vch = vv.channel(cc);
            let och = att.channel_mut(cc);
            for i in 0..n {
                och[i] = dot(&probs[i * n..(i + 1) * n], vch);
            }
        }
        let projected = self.proj.forward(store, &att);
        let mut out = projected;
        out.add_assign(x);
        let cache = AttnCache {
            x: x.clone(),
            stats,
            xn,
            qv,
            kv,
            vv,
            probs,
            att_out: att,
        };
        (out, cache)
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        cache: &AttnCache<T>,
        dout: &Vol<T>,
        grads: &mut Grads<T>,
    ) -> Vol<T> {
        let n = cache.x.plane();
        let c = self.ch;
        let scale = T::from_f64(1.0 / (c as f64).sqrt());

        let datt = self.proj.backward(store, &cache.att_out, dout, grads);

        // datt = dP . V^T and dV = P^T . datt
        let mut dprobs = vec![T::ZERO; n * n];
        let mut dv = Vol::zeros(c, cache.x.res);
        for cc in 0..c {
            let vch = cache.vv.channel(cc);
            let dch = datt.channel(cc);
            for i in 0..n {
                let dvi = dch[i];
                let prow = &cache.probs[i * n..(i + 1) * n];
                let drow = &mut dprobs[i * n..(i + 1) * n];
                for j in 0..n {
                    drow[j] = vch[j].mul_add(dvi, drow[j]);
                }
                let dvch = dv.channel_mut(cc);
                for j in 0..n {
                    dvch[j] = prow[j].mul_add(dvi, dvch[j]);
                }
            }
        }

        // Softmax backward per row.
        let mut dscores = vec![T::ZERO; n * n];
        for i in 0..n {
            let prow = &cache.probs[i * n..(i + 1) * n];
            let drow = &dprobs[i * n..(i + 1) * n];
            let dotpd = dot(prow, drow);
            let srow = &mut dscores[i * n..(i + 1) * n];
            for j in 0..n {
                srow[j] = prow[j] * (drow[j] - dotpd);
            }
        }

        // dQ, dK.
        let mut dq = Vol::zeros(c, cache.x.res);
        let mut dk = Vol::zeros(c, cache.x.res);
        for cc in 0..c {
            let qch = cache.qv.channel(cc);
            let kch = cache.kv.channel(cc);
            let dqc = dq.channel_mut(cc);
            let dkc = dk.channel_mut(cc);
            for i in 0..n {
                let srow = &dscores[i * n..(i + 1) * n];
                let mut acc = T::ZERO;
                for j in 0..n {
                    acc = srow[j].mul_add(kch[j], acc);
                    dkc[j] = srow[j].mul_add(qch[i], dkc[j]);
                }
                dqc[i] = acc.mul_add(scale, dqc[i]);
            }
            for j in 0..n {
                dkc[j] *= scale;
            }
        }

        let mut dxn = self.q.backward(store, &cache.xn, &dq, grads);
        dxn.add_assign(&self.k.backward(store, &cache.xn, &dk, grads));
        dxn.add_assign(&self.v.backward(store, &cache.xn, &dv, grads));
        let mut din = self.gn.backward(store, &cache.x, &cache.stats, &dxn, grads);
        din.add_assign(dout);
        din
    }
}

/// Sinusoidal position embedding of an integer timestep.
pub fn timestep_embedding<T: Scalar>(t: usize, dim: usize) -> Vec<T> {
    assert!(dim >= 2 && dim % 2 == 0);
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    let denom = if half > 1 { (half - 1) as f64 } else { 1.0 };
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / denom).exp();
        out.push(T::from_f64(((t as f64) * freq).sin()));
    }
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / denom).exp();
        out.push(T::from_f64(((t as f64) * freq).cos()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vol(rng: &mut ChaCha8Rng, ch: usize, res: usize) -> Vol<f64> {
        let mut v = Vol::zeros(ch, res);
        for x in v.data.iter_mut() {
            *x = rng.gen_range(-1.0..1.0);
        }
        v
    }

    #[test]
    fn fexp_matches_std_exp() {
        for i in -300..300 {
            let x = i as f64 * 0.1;
            let got = fexp(x);
            let want = x.exp();
            let rel = ((got - want) / want).abs();
            assert!(rel < 2e-7, "x={x} got={got} want={want} rel={rel}");
        }
        let y: f32 = fexp(0.5f32);
        assert!((y - 0.5f32.exp()).abs() < 1e-6);
    }

    /// Central-difference check of dL/dx and dL/dw for one op, where
    /// L = sum(out * probe) for a fixed random probe.
    fn fd_check<F>(store: &mut ParamStore<f64>, ids: &[ParamId], x: &mut Vol<f64>, f: F)
    where
        F: Fn(&ParamStore<f64>, &Vol<f64>) -> (Vol<f64>, Vol<f64>, Grads<f64>),
    {
        // f returns (out_probe_unused, dx, grads) given analytic path;
        // see call sites: closure computes loss gradient analytically.
        let h = 1e-5;
        let (loss0, dx, grads) = f(store, x);
        let _ = loss0;
        // Check a few input coordinates.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..6 {
            let i = rng.gen_range(0..x.data.len());
            let orig = x.data[i];
            x.data[i] = orig + h;
            let (lp, _, _) = f(store, x);
            x.data[i] = orig - h;
            let (lm, _, _) = f(store, x);
            x.data[i] = orig;
            let num = (lp.data[0] - lm.data[0]) / (2.0 * h);
            let ana = dx.data[i];
            assert!(
                (num - ana).abs() <= 1e-6 + 1e-4 * num.abs().max(ana.abs()),
                "input grad mismatch at {i}: num={num} ana={ana}"
            );
        }
        // Check a few parameter coordinates on each listed tensor.
        for &id in ids {
            for _ in 0..4 {
                let i = rng.gen_range(0..store.get(id).len());
                let orig = store.get(id)[i];
                store.get_mut(id)[i] = orig + h;
                let (lp, _, _) = f(store, x);
                store.get_mut(id)[i] = orig - h;
                let (lm, _, _) = f(store, x);
                store.get_mut(id)[i] = orig;
                let num = (lp.data[0] - lm.data[0]) / (2.0 * h);
                let ana = grads.get(id)[i];
                assert!(
                    (num - ana).abs() <= 1e-6 + 1e-4 * num.abs().max(ana.abs()),
                    "param grad mismatch ({}) at {i}: num={num} ana={ana}",
                    store.name(id)
                );
            }
        }
    }

    /// Wraps an op into a scalar-loss closure: loss = sum(out .* probe).
    macro_rules! loss_closure {
        ($op:expr, $probe:expr) => {
            |store: &ParamStore<f64>, x: &Vol<f64>| {
                let out = $op.forward(store, x);
                let loss: f64 = dot(&out.data, &$probe.data);
                let mut grads = store.zeros_like();
                let mut dout = $probe.clone();
                dout.ch = out.ch;
                dout.res = out.res;
                let dx = $op.backward(store, x, &dout, &mut grads);
                let mut lv = Vol::zeros(1, 1);
                lv.data[0] = loss;
                (lv, dx, grads)
            }
        };
    }

    #[test]
    fn conv3_s1_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let conv = Conv3::new(&mut store, &mut rng, "c", 3, 2, 1);
        let mut x = rand_vol(&mut rng, 3, 5);
        let probe = rand_vol(&mut rng, 2, 5);
        fd_check(
            &mut store,
            &[conv.w, conv.b],
            &mut x,
            loss_closure!(conv, probe),
        );
    }

    #[test]
    fn conv3_s2_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let conv = Conv3::new(&mut store, &mut rng, "c", 2, 3, 2);
        let mut x = rand_vol(&mut rng, 2, 6);
        let probe = rand_vol(&mut rng, 3, 3);
        fd_check(
            &mut store,
            &[conv.w, conv.b],
            &mut x,
            loss_closure!(conv, probe),
        );
    }

    #[test]
    fn conv1_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let conv = Conv1::new(&mut store, &mut rng, "c", 4, 3);
        let mut x = rand_vol(&mut rng, 4, 4);
        let probe = rand_vol(&mut rng, 3, 4);
        fd_check(
            &mut store,
            &[conv.w, conv.b],
            &mut x,
            loss_closure!(conv, probe),
        );
    }

    #[test]
    fn tconv2_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let conv = TConv2::new(&mut store, &mut rng, "c", 3, 2);
        let mut x = rand_vol(&mut rng, 3, 3);
        let probe = rand_vol(&mut rng, 2, 6);
        fd_check(
            &mut store,
            &[conv.w, conv.b],
            &mut x,
            loss_closure!(conv, probe),
        );
    }

    #[test]
    fn groupnorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let gn = GroupNorm::new(&mut store, "g", 4);
        // Nudge gamma/beta off their init so gradients are generic.
        for v in store.get_mut(gn.gamma).iter_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
        for v in store.get_mut(gn.beta).iter_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
        let mut x = rand_vol(&mut rng, 4, 4);
        let probe = rand_vol(&mut rng, 4, 4);
        let f = |store: &ParamStore<f64>, x: &Vol<f64>| {
            let (out, stats) = gn.forward(store, x);
            let loss: f64 = dot(&out.data, &probe.data);
            let mut grads = store.zeros_like();
            let dx = gn.backward(store, x, &stats, &probe, &mut grads);
            let mut lv = Vol::zeros(1, 1);
            lv.data[0] = loss;
            (lv, dx, grads)
        };
        fd_check(&mut store, &[gn.gamma, gn.beta], &mut x, f);
    }

    #[test]
    fn silu_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_vol(&mut rng, 2, 3);
        let probe = rand_vol(&mut rng, 2, 3);
        let din = silu_bwd(&x, &probe);
        let h = 1e-5;
        for i in [0usize, 5, 17] {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let lp: f64 = dot(&silu_fwd(&xp).data, &probe.data);
            let lm: f64 = dot(&silu_fwd(&xm).data, &probe.data);
            let num = (lp - lm) / (2.0 * h);
            assert!((num - din.data[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::<f64>::new();
        let attn = Attention::new(&mut store, &mut rng, "a", 4);
        let mut x = rand_vol(&mut rng, 4, 2);
        let probe = rand_vol(&mut rng, 4, 2);
        let f = |store: &ParamStore<f64>, x: &Vol<f64>| {
            let (out, cache) = attn.forward(store, x);
            let loss: f64 = dot(&out.data, &probe.data);
            let mut grads = store.zeros_like();
            let dx = attn.backward(store, &cache, &probe, &mut grads);
            let mut lv = Vol::zeros(1, 1);
            lv.data[0] = loss;
            (lv, dx, grads)
        };
        fd_check(
            &mut store,
            &[attn.q.w, attn.k.w, attn.v.w, attn.proj.w, attn.gn.gamma],
            &mut x,
            f,
        );
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, &mut rng, "l", 5, 3);
        let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let probe: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut grads = store.zeros_like();
        let dx = lin.backward(&store, &x, &probe, &mut grads);
        let h = 1e-6;
        for i in 0..5 {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let lp: f64 = dot(&lin.forward(&store, &xp), &probe);
            let lm: f64 = dot(&lin.forward(&store, &xm), &probe);
            let num = (lp - lm) / (2.0 * h);
            assert!((num - dx[i]).abs() < 1e-6);
        }
    }

    #[test]
    #[ignore = "manual throughput probe"]
    fn conv_throughput() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let conv = Conv3::new(&mut store, &mut rng, "c", 16, 16, 1);
        let mut x = Vol::<f32>::zeros(16, 32);
        for v in x.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let iters = 20;
        let start = std::time::Instant::now();
        let mut sink = 0.0f32;
        for _ in 0..iters {
            let out = conv.forward(&store, &x);
            sink += out.data[0];
        }
        let dt = start.elapsed().as_secs_f64();
        let flops = 2.0 * 27.0 * 16.0 * 16.0 * 32768.0 * iters as f64;
        eprintln!("conv3 fwd: {:.2} GFLOP/s (sink {sink})", flops / dt / 1e9);

        let probe = x.clone();
        let start = std::time::Instant::now();
        for _ in 0..iters {
            let mut grads = store.zeros_like();
            let dx = conv.backward(&store, &x, &probe, &mut grads);
            sink += dx.data[0];
        }
        let dt = start.elapsed().as_secs_f64();
        eprintln!(
            "conv3 bwd: {:.2} GFLOP/s (sink {sink})",
            2.0 * flops / dt / 1e9
        );
    }
}
