//! Forward and reverse-mode passes of the convolutional propensity network.
//!
//! Activations are planar `(c, h, w)` tensors. Parameters live in one flat
//! vector; [`Layout`] records where each layer's block starts. Batch
//! normalization running statistics are kept apart from the parameters as
//! non-trainable state.

use rand::Rng;

use super::spec::{Activation, ConvNetSpec, Pool};
use crate::error::{Error, Result};
use crate::raster::{Flips, Raster};

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.h * self.w;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn from_raster(r: &Raster) -> Self {
        let (h, w, c) = r.shape();
        let mut data = Vec::with_capacity(h * w * c);
        for ch in 0..c {
            data.extend(r.data().iter().skip(ch).step_by(c));
        }
        Tensor { c, h, w, data }
    }

    pub fn to_raster(&self) -> Result<Raster> {
        let planes: Vec<Vec<f64>> = (0..self.c).map(|c| self.plane(c).to_vec()).collect();
        Raster::from_planes(self.h, self.w, &planes)
    }

    pub fn flipped(&self, flips: Flips) -> Tensor {
        if !flips.height && !flips.width {
            return self.clone();
        }
        let mut out = Tensor::zeros(self.c, self.h, self.w);
        for c in 0..self.c {
            let src = self.plane(c);
            let dst = out.plane_mut(c);
            for i in 0..self.h {
                let si = if flips.height { self.h - 1 - i } else { i };
                for j in 0..self.w {
                    let sj = if flips.width { self.w - 1 - j } else { j };
                    dst[i * self.w + j] = src[si * self.w + sj];
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ConvLayout {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub pool: Pool,
    pub act: Activation,
    pub w_off: usize,
    pub b_off: usize,
    /// `(gamma_off, beta_off, state_off)`; state holds running mean then var.
    pub bn: Option<(usize, usize, usize)>,
}

impl ConvLayout {
    fn conv_dims(&self) -> (usize, usize) {
        (self.in_h - self.k + 1, self.in_w - self.k + 1)
    }

    fn n_weights(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }
}

#[derive(Debug, Clone)]
pub(crate) struct DenseLayout {
    pub cin: usize,
    pub cout: usize,
    pub w_off: usize,
    pub b_off: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub input: (usize, usize, usize),
    pub convs: Vec<ConvLayout>,
    pub projection: Option<(DenseLayout, usize, usize)>,
    /// State offset of the pooled-feature running mean (variance follows).
    pub head_norm: Option<usize>,
    pub head: DenseLayout,
    pub n_params: usize,
    pub n_state: usize,
}

impl Layout {
    pub fn new(spec: &ConvNetSpec, input: (usize, usize, usize)) -> Result<Self> {
        let dims = spec.spatial_dims(input)?;
        let (mut h, mut w, mut c) = input;
        let mut off = 0;
        let mut state = 0;
        let mut convs = Vec::with_capacity(spec.layers.len());
        for (layer, &(oh, ow)) in spec.layers.iter().zip(&dims) {
            let k = layer.kernel_width;
            let cout = layer.filter_count;
            let w_off = off;
            off += cout * c * k * k;
            let b_off = off;
            off += cout;
            let bn = spec.batch_norm.then(|| {
                let g = off;
                off += 2 * cout;
                let s = state;
                state += 2 * cout;
                (g, g + cout, s)
            });
            convs.push(ConvLayout {
                cin: c,
                cout,
                k,
                in_h: h,
                in_w: w,
                pool: layer.pool,
                act: layer.activation,
                w_off,
                b_off,
                bn,
            });
            h = oh;
            w = ow;
            c = cout;
        }
        let projection = (spec.projection_dim > 0).then(|| {
            let d = DenseLayout { cin: c, cout: spec.projection_dim, w_off: off, b_off: off + spec.projection_dim * c };
            off += spec.projection_dim * (c + 1);
            c = spec.projection_dim;
            (d, h, w)
        });
        let head_norm = spec.head_norm.then(|| {
            let s = state;
            state += 2 * c;
            s
        });
        let head = DenseLayout { cin: c, cout: 1, w_off: off, b_off: off + c };
        off += c + 1;
        Ok(Layout { input, convs, projection, head_norm, head, n_params: off, n_state: state })
    }

    /// Glorot-uniform weights, zero biases, unit BN scales.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut p = vec![0.0; self.n_params];
        let mut glorot = |p: &mut [f64], fan_in: usize, fan_out: usize| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            p.iter_mut().for_each(|v| *v = rng.random_range(-a..a));
        };
        for l in &self.convs {
            let kk = l.k * l.k;
            glorot(&mut p[l.w_off..l.w_off + l.n_weights()], l.cin * kk, l.cout * kk);
            if let Some((g, _, _)) = l.bn {
                p[g..g + l.cout].fill(1.0);
            }
        }
        if let Some((d, _, _)) = &self.projection {
            glorot(&mut p[d.w_off..d.w_off + d.cin * d.cout], d.cin, d.cout);
        }
        let hd = &self.head;
        glorot(&mut p[hd.w_off..hd.w_off + hd.cin], hd.cin, 1);
        p
    }

    /// Running statistics at their starting values (mean 0, variance 1).
    pub fn init_state(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.n_state];
        for l in &self.convs {
            if let Some((_, _, so)) = l.bn {
                s[so + l.cout..so + 2 * l.cout].fill(1.0);
            }
        }
        if let Some(so) = self.head_norm {
            let d = self.head.cin;
            s[so + d..so + 2 * d].fill(1.0);
        }
        s
    }

    pub fn check_input(&self, t: &Tensor) -> Result<()> {
        if (t.h, t.w, t.c) != self.input {
            return Err(Error::invalid(format!(
                "input shape {}x{}x{} does not match model input {}x{}x{}",
                t.h, t.w, t.c, self.input.0, self.input.1, self.input.2
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Mode {
    /// Batch normalization uses the statistics of the current batch.
    Train,
    /// Batch normalization uses the running statistics.
    Infer,
}

#[derive(Debug, Clone)]
struct LayerCache {
    xhat: Option<Tensor>,
    act: Tensor,
    pooled: Option<(Tensor, Vec<usize>)>,
}

impl LayerCache {
    fn output(&self) -> &Tensor {
        self.pooled.as_ref().map_or(&self.act, |(t, _)| t)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct SampleCache {
    layers: Vec<LayerCache>,
    projected: Option<Tensor>,
    argmax: Vec<usize>,
    pub pooled: Vec<f64>,
    /// Head input: `pooled`, normalized when the spec asks for it.
    normed: Vec<f64>,
    pub logit: f64,
}

/// Per-channel batch statistics produced in training mode.
#[derive(Debug, Clone)]
pub(crate) struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

fn conv_forward(x: &Tensor, params: &[f64], l: &ConvLayout) -> Tensor {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        return unsafe { conv_forward_avx2(x, params, l) };
    }
    conv_forward_generic(x, params, l)
}

// avx2 without fma: identical rounding to the generic path.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn conv_forward_avx2(x: &Tensor, params: &[f64], l: &ConvLayout) -> Tensor {
    conv_forward_generic(x, params, l)
}

const LANES: usize = 16;

/// Each output element is `bias + sum over (ic, kh, kw)` accumulated in
/// that order, independent of blocking.
#[inline(always)]
fn conv_forward_generic(x: &Tensor, params: &[f64], l: &ConvLayout) -> Tensor {
    let (oh, ow) = l.conv_dims();
    let k = l.k;
    let mut out = Tensor::zeros(l.cout, oh, ow);
    for oc in 0..l.cout {
        let weights = &params[l.w_off + oc * l.cin * k * k..][..l.cin * k * k];
        let bias = params[l.b_off + oc];
        let plane = out.plane_mut(oc);
        for i in 0..oh {
            let row = &mut plane[i * ow..][..ow];
            let mut j0 = 0;
            while j0 + LANES <= ow {
                let mut acc = [bias; LANES];
                for ic in 0..l.cin {
                    let src = x.plane(ic);
                    for kh in 0..k {
                        let line = &src[(i + kh) * x.w + j0..];
                        for kw in 0..k {
                            let wv = weights[(ic * k + kh) * k + kw];
                            let s: &[f64; LANES] = line[kw..kw + LANES].try_into().expect("lane width");
                            for (a, v) in acc.iter_mut().zip(s) {
                                *a += wv * v;
                            }
                        }
                    }
                }
                row[j0..j0 + LANES].copy_from_slice(&acc);
                j0 += LANES;
            }
            for (j, d) in row.iter_mut().enumerate().skip(j0) {
                let mut acc = bias;
                for ic in 0..l.cin {
                    let src = x.plane(ic);
                    for kh in 0..k {
                        let line = &src[(i + kh) * x.w + j..];
                        for kw in 0..k {
                            acc += weights[(ic * k + kh) * k + kw] * line[kw];
                        }
                    }
                }
                *d = acc;
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `need_dx`. Rows of `dout` that are entirely zero are skipped.
fn conv_backward(
    x: &Tensor,
    dout: &Tensor,
    params: &[f64],
    grad: &mut [f64],
    l: &ConvLayout,
    need_dx: bool,
) -> Option<Tensor> {
    let (oh, ow) = l.conv_dims();
    let k = l.k;
    let mut dx = need_dx.then(|| Tensor::zeros(l.cin, x.h, x.w));
    for oc in 0..l.cout {
        let g = dout.plane(oc);
        for i in 0..oh {
            let grow = &g[i * ow..][..ow];
            if grow.iter().all(|&v| v == 0.0) {
                continue;
            }
            grad[l.b_off + oc] += grow.iter().sum::<f64>();
            for ic in 0..l.cin {
                let src = x.plane(ic);
                for kh in 0..k {
                    for kw in 0..k {
                        let wi = l.w_off + ((oc * l.cin + ic) * k + kh) * k + kw;
                        let at = (i + kh) * x.w + kw;
                        let s = &src[at..][..ow];
                        grad[wi] += grow.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                        if let Some(dx) = dx.as_mut() {
                            let wv = params[wi];
                            let d = &mut dx.plane_mut(ic)[at..][..ow];
                            for (d, gv) in d.iter_mut().zip(grow) {
                                *d += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn max2_forward(x: &Tensor) -> (Tensor, Vec<usize>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c, oh, ow);
    let mut idx = Vec::with_capacity(x.c * oh * ow);
    for c in 0..x.c {
        let src = x.plane(c);
        for i in 0..oh {
            for j in 0..ow {
                let cands = [
                    (2 * i) * x.w + 2 * j,
                    (2 * i) * x.w + 2 * j + 1,
                    (2 * i + 1) * x.w + 2 * j,
                    (2 * i + 1) * x.w + 2 * j + 1,
                ];
                // first maximum in scan order wins ties
                let best = cands[1..].iter().fold(cands[0], |b, &p| if src[p] > src[b] { p } else { b });
                out.data[(c * oh + i) * ow + j] = src[best];
                idx.push(c * x.h * x.w + best);
            }
        }
    }
    (out, idx)
}

fn dense_forward(x: &Tensor, params: &[f64], d: &DenseLayout) -> Tensor {
    let n = x.h * x.w;
    let mut out = Tensor::zeros(d.cout, x.h, x.w);
    for p in 0..d.cout {
        let dst = out.plane_mut(p);
        dst.fill(params[d.b_off + p]);
        for c in 0..d.cin {
            let wv = params[d.w_off + p * d.cin + c];
            for (o, s) in dst.iter_mut().zip(&x.data[c * n..(c + 1) * n]) {
                *o += wv * s;
            }
        }
    }
    out
}

fn dense_backward(x: &Tensor, dout: &Tensor, params: &[f64], grad: &mut [f64], d: &DenseLayout) -> Tensor {
    let n = x.h * x.w;
    let mut dx = Tensor::zeros(d.cin, x.h, x.w);
    for p in 0..d.cout {
        let g = dout.plane(p);
        grad[d.b_off + p] += g.iter().sum::<f64>();
        for c in 0..d.cin {
            let xs = &x.data[c * n..(c + 1) * n];
            grad[d.w_off + p * d.cin + c] += g.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
            let wv = params[d.w_off + p * d.cin + c];
            for (o, gv) in dx.data[c * n..(c + 1) * n].iter_mut().zip(g) {
                *o += wv * gv;
            }
        }
    }
    dx
}

/// First index of the maximum of `v`.
fn argmax(v: &[f64]) -> usize {
    (1..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

/// Runs the network over a batch, layer by layer.
///
/// In [`Mode::Train`] batch normalization uses the batch's own statistics,
/// which are returned so the caller can update running averages.
pub(crate) fn forward_batch(
    layout: &Layout,
    params: &[f64],
    state: &[f64],
    inputs: &[&Tensor],
    mode: Mode,
) -> (Vec<SampleCache>, Vec<Option<BatchStats>>) {
    let n = inputs.len();
    let mut caches: Vec<Vec<LayerCache>> = vec![Vec::with_capacity(layout.convs.len()); n];
    let mut all_stats = Vec::with_capacity(layout.convs.len());
    for (li, l) in layout.convs.iter().enumerate() {
        let mut z: Vec<Tensor> = (0..n)
            .map(|s| {
                let x = if li == 0 { inputs[s] } else { caches[s][li - 1].output() };
                conv_forward(x, params, l)
            })
            .collect();
        let mut xhats: Vec<Option<Tensor>> = vec![None; n];
        let mut stats = None;
        if let Some((g_off, b_off, s_off)) = l.bn {
            let (mean, var, count) = match mode {
                Mode::Train => {
                    let plane = z[0].h * z[0].w;
                    let count = plane * n;
                    let mut mean = vec![0.0; l.cout];
                    let mut var = vec![0.0; l.cout];
                    for c in 0..l.cout {
                        let m = z.iter().map(|t| t.plane(c).iter().sum::<f64>()).sum::<f64>() / count as f64;
                        let v =
                            z.iter().map(|t| t.plane(c).iter().map(|x| (x - m) * (x - m)).sum::<f64>()).sum::<f64>()
                                / count as f64;
                        mean[c] = m;
                        var[c] = v;
                    }
                    (mean, var, count)
                }
                Mode::Infer => {
                    (state[s_off..s_off + l.cout].to_vec(), state[s_off + l.cout..s_off + 2 * l.cout].to_vec(), 0)
                }
            };
            for (s, t) in z.iter_mut().enumerate() {
                let mut xh = t.clone();
                for c in 0..l.cout {
                    let inv = 1.0 / (var[c] + BN_EPS).sqrt();
                    let (gamma, beta) = (params[g_off + c], params[b_off + c]);
                    for (y, xv) in t.plane_mut(c).iter_mut().zip(xh.plane_mut(c).iter_mut()) {
                        *xv = (*xv - mean[c]) * inv;
                        *y = gamma * *xv + beta;
                    }
                }
                xhats[s] = Some(xh);
            }
            if mode == Mode::Train {
                stats = Some(BatchStats { mean, var, count });
            }
        }
        all_stats.push(stats);
        for (s, (mut act, xhat)) in z.into_iter().zip(xhats).enumerate() {
            if l.act == Activation::Relu {
                act.data.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            let pooled = (l.pool == Pool::Max2).then(|| max2_forward(&act));
            caches[s].push(LayerCache { xhat, act, pooled });
        }
    }
    let mut samples: Vec<SampleCache> = caches
        .into_iter()
        .map(|layers| {
            let last = layers.last().expect("at least one layer").output();
            let projected = layout.projection.as_ref().map(|(d, _, _)| dense_forward(last, params, d));
            let feat = projected.as_ref().unwrap_or(last);
            let argmax: Vec<usize> = (0..feat.c).map(|c| argmax(feat.plane(c))).collect();
            let pooled: Vec<f64> = argmax.iter().enumerate().map(|(c, &i)| feat.plane(c)[i]).collect();
            let normed = pooled.clone();
            SampleCache { layers, projected, argmax, pooled, normed, logit: 0.0 }
        })
        .collect();
    let hd = &layout.head;
    if let Some(so) = layout.head_norm {
        let d = hd.cin;
        let (mean, var) = match mode {
            Mode::Train => {
                let n = samples.len() as f64;
                let mean: Vec<f64> = (0..d).map(|j| samples.iter().map(|s| s.pooled[j]).sum::<f64>() / n).collect();
                let var: Vec<f64> =
                    (0..d).map(|j| samples.iter().map(|s| (s.pooled[j] - mean[j]).powi(2)).sum::<f64>() / n).collect();
                all_stats.push(Some(BatchStats { mean: mean.clone(), var: var.clone(), count: samples.len() }));
                (mean, var)
            }
            Mode::Infer => (state[so..so + d].to_vec(), state[so + d..so + 2 * d].to_vec()),
        };
        for s in samples.iter_mut() {
            for j in 0..d {
                s.normed[j] = (s.pooled[j] - mean[j]) / (var[j] + BN_EPS).sqrt();
            }
        }
    }
    for s in samples.iter_mut() {
        s.logit = params[hd.b_off] + s.normed.iter().enumerate().map(|(c, v)| params[hd.w_off + c] * v).sum::<f64>();
    }
    (samples, all_stats)
}

/// Back-propagates `dlogit[s]` (the derivative of the objective with
/// respect to sample `s`'s logit), accumulating parameter gradients into
/// `grad`. Returns input gradients when `need_dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_batch(
    layout: &Layout,
    params: &[f64],
    state: &[f64],
    inputs: &[&Tensor],
    caches: &[SampleCache],
    stats: &[Option<BatchStats>],
    dlogit: &[f64],
    mode: Mode,
    grad: &mut [f64],
    need_dx: bool,
) -> Option<Vec<Tensor>> {
    let n = inputs.len();
    let hd = &layout.head;
    let d = hd.cin;
    // gradient with respect to each sample's pooled features
    let mut dpooled: Vec<Vec<f64>> = caches
        .iter()
        .zip(dlogit)
        .map(|(cache, &dz)| {
            grad[hd.b_off] += dz;
            (0..d)
                .map(|c| {
                    grad[hd.w_off + c] += dz * cache.normed[c];
                    dz * params[hd.w_off + c]
                })
                .collect()
        })
        .collect();
    if let Some(so) = layout.head_norm {
        for j in 0..d {
            match mode {
                Mode::Infer => {
                    let inv = 1.0 / (state[so + d + j] + BN_EPS).sqrt();
                    dpooled.iter_mut().for_each(|g| g[j] *= inv);
                }
                Mode::Train => {
                    let st = stats[layout.convs.len()].as_ref().expect("training mode records head statistics");
                    let inv = 1.0 / (st.var[j] + BN_EPS).sqrt();
                    let m = n as f64;
                    let mdy = dpooled.iter().map(|g| g[j]).sum::<f64>() / m;
                    let mdyx = dpooled.iter().zip(caches).map(|(g, c)| g[j] * c.normed[j]).sum::<f64>() / m;
                    for (g, c) in dpooled.iter_mut().zip(caches) {
                        g[j] = inv * (g[j] - mdy - c.normed[j] * mdyx);
                    }
                }
            }
        }
    }
    // gradient flowing into the output of the last conv block
    let mut upstream: Vec<Tensor> = caches
        .iter()
        .zip(&dpooled)
        .map(|(cache, dp)| {
            let last = cache.layers.last().expect("at least one layer").output();
            let feat = cache.projected.as_ref().unwrap_or(last);
            let mut dfeat = Tensor::zeros(feat.c, feat.h, feat.w);
            for c in 0..feat.c {
                dfeat.plane_mut(c)[cache.argmax[c]] = dp[c];
            }
            match &layout.projection {
                Some((d, _, _)) => dense_backward(last, &dfeat, params, grad, d),
                None => dfeat,
            }
        })
        .collect();

    for (li, l) in layout.convs.iter().enumerate().rev() {
        // through pooling and activation
        let mut dz: Vec<Tensor> = upstream
            .into_iter()
            .zip(caches)
            .map(|(dup, cache)| {
                let lc = &cache.layers[li];
                let mut da = match &lc.pooled {
                    Some((_, idx)) => {
                        let mut da = Tensor::zeros(lc.act.c, lc.act.h, lc.act.w);
                        for (g, &i) in dup.data.iter().zip(idx) {
                            da.data[i] += g;
                        }
                        da
                    }
                    None => dup,
                };
                if l.act == Activation::Relu {
                    for (g, a) in da.data.iter_mut().zip(&lc.act.data) {
                        if *a <= 0.0 {
                            *g = 0.0;
                        }
                    }
                }
                da
            })
            .collect();
        if let Some((g_off, b_off, s_off)) = l.bn {
            for c in 0..l.cout {
                let gamma = params[g_off + c];
                let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
                for (d, cache) in dz.iter().zip(caches) {
                    let xh = cache.layers[li].xhat.as_ref().expect("bn cache");
                    for (g, x) in d.plane(c).iter().zip(xh.plane(c)) {
                        sum_dy += g;
                        sum_dy_xhat += g * x;
                    }
                }
                grad[g_off + c] += sum_dy_xhat;
                grad[b_off + c] += sum_dy;
                match mode {
                    Mode::Infer => {
                        let inv = 1.0 / (state[s_off + l.cout + c] + BN_EPS).sqrt();
                        for d in dz.iter_mut() {
                            d.plane_mut(c).iter_mut().for_each(|g| *g *= gamma * inv);
                        }
                    }
                    Mode::Train => {
                        let count = (dz[0].h * dz[0].w * n) as f64;
                        let st = stats[li].as_ref().expect("training mode records batch statistics");
                        let inv = 1.0 / (st.var[c] + BN_EPS).sqrt();
                        let (mdy, mdyx) = (sum_dy / count, sum_dy_xhat / count);
                        for (d, cache) in dz.iter_mut().zip(caches) {
                            let xh = cache.layers[li].xhat.as_ref().unwrap();
                            for (g, x) in d.plane_mut(c).iter_mut().zip(xh.plane(c)) {
                                *g = gamma * inv * (*g - mdy - x * mdyx);
                            }
                        }
                    }
                }
            }
        }
        let need = need_dx || li > 0;
        let next: Vec<Option<Tensor>> = dz
            .iter()
            .enumerate()
            .map(|(s, d)| {
                let x = if li == 0 { inputs[s] } else { caches[s].layers[li - 1].output() };
                conv_backward(x, d, params, grad, l, need)
            })
            .collect();
        if li == 0 {
            return need_dx.then(|| next.into_iter().map(|t| t.expect("requested")).collect());
        }
        upstream = next.into_iter().map(|t| t.expect("hidden layer gradient")).collect();
    }
    unreachable!("layout has at least one conv layer")
}
