//! Building blocks for the encoder: layer normalization, linear projection,
//! swish and gated-linear-unit activations, dropout, and the three residual
//! branches of each layer (feed-forward, multi-head self-attention, and the
//! depthwise-convolution module).
//!
//! Every block follows the same contract: `forward` returns the output plus
//! a cache of exactly the intermediates its `backward` needs, and `backward`
//! consumes that cache, accumulates parameter gradients in place, and
//! returns the gradient with respect to the block's input. All reductions
//! run in f64 even though storage is f32.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    attend_backward, attend_naive_lse, attend_tiled, AttentionError, AttnImpl, TileSpec,
    TiledAttention,
};
use crate::params::{join, HasParams, Param};
use crate::posenc::RotaryTable;
use crate::tensor::{matmul, matmul_a_bt, matmul_at_b, Mat};

use super::renorm::{BatchRenorm, RenormCache};

pub const LN_EPS: f64 = 1e-5;
pub const DROPOUT_P: f32 = 0.1;

// ---------------------------------------------------------------------------
// Layer normalization
// ---------------------------------------------------------------------------

/// Per-frame normalization over channels with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

#[derive(Debug)]
pub struct LnCache {
    xhat: Mat,
    inv_sigma: Vec<f64>,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gamma: Param::new(Mat::filled(1, d, 1.0)),
            beta: Param::new(Mat::zeros(1, d)),
        }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, LnCache) {
        let d = x.cols;
        let mut xhat = Mat::zeros(x.rows, d);
        let mut inv_sigma = vec![0.0f64; x.rows];
        let mut y = Mat::zeros(x.rows, d);
        for t in 0..x.rows {
            let row = x.row(t);
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>()
                / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_sigma[t] = inv;
            for j in 0..d {
                let h = (row[j] as f64 - mean) * inv;
                xhat.data[t * d + j] = h as f32;
                y.data[t * d + j] =
                    (self.gamma.v.data[j] as f64 * h + self.beta.v.data[j] as f64) as f32;
            }
        }
        (y, LnCache { xhat, inv_sigma })
    }

    pub fn backward(&mut self, cache: &LnCache, dy: &Mat) -> Mat {
        let d = dy.cols;
        let mut dx = Mat::zeros(dy.rows, d);
        for t in 0..dy.rows {
            let mut sum_dh = 0.0f64;
            let mut sum_dh_h = 0.0f64;
            for j in 0..d {
                let g = dy.at(t, j) as f64;
                let h = cache.xhat.at(t, j) as f64;
                let dh = g * self.gamma.v.data[j] as f64;
                sum_dh += dh;
                sum_dh_h += dh * h;
                self.gamma.g.data[j] += (g * h) as f32;
                self.beta.g.data[j] += g as f32;
            }
            let mean_dh = sum_dh / d as f64;
            let mean_dh_h = sum_dh_h / d as f64;
            for j in 0..d {
                let h = cache.xhat.at(t, j) as f64;
                let dh = dy.at(t, j) as f64 * self.gamma.v.data[j] as f64;
                dx.data[t * d + j] =
                    (cache.inv_sigma[t] * (dh - mean_dh - h * mean_dh_h)) as f32;
            }
        }
        dx
    }
}

impl HasParams for LayerNorm {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

// ---------------------------------------------------------------------------
// Linear projection
// ---------------------------------------------------------------------------

/// Affine map `y = x·W + b` with `W` stored input-major (`d_in × d_out`).
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: Param::new(Mat::randn_trunc(d_in, d_out, 0.02, rng)),
            b: Param::new(Mat::zeros(1, d_out)),
        }
    }

    /// Square identity map; used where a projection should start as a no-op.
    pub fn identity(d: usize) -> Self {
        let mut w = Mat::zeros(d, d);
        for j in 0..d {
            w.data[j * d + j] = 1.0;
        }
        Linear {
            w: Param::new(w),
            b: Param::new(Mat::zeros(1, d)),
        }
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        let mut y = matmul(x, &self.w.v);
        for t in 0..y.rows {
            for j in 0..y.cols {
                y.data[t * y.cols + j] += self.b.v.data[j];
            }
        }
        y
    }

    /// Accumulates dW and db, returns dx. `x` must be the forward input.
    pub fn backward(&mut self, x: &Mat, dy: &Mat) -> Mat {
        self.w.g.add_assign(&matmul_at_b(x, dy));
        self.b.g.add_assign(&dy.col_sums());
        matmul_a_bt(dy, &self.w.v)
    }
}

impl HasParams for Linear {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "w"), &mut self.w);
        f(join(prefix, "b"), &mut self.b);
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

#[inline]
fn sigmoid64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `swish(x) = x · sigmoid(x)`.
pub fn swish(x: &Mat) -> Mat {
    let mut y = x.clone();
    y.map_inplace(|v| {
        let v64 = v as f64;
        (v64 * sigmoid64(v64)) as f32
    });
    y
}

/// d swish / dx = sigmoid(x) · (1 + x · (1 − sigmoid(x))).
pub fn swish_backward(x: &Mat, dy: &Mat) -> Mat {
    let mut dx = Mat::zeros(x.rows, x.cols);
    for i in 0..x.data.len() {
        let v = x.data[i] as f64;
        let s = sigmoid64(v);
        dx.data[i] = (dy.data[i] as f64 * s * (1.0 + v * (1.0 - s))) as f32;
    }
    dx
}

/// Gated linear unit over channel halves: `glu([a, b]) = a ∘ sigmoid(b)`.
pub fn glu(x: &Mat) -> Mat {
    assert!(x.cols % 2 == 0, "glu input needs an even channel count");
    let half = x.cols / 2;
    let mut y = Mat::zeros(x.rows, half);
    for t in 0..x.rows {
        for j in 0..half {
            let a = x.at(t, j) as f64;
            let b = x.at(t, half + j) as f64;
            y.data[t * half + j] = (a * sigmoid64(b)) as f32;
        }
    }
    y
}

pub fn glu_backward(x: &Mat, dy: &Mat) -> Mat {
    let half = x.cols / 2;
    let mut dx = Mat::zeros(x.rows, x.cols);
    for t in 0..x.rows {
        for j in 0..half {
            let a = x.at(t, j) as f64;
            let b = x.at(t, half + j) as f64;
            let s = sigmoid64(b);
            let g = dy.at(t, j) as f64;
            dx.data[t * x.cols + j] = (g * s) as f32;
            dx.data[t * x.cols + half + j] = (g * a * s * (1.0 - s)) as f32;
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// Inverted-scaling dropout. `None` rng means the pass is deterministic
/// (evaluation or a gradient check): the mask is absent and both directions
/// are identity maps.
#[derive(Debug)]
pub struct DropoutMask {
    mask: Option<Mat>,
}

pub fn dropout_forward(x: &mut Mat, rng: Option<&mut ChaCha8Rng>) -> DropoutMask {
    match rng {
        None => DropoutMask { mask: None },
        Some(r) => {
            let keep = 1.0 - DROPOUT_P;
            let mut mask = Mat::zeros(x.rows, x.cols);
            for i in 0..x.data.len() {
                if r.gen::<f32>() < keep {
                    mask.data[i] = 1.0 / keep;
                }
                x.data[i] *= mask.data[i];
            }
            DropoutMask { mask: Some(mask) }
        }
    }
}

pub fn dropout_backward(dy: &mut Mat, drop: &DropoutMask) {
    if let Some(mask) = &drop.mask {
        for i in 0..dy.data.len() {
            dy.data[i] *= mask.data[i];
        }
    }
}

// ---------------------------------------------------------------------------
// Feed-forward branch
// ---------------------------------------------------------------------------

/// Pre-norm feed-forward branch: LN → D→4D → swish → 4D→D → dropout.
/// The residual add and the macaron ½ factor belong to the caller.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub ln: LayerNorm,
    pub w1: Linear,
    pub w2: Linear,
}

#[derive(Debug)]
pub struct FfnCache {
    ln: LnCache,
    xln: Mat,
    pre_act: Mat,
    act: Mat,
    drop: DropoutMask,
}

impl FeedForward {
    pub fn new(d: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForward {
            ln: LayerNorm::new(d),
            w1: Linear::new(d, 4 * d, rng),
            w2: Linear::new(4 * d, d, rng),
        }
    }

    pub fn forward(&self, x: &Mat, rng: Option<&mut ChaCha8Rng>) -> (Mat, FfnCache) {
        let (xln, ln) = self.ln.forward(x);
        let pre_act = self.w1.forward(&xln);
        let act = swish(&pre_act);
        let mut out = self.w2.forward(&act);
        let drop = dropout_forward(&mut out, rng);
        (
            out,
            FfnCache {
                ln,
                xln,
                pre_act,
                act,
                drop,
            },
        )
    }

    pub fn backward(&mut self, cache: &FfnCache, dy: &Mat) -> Mat {
        let mut dy = dy.clone();
        dropout_backward(&mut dy, &cache.drop);
        let dact = self.w2.backward(&cache.act, &dy);
        let dpre = swish_backward(&cache.pre_act, &dact);
        let dxln = self.w1.backward(&cache.xln, &dpre);
        self.ln.backward(&cache.ln, &dxln)
    }
}

impl HasParams for FeedForward {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.ln.visit_params(&join(prefix, "ln"), f);
        self.w1.visit_params(&join(prefix, "w1"), f);
        self.w2.visit_params(&join(prefix, "w2"), f);
    }
}

// ---------------------------------------------------------------------------
// Multi-head self-attention branch
// ---------------------------------------------------------------------------

/// Pre-norm self-attention branch: LN → Q/K/V projections → per-head rotary
/// (when configured) → tiled attention → concat → output projection →
/// dropout. The rotary table, window, and tile spec are forwarded by the
/// caller so one table can serve every layer.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub ln: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    /// Forward kernel selection; the backward pass always recomputes scores
    /// in tiles, so this only changes forward memory/time behavior.
    pub imp: AttnImpl,
}

#[derive(Debug)]
pub struct MhsaCache {
    ln: LnCache,
    xln: Mat,
    q_heads: Vec<Mat>,
    k_heads: Vec<Mat>,
    v_heads: Vec<Mat>,
    fwd: Vec<TiledAttention>,
    concat: Mat,
    drop: DropoutMask,
}

impl MultiHeadAttention {
    pub fn new(d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(heads >= 1 && d % heads == 0, "width must split across heads");
        MultiHeadAttention {
            ln: LayerNorm::new(d),
            wq: Linear::new(d, d, rng),
            wk: Linear::new(d, d, rng),
            wv: Linear::new(d, d, rng),
            wo: Linear::new(d, d, rng),
            heads,
            imp: AttnImpl::Tiled,
        }
    }

    pub fn forward(
        &self,
        x: &Mat,
        window: Option<usize>,
        rotary: Option<&RotaryTable>,
        tiles: TileSpec,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Mat, MhsaCache), AttentionError> {
        let d = x.cols;
        let hd = d / self.heads;
        if let Some(rt) = rotary {
            debug_assert_eq!(rt.d, hd, "rotary table sized for the head dim");
        }
        let (xln, ln) = self.ln.forward(x);
        let q = self.wq.forward(&xln);
        let k = self.wk.forward(&xln);
        let v = self.wv.forward(&xln);
        let mut q_heads = Vec::with_capacity(self.heads);
        let mut k_heads = Vec::with_capacity(self.heads);
        let mut v_heads = Vec::with_capacity(self.heads);
        let mut fwd = Vec::with_capacity(self.heads);
        let mut concat = Mat::zeros(x.rows, d);
        for h in 0..self.heads {
            let mut qh = q.slice_cols(h * hd, (h + 1) * hd);
            let mut kh = k.slice_cols(h * hd, (h + 1) * hd);
            let vh = v.slice_cols(h * hd, (h + 1) * hd);
            if let Some(rt) = rotary {
                for t in 0..qh.rows {
                    rt.rotate_row(qh.row_mut(t), t, false);
                    rt.rotate_row(kh.row_mut(t), t, false);
                }
            }
            let f = match self.imp {
                AttnImpl::Tiled => attend_tiled(&qh, &kh, &vh, window, tiles)?,
                AttnImpl::Naive => attend_naive_lse(&qh, &kh, &vh, window)?,
            };
            concat.set_cols(h * hd, &f.out);
            q_heads.push(qh);
            k_heads.push(kh);
            v_heads.push(vh);
            fwd.push(f);
        }
        let mut out = self.wo.forward(&concat);
        let drop = dropout_forward(&mut out, rng);
        Ok((
            out,
            MhsaCache {
                ln,
                xln,
                q_heads,
                k_heads,
                v_heads,
                fwd,
                concat,
                drop,
            },
        ))
    }

    pub fn backward(
        &mut self,
        cache: &MhsaCache,
        window: Option<usize>,
        rotary: Option<&RotaryTable>,
        tiles: TileSpec,
        dy: &Mat,
    ) -> Result<Mat, AttentionError> {
        let d = dy.cols;
        let hd = d / self.heads;
        let mut dy = dy.clone();
        dropout_backward(&mut dy, &cache.drop);
        let dconcat = self.wo.backward(&cache.concat, &dy);
        let mut dq = Mat::zeros(dy.rows, d);
        let mut dk = Mat::zeros(dy.rows, d);
        let mut dv = Mat::zeros(dy.rows, d);
        for h in 0..self.heads {
            let dout_h = dconcat.slice_cols(h * hd, (h + 1) * hd);
            let (mut dqh, mut dkh, dvh) = attend_backward(
                &cache.q_heads[h],
                &cache.k_heads[h],
                &cache.v_heads[h],
                window,
                tiles,
                &cache.fwd[h],
                &dout_h,
            )?;
            if let Some(rt) = rotary {
                // The rotation is orthogonal per position, so its adjoint is
                // the inverse rotation.
                for t in 0..dqh.rows {
                    rt.rotate_row(dqh.row_mut(t), t, true);
                    rt.rotate_row(dkh.row_mut(t), t, true);
                }
            }
            dq.set_cols(h * hd, &dqh);
            dk.set_cols(h * hd, &dkh);
            dv.set_cols(h * hd, &dvh);
        }
        let mut dxln = self.wq.backward(&cache.xln, &dq);
        dxln.add_assign(&self.wk.backward(&cache.xln, &dk));
        dxln.add_assign(&self.wv.backward(&cache.xln, &dv));
        Ok(self.ln.backward(&cache.ln, &dxln))
    }
}

impl HasParams for MultiHeadAttention {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.ln.visit_params(&join(prefix, "ln"), f);
        self.wq.visit_params(&join(prefix, "wq"), f);
        self.wk.visit_params(&join(prefix, "wk"), f);
        self.wv.visit_params(&join(prefix, "wv"), f);
        self.wo.visit_params(&join(prefix, "wo"), f);
    }
}

// ---------------------------------------------------------------------------
// Depthwise 1-D convolution
// ---------------------------------------------------------------------------

/// Per-channel 1-D convolution over time with same-length zero padding.
/// Weights are `channels × kernel`; the kernel must be odd.
#[derive(Debug, Clone)]
pub struct DepthwiseConv1d {
    pub w: Param,
    pub b: Param,
    pub kernel: usize,
}

impl DepthwiseConv1d {
    pub fn new(channels: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd for same-length padding");
        DepthwiseConv1d {
            w: Param::new(Mat::randn_trunc(channels, kernel, 0.02, rng)),
            b: Param::new(Mat::zeros(1, channels)),
            kernel,
        }
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        let (t_len, c) = (x.rows, x.cols);
        let pad = (self.kernel / 2) as i64;
        let mut y = Mat::zeros(t_len, c);
        for t in 0..t_len {
            for ch in 0..c {
                let mut acc = self.b.v.data[ch] as f64;
                for kk in 0..self.kernel {
                    let s = t as i64 + kk as i64 - pad;
                    if s >= 0 && (s as usize) < t_len {
                        acc += self.w.v.at(ch, kk) as f64 * x.at(s as usize, ch) as f64;
                    }
                }
                y.data[t * c + ch] = acc as f32;
            }
        }
        y
    }

    pub fn backward(&mut self, x: &Mat, dy: &Mat) -> Mat {
        let (t_len, c) = (x.rows, x.cols);
        let pad = (self.kernel / 2) as i64;
        let mut dx = Mat::zeros(t_len, c);
        for t in 0..t_len {
            for ch in 0..c {
                let g = dy.at(t, ch) as f64;
                self.b.g.data[ch] += g as f32;
                for kk in 0..self.kernel {
                    let s = t as i64 + kk as i64 - pad;
                    if s >= 0 && (s as usize) < t_len {
                        *self.w.g.at_mut(ch, kk) += (g * x.at(s as usize, ch) as f64) as f32;
                        dx.data[s as usize * c + ch] += (g * self.w.v.at(ch, kk) as f64) as f32;
                    }
                }
            }
        }
        dx
    }
}

impl HasParams for DepthwiseConv1d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "w"), &mut self.w);
        f(join(prefix, "b"), &mut self.b);
    }
}

// ---------------------------------------------------------------------------
// Convolution module branch
// ---------------------------------------------------------------------------

/// Pre-norm convolution branch: LN → pointwise D→2D → GLU → depthwise conv →
/// batch renorm → swish → pointwise D→D. Training processes the whole batch
/// in lockstep because the renormalization statistics span batch items;
/// evaluation is per item via running statistics.
#[derive(Debug, Clone)]
pub struct ConvModule {
    pub ln: LayerNorm,
    pub pw1: Linear,
    pub dw: DepthwiseConv1d,
    pub norm: BatchRenorm,
    pub pw2: Linear,
}

#[derive(Debug)]
struct ConvItemCache {
    ln: LnCache,
    xln: Mat,
    pre_glu: Mat,
    glu_out: Mat,
    normed: Mat,
    act: Mat,
}

#[derive(Debug)]
pub struct ConvCache {
    items: Vec<ConvItemCache>,
    renorm: RenormCache,
}

impl ConvModule {
    pub fn new(d: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvModule {
            ln: LayerNorm::new(d),
            pw1: Linear::new(d, 2 * d, rng),
            dw: DepthwiseConv1d::new(d, kernel, rng),
            norm: BatchRenorm::new(d),
            // The closing pointwise layer starts as an identity so the
            // branch's initial contribution is shaped by the normalizer.
            pw2: Linear::identity(d),
        }
    }

    pub fn forward_train(&mut self, xs: &[Mat]) -> (Vec<Mat>, ConvCache) {
        let mut partial = Vec::with_capacity(xs.len());
        let mut conv_outs = Vec::with_capacity(xs.len());
        for x in xs {
            let (xln, ln) = self.ln.forward(x);
            let pre_glu = self.pw1.forward(&xln);
            let glu_out = glu(&pre_glu);
            conv_outs.push(self.dw.forward(&glu_out));
            partial.push((ln, xln, pre_glu, glu_out));
        }
        let (normed, renorm) = self.norm.forward_train(&conv_outs);
        let mut outs = Vec::with_capacity(xs.len());
        let mut items = Vec::with_capacity(xs.len());
        for ((ln, xln, pre_glu, glu_out), normed) in partial.into_iter().zip(normed) {
            let act = swish(&normed);
            outs.push(self.pw2.forward(&act));
            items.push(ConvItemCache {
                ln,
                xln,
                pre_glu,
                glu_out,
                normed,
                act,
            });
        }
        (outs, ConvCache { items, renorm })
    }

    pub fn forward_eval(&self, x: &Mat) -> Mat {
        let (xln, _) = self.ln.forward(x);
        let glu_out = glu(&self.pw1.forward(&xln));
        let normed = self.norm.forward_eval(&self.dw.forward(&glu_out));
        self.pw2.forward(&swish(&normed))
    }

    pub fn backward(&mut self, cache: &ConvCache, dys: &[Mat]) -> Vec<Mat> {
        let mut dnormed = Vec::with_capacity(dys.len());
        for (item, dy) in cache.items.iter().zip(dys) {
            let dact = self.pw2.backward(&item.act, dy);
            dnormed.push(swish_backward(&item.normed, &dact));
        }
        let dconvs = self.norm.backward(&cache.renorm, &dnormed);
        let mut dxs = Vec::with_capacity(dys.len());
        for (item, dconv) in cache.items.iter().zip(&dconvs) {
            let dglu = self.dw.backward(&item.glu_out, dconv);
            let dpre = glu_backward(&item.pre_glu, &dglu);
            let dxln = self.pw1.backward(&item.xln, &dpre);
            dxs.push(self.ln.backward(&item.ln, &dxln));
        }
        dxs
    }
}

impl HasParams for ConvModule {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.ln.visit_params(&join(prefix, "ln"), f);
        self.pw1.visit_params(&join(prefix, "pw1"), f);
        self.dw.visit_params(&join(prefix, "dw"), f);
        self.norm.visit_params(&join(prefix, "norm"), f);
        self.pw2.visit_params(&join(prefix, "pw2"), f);
    }

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Mat)) {
        self.norm.visit_state(&join(prefix, "norm"), f);
    }
}
