//! Scaled dot-product attention for one head, in three forms:
//!
//! * `attend_naive` — materializes the full L×L score matrix; the reference
//!   implementation and the quadratic-memory baseline.
//! * `attend_tiled` — online softmax over key tiles with running row max and
//!   normalizer; peak extra memory is O(L·d + tile_rows·tile_cols).
//! * sliding-window masking — position i attends to j iff
//!   |i − j| ≤ floor((W−1)/2); tiles that fall entirely outside the band are
//!   skipped without touching their scores.
//!
//! The backward pass recomputes tile scores from the saved per-row
//! log-sum-exp rather than storing attention weights, so training on long
//! sequences keeps linear memory. All reductions accumulate in f64; storage
//! is f32.

use crate::tensor::{matmul_a_bt, softmax_rows, Mat};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("q/k/v shape mismatch: q {q_rows}x{q_cols}, k {k_rows}x{k_cols}, v {v_rows}x{v_cols}")]
    ShapeMismatch {
        q_rows: usize,
        q_cols: usize,
        k_rows: usize,
        k_cols: usize,
        v_rows: usize,
        v_cols: usize,
    },
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("sliding window width must be >= 1, got {0}")]
    BadWindow(usize),
    #[error("tile sizes must be >= 1, got {rows}x{cols}")]
    BadTile { rows: usize, cols: usize },
    #[error("upstream gradient shape {got_rows}x{got_cols} does not match output {rows}x{cols}")]
    GradShape { rows: usize, cols: usize, got_rows: usize, got_cols: usize },
}

/// Which forward kernel an attention layer runs. `Naive` materializes the
/// full L×L score matrix (quadratic memory, the baseline being measured
/// against); `Tiled` streams key tiles with an online softmax (linear
/// memory). Both produce the same output up to rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnImpl {
    Naive,
    Tiled,
}

impl std::str::FromStr for AttnImpl {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "naive" => Ok(AttnImpl::Naive),
            "tiled" => Ok(AttnImpl::Tiled),
            other => Err(format!("unknown attention implementation '{other}' (naive|tiled)")),
        }
    }
}

impl std::fmt::Display for AttnImpl {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttnImpl::Naive => "naive",
            AttnImpl::Tiled => "tiled",
        })
    }
}

/// Block sizes for the tiled algorithm. Sizes larger than the sequence are
/// clamped, so (L, L) degenerates to a single tile.
#[derive(Debug, Clone, Copy)]
pub struct TileSpec {
    pub tile_rows: usize,
    pub tile_cols: usize,
}

impl TileSpec {
    pub fn new(tile_rows: usize, tile_cols: usize) -> Result<Self, AttentionError> {
        if tile_rows == 0 || tile_cols == 0 {
            return Err(AttentionError::BadTile { rows: tile_rows, cols: tile_cols });
        }
        Ok(TileSpec { tile_rows, tile_cols })
    }
}

impl Default for TileSpec {
    fn default() -> Self {
        TileSpec { tile_rows: 128, tile_cols: 128 }
    }
}

/// Half-width of a sliding window: allowed offsets are |i − j| ≤ half.
#[inline]
pub fn window_halfwidth(w: usize) -> usize {
    (w - 1) / 2
}

/// Mask predicate: may query position i attend to key position j?
#[inline]
pub fn window_allows(i: usize, j: usize, window: Option<usize>) -> bool {
    match window {
        None => true,
        Some(w) => i.abs_diff(j) <= window_halfwidth(w),
    }
}

/// True when the key tile [c0, c1) is entirely outside the window band of
/// every query row in [r0, r1), so the whole tile can be skipped.
#[inline]
fn tile_fully_masked(r0: usize, r1: usize, c0: usize, c1: usize, half: usize) -> bool {
    c0 > (r1 - 1) + half || c1 - 1 + half < r0
}

fn validate(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    window: Option<usize>,
) -> Result<(usize, usize, f32), AttentionError> {
    if q.cols != k.cols || q.rows != k.rows || k.rows != v.rows || q.cols == 0 {
        return Err(AttentionError::ShapeMismatch {
            q_rows: q.rows,
            q_cols: q.cols,
            k_rows: k.rows,
            k_cols: k.cols,
            v_rows: v.rows,
            v_cols: v.cols,
        });
    }
    if !q.is_finite() {
        return Err(AttentionError::NonFinite("q"));
    }
    if !k.is_finite() {
        return Err(AttentionError::NonFinite("k"));
    }
    if !v.is_finite() {
        return Err(AttentionError::NonFinite("v"));
    }
    if let Some(w) = window {
        if w == 0 {
            return Err(AttentionError::BadWindow(w));
        }
    }
    let scale = 1.0 / (q.cols as f32).sqrt();
    Ok((q.rows, q.cols, scale))
}

pub struct NaiveAttention {
    pub out: Mat,
    /// Post-softmax attention weights [L × L], kept for inspection in tests.
    pub weights: Mat,
}

/// Reference attention: builds the full score matrix, softmaxes rows, and
/// multiplies by v. Masked pairs are −∞ before the softmax.
pub fn attend_naive(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    window: Option<usize>,
) -> Result<NaiveAttention, AttentionError> {
    let (l, _d, scale) = validate(q, k, v, window)?;
    let mut scores = matmul_a_bt(q, k);
    for i in 0..l {
        let row = scores.row_mut(i);
        for (j, s) in row.iter_mut().enumerate() {
            if window_allows(i, j, window) {
                *s *= scale;
            } else {
                *s = f32::NEG_INFINITY;
            }
        }
    }
    softmax_rows(&mut scores);
    let out = crate::tensor::matmul(&scores, v);
    Ok(NaiveAttention { out, weights: scores })
}

/// Naive kernel packaged with the same cache payload as [`attend_tiled`]:
/// the full score matrix is materialized (the quadratic-memory path under
/// measurement), and per-row log-sum-exps are kept so the shared backward
/// pass works regardless of which kernel ran forward.
pub fn attend_naive_lse(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    window: Option<usize>,
) -> Result<TiledAttention, AttentionError> {
    let (l, _d, scale) = validate(q, k, v, window)?;
    let mut scores = matmul_a_bt(q, k);
    let mut row_lse = vec![0.0f64; l];
    for i in 0..l {
        let row = scores.row_mut(i);
        let mut max = f64::NEG_INFINITY;
        for (j, s) in row.iter_mut().enumerate() {
            if window_allows(i, j, window) {
                *s *= scale;
                max = max.max(*s as f64);
            } else {
                *s = f32::NEG_INFINITY;
            }
        }
        let mut sum = 0.0f64;
        for &s in row.iter() {
            if s > f32::NEG_INFINITY {
                sum += ((s as f64) - max).exp();
            }
        }
        let lse = max + sum.ln();
        row_lse[i] = lse;
        for s in row.iter_mut() {
            *s = if *s > f32::NEG_INFINITY { ((*s as f64) - lse).exp() as f32 } else { 0.0 };
        }
    }
    let out = crate::tensor::matmul(&scores, v);
    Ok(TiledAttention { out, row_lse })
}

#[derive(Debug)]
pub struct TiledAttention {
    pub out: Mat,
    /// Per-query-row log-sum-exp of the (scaled, masked) scores; the backward
    /// pass rebuilds attention weights from it without storing them.
    pub row_lse: Vec<f64>,
}

/// Online-softmax attention: sweeps key tiles per query tile, carrying a
/// running max and normalizer per row. The L×L score matrix never exists;
/// the only tile-sized buffer is `tile_rows × tile_cols`.
pub fn attend_tiled(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    window: Option<usize>,
    tiles: TileSpec,
) -> Result<TiledAttention, AttentionError> {
    let (l, d, scale) = validate(q, k, v, window)?;
    let tr = tiles.tile_rows.min(l);
    let tc = tiles.tile_cols.min(l);
    let half = window.map(window_halfwidth);

    let mut out = Mat::zeros(l, d);
    let mut row_lse = vec![0.0f64; l];

    // Reused buffers: one score tile plus per-row running state for the
    // current query tile. Everything below accumulates in f64.
    let mut tile = vec![0.0f64; tr * tc];
    let mut run_max = vec![0.0f64; tr];
    let mut run_sum = vec![0.0f64; tr];
    let mut acc = vec![0.0f64; tr * d];

    let mut r0 = 0;
    while r0 < l {
        let r1 = (r0 + tr).min(l);
        let rows = r1 - r0;
        run_max[..rows].fill(f64::NEG_INFINITY);
        run_sum[..rows].fill(0.0);
        acc[..rows * d].fill(0.0);

        let mut c0 = 0;
        while c0 < l {
            let c1 = (c0 + tc).min(l);
            let cols = c1 - c0;
            if let Some(h) = half {
                if tile_fully_masked(r0, r1, c0, c1, h) {
                    c0 = c1;
                    continue;
                }
            }
            // Scores for this tile.
            for ri in 0..rows {
                let qrow = q.row(r0 + ri);
                for ci in 0..cols {
                    let s = if window_allows(r0 + ri, c0 + ci, window) {
                        crate::tensor::dot_f64(qrow, k.row(c0 + ci)) * scale as f64
                    } else {
                        f64::NEG_INFINITY
                    };
                    tile[ri * tc + ci] = s;
                }
            }
            // Online update: rescale previous accumulators to the new max.
            for ri in 0..rows {
                let srow = &tile[ri * tc..ri * tc + cols];
                let tile_max = srow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if tile_max == f64::NEG_INFINITY {
                    continue; // every pair in this row-slice is masked
                }
                let new_max = run_max[ri].max(tile_max);
                if run_max[ri] > f64::NEG_INFINITY && new_max > run_max[ri] {
                    let corr = (run_max[ri] - new_max).exp();
                    run_sum[ri] *= corr;
                    for a in &mut acc[ri * d..(ri + 1) * d] {
                        *a *= corr;
                    }
                }
                run_max[ri] = new_max;
                for ci in 0..cols {
                    let s = srow[ci];
                    if s == f64::NEG_INFINITY {
                        continue;
                    }
                    let p = (s - new_max).exp();
                    run_sum[ri] += p;
                    let vrow = v.row(c0 + ci);
                    let arow = &mut acc[ri * d..(ri + 1) * d];
                    for (a, &vv) in arow.iter_mut().zip(vrow) {
                        *a += p * vv as f64;
                    }
                }
            }
            c0 = c1;
        }
        for ri in 0..rows {
            let inv = 1.0 / run_sum[ri];
            let orow = out.row_mut(r0 + ri);
            for (o, a) in orow.iter_mut().zip(&acc[ri * d..(ri + 1) * d]) {
                *o = (a * inv) as f32;
            }
            row_lse[r0 + ri] = run_max[ri] + run_sum[ri].ln();
        }
        r0 = r1;
    }
    Ok(TiledAttention { out, row_lse })
}

/// Backward pass for tiled attention. Tile scores are recomputed from q/k
/// and normalized with the forward pass's saved row log-sum-exp; attention
/// weights are never stored. Uses the identity
/// dS_ij = P_ij · (dP_ij − D_i) with D_i = dout_i · out_i.
pub fn attend_backward(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    window: Option<usize>,
    tiles: TileSpec,
    fwd: &TiledAttention,
    dout: &Mat,
) -> Result<(Mat, Mat, Mat), AttentionError> {
    let (l, d, scale) = validate(q, k, v, window)?;
    if dout.rows != l || dout.cols != d {
        return Err(AttentionError::GradShape {
            rows: l,
            cols: d,
            got_rows: dout.rows,
            got_cols: dout.cols,
        });
    }
    let tr = tiles.tile_rows.min(l);
    let tc = tiles.tile_cols.min(l);
    let half = window.map(window_halfwidth);

    // D_i = dout_i · out_i, the softmax-Jacobian contraction term.
    let dvec: Vec<f64> = (0..l)
        .map(|i| crate::tensor::dot_f64(dout.row(i), fwd.out.row(i)))
        .collect();

    let mut dq = vec![0.0f64; l * d];
    let mut dk = vec![0.0f64; l * d];
    let mut dv = vec![0.0f64; l * d];

    let mut r0 = 0;
    while r0 < l {
        let r1 = (r0 + tr).min(l);
        let mut c0 = 0;
        while c0 < l {
            let c1 = (c0 + tc).min(l);
            if let Some(h) = half {
                if tile_fully_masked(r0, r1, c0, c1, h) {
                    c0 = c1;
                    continue;
                }
            }
            for i in r0..r1 {
                let qrow = q.row(i);
                let drow = dout.row(i);
                let lse = fwd.row_lse[i];
                for j in c0..c1 {
                    if !window_allows(i, j, window) {
                        continue;
                    }
                    let s = crate::tensor::dot_f64(qrow, k.row(j)) * scale as f64;
                    let p = (s - lse).exp();
                    let dp = crate::tensor::dot_f64(drow, v.row(j));
                    let ds = p * (dp - dvec[i]) * scale as f64;
                    let krow = k.row(j);
                    for c in 0..d {
                        dq[i * d + c] += ds * krow[c] as f64;
                        dk[j * d + c] += ds * qrow[c] as f64;
                        dv[j * d + c] += p * drow[c] as f64;
                    }
                }
            }
            c0 = c1;
        }
        r0 = r1;
    }
    let to_mat = |v: Vec<f64>| Mat::from_vec(l, d, v.into_iter().map(|x| x as f32).collect());
    Ok((to_mat(dq), to_mat(dk), to_mat(dv)))
}
