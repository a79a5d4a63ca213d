//! Long-form decoding over full recordings.
//!
//! Encoding a very long recording in independent segments loses context at
//! every cut. The three schemes here avoid that in different ways:
//!
//! * **moving-average**: overlapping windows advance by a stride; each
//!   output frame's probabilities (post-softmax) are averaged over every
//!   window that covers it, then re-logged.
//! * **buffered**: windows overlap, but only a central region of each
//!   window is kept, so every retained frame has context on both sides;
//!   the retained regions tile the recording exactly once.
//! * **sliding-window attention (SWA)**: one encoder pass over the whole
//!   recording with the attention mask limited to the training context, so
//!   no frame ever sits next to an artificial boundary.
//!
//! All window geometry is computed in input (spectrogram) frames aligned to
//! the subsampling factor, so window-local output frames map exactly onto
//! global output frames.

use crate::ctc::{CtcError, PosteriorLattice};
use crate::encoder::{Encoder, EncoderError};
use crate::audio::Spectrogram;
use crate::tensor::Mat;

/// Which long-form scheme to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    MovingAvg,
    Buffered,
    Swa,
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::MovingAvg => "moving_avg",
            Scheme::Buffered => "buffered",
            Scheme::Swa => "swa",
        })
    }
}

impl std::str::FromStr for Scheme {
    type Err = LongformError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "moving_avg" => Ok(Scheme::MovingAvg),
            "buffered" => Ok(Scheme::Buffered),
            "swa" => Ok(Scheme::Swa),
            other => Err(LongformError::BadPlan(format!("unknown scheme '{other}'"))),
        }
    }
}

/// Errors from long-form decoding.
#[derive(Debug, thiserror::Error)]
pub enum LongformError {
    #[error("window plan invalid: {0}")]
    BadPlan(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
}

/// Geometry for one long-form decode.
#[derive(Debug, Clone, Copy)]
pub struct WindowPlan {
    pub scheme: Scheme,
    /// Window / buffer width in seconds; normally the model's training
    /// sequence length.
    pub window_seconds: f64,
    /// moving-average: stride as a fraction of the window (default 0.125).
    pub stride_ratio: f64,
    /// buffered: retained central region as a fraction of the buffer
    /// (default 0.75).
    pub central_ratio: f64,
}

impl WindowPlan {
    pub fn new(
        scheme: Scheme,
        window_seconds: f64,
        stride_ratio: f64,
        central_ratio: f64,
    ) -> Result<Self, LongformError> {
        if !(window_seconds > 0.0) {
            return Err(LongformError::BadPlan(format!(
                "window_seconds must be positive, got {window_seconds}"
            )));
        }
        if !(stride_ratio > 0.0 && stride_ratio <= 1.0) {
            return Err(LongformError::BadPlan(format!(
                "stride_ratio must be in (0, 1], got {stride_ratio}"
            )));
        }
        if !(central_ratio > 0.0 && central_ratio <= 1.0) {
            return Err(LongformError::BadPlan(format!(
                "central_ratio must be in (0, 1], got {central_ratio}"
            )));
        }
        Ok(WindowPlan {
            scheme,
            window_seconds,
            stride_ratio,
            central_ratio,
        })
    }
}

/// Round `seconds` to a whole number of input frames, then to the nearest
/// positive multiple of the subsampling factor.
pub fn seconds_to_aligned_frames(seconds: f64, hop_seconds: f64, ss: usize) -> usize {
    let frames = (seconds / hop_seconds).round().max(1.0) as usize;
    let units = ((frames as f64) / ss as f64).round().max(1.0) as usize;
    units * ss
}

/// Start offsets (input frames) for moving-average windows of width `w`
/// and stride `s` over `t_in` frames: k·s until a window reaches the end.
/// The final window is sliced to the recording, never padded.
pub fn moving_window_starts(t_in: usize, w: usize, s: usize) -> Vec<usize> {
    assert!(w > 0 && s > 0);
    if t_in <= w {
        return vec![0];
    }
    let mut starts = Vec::new();
    let mut k = 0usize;
    loop {
        let start = k * s;
        starts.push(start);
        if start + w >= t_in {
            break;
        }
        k += 1;
    }
    starts
}

/// Number of window evaluations the moving-average planner performs:
/// `ceil((t_in − w)/s) + 1`, or 1 when the window covers the recording.
pub fn moving_window_count(t_in: usize, w: usize, s: usize) -> usize {
    if t_in <= w {
        1
    } else {
        (t_in - w).div_ceil(s) + 1
    }
}

/// One buffered-scheme window: encode `span`, keep `central_out` rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufferWindow {
    /// Input-frame span `[start, end)` fed to the encoder.
    pub span: (usize, usize),
    /// Output-frame range `[start, end)` retained, in global coordinates.
    pub central_out: (usize, usize),
}

/// Buffer layout: central regions of width `w_w` tile the recording; each
/// buffer of width `w_b` centers its retained region with margin
/// `(w_b − w_w)/2`, clamped into the recording, with first/last buffers
/// absorbing the edges. All widths and starts are multiples of `ss`.
pub fn buffer_layout(t_in: usize, w_b: usize, w_w: usize, ss: usize) -> Vec<BufferWindow> {
    assert!(w_w > 0 && w_w <= w_b && w_b % ss == 0 && w_w % ss == 0);
    let t_out = t_in.div_ceil(ss);
    if t_in <= w_b {
        return vec![BufferWindow {
            span: (0, t_in),
            central_out: (0, t_out),
        }];
    }
    let margin = ((w_b - w_w) / 2 / ss) * ss;
    let max_start = ((t_in - w_b) / ss) * ss;
    let num = t_in.div_ceil(w_w);
    let mut out = Vec::with_capacity(num);
    for k in 0..num {
        let c0 = k * w_w;
        let c1 = ((k + 1) * w_w).min(t_in);
        let nominal = c0.saturating_sub(margin);
        let start = nominal.min(max_start);
        let end = if k + 1 == num { t_in } else { (start + w_b).min(t_in) };
        out.push(BufferWindow {
            span: (start, end),
            central_out: (c0 / ss, c1.div_ceil(ss)),
        });
    }
    out
}

fn lattice_from(
    log_probs: Mat,
    model: &Encoder,
    feat_hop: f64,
) -> Result<PosteriorLattice, CtcError> {
    PosteriorLattice::new(
        log_probs,
        model.blank_id(),
        feat_hop * model.cfg.subsampling as f64,
    )
}

/// Moving-average decode: overlapping windows, probabilities averaged per
/// output frame with equal weight over the covering windows.
pub fn moving_avg_decode(
    model: &mut Encoder,
    feats: &Spectrogram,
    plan: &WindowPlan,
) -> Result<PosteriorLattice, LongformError> {
    let ss = model.cfg.subsampling;
    let t_in = feats.frames.rows;
    let w = seconds_to_aligned_frames(plan.window_seconds, feats.hop_seconds, ss);
    let s = seconds_to_aligned_frames(
        plan.stride_ratio * plan.window_seconds,
        feats.hop_seconds,
        ss,
    );
    let t_out = t_in.div_ceil(ss);
    let vocab = model.cfg.vocab_size + 1;
    let mut acc = vec![0.0f64; t_out * vocab];
    let mut cover = vec![0u32; t_out];

    for start in moving_window_starts(t_in, w, s) {
        let end = (start + w).min(t_in);
        let slice = feats.frames.slice_rows(start, end);
        let logits = model.forward_eval(&slice, None)?;
        let base = start / ss;
        for j in 0..logits.rows {
            let g = base + j;
            cover[g] += 1;
            let row = logits.row(j);
            for v in 0..vocab {
                acc[g * vocab + v] += (row[v] as f64).exp();
            }
        }
    }

    let mut out = Mat::zeros(t_out, vocab);
    for g in 0..t_out {
        debug_assert!(cover[g] > 0, "frame {g} uncovered");
        let inv = 1.0 / cover[g] as f64;
        // Renormalize to absorb floating-point drift before re-logging.
        let total: f64 = (0..vocab).map(|v| acc[g * vocab + v]).sum();
        let norm = inv / (total * inv);
        for v in 0..vocab {
            out.data[g * vocab + v] = (acc[g * vocab + v] * norm).max(1e-300).ln() as f32;
        }
    }
    Ok(lattice_from(out, model, feats.hop_seconds)?)
}

/// Buffered decode: each retained frame comes from exactly one window and
/// carries bidirectional context inside that window.
pub fn buffered_decode(
    model: &mut Encoder,
    feats: &Spectrogram,
    plan: &WindowPlan,
) -> Result<PosteriorLattice, LongformError> {
    let ss = model.cfg.subsampling;
    let t_in = feats.frames.rows;
    let w_b = seconds_to_aligned_frames(plan.window_seconds, feats.hop_seconds, ss);
    let w_w = seconds_to_aligned_frames(
        plan.central_ratio * plan.window_seconds,
        feats.hop_seconds,
        ss,
    )
    .min(w_b);
    let t_out = t_in.div_ceil(ss);
    let vocab = model.cfg.vocab_size + 1;
    let mut out = Mat::zeros(t_out, vocab);
    let mut filled = vec![false; t_out];

    for win in buffer_layout(t_in, w_b, w_w, ss) {
        let (s, e) = win.span;
        let slice = feats.frames.slice_rows(s, e);
        let logits = model.forward_eval(&slice, None)?;
        let base = s / ss;
        let (c0, c1) = win.central_out;
        for g in c0..c1 {
            let j = g - base;
            debug_assert!(!filled[g], "frame {g} retained twice");
            filled[g] = true;
            out.data[g * vocab..(g + 1) * vocab]
                .copy_from_slice(logits.row(j));
        }
    }
    debug_assert!(filled.iter().all(|&f| f), "buffered decode left gaps");
    Ok(lattice_from(out, model, feats.hop_seconds)?)
}

/// Sliding-window-attention decode: one pass over the entire recording,
/// attention masked to `window_seconds` of context.
pub fn swa_decode(
    model: &mut Encoder,
    feats: &Spectrogram,
    window_seconds: f64,
) -> Result<PosteriorLattice, LongformError> {
    let ss = model.cfg.subsampling;
    let hop_out = feats.hop_seconds * ss as f64;
    let w = ((window_seconds / hop_out).round().max(1.0)) as usize;
    let logits = model.forward_eval(&feats.frames, Some(w))?;
    Ok(lattice_from(logits, model, feats.hop_seconds)?)
}

/// Dispatch on the plan's scheme.
pub fn decode_longform(
    model: &mut Encoder,
    feats: &Spectrogram,
    plan: &WindowPlan,
) -> Result<PosteriorLattice, LongformError> {
    match plan.scheme {
        Scheme::MovingAvg => moving_avg_decode(model, feats, plan),
        Scheme::Buffered => buffered_decode(model, feats, plan),
        Scheme::Swa => swa_decode(model, feats, plan.window_seconds),
    }
}
