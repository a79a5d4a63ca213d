//! CTC loss via log-space forward-backward, its gradient with respect to
//! the log-probabilities, and greedy (best-path) decoding with per-token
//! frame spans. Infeasible alignments return +∞ loss with a zero gradient
//! and bump a counter instead of crashing a training run.

use crate::tensor::{log_add, Mat};
use std::io::{Read as _, Write as _};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CtcError {
    #[error("lattice must have at least one frame")]
    EmptyLattice,
    #[error("lattice has {cols} columns; need at least 2 (one symbol plus blank)")]
    TooFewColumns { cols: usize },
    #[error("blank id {blank} out of range for {cols} columns")]
    BlankOutOfRange { blank: usize, cols: usize },
    #[error("target[{index}] = {id} is invalid (blank or out of vocabulary)")]
    BadTarget { index: usize, id: usize },
    #[error("io error on {path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
    #[error("malformed lattice file: {0}")]
    Malformed(String),
    #[error("lattice row {row} log-sum-exp is {lse}, not 0")]
    NotNormalized { row: usize, lse: f64 },
}

/// Per-frame log-probabilities over vocabulary + blank.
#[derive(Debug, Clone)]
pub struct PosteriorLattice {
    /// [T × (vocab+1)] natural-log probabilities.
    pub log_probs: Mat,
    pub blank_id: usize,
    pub hop_seconds: f64,
}

impl PosteriorLattice {
    pub fn new(log_probs: Mat, blank_id: usize, hop_seconds: f64) -> Result<Self, CtcError> {
        if log_probs.rows == 0 {
            return Err(CtcError::EmptyLattice);
        }
        if log_probs.cols < 2 {
            return Err(CtcError::TooFewColumns { cols: log_probs.cols });
        }
        if blank_id >= log_probs.cols {
            return Err(CtcError::BlankOutOfRange { blank: blank_id, cols: log_probs.cols });
        }
        Ok(PosteriorLattice { log_probs, blank_id, hop_seconds })
    }

    pub fn num_frames(&self) -> usize {
        self.log_probs.rows
    }

    pub fn vocab_size(&self) -> usize {
        self.log_probs.cols - 1
    }

    /// Check the row-normalization invariant (log-sum-exp = 0 ± 1e−5).
    pub fn check_normalized(&self) -> Result<(), CtcError> {
        for t in 0..self.log_probs.rows {
            let lse = crate::tensor::log_sum_exp(self.log_probs.row(t));
            if lse.abs() > 1e-5 {
                return Err(CtcError::NotNormalized { row: t, lse });
            }
        }
        Ok(())
    }
}

static INFEASIBLE_CHUNKS: AtomicU64 = AtomicU64::new(0);

/// How many ctc_loss calls so far had no feasible alignment.
pub fn infeasible_count() -> u64 {
    INFEASIBLE_CHUNKS.load(Ordering::Relaxed)
}

pub fn reset_infeasible_count() {
    INFEASIBLE_CHUNKS.store(0, Ordering::Relaxed)
}

pub struct CtcLoss {
    /// −log P(targets | lattice); +∞ when no alignment fits.
    pub loss: f64,
    /// dLoss/d log_probs, same shape as the lattice; all zeros when
    /// infeasible.
    pub grad: Mat,
    pub infeasible: bool,
}

/// Forward-backward CTC loss in log space (f64 throughout).
///
/// The extended label sequence interleaves blanks around the targets; the
/// gradient with respect to each log-probability is the (negated) posterior
/// occupancy of the states emitting that symbol at that frame.
pub fn ctc_loss(lattice: &PosteriorLattice, targets: &[usize]) -> Result<CtcLoss, CtcError> {
    let t_len = lattice.num_frames();
    let cols = lattice.log_probs.cols;
    if t_len == 0 {
        return Err(CtcError::EmptyLattice);
    }
    for (index, &id) in targets.iter().enumerate() {
        if id == lattice.blank_id || id >= cols {
            return Err(CtcError::BadTarget { index, id });
        }
    }
    let blank = lattice.blank_id;
    // Extended sequence l' = [blank, t1, blank, t2, ..., blank].
    let s_len = 2 * targets.len() + 1;
    let ext = |s: usize| -> usize {
        if s % 2 == 0 {
            blank
        } else {
            targets[s / 2]
        }
    };
    let lp = |t: usize, k: usize| -> f64 { lattice.log_probs.at(t, k) as f64 };

    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![ninf; t_len * s_len];
    let mut beta = vec![ninf; t_len * s_len];

    alpha[0] = lp(0, blank);
    if s_len > 1 {
        alpha[1] = lp(0, ext(1));
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let sym = ext(s);
            let mut a = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                a = log_add(a, alpha[(t - 1) * s_len + s - 1]);
            }
            if s >= 2 && sym != blank && sym != ext(s - 2) {
                a = log_add(a, alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + lp(t, sym) };
        }
    }
    let mut log_p = alpha[(t_len - 1) * s_len + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[(t_len - 1) * s_len + s_len - 2]);
    }

    if log_p == ninf {
        INFEASIBLE_CHUNKS.fetch_add(1, Ordering::Relaxed);
        return Ok(CtcLoss {
            loss: f64::INFINITY,
            grad: Mat::zeros(t_len, cols),
            infeasible: true,
        });
    }

    beta[(t_len - 1) * s_len + s_len - 1] = lp(t_len - 1, blank);
    if s_len > 1 {
        beta[(t_len - 1) * s_len + s_len - 2] = lp(t_len - 1, ext(s_len - 2));
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let sym = ext(s);
            let mut b = beta[(t + 1) * s_len + s];
            if s + 1 < s_len {
                b = log_add(b, beta[(t + 1) * s_len + s + 1]);
            }
            if s + 2 < s_len && ext(s + 2) != blank && sym != ext(s + 2) {
                b = log_add(b, beta[(t + 1) * s_len + s + 2]);
            }
            beta[t * s_len + s] = if b == ninf { ninf } else { b + lp(t, sym) };
        }
    }

    // dLoss/d lp(t,k) = −exp(logsumexp_{s: l'_s = k}(α+β) − lp(t,k) − log P).
    let mut grad = Mat::zeros(t_len, cols);
    for t in 0..t_len {
        // Accumulate per-symbol occupancy in log space.
        let mut occ = vec![ninf; cols];
        for s in 0..s_len {
            let ab = alpha[t * s_len + s];
            let bb = beta[t * s_len + s];
            if ab == ninf || bb == ninf {
                continue;
            }
            let sym = ext(s);
            occ[sym] = log_add(occ[sym], ab + bb - lp(t, sym));
        }
        let row = grad.row_mut(t);
        for k in 0..cols {
            if occ[k] > ninf {
                row[k] = -((occ[k] - log_p).exp()) as f32;
            }
        }
    }
    Ok(CtcLoss { loss: -log_p, grad, infeasible: false })
}

/// One decoded token with its contributing frame span (inclusive).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedToken {
    pub id: usize,
    pub first_frame: usize,
    pub last_frame: usize,
}

impl DecodedToken {
    pub fn start_seconds(&self, hop_seconds: f64) -> f64 {
        self.first_frame as f64 * hop_seconds
    }
    pub fn end_seconds(&self, hop_seconds: f64) -> f64 {
        (self.last_frame + 1) as f64 * hop_seconds
    }
}

/// Best-path decoding: per-frame argmax, collapse repeats, drop blanks.
/// Ties resolve to the lowest symbol id, so decoding is deterministic.
pub fn ctc_greedy_decode(lattice: &PosteriorLattice) -> Vec<DecodedToken> {
    let mut out: Vec<DecodedToken> = Vec::new();
    let mut prev: Option<usize> = None;
    for t in 0..lattice.num_frames() {
        let row = lattice.log_probs.row(t);
        let mut best = 0usize;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        if best == lattice.blank_id {
            prev = None;
            continue;
        }
        if prev == Some(best) {
            out.last_mut().expect("run continues an emitted token").last_frame = t;
        } else {
            out.push(DecodedToken { id: best, first_frame: t, last_frame: t });
            prev = Some(best);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Lattice dump format: one JSON header line, then row-major LE f32 payload.
// ---------------------------------------------------------------------------

#[derive(serde::Serialize, serde::Deserialize)]
struct LatticeHeader {
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "V")]
    v: usize,
    blank_id: usize,
    hop_seconds: f64,
}

pub fn write_lattice(path: &Path, lattice: &PosteriorLattice) -> Result<(), CtcError> {
    let io = |source: std::io::Error| CtcError::Io { path: path.into(), source };
    let header = LatticeHeader {
        t: lattice.num_frames(),
        v: lattice.vocab_size(),
        blank_id: lattice.blank_id,
        hop_seconds: lattice.hop_seconds,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    serde_json::to_writer(&mut f, &header).map_err(|e| CtcError::Malformed(e.to_string()))?;
    f.write_all(b"\n").map_err(io)?;
    for &v in &lattice.log_probs.data {
        f.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    f.flush().map_err(io)
}

pub fn read_lattice(path: &Path) -> Result<PosteriorLattice, CtcError> {
    let io = |source: std::io::Error| CtcError::Io { path: path.into(), source };
    let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(io)?);
    let mut header_line = Vec::new();
    {
        use std::io::BufRead as _;
        f.read_until(b'\n', &mut header_line).map_err(io)?;
    }
    let header: LatticeHeader = serde_json::from_slice(&header_line)
        .map_err(|e| CtcError::Malformed(format!("header: {e}")))?;
    let cols = header.v + 1;
    let count = header
        .t
        .checked_mul(cols)
        .ok_or_else(|| CtcError::Malformed("size overflow".into()))?;
    let mut payload = vec![0u8; count * 4];
    f.read_exact(&mut payload)
        .map_err(|_| CtcError::Malformed("payload shorter than T·(V+1) floats".into()))?;
    let mut rest = [0u8; 1];
    if f.read(&mut rest).map_err(io)? != 0 {
        return Err(CtcError::Malformed("trailing bytes after payload".into()));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let lattice =
        PosteriorLattice::new(Mat::from_vec(header.t, cols, data), header.blank_id, header.hop_seconds)?;
    lattice.check_normalized()?;
    Ok(lattice)
}
