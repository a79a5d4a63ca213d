//! Sequence-length warmup, duration-capped batch planning, and the
//! learning-rate schedule.
//!
//! Training on very long recordings from scratch is unstable, so the chunk
//! length fed to the model grows over the course of training: starting from
//! `s0` seconds, the length at recording index `r` is
//!
//! ```text
//! s_r = min(s0 + s0 · 2^⌊r/n⌋, s_max)
//! ```
//!
//! i.e. it roughly doubles every `n` recordings until it saturates at
//! `s_max`. Batches are planned so the total audio per batch never exceeds a
//! fixed duration cap: doubling the sequence length halves the batch size.

/// Errors from schedule construction and evaluation.
#[derive(Debug, thiserror::Error)]
pub enum ScheduleError {
    #[error("warmup requires s0 > 0, n >= 1, s_max >= s0 (got s0={s0}, n={n}, s_max={s_max})")]
    BadWarmup { s0: f64, n: u64, s_max: f64 },
    #[error("sequence length {seq}s exceeds the batch duration cap {cap}s")]
    SeqExceedsCap { seq: f64, cap: f64 },
    #[error("warmup_steps {warmup} exceeds total_steps {total}")]
    WarmupExceedsTotal { warmup: u64, total: u64 },
    #[error("step {step} is past total_steps {total}")]
    StepOutOfRange { step: u64, total: u64 },
}

/// Growth plan for the training chunk length.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct WarmupSchedule {
    /// Initial chunk length in seconds.
    pub s0: f64,
    /// Recordings per growth stage.
    pub n: u64,
    /// Saturation length in seconds.
    pub s_max: f64,
}

impl WarmupSchedule {
    pub fn new(s0: f64, n: u64, s_max: f64) -> Result<Self, ScheduleError> {
        if !(s0 > 0.0) || n < 1 || !(s_max >= s0) {
            return Err(ScheduleError::BadWarmup { s0, n, s_max });
        }
        Ok(Self { s0, n, s_max })
    }

    /// Chunk length in seconds for recording index `r`.
    ///
    /// The exponential term overflows to infinity for enormous `r`, which
    /// the final `min` resolves to `s_max`.
    pub fn length_at(&self, r: u64) -> f64 {
        let stage = (r / self.n) as f64;
        (self.s0 + self.s0 * stage.exp2()).min(self.s_max)
    }
}

/// One step's batch geometry under the duration cap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchPlan {
    /// Chunk length in seconds for every item in the batch.
    pub seq_seconds: f64,
    /// Number of chunks per batch.
    pub batch_size: usize,
    /// The cap the plan was made under.
    pub max_batch_duration: f64,
}

/// Plan the largest batch whose total audio fits the duration cap.
pub fn plan_batches(seq_seconds: f64, max_batch_duration: f64) -> Result<BatchPlan, ScheduleError> {
    if !(seq_seconds > 0.0) || seq_seconds > max_batch_duration {
        return Err(ScheduleError::SeqExceedsCap {
            seq: seq_seconds,
            cap: max_batch_duration,
        });
    }
    let batch_size = (max_batch_duration / seq_seconds).floor() as usize;
    Ok(BatchPlan {
        seq_seconds,
        batch_size,
        max_batch_duration,
    })
}

/// Linear warmup to `peak_lr` over `warmup_steps`, then cosine decay to zero
/// at `total_steps`.
pub fn cosine_lr(
    step: u64,
    warmup_steps: u64,
    total_steps: u64,
    peak_lr: f64,
) -> Result<f64, ScheduleError> {
    if warmup_steps > total_steps {
        return Err(ScheduleError::WarmupExceedsTotal {
            warmup: warmup_steps,
            total: total_steps,
        });
    }
    if step > total_steps {
        return Err(ScheduleError::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    if step < warmup_steps {
        return Ok(peak_lr * step as f64 / warmup_steps as f64);
    }
    let denom = (total_steps - warmup_steps) as f64;
    let progress = if denom > 0.0 {
        (step - warmup_steps) as f64 / denom
    } else {
        0.0
    };
    Ok(peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
