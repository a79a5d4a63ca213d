//! Optimizer, gradient clipping, and the training loop.
//!
//! The loop consumes recordings in manifest order. Each recording is cut
//! into chunks of the current warmup length (growing per
//! [`crate::schedule::WarmupSchedule`]), chunks queue up, and whenever the
//! queue holds a full duration-capped batch an optimizer step runs:
//! forward, CTC loss, backward, global-norm clipping, parameter update.
//! Per-step metrics append to a CSV and checkpoints are written at a
//! configurable step interval plus once at the end. Everything is
//! deterministic under a fixed seed.

use std::collections::{BTreeMap, VecDeque};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use crate::audio::{chunk_recording, log_mel, AudioError, MelConfig, Recording};
use crate::checkpoint::{self, CheckpointError};
use crate::ctc::{ctc_loss, CtcError, PosteriorLattice};
use crate::encoder::{Encoder, EncoderError};
use crate::params::HasParams;
use crate::schedule::{cosine_lr, plan_batches, ScheduleError, WarmupSchedule};
use crate::tokenizer::Vocabulary;

/// Errors surfaced by training.
#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss at step {step}; last good checkpoint retained")]
    NonFiniteLoss { step: u64 },
    #[error("training data produced no usable chunks")]
    NoData,
}

/// Parameter-update rule. Implementations own their per-tensor state, keyed
/// by the model's parameter names, so the model itself stays plain data.
pub trait Optimizer {
    /// Apply one update from the accumulated gradients at learning rate `lr`.
    fn step(&mut self, model: &mut dyn HasParams, lr: f64);
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, model: &mut dyn HasParams, lr: f64) {
        self.t += 1;
        let Adam {
            beta1,
            beta2,
            eps,
            t,
            m,
            v,
        } = self;
        let bc1 = 1.0 - beta1.powi(*t as i32);
        let bc2 = 1.0 - beta2.powi(*t as i32);
        model.visit_params("", &mut |name, p| {
            let n = p.v.data.len();
            let mbuf = m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let vbuf = v.entry(name).or_insert_with(|| vec![0.0; n]);
            for i in 0..n {
                let g = p.g.data[i] as f64;
                let mi = *beta1 * mbuf[i] as f64 + (1.0 - *beta1) * g;
                let vi = *beta2 * vbuf[i] as f64 + (1.0 - *beta2) * g * g;
                mbuf[i] = mi as f32;
                vbuf[i] = vi as f32;
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + *eps);
                p.v.data[i] = (p.v.data[i] as f64 - update) as f32;
            }
        });
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm(model: &mut dyn HasParams, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    model.visit_params("", &mut |_, p| {
        for &g in &p.g.data {
            sq += g as f64 * g as f64;
        }
    });
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = (max_norm / norm) as f32;
        model.visit_params("", &mut |_, p| {
            for g in &mut p.g.data {
                *g *= scale;
            }
        });
    }
    norm
}

/// Knobs for one training run.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub warmup: WarmupSchedule,
    /// Total audio per batch never exceeds this many seconds.
    pub max_batch_duration: f64,
    pub epochs: usize,
    /// Stop after this many optimizer steps regardless of epochs.
    pub max_steps: Option<u64>,
    pub peak_lr: f64,
    pub lr_warmup_steps: u64,
    /// Horizon of the cosine decay. Steps past it would error, so callers
    /// set it at least as large as the planned step count.
    pub lr_total_steps: u64,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    pub seed: u64,
    /// Write `checkpoint-<step>.ckpt` every this many steps (0 = final only).
    pub checkpoint_interval: u64,
    pub out_dir: PathBuf,
    /// Sliding attention window in encoder frames, if any.
    pub window_frames: Option<usize>,
    pub mel: MelConfig,
}

/// Summary of a finished run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps: u64,
    pub last_loss: f64,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

struct MetricsLog {
    w: BufWriter<File>,
    path: PathBuf,
}

impl MetricsLog {
    fn create(path: PathBuf) -> Result<Self, TrainError> {
        let mut w = BufWriter::new(File::create(&path)?);
        writeln!(w, "step,recording_index,seq_seconds,batch_size,lr,loss")?;
        Ok(MetricsLog { w, path })
    }

    fn row(
        &mut self,
        step: u64,
        rec_idx: u64,
        seq: f64,
        batch: usize,
        lr: f64,
        loss: f64,
    ) -> Result<(), TrainError> {
        writeln!(self.w, "{step},{rec_idx},{seq},{batch},{lr},{loss}")?;
        Ok(())
    }
}

/// Train `model` on `recordings`, writing metrics and checkpoints under
/// `opts.out_dir` (which must exist).
pub fn train(
    model: &mut Encoder,
    vocab: &Vocabulary,
    recordings: &[Recording],
    opt: &mut dyn Optimizer,
    opts: &TrainOptions,
) -> Result<TrainReport, TrainError> {
    let mut metrics = MetricsLog::create(opts.out_dir.join("metrics.csv"))?;
    let final_path = opts.out_dir.join("model.ckpt");
    let factor = model.cfg.subsampling;
    let hop_out = opts.mel.hop_seconds() * factor as f64;

    // Features are length-independent, so compute them once per recording.
    let feats: Vec<_> = recordings
        .iter()
        .map(|r| log_mel(&r.samples, &opts.mel))
        .collect::<Result<_, _>>()?;

    let mut pending: VecDeque<(crate::audio::TrainChunk, f64)> = VecDeque::new();
    let mut rec_idx = 0u64; // full recordings consumed, drives the warmup
    let mut step = 0u64;
    let mut last_loss = f64::NAN;
    let mut stop = false;

    let run_step = |model: &mut Encoder,
                        opt: &mut dyn Optimizer,
                        batch: Vec<(crate::audio::TrainChunk, f64)>,
                        seq: f64,
                        rec_idx: u64,
                        step: &mut u64,
                        metrics: &mut MetricsLog|
     -> Result<f64, TrainError> {
        let xs: Vec<_> = batch.iter().map(|(c, _)| c.features.clone()).collect();
        let (logits, cache) = model.forward_train(&xs, opts.window_frames, *step, opts.seed)?;

        let mut feasible = 0usize;
        let mut total = 0.0f64;
        let mut grads = Vec::with_capacity(logits.len());
        for (lp, (chunk, _)) in logits.into_iter().zip(&batch) {
            let lattice = PosteriorLattice::new(lp, model.blank_id(), hop_out)?;
            let out = ctc_loss(&lattice, &chunk.targets)?;
            if out.infeasible {
                grads.push(out.grad); // zeros; the item drops out of the mean
            } else {
                feasible += 1;
                total += out.loss;
                grads.push(out.grad);
            }
        }
        let loss = if feasible > 0 {
            total / feasible as f64
        } else {
            f64::INFINITY
        };
        let lr = cosine_lr(
            (*step).min(opts.lr_total_steps),
            opts.lr_warmup_steps,
            opts.lr_total_steps,
            opts.peak_lr,
        )?;
        metrics.row(*step, rec_idx, seq, batch.len(), lr, loss)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step: *step });
        }

        let inv = 1.0 / feasible as f64;
        for g in &mut grads {
            g.scale(inv as f32);
        }
        model.zero_grad();
        model.backward_train(&cache, &grads, opts.window_frames)?;
        clip_grad_norm(model, opts.grad_clip);
        opt.step(model, lr);

        *step += 1;
        if opts.checkpoint_interval > 0 && step.is_multiple_of(opts.checkpoint_interval) {
            checkpoint::save(&opts.out_dir.join(format!("checkpoint-{step}.ckpt")), model)?;
        }
        Ok(loss)
    };

    'epochs: for _epoch in 0..opts.epochs {
        for (rec, feat) in recordings.iter().zip(&feats) {
            let seq = opts.warmup.length_at(rec_idx);
            for chunk in chunk_recording(rec, feat, seq, vocab)? {
                // Chunks shorter than one subsampling stride (tail slivers)
                // cannot produce an output frame; drop them.
                if chunk.features.rows >= factor {
                    pending.push_back((chunk, seq));
                }
            }
            rec_idx += 1;
            let plan = plan_batches(seq, opts.max_batch_duration)?;
            while pending.len() >= plan.batch_size {
                let batch: Vec<_> = pending.drain(..plan.batch_size).collect();
                last_loss = run_step(model, opt, batch, seq, rec_idx, &mut step, &mut metrics)?;
                if opts.max_steps.is_some_and(|m| step >= m) {
                    stop = true;
                    break 'epochs;
                }
            }
        }
    }

    // Flush whatever is left as final (possibly short) batches.
    if !stop {
        while !pending.is_empty() {
            let seq = opts.warmup.length_at(rec_idx);
            let plan = plan_batches(seq, opts.max_batch_duration)?;
            let take = plan.batch_size.min(pending.len());
            let batch: Vec<_> = pending.drain(..take).collect();
            last_loss = run_step(model, opt, batch, seq, rec_idx, &mut step, &mut metrics)?;
            if opts.max_steps.is_some_and(|m| step >= m) {
                break;
            }
        }
    }

    if step == 0 {
        return Err(TrainError::NoData);
    }
    metrics.w.flush()?;
    checkpoint::save(&final_path, model)?;
    Ok(TrainReport {
        steps: step,
        last_loss,
        metrics_path: metrics.path,
        checkpoint_path: final_path,
    })
}
