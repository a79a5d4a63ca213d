//! Flat run configuration shared by every CLI subcommand.
//!
//! One JSON document, one flat namespace: model shape, feature extraction,
//! schedule, training, decoding, evaluation, toy-corpus synthesis, and bench
//! parameters all live at the top level. Unknown keys are rejected so a typo
//! fails loudly instead of silently running defaults. Every run serializes
//! its fully-resolved configuration next to its outputs, and re-running from
//! that snapshot reproduces the run (all floats round-trip exactly).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::MelConfig;
use crate::encoder::ModelConfig;
use crate::eval::{ConcatOptions, DistractorOptions, DistractorSource};
use crate::longform::{Scheme, WindowPlan};
use crate::posenc::SchemeKind;
use crate::schedule::WarmupSchedule;
use crate::toyset::{CueRule, ToySpec};

/// Environment variable consulted for the default output root when a config
/// does not set `out_dir`. This is the only environment the tool reads.
pub const OUT_ROOT_ENV: &str = "LCASR_OUT_ROOT";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config file {path} is not valid: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Every tunable in one flat document. Missing keys take the defaults below;
/// unknown keys are an error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // --- model shape ---
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub subsampling: usize,
    pub conv_kernel: usize,
    pub pos_enc: SchemeKind,
    pub rotary_theta: f64,
    /// Sliding attention window in seconds; null means full attention.
    pub attention_window_seconds: Option<f64>,
    /// BPE vocabulary size target when a tokenizer is trained from scratch.
    pub vocab_size: usize,

    // --- feature extraction ---
    pub mel_bins: usize,
    pub mel_win_ms: f64,
    pub mel_hop_ms: f64,

    // --- sequence-length warmup & batching ---
    pub warmup_start_seconds: f64,
    /// Number of recordings after which the warmup length doubles.
    pub warmup_double_every: u64,
    pub warmup_max_seconds: f64,
    /// Ceiling on total audio seconds per batch (batch size × sequence
    /// length never exceeds this).
    pub max_batch_seconds: f64,

    // --- training ---
    pub epochs: usize,
    pub max_steps: Option<u64>,
    pub peak_lr: f64,
    pub lr_warmup_steps: u64,
    /// Cosine-decay horizon in steps; defaults to `max_steps` when unset.
    pub lr_total_steps: Option<u64>,
    pub grad_clip: f64,
    /// Write an intermediate checkpoint every N steps (0 = final only).
    pub checkpoint_interval: u64,

    // --- decoding / evaluation ---
    pub scheme: Scheme,
    pub decode_window_seconds: f64,
    pub stride_ratio: f64,
    pub central_ratio: f64,
    /// Segment length for fragmented (utterance-style) decoding.
    pub segment_seconds: f64,
    /// Errors within this distance of a cut count as boundary errors.
    pub boundary_margin_seconds: f64,
    pub distractor_source: DistractorSource,
    pub real_context_seconds: f64,
    pub scoring_seconds: f64,
    pub total_seconds: f64,
    /// Attention window while scoring distractor assemblies; null = full.
    pub distractor_attention_seconds: Option<f64>,
    /// Spliced context kept on each side in concatenation evals.
    pub concat_pad_seconds: f64,

    // --- toy corpus synthesis ---
    pub toy_vocab_words: usize,
    pub toy_tones_per_token: usize,
    pub toy_utterances: usize,
    pub toy_words_per_utterance: usize,
    pub toy_lead_silence_seconds: f64,
    pub toy_noise_snr_db: Option<f64>,
    /// Number of spelling pairs sharing one sound (0 disables the cue rule).
    pub toy_cue_pairs: usize,
    pub toy_ambiguous_after_seconds: f64,
    pub toy_ambiguous_rate: f64,
    pub toy_cue_seconds: f64,

    // --- benches ---
    pub bench_seq_seconds: Vec<f64>,
    /// Sequence lengths (rows) for the raw attention-kernel bench.
    pub bench_lengths: Vec<usize>,
    /// Bench forward+backward instead of forward only.
    pub bench_train_mode: bool,
    /// Configurations whose estimated peak exceeds this are reported as OOM
    /// rows instead of being run.
    pub mem_budget_bytes: u64,

    // --- io ---
    pub manifest: Option<PathBuf>,
    /// Separate-pool manifest for cross-dataset distractors.
    pub pool_manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub tokenizer: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            layers: 2,
            width: 64,
            heads: 2,
            subsampling: 8,
            conv_kernel: 9,
            pos_enc: SchemeKind::Rotary,
            rotary_theta: 1.5e6,
            attention_window_seconds: None,
            vocab_size: 512,
            mel_bins: 80,
            mel_win_ms: 25.0,
            mel_hop_ms: 10.0,
            warmup_start_seconds: 5.12,
            warmup_double_every: 5000,
            warmup_max_seconds: 3600.0,
            max_batch_seconds: 3600.0,
            epochs: 1,
            max_steps: None,
            peak_lr: 3e-3,
            lr_warmup_steps: 500,
            lr_total_steps: None,
            grad_clip: 1.0,
            checkpoint_interval: 0,
            scheme: Scheme::Swa,
            decode_window_seconds: 60.0,
            stride_ratio: 0.125,
            central_ratio: 0.75,
            segment_seconds: 10.0,
            boundary_margin_seconds: 1.0,
            distractor_source: DistractorSource::NoContext,
            real_context_seconds: 20.0,
            scoring_seconds: 20.0,
            total_seconds: 3600.0,
            distractor_attention_seconds: None,
            concat_pad_seconds: 60.0,
            toy_vocab_words: 8,
            toy_tones_per_token: 2,
            toy_utterances: 20,
            toy_words_per_utterance: 40,
            toy_lead_silence_seconds: 0.2,
            toy_noise_snr_db: None,
            toy_cue_pairs: 0,
            toy_ambiguous_after_seconds: 60.0,
            toy_ambiguous_rate: 0.3,
            toy_cue_seconds: 1.0,
            bench_seq_seconds: vec![60.0, 240.0, 960.0],
            bench_lengths: vec![1024, 4096, 16384],
            bench_train_mode: false,
            mem_budget_bytes: 2 << 30,
            manifest: None,
            pool_manifest: None,
            checkpoint: None,
            tokenizer: None,
            out_dir: None,
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Parse a config file, rejecting unknown keys.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        serde_json::from_str(&text)
            .map_err(|e| ConfigError::Parse { path: path.to_path_buf(), msg: e.to_string() })
    }

    /// Serialize the fully-resolved document next to the run's outputs.
    pub fn write_resolved(&self, out_dir: &Path) -> Result<PathBuf, ConfigError> {
        let path = out_dir.join("config.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| ConfigError::Parse {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        fs::write(&path, text)
            .map_err(|source| ConfigError::Io { path: path.clone(), source })?;
        Ok(path)
    }

    /// Output directory for a run: the explicit `out_dir` key, else
    /// `<root>/<subcommand>` where the root comes from the environment (or
    /// "." without it).
    pub fn resolve_out_dir(&self, subcommand: &str, env_root: Option<&str>) -> PathBuf {
        match &self.out_dir {
            Some(d) => d.clone(),
            None => PathBuf::from(env_root.unwrap_or(".")).join(subcommand),
        }
    }

    pub fn mel(&self) -> MelConfig {
        MelConfig {
            mel_bins: self.mel_bins,
            win_ms: self.mel_win_ms,
            hop_ms: self.mel_hop_ms,
            ..Default::default()
        }
    }

    /// Seconds → encoder output frames for the attention window.
    pub fn window_frames(&self) -> Option<usize> {
        self.attention_window_seconds.map(|s| {
            let out_hop = self.mel().hop_seconds() * self.subsampling as f64;
            ((s / out_hop).round() as usize).max(1)
        })
    }

    /// Model shape for a given (tokenizer-determined) vocabulary size.
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            width: self.width,
            heads: self.heads,
            subsampling: self.subsampling,
            conv_kernel: self.conv_kernel,
            pos_enc: self.pos_enc,
            rotary_theta: self.rotary_theta,
            window_frames: self.window_frames(),
            vocab_size,
            mel_bins: self.mel_bins,
        }
    }

    pub fn warmup(&self) -> Result<WarmupSchedule, ConfigError> {
        WarmupSchedule::new(
            self.warmup_start_seconds,
            self.warmup_double_every,
            self.warmup_max_seconds,
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn window_plan(&self) -> Result<WindowPlan, ConfigError> {
        WindowPlan::new(
            self.scheme,
            self.decode_window_seconds,
            self.stride_ratio,
            self.central_ratio,
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Cosine horizon: explicit key, else `max_steps`.
    pub fn resolved_lr_total_steps(&self) -> Result<u64, ConfigError> {
        self.lr_total_steps.or(self.max_steps).ok_or_else(|| {
            ConfigError::Invalid("set lr_total_steps or max_steps to bound the lr decay".into())
        })
    }

    pub fn distractor_options(&self) -> DistractorOptions {
        DistractorOptions {
            source: self.distractor_source,
            real_context_seconds: self.real_context_seconds,
            scoring_seconds: self.scoring_seconds,
            total_seconds: self.total_seconds,
            attention_seconds: self.distractor_attention_seconds,
            seed: self.seed,
        }
    }

    pub fn concat_options(&self) -> ConcatOptions {
        ConcatOptions {
            pad_seconds: self.concat_pad_seconds,
            attention_seconds: self.attention_window_seconds,
            seed: self.seed,
        }
    }

    pub fn toy_spec(&self) -> ToySpec {
        ToySpec {
            vocab_words: self.toy_vocab_words,
            tones_per_token: self.toy_tones_per_token,
            utterances: self.toy_utterances,
            words_per_utterance: self.toy_words_per_utterance,
            lead_silence_seconds: self.toy_lead_silence_seconds,
            noise_snr_db: self.toy_noise_snr_db,
            cue_rule: (self.toy_cue_pairs > 0).then(|| CueRule {
                pairs: self.toy_cue_pairs,
                ambiguous_after_seconds: self.toy_ambiguous_after_seconds,
                ambiguous_rate: self.toy_ambiguous_rate,
                cue_seconds: self.toy_cue_seconds,
            }),
            seed: self.seed,
        }
    }

    /// A path key that the subcommand cannot run without.
    pub fn require(&self, field: &'static str) -> Result<&Path, ConfigError> {
        let v = match field {
            "manifest" => &self.manifest,
            "pool_manifest" => &self.pool_manifest,
            "checkpoint" => &self.checkpoint,
            "tokenizer" => &self.tokenizer,
            other => panic!("unknown required field '{other}'"),
        };
        v.as_deref()
            .ok_or_else(|| ConfigError::Invalid(format!("this subcommand requires the '{field}' key")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_yields_defaults() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.subsampling, 8);
        assert!(cfg.max_steps.is_none());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"laysers": 4}"#).unwrap_err();
        assert!(err.to_string().contains("laysers"), "{err}");
    }

    #[test]
    fn resolved_snapshot_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.peak_lr = 1.9e-3; // not exactly representable; exercises float round-trip
        cfg.attention_window_seconds = Some(16.2);
        cfg.manifest = Some(PathBuf::from("corpus/manifest.jsonl"));
        let snap = cfg.write_resolved(dir.path()).unwrap();
        let back = RunConfig::load(&snap).unwrap();
        assert_eq!(back, cfg);
        // and the snapshot of the snapshot is byte-identical
        let dir2 = tempfile::tempdir().unwrap();
        let snap2 = back.write_resolved(dir2.path()).unwrap();
        assert_eq!(fs::read(&snap).unwrap(), fs::read(&snap2).unwrap());
    }

    #[test]
    fn missing_file_error_names_the_path() {
        let err = RunConfig::load(Path::new("/nonexistent/run.json")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/run.json"), "{err}");
    }

    #[test]
    fn out_dir_resolution_prefers_explicit_key_then_env_root() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.resolve_out_dir("train", None), PathBuf::from("./train"));
        assert_eq!(
            cfg.resolve_out_dir("train", Some("/data/runs")),
            PathBuf::from("/data/runs/train")
        );
        cfg.out_dir = Some(PathBuf::from("/explicit"));
        assert_eq!(cfg.resolve_out_dir("train", Some("/data/runs")), PathBuf::from("/explicit"));
    }

    #[test]
    fn window_frames_converts_seconds_at_the_output_rate() {
        let mut cfg = RunConfig::default();
        cfg.subsampling = 8;
        cfg.attention_window_seconds = Some(10.0);
        // 10 ms hop × 8 = 80 ms per output frame
        assert_eq!(cfg.window_frames(), Some(125));
        cfg.attention_window_seconds = None;
        assert_eq!(cfg.window_frames(), None);
    }

    #[test]
    fn toy_spec_carries_the_cue_rule_only_when_pairs_positive() {
        let mut cfg = RunConfig::default();
        assert!(cfg.toy_spec().cue_rule.is_none());
        cfg.toy_cue_pairs = 2;
        let spec = cfg.toy_spec();
        assert_eq!(spec.cue_rule.unwrap().pairs, 2);
    }
}
