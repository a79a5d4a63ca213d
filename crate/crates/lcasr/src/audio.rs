//! Audio ingestion and feature extraction: strict 16-bit PCM mono 16 kHz WAV
//! IO, JSON-Lines manifests with word timestamps, log-mel spectrograms,
//! noise mixing at a target SNR, and partitioning recordings into training
//! chunks by word midpoint.

use crate::tensor::Mat;
use crate::tokenizer::Vocabulary;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: not a RIFF/WAVE file")]
    NotWav { path: PathBuf },
    #[error("{path}: truncated or malformed WAV ({0})", .what)]
    MalformedWav { path: PathBuf, what: String },
    #[error("{path}: unsupported WAV ({got}); only 16-bit PCM mono 16 kHz is accepted")]
    UnsupportedWav { path: PathBuf, got: String },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("empty sample buffer")]
    EmptyBuffer,
    #[error("buffer of {got} samples is shorter than one analysis window ({need})")]
    BufferTooShort { got: usize, need: usize },
    #[error("{0} signal has zero power")]
    ZeroPower(&'static str),
    #[error("chunk length must be positive, got {0}")]
    BadChunkSeconds(f64),
    #[error("recording has no feature frames")]
    EmptyRecording,
    #[error("tokenizer error: {0}")]
    Tokenizer(#[from] crate::tokenizer::TokenizerError),
}

// ---------------------------------------------------------------------------
// WAV IO
// ---------------------------------------------------------------------------

fn u16_le(b: &[u8], at: usize) -> Option<u16> {
    b.get(at..at + 2).map(|s| u16::from_le_bytes([s[0], s[1]]))
}

fn u32_le(b: &[u8], at: usize) -> Option<u32> {
    b.get(at..at + 4).map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
}

/// Read a WAV file, accepting exactly one encoding: RIFF PCM, 16-bit,
/// mono, 16 kHz. Anything else is rejected with a description of what was
/// found; resampling and other codecs are deliberately out of scope.
pub fn read_wav(path: &Path) -> Result<Vec<f32>, AudioError> {
    let bytes = std::fs::read(path).map_err(|source| AudioError::Io { path: path.into(), source })?;
    let malformed = |what: &str| AudioError::MalformedWav { path: path.into(), what: what.into() };
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::NotWav { path: path.into() });
    }
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    let mut at = 12usize;
    while at + 8 <= bytes.len() {
        let id = &bytes[at..at + 4];
        let size = u32_le(&bytes, at + 4).ok_or_else(|| malformed("chunk header"))? as usize;
        let body_start = at + 8;
        let body_end = body_start.checked_add(size).ok_or_else(|| malformed("chunk size"))?;
        if body_end > bytes.len() {
            return Err(malformed("chunk extends past end of file"));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(malformed("fmt chunk too small"));
                }
                fmt = Some((
                    u16_le(&bytes, body_start).unwrap(),
                    u16_le(&bytes, body_start + 2).unwrap(),
                    u32_le(&bytes, body_start + 4).unwrap(),
                    u16_le(&bytes, body_start + 14).unwrap(),
                ));
            }
            b"data" => data = Some(&bytes[body_start..body_end]),
            _ => {}
        }
        // Chunks are word-aligned: odd sizes carry a pad byte.
        at = body_end + (size & 1);
    }
    let (format, channels, rate, bits) = fmt.ok_or_else(|| malformed("missing fmt chunk"))?;
    if format != 1 || channels != 1 || rate != SAMPLE_RATE || bits != 16 {
        return Err(AudioError::UnsupportedWav {
            path: path.into(),
            got: format!(
                "format {format}, {channels} ch, {rate} Hz, {bits} bit"
            ),
        });
    }
    let data = data.ok_or_else(|| malformed("missing data chunk"))?;
    if data.len() % 2 != 0 {
        return Err(malformed("data chunk has odd byte length"));
    }
    Ok(data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
        .collect())
}

/// Write samples as 16-bit PCM mono 16 kHz WAV. Values are clamped to
/// [−1, 1] before quantization.
pub fn write_wav(path: &Path, samples: &[f32]) -> Result<(), AudioError> {
    let io = |source: std::io::Error| AudioError::Io { path: path.into(), source };
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + samples.len() * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&out).map_err(io)
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

/// One word with its time span in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Word {
    pub w: String,
    pub s: f64,
    pub e: f64,
}

impl Word {
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.s + self.e)
    }
}

/// One manifest line as stored on disk; `audio` is a path relative to the
/// manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub audio: String,
    pub text: String,
    pub words: Vec<Word>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

/// A fully loaded recording: samples in memory plus transcript metadata.
#[derive(Debug, Clone)]
pub struct Recording {
    pub id: String,
    pub samples: Vec<f32>,
    pub transcript: String,
    pub words: Vec<Word>,
    pub group: Option<String>,
}

impl Recording {
    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }
}

fn validate_words(words: &[Word], duration: Option<f64>, line: usize) -> Result<(), AudioError> {
    let mut prev_start = 0.0f64;
    for (i, w) in words.iter().enumerate() {
        if w.s < 0.0 || w.e < w.s {
            return Err(AudioError::Manifest {
                line,
                msg: format!("word {i} ('{}') has end {} < start {}", w.w, w.e, w.s),
            });
        }
        if w.s < prev_start {
            return Err(AudioError::Manifest {
                line,
                msg: format!("word {i} ('{}') starts at {} before previous word {}", w.w, w.s, prev_start),
            });
        }
        prev_start = w.s;
        if let Some(d) = duration {
            if w.e > d + 1e-6 {
                return Err(AudioError::Manifest {
                    line,
                    msg: format!("word {i} ('{}') ends at {} past recording end {d}", w.w, w.e),
                });
            }
        }
    }
    Ok(())
}

/// Parse a manifest without touching the referenced audio. Paths in the
/// result are resolved against the manifest's directory.
pub fn load_manifest_entries(path: &Path) -> Result<Vec<(ManifestEntry, PathBuf)>, AudioError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| AudioError::Io { path: path.into(), source })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(raw)
            .map_err(|e| AudioError::Manifest { line, msg: e.to_string() })?;
        validate_words(&entry.words, None, line)?;
        let audio = base.join(&entry.audio);
        out.push((entry, audio));
    }
    Ok(out)
}

/// Load a manifest and all referenced audio. Word timestamps are checked
/// against the actual recording duration.
pub fn load_manifest(path: &Path) -> Result<Vec<Recording>, AudioError> {
    let mut out = Vec::new();
    for (i, (entry, audio)) in load_manifest_entries(path)?.into_iter().enumerate() {
        let samples = read_wav(&audio)?;
        let duration = samples.len() as f64 / SAMPLE_RATE as f64;
        validate_words(&entry.words, Some(duration), i + 1)?;
        out.push(Recording {
            id: entry.id,
            samples,
            transcript: entry.text,
            words: entry.words,
            group: entry.group,
        });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), AudioError> {
    let io = |source: std::io::Error| AudioError::Io { path: path.into(), source };
    let mut f = std::fs::File::create(path).map_err(io)?;
    for e in entries {
        let line = serde_json::to_string(e).expect("manifest entries serialize");
        writeln!(f, "{line}").map_err(io)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Log-mel spectrograms
// ---------------------------------------------------------------------------

/// Feature extraction parameters. Defaults: 80 mel bins, 25 ms Hann window,
/// 10 ms hop, natural log with floor 1e−10.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MelConfig {
    pub mel_bins: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig { mel_bins: 80, win_ms: 25.0, hop_ms: 10.0, log_floor: 1e-10 }
    }
}

impl MelConfig {
    pub fn win_length(&self) -> usize {
        (SAMPLE_RATE as f64 * self.win_ms / 1000.0).round() as usize
    }
    pub fn hop_length(&self) -> usize {
        (SAMPLE_RATE as f64 * self.hop_ms / 1000.0).round() as usize
    }
    pub fn fft_size(&self) -> usize {
        self.win_length().next_power_of_two()
    }
    pub fn hop_seconds(&self) -> f64 {
        self.hop_ms / 1000.0
    }
}

#[derive(Debug, Clone)]
pub struct Spectrogram {
    /// [num_frames × mel_bins] natural-log mel energies.
    pub frames: Mat,
    pub hop_seconds: f64,
    pub mel_bins: usize,
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the triangular mel filters between 0 Hz and
/// Nyquist: uniformly spaced break points in mel scale.
pub fn mel_filter_centers_hz(mel_bins: usize) -> Vec<f64> {
    let lo = hz_to_mel(0.0);
    let hi = hz_to_mel(SAMPLE_RATE as f64 / 2.0);
    (1..=mel_bins)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (mel_bins + 1) as f64))
        .collect()
}

/// Sparse triangular filterbank: per mel bin, the first FFT bin it covers
/// and the weights over the covered bins.
fn build_filterbank(cfg: &MelConfig) -> Vec<(usize, Vec<f64>)> {
    let fft = cfg.fft_size();
    let n_bins = fft / 2 + 1;
    let hz_per_bin = SAMPLE_RATE as f64 / fft as f64;
    let lo = hz_to_mel(0.0);
    let hi = hz_to_mel(SAMPLE_RATE as f64 / 2.0);
    let points: Vec<f64> = (0..cfg.mel_bins + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.mel_bins + 1) as f64))
        .collect();
    (0..cfg.mel_bins)
        .map(|m| {
            let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
            let mut start = None;
            let mut weights = Vec::new();
            for j in 0..n_bins {
                let f = j as f64 * hz_per_bin;
                let w = if f >= left && f <= center && center > left {
                    (f - left) / (center - left)
                } else if f > center && f <= right && right > center {
                    (right - f) / (right - center)
                } else {
                    0.0
                };
                if w > 0.0 {
                    if start.is_none() {
                        start = Some(j);
                    }
                    weights.push(w);
                } else if start.is_some() {
                    break;
                }
            }
            (start.unwrap_or(0), weights)
        })
        .collect()
}

/// Compute a log-mel spectrogram. Frame count is
/// floor((num_samples − win) / hop) + 1; each cell is the natural log of
/// (mel energy + floor).
pub fn log_mel(samples: &[f32], cfg: &MelConfig) -> Result<Spectrogram, AudioError> {
    if samples.is_empty() {
        return Err(AudioError::EmptyBuffer);
    }
    let win = cfg.win_length();
    let hop = cfg.hop_length();
    if samples.len() < win {
        return Err(AudioError::BufferTooShort { got: samples.len(), need: win });
    }
    let fft_size = cfg.fft_size();
    let num_frames = (samples.len() - win) / hop + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(fft_size);
    let mut scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];
    let mut buf = vec![Complex::default(); fft_size];
    // Periodic Hann window.
    let window: Vec<f64> = (0..win)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / win as f64).cos())
        .collect();
    let filters = build_filterbank(cfg);
    let mut frames = Mat::zeros(num_frames, cfg.mel_bins);
    let mut power = vec![0.0f64; fft_size / 2 + 1];
    for t in 0..num_frames {
        let start = t * hop;
        for i in 0..fft_size {
            buf[i] = if i < win {
                Complex::new(samples[start + i] as f64 * window[i], 0.0)
            } else {
                Complex::default()
            };
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (j, p) in power.iter_mut().enumerate() {
            *p = buf[j].norm_sqr();
        }
        let row = frames.row_mut(t);
        for (m, (start_bin, weights)) in filters.iter().enumerate() {
            let mut e = 0.0f64;
            for (off, &w) in weights.iter().enumerate() {
                e += w * power[start_bin + off];
            }
            row[m] = (e + cfg.log_floor).ln() as f32;
        }
    }
    Ok(Spectrogram { frames, hop_seconds: cfg.hop_seconds(), mel_bins: cfg.mel_bins })
}

// ---------------------------------------------------------------------------
// Noise mixing
// ---------------------------------------------------------------------------

fn mean_power(x: &[f32]) -> f64 {
    x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len().max(1) as f64
}

/// Add `noise` to `clean`, scaled so the result has the requested
/// signal-to-noise ratio. Noise shorter than the clean signal is tiled.
pub fn mix_noise_at_snr(clean: &[f32], noise: &[f32], snr_db: f64) -> Result<Vec<f32>, AudioError> {
    if clean.is_empty() {
        return Err(AudioError::EmptyBuffer);
    }
    if noise.is_empty() {
        return Err(AudioError::ZeroPower("noise"));
    }
    let tiled: Vec<f32> = noise.iter().cycle().take(clean.len()).copied().collect();
    let p_clean = mean_power(clean);
    let p_noise = mean_power(&tiled);
    if p_clean == 0.0 {
        return Err(AudioError::ZeroPower("clean"));
    }
    if p_noise == 0.0 {
        return Err(AudioError::ZeroPower("noise"));
    }
    // Solve 10·log10(P_clean / (g²·P_noise)) = snr_db for the amplitude gain g.
    let gain = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    Ok(clean
        .iter()
        .zip(&tiled)
        .map(|(&c, &n)| c + (gain * n as f64) as f32)
        .collect())
}

/// SNR in dB of `mixed` against the clean reference (noise = mixed − clean).
pub fn measure_snr(clean: &[f32], mixed: &[f32]) -> f64 {
    let p_clean = mean_power(clean);
    let p_noise = clean
        .iter()
        .zip(mixed)
        .map(|(&c, &m)| ((m - c) as f64).powi(2))
        .sum::<f64>()
        / clean.len().max(1) as f64;
    10.0 * (p_clean / p_noise).log10()
}

// ---------------------------------------------------------------------------
// Chunking
// ---------------------------------------------------------------------------

/// A training example cut from one recording.
#[derive(Debug, Clone)]
pub struct TrainChunk {
    pub features: Mat,
    pub targets: Vec<usize>,
    pub recording_id: String,
    pub start_seconds: f64,
}

/// Token ids for one word under the leading-space convention: every word is
/// encoded as " " + word, so targets compose identically no matter which
/// chunk a word lands in.
pub fn word_tokens(word: &str, vocab: &Vocabulary) -> Vec<usize> {
    vocab.encode(&format!(" {word}"))
}

/// Reference token sequence for a whole word list (same convention).
pub fn tokens_for_words(words: &[Word], vocab: &Vocabulary) -> Vec<usize> {
    words.iter().flat_map(|w| word_tokens(&w.w, vocab)).collect()
}

/// Partition a recording's features into consecutive chunks of
/// `chunk_seconds`, the last partial chunk retained. Each word belongs to
/// exactly one chunk: the one whose time span contains the word's midpoint.
pub fn chunk_recording(
    rec: &Recording,
    features: &Spectrogram,
    chunk_seconds: f64,
    vocab: &Vocabulary,
) -> Result<Vec<TrainChunk>, AudioError> {
    if chunk_seconds <= 0.0 {
        return Err(AudioError::BadChunkSeconds(chunk_seconds));
    }
    let total = features.frames.rows;
    if total == 0 {
        return Err(AudioError::EmptyRecording);
    }
    let frame_at = |t: f64| ((t / features.hop_seconds).round() as usize).min(total);
    let mut spans = Vec::new();
    let mut k = 0usize;
    loop {
        let f0 = frame_at(k as f64 * chunk_seconds);
        if f0 >= total {
            break;
        }
        let f1 = frame_at((k + 1) as f64 * chunk_seconds);
        spans.push((f0, f1.max(f0 + 1).min(total)));
        k += 1;
    }
    let num_chunks = spans.len();
    let mut chunk_words: Vec<Vec<&Word>> = vec![Vec::new(); num_chunks];
    for w in &rec.words {
        let idx = ((w.midpoint() / chunk_seconds).floor() as usize).min(num_chunks - 1);
        chunk_words[idx].push(w);
    }
    Ok(spans
        .into_iter()
        .zip(chunk_words)
        .enumerate()
        .map(|(k, ((f0, f1), words))| TrainChunk {
            features: features.frames.slice_rows(f0, f1),
            targets: words.iter().flat_map(|w| word_tokens(&w.w, vocab)).collect(),
            recording_id: rec.id.clone(),
            start_seconds: k as f64 * chunk_seconds,
        })
        .collect())
}
