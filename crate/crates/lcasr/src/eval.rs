//! Scoring harness: text normalization, word error rate with a deterministic
//! alignment, and the long-context probes (fragmentation, distractor padding,
//! recording concatenation, in-context repetition).
//!
//! All probes share one scoring path: decode to a posterior lattice, collapse
//! the best path into timed words, normalize, and align against the reference.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{log_mel, AudioError, MelConfig, Recording, Spectrogram, SAMPLE_RATE};
use crate::ctc::{ctc_greedy_decode, CtcError, PosteriorLattice};
use crate::encoder::{Encoder, EncoderError};
use crate::longform::{
    decode_longform, seconds_to_aligned_frames, swa_decode, LongformError, WindowPlan,
};
use crate::tensor::Mat;
use crate::tokenizer::Vocabulary;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    Longform(#[from] LongformError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad options: {0}")]
    BadOptions(String),
    #[error("distractor pool is empty")]
    EmptyPool,
    #[error("pool recording '{id}' is {seconds:.2}s, shorter than one {need:.2}s segment")]
    ShortPoolSegment { id: String, seconds: f64, need: f64 },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
}

// ---------------------------------------------------------------------------
// Text normalization
// ---------------------------------------------------------------------------

/// Canonical scoring form: lowercase, punctuation stripped (apostrophes
/// survive so contractions stay whole), whitespace collapsed to single
/// spaces. Idempotent by construction.
pub fn normalize_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.to_lowercase().chars() {
        if c.is_whitespace() {
            pending_space = !out.is_empty();
        } else if c.is_alphanumeric() || c == '\'' {
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            out.push(c);
        }
        // everything else: punctuation, dropped outright
    }
    out
}

/// Normalized word list of a transcript.
pub fn normalize_words(text: &str) -> Vec<String> {
    normalize_text(text).split_whitespace().map(str::to_owned).collect()
}

// ---------------------------------------------------------------------------
// Alignment and error counts
// ---------------------------------------------------------------------------

/// One step of a reference/hypothesis alignment. Indices address the word
/// lists handed to [`align_words`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditOp {
    Match { r: usize, h: usize },
    Substitute { r: usize, h: usize },
    Insert { h: usize },
    Delete { r: usize },
}

/// Word-level Levenshtein alignment with unit costs. Among equal-cost
/// alignments the backtrace is deterministic: match, then substitution,
/// then insertion, then deletion.
pub fn align_words<R: AsRef<str>, H: AsRef<str>>(reference: &[R], hypothesis: &[H]) -> Vec<EditOp> {
    let nr = reference.len();
    let nh = hypothesis.len();
    let w = nh + 1;
    let mut d = vec![0u32; (nr + 1) * w];
    for j in 0..=nh {
        d[j] = j as u32;
    }
    for i in 1..=nr {
        d[i * w] = i as u32;
        for j in 1..=nh {
            let sub_cost = u32::from(reference[i - 1].as_ref() != hypothesis[j - 1].as_ref());
            let via_diag = d[(i - 1) * w + j - 1] + sub_cost;
            let via_ins = d[i * w + j - 1] + 1;
            let via_del = d[(i - 1) * w + j] + 1;
            d[i * w + j] = via_diag.min(via_ins).min(via_del);
        }
    }

    let mut ops = Vec::with_capacity(nr.max(nh));
    let (mut i, mut j) = (nr, nh);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        let equal = i > 0 && j > 0 && reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
        if i > 0 && j > 0 && equal && d[(i - 1) * w + j - 1] == here {
            ops.push(EditOp::Match { r: i - 1, h: j - 1 });
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && !equal && d[(i - 1) * w + j - 1] + 1 == here {
            ops.push(EditOp::Substitute { r: i - 1, h: j - 1 });
            i -= 1;
            j -= 1;
        } else if j > 0 && d[i * w + j - 1] + 1 == here {
            ops.push(EditOp::Insert { h: j - 1 });
            j -= 1;
        } else {
            ops.push(EditOp::Delete { r: i - 1 });
            i -= 1;
        }
    }
    ops.reverse();
    ops
}

/// Substitution/insertion/deletion tallies over some reference span.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub substitutions: u64,
    pub insertions: u64,
    pub deletions: u64,
    pub ref_words: u64,
}

impl ErrorCounts {
    pub fn from_ops(ops: &[EditOp], ref_words: u64) -> Self {
        let mut c = ErrorCounts { ref_words, ..Default::default() };
        for op in ops {
            match op {
                EditOp::Match { .. } => {}
                EditOp::Substitute { .. } => c.substitutions += 1,
                EditOp::Insert { .. } => c.insertions += 1,
                EditOp::Delete { .. } => c.deletions += 1,
            }
        }
        c
    }

    pub fn errors(&self) -> u64 {
        self.substitutions + self.insertions + self.deletions
    }

    /// Error rate with a floor-of-one denominator, so an empty reference
    /// against a non-empty hypothesis still yields a finite (insertion-only)
    /// rate instead of a division by zero.
    pub fn wer(&self) -> f64 {
        self.errors() as f64 / self.ref_words.max(1) as f64
    }

    pub fn add(&mut self, other: &ErrorCounts) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.ref_words += other.ref_words;
    }
}

/// Aggregate scoring result: overall counts plus a per-group breakdown whose
/// sums always reproduce the totals.
#[derive(Debug, Default, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: ErrorCounts,
    pub groups: BTreeMap<String, ErrorCounts>,
    /// Set when a scored pair had an empty reference but a non-empty
    /// hypothesis; the reported rate is then insertions over one.
    pub empty_reference: bool,
}

impl EvalReport {
    pub fn wer(&self) -> f64 {
        self.total.wer()
    }

    /// Fold one scored pair into the report under an optional group label.
    pub fn absorb(&mut self, group: Option<&str>, counts: &ErrorCounts, hyp_words: usize) {
        self.total.add(counts);
        if let Some(g) = group {
            self.groups.entry(g.to_owned()).or_default().add(counts);
        }
        if counts.ref_words == 0 && hyp_words > 0 {
            self.empty_reference = true;
        }
    }

    pub fn merge(&mut self, other: &EvalReport) {
        self.total.add(&other.total);
        for (g, c) in &other.groups {
            self.groups.entry(g.clone()).or_default().add(c);
        }
        self.empty_reference |= other.empty_reference;
    }
}

/// Decode every recording with the given long-form plan and score each
/// hypothesis against the recording's transcript, grouping rows by the
/// recordings' `group` labels.
pub fn eval_recordings(
    model: &mut Encoder,
    vocab: &Vocabulary,
    recordings: &[Recording],
    mel: &MelConfig,
    plan: &WindowPlan,
) -> Result<EvalReport, EvalError> {
    let mut report = EvalReport::default();
    for rec in recordings {
        let feats = log_mel(&rec.samples, mel)?;
        let lattice = decode_longform(model, &feats, plan)?;
        let hyp: Vec<String> = lattice_to_words(&lattice, vocab)
            .iter()
            .flat_map(|w| normalize_words(&w.word))
            .collect();
        let refs = normalize_words(&rec.transcript);
        let ops = align_words(&refs, &hyp);
        let counts = ErrorCounts::from_ops(&ops, refs.len() as u64);
        report.absorb(rec.group.as_deref(), &counts, hyp.len());
    }
    Ok(report)
}

/// Score one hypothesis transcript against one reference transcript.
pub fn wer(reference: &str, hypothesis: &str) -> EvalReport {
    let r = normalize_words(reference);
    let h = normalize_words(hypothesis);
    let ops = align_words(&r, &h);
    let counts = ErrorCounts::from_ops(&ops, r.len() as u64);
    let mut report = EvalReport::default();
    report.absorb(None, &counts, h.len());
    report
}

/// CSV rendering of a report: one `all` row plus one row per group, with the
/// run's scheme/context/seed stamped on every row.
pub fn report_csv(scheme: &str, context_seconds: f64, seed: u64, report: &EvalReport) -> String {
    let mut out = String::from("scheme,context_seconds,group,wer,S,I,D,N,seed\n");
    let mut row = |group: &str, c: &ErrorCounts| {
        writeln!(
            out,
            "{scheme},{context_seconds},{group},{:.6},{},{},{},{},{seed}",
            c.wer(),
            c.substitutions,
            c.insertions,
            c.deletions,
            c.ref_words
        )
        .expect("string write");
    };
    row("all", &report.total);
    for (g, c) in &report.groups {
        row(g, c);
    }
    out
}

// ---------------------------------------------------------------------------
// Hypothesis extraction: lattice -> timed words
// ---------------------------------------------------------------------------

/// One decoded word with the time span of the tokens that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct HypWord {
    pub word: String,
    pub start_seconds: f64,
    pub end_seconds: f64,
}

/// Best-path decode followed by word assembly: a token whose piece begins
/// with a space opens a new word; other pieces extend the current one. Word
/// spans cover their constituent tokens' frames.
pub fn lattice_to_words(lattice: &PosteriorLattice, vocab: &Vocabulary) -> Vec<HypWord> {
    let hop = lattice.hop_seconds;
    let mut words: Vec<HypWord> = Vec::new();
    let mut buf: Vec<u8> = Vec::new();
    let mut span: Option<(f64, f64)> = None;

    let flush = |buf: &mut Vec<u8>, span: &mut Option<(f64, f64)>, words: &mut Vec<HypWord>| {
        if let Some((s, e)) = span.take() {
            let text = String::from_utf8_lossy(buf).into_owned();
            // A piece can span a space after aggressive merges; split so every
            // emitted word is space-free.
            for part in text.split_whitespace() {
                words.push(HypWord { word: part.to_owned(), start_seconds: s, end_seconds: e });
            }
        }
        buf.clear();
    };

    for tok in ctc_greedy_decode(lattice) {
        let Some(piece) = vocab.piece(tok.id) else { continue };
        let (ts, te) = (tok.start_seconds(hop), tok.end_seconds(hop));
        if piece.first() == Some(&b' ') {
            flush(&mut buf, &mut span, &mut words);
        }
        buf.extend_from_slice(piece);
        span = Some(match span {
            Some((s, e)) => (s.min(ts), e.max(te)),
            None => (ts, te),
        });
    }
    flush(&mut buf, &mut span, &mut words);
    words
}

/// Decode a row range of a lattice in isolation (used when only a window of a
/// longer decode is scored). Word times are relative to the range start.
pub fn words_from_rows(
    lattice: &PosteriorLattice,
    row_start: usize,
    row_end: usize,
    vocab: &Vocabulary,
) -> Result<Vec<HypWord>, EvalError> {
    let slice = lattice.log_probs.slice_rows(row_start, row_end.min(lattice.num_frames()));
    let sub = PosteriorLattice::new(slice, lattice.blank_id, lattice.hop_seconds)?;
    Ok(lattice_to_words(&sub, vocab))
}

/// Reference words whose midpoints fall in `[start, end)` seconds.
pub fn ref_words_in_span(words: &[crate::audio::Word], start: f64, end: f64) -> Vec<String> {
    words
        .iter()
        .filter(|w| w.midpoint() >= start && w.midpoint() < end)
        .flat_map(|w| normalize_words(&w.w))
        .collect()
}

fn hyp_text(words: &[HypWord]) -> Vec<String> {
    words.iter().flat_map(|w| normalize_words(&w.word)).collect()
}

/// Decode features with either masked attention (`Some(window_seconds)`) or
/// full attention (`None`).
fn decode_features(
    model: &mut Encoder,
    feats: &Spectrogram,
    window_seconds: Option<f64>,
) -> Result<PosteriorLattice, EvalError> {
    match window_seconds {
        Some(w) => Ok(swa_decode(model, feats, w)?),
        None => {
            let logits = model.forward_eval(&feats.frames, None)?;
            let hop = feats.hop_seconds * model.cfg.subsampling as f64;
            Ok(PosteriorLattice::new(logits, model.blank_id(), hop)?)
        }
    }
}

// ---------------------------------------------------------------------------
// Fragmentation probe: hard segmentation vs. one continuous pass
// ---------------------------------------------------------------------------

/// Evenly spaced interior cut points for a recording of `duration_seconds`.
pub fn even_boundaries(duration_seconds: f64, segment_seconds: f64) -> Vec<f64> {
    let mut cuts = Vec::new();
    let mut t = segment_seconds;
    while t < duration_seconds {
        cuts.push(t);
        t += segment_seconds;
    }
    cuts
}

/// One distance-from-boundary histogram bin (1 s wide).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FragBin {
    /// Exclusive upper edge of the bin in seconds from the nearest cut.
    pub upper_seconds: f64,
    pub errors: u64,
    pub ref_words: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FragmentationReport {
    pub segmented: ErrorCounts,
    pub continuous: ErrorCounts,
    /// Errors of the segmented decode bucketed by distance to the nearest
    /// segment boundary.
    pub bins: Vec<FragBin>,
    pub boundary_errors: u64,
    pub boundary_words: u64,
    pub interior_errors: u64,
    pub interior_words: u64,
}

impl FragmentationReport {
    pub fn wer_segmented(&self) -> f64 {
        self.segmented.wer()
    }
    pub fn wer_continuous(&self) -> f64 {
        self.continuous.wer()
    }
    /// Errors per reference word within the boundary margin.
    pub fn boundary_density(&self) -> f64 {
        self.boundary_errors as f64 / self.boundary_words.max(1) as f64
    }
    pub fn interior_density(&self) -> f64 {
        self.interior_errors as f64 / self.interior_words.max(1) as f64
    }
}

/// Timed, normalized reference words of a recording.
fn timed_ref_words(rec: &Recording) -> Vec<(String, f64)> {
    rec.words
        .iter()
        .flat_map(|w| {
            let mid = w.midpoint();
            normalize_words(&w.w).into_iter().map(move |t| (t, mid))
        })
        .collect()
}

/// Align timed hypothesis words against timed reference words and report the
/// counts plus a time for every error (reference midpoint for substitutions
/// and deletions, hypothesis midpoint for insertions).
fn timed_alignment(
    refs: &[(String, f64)],
    hyps: &[HypWord],
) -> (ErrorCounts, Vec<f64>) {
    let ref_texts: Vec<&str> = refs.iter().map(|(w, _)| w.as_str()).collect();
    let hyp_norm: Vec<(String, f64)> = hyps
        .iter()
        .flat_map(|w| {
            let mid = 0.5 * (w.start_seconds + w.end_seconds);
            normalize_words(&w.word).into_iter().map(move |t| (t, mid))
        })
        .collect();
    let hyp_texts: Vec<&str> = hyp_norm.iter().map(|(w, _)| w.as_str()).collect();
    let ops = align_words(&ref_texts, &hyp_texts);
    let counts = ErrorCounts::from_ops(&ops, ref_texts.len() as u64);
    let mut times = Vec::new();
    for op in &ops {
        match op {
            EditOp::Match { .. } => {}
            EditOp::Substitute { r, .. } | EditOp::Delete { r } => times.push(refs[*r].1),
            EditOp::Insert { h } => times.push(hyp_norm[*h].1),
        }
    }
    (counts, times)
}

fn nearest_cut_distance(t: f64, cuts: &[f64]) -> f64 {
    cuts.iter().map(|c| (t - c).abs()).fold(f64::INFINITY, f64::min)
}

/// Compare hard segmentation (each segment decoded in isolation) against one
/// continuous masked-attention pass over the same recording, and localize the
/// segmented decode's errors relative to the cut points.
pub fn fragmentation_compare(
    model: &mut Encoder,
    vocab: &Vocabulary,
    rec: &Recording,
    mel: &MelConfig,
    boundaries_seconds: &[f64],
    context_seconds: f64,
    boundary_margin_seconds: f64,
) -> Result<FragmentationReport, EvalError> {
    let feats = log_mel(&rec.samples, mel)?;
    let ss = model.cfg.subsampling;
    let t_in = feats.frames.rows;

    // Snap cut points onto subsampling-aligned feature frames so segment
    // lattices concatenate into exactly the continuous decode's geometry.
    let mut cuts_f: Vec<usize> = boundaries_seconds
        .iter()
        .map(|&s| seconds_to_aligned_frames(s, feats.hop_seconds, ss).min(t_in))
        .collect();
    cuts_f.sort_unstable();
    cuts_f.dedup();
    cuts_f.retain(|&c| c > 0 && c < t_in);

    // Segmented decode: independent full-attention passes per segment.
    let vocab_cols = model.cfg.vocab_size + 1;
    let mut seg_rows = Mat::zeros(t_in.div_ceil(ss), vocab_cols);
    let mut row = 0usize;
    let mut prev = 0usize;
    for &cut in cuts_f.iter().chain(std::iter::once(&t_in)) {
        let slice = feats.frames.slice_rows(prev, cut);
        let logits = model.forward_eval(&slice, None)?;
        for j in 0..logits.rows {
            seg_rows.row_mut(row + j).copy_from_slice(logits.row(j));
        }
        row += logits.rows;
        prev = cut;
    }
    debug_assert_eq!(row, seg_rows.rows);
    let hop_out = feats.hop_seconds * ss as f64;
    let seg_lattice = PosteriorLattice::new(seg_rows, model.blank_id(), hop_out)?;
    let cont_lattice = swa_decode(model, &feats, context_seconds)?;

    let refs = timed_ref_words(rec);
    let seg_words = lattice_to_words(&seg_lattice, vocab);
    let cont_words = lattice_to_words(&cont_lattice, vocab);
    let (seg_counts, err_times) = timed_alignment(&refs, &seg_words);
    let (cont_counts, _) = timed_alignment(&refs, &cont_words);

    // Histogram distances are measured to the snapped cuts actually used.
    let cuts_s: Vec<f64> = cuts_f.iter().map(|&c| c as f64 * feats.hop_seconds).collect();
    let max_d = refs
        .iter()
        .map(|(_, t)| nearest_cut_distance(*t, &cuts_s))
        .chain(err_times.iter().map(|&t| nearest_cut_distance(t, &cuts_s)))
        .fold(0.0f64, f64::max);
    let nbins = if cuts_s.is_empty() { 1 } else { (max_d.floor() as usize + 1).max(1) };
    let mut bins: Vec<FragBin> =
        (0..nbins).map(|i| FragBin { upper_seconds: (i + 1) as f64, errors: 0, ref_words: 0 }).collect();
    let bin_of = |t: f64| -> usize {
        if cuts_s.is_empty() {
            0
        } else {
            (nearest_cut_distance(t, &cuts_s).floor() as usize).min(nbins - 1)
        }
    };
    let mut report = FragmentationReport {
        segmented: seg_counts,
        continuous: cont_counts,
        bins: Vec::new(),
        boundary_errors: 0,
        boundary_words: 0,
        interior_errors: 0,
        interior_words: 0,
    };
    for (_, t) in &refs {
        bins[bin_of(*t)].ref_words += 1;
        let near = !cuts_s.is_empty() && nearest_cut_distance(*t, &cuts_s) <= boundary_margin_seconds;
        if near {
            report.boundary_words += 1;
        } else {
            report.interior_words += 1;
        }
    }
    for &t in &err_times {
        bins[bin_of(t)].errors += 1;
        let near = !cuts_s.is_empty() && nearest_cut_distance(t, &cuts_s) <= boundary_margin_seconds;
        if near {
            report.boundary_errors += 1;
        } else {
            report.interior_errors += 1;
        }
    }
    report.bins = bins;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Distractor probe: fixed-length assemblies around each scoring window
// ---------------------------------------------------------------------------

/// Where distractor padding is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistractorSource {
    /// Zero-valued feature frames.
    NoContext,
    /// Segments of the recording being scored.
    WithinRecording,
    /// Segments of other recordings in the same dataset.
    WithinDataset,
    /// Segments of a separate pool dataset.
    CrossDataset,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistractorOptions {
    pub source: DistractorSource,
    /// Real acoustic context kept on each side of the scoring window.
    pub real_context_seconds: f64,
    /// Length of each scoring window (and of one distractor segment).
    pub scoring_seconds: f64,
    /// Every assembly is padded to exactly this length.
    pub total_seconds: f64,
    /// Attention window for the decode; `None` means full attention.
    pub attention_seconds: Option<f64>,
    pub seed: u64,
}

impl Default for DistractorOptions {
    fn default() -> Self {
        DistractorOptions {
            source: DistractorSource::NoContext,
            real_context_seconds: 20.0,
            scoring_seconds: 20.0,
            total_seconds: 3600.0,
            attention_seconds: None,
            seed: 0,
        }
    }
}

/// One logged sampling decision: which pool recording padded which side of
/// which scoring window, and from what offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistractorPick {
    pub recording: String,
    pub window: usize,
    pub side: String,
    pub pool_id: String,
    pub offset_frames: usize,
    pub rows: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistractorReport {
    pub report: EvalReport,
    pub windows: u64,
    /// Complete sampling log; identical runs replay identical picks.
    pub picks: Vec<DistractorPick>,
}

/// Frame-domain geometry of one assembly, exposed separately so the layout
/// can be validated without running a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AssemblyLayout {
    /// Scoring-window span in original-recording feature frames.
    pub window: (usize, usize),
    /// Real-context span (window plus kept neighbors) in recording frames.
    pub real: (usize, usize),
    /// Frames of distractor padding on each side.
    pub left_pad: usize,
    pub right_pad: usize,
    /// Scoring-window span within the assembly, in feature frames.
    pub scored: (usize, usize),
    pub total_frames: usize,
}

/// Compute the assembly geometry for scoring window `k` of a recording with
/// `t_in` feature frames. The scored window always starts at the same
/// subsampling-aligned offset, real context is clamped at the recording
/// edges, and padding tops both sides up to exactly `total_frames`.
pub fn assembly_layout(
    t_in: usize,
    k: usize,
    w_f: usize,
    ctx_f: usize,
    total_frames: usize,
    ss: usize,
) -> Result<AssemblyLayout, EvalError> {
    let align = |x: usize| (x / ss) * ss;
    let f0 = k * w_f;
    if f0 >= t_in {
        return Err(EvalError::BadOptions(format!("window {k} starts past the recording")));
    }
    let f1 = (f0 + w_f).min(t_in);
    let left_target = align((total_frames.saturating_sub(w_f)) / 2);
    if left_target < ctx_f {
        return Err(EvalError::BadOptions(
            "total length leaves no room for the real context".into(),
        ));
    }
    let left_real = ctx_f.min(f0);
    let right_real = ctx_f.min(t_in - f1);
    let left_pad = left_target - left_real;
    let used = left_target + (f1 - f0) + right_real;
    if used > total_frames {
        return Err(EvalError::BadOptions(
            "total length shorter than window plus real context".into(),
        ));
    }
    Ok(AssemblyLayout {
        window: (f0, f1),
        real: (f0 - left_real, f1 + right_real),
        left_pad,
        right_pad: total_frames - used,
        scored: (left_target, left_target + (f1 - f0)),
        total_frames,
    })
}

fn validate_pool(pool: &[&Spectrogram], ids: &[&str], chunk: usize) -> Result<(), EvalError> {
    if pool.is_empty() {
        return Err(EvalError::EmptyPool);
    }
    for (sp, id) in pool.iter().zip(ids) {
        if sp.frames.rows < chunk {
            return Err(EvalError::ShortPoolSegment {
                id: (*id).to_owned(),
                seconds: sp.frames.rows as f64 * sp.hop_seconds,
                need: chunk as f64 * sp.hop_seconds,
            });
        }
    }
    Ok(())
}

/// Copy `need` rows of distractor material into `dst` starting at `dst_row`,
/// drawn as random fixed-length segments from the pool (sliced to fit).
#[allow(clippy::too_many_arguments)]
fn fill_distractors(
    dst: &mut Mat,
    mut dst_row: usize,
    mut need: usize,
    pool: &[&Spectrogram],
    ids: &[&str],
    chunk: usize,
    side: &str,
    window: usize,
    rec_id: &str,
    rng: &mut ChaCha8Rng,
    picks: &mut Vec<DistractorPick>,
) {
    while need > 0 {
        let p = rng.gen_range(0..pool.len());
        let src = &pool[p].frames;
        let off = rng.gen_range(0..=src.rows - chunk);
        let take = chunk.min(need);
        for j in 0..take {
            dst.row_mut(dst_row + j).copy_from_slice(src.row(off + j));
        }
        picks.push(DistractorPick {
            recording: rec_id.to_owned(),
            window,
            side: side.to_owned(),
            pool_id: ids[p].to_owned(),
            offset_frames: off,
            rows: take,
        });
        dst_row += take;
        need -= take;
    }
}

/// Build the assembly for one layout: distractor padding, real context, and
/// the scored window, whose frames are copied verbatim from the recording.
#[allow(clippy::too_many_arguments)]
fn build_assembly(
    feats: &Spectrogram,
    layout: &AssemblyLayout,
    pool: &[&Spectrogram],
    ids: &[&str],
    chunk: usize,
    window: usize,
    rec_id: &str,
    rng: &mut ChaCha8Rng,
    picks: &mut Vec<DistractorPick>,
) -> Mat {
    let mut asm = Mat::zeros(layout.total_frames, feats.frames.cols);
    let (r0, r1) = layout.real;
    let real_dst = layout.scored.0 - (layout.window.0 - r0);
    for j in 0..(r1 - r0) {
        asm.row_mut(real_dst + j).copy_from_slice(feats.frames.row(r0 + j));
    }
    if !pool.is_empty() {
        fill_distractors(&mut asm, 0, layout.left_pad, pool, ids, chunk, "left", window, rec_id, rng, picks);
        let right_start = real_dst + (r1 - r0);
        fill_distractors(&mut asm, right_start, layout.right_pad, pool, ids, chunk, "right", window, rec_id, rng, picks);
    }
    asm
}

/// Score every fixed-length window of every recording inside a constant-size
/// assembly whose padding comes from the requested source. Only the window's
/// own output frames are scored.
pub fn distractor_eval(
    model: &mut Encoder,
    vocab: &Vocabulary,
    dataset: &[Recording],
    cross_pool: &[Recording],
    opts: &DistractorOptions,
    mel: &MelConfig,
) -> Result<DistractorReport, EvalError> {
    if opts.scoring_seconds <= 0.0 || opts.total_seconds < opts.scoring_seconds {
        return Err(EvalError::BadOptions("need 0 < scoring_seconds <= total_seconds".into()));
    }
    let ss = model.cfg.subsampling;
    let hop = mel.hop_seconds();
    let w_f = seconds_to_aligned_frames(opts.scoring_seconds, hop, ss);
    let ctx_f = if opts.real_context_seconds > 0.0 {
        seconds_to_aligned_frames(opts.real_context_seconds, hop, ss)
    } else {
        0
    };
    let total_frames = (opts.total_seconds / hop).round() as usize;

    let feats: Vec<Spectrogram> =
        dataset.iter().map(|r| log_mel(&r.samples, mel)).collect::<Result<_, _>>()?;
    let cross_feats: Vec<Spectrogram> =
        cross_pool.iter().map(|r| log_mel(&r.samples, mel)).collect::<Result<_, _>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = EvalReport::default();
    let mut picks = Vec::new();
    let mut windows = 0u64;

    for (ri, rec) in dataset.iter().enumerate() {
        // Assemble this recording's padding pool.
        let (pool, ids): (Vec<&Spectrogram>, Vec<&str>) = match opts.source {
            DistractorSource::NoContext => (Vec::new(), Vec::new()),
            DistractorSource::WithinRecording => (vec![&feats[ri]], vec![rec.id.as_str()]),
            DistractorSource::WithinDataset => {
                let mut p = Vec::new();
                let mut n = Vec::new();
                for (rj, other) in dataset.iter().enumerate() {
                    if rj != ri || dataset.len() == 1 {
                        p.push(&feats[rj]);
                        n.push(other.id.as_str());
                    }
                }
                (p, n)
            }
            DistractorSource::CrossDataset => (
                cross_feats.iter().collect(),
                cross_pool.iter().map(|r| r.id.as_str()).collect(),
            ),
        };
        if opts.source != DistractorSource::NoContext {
            validate_pool(&pool, &ids, w_f)?;
        }

        let t_in = feats[ri].frames.rows;
        let num_windows = t_in.div_ceil(w_f.max(1));
        for k in 0..num_windows {
            let layout = assembly_layout(t_in, k, w_f, ctx_f, total_frames, ss)?;
            let asm = build_assembly(
                &feats[ri], &layout, &pool, &ids, w_f, k, &rec.id, &mut rng, &mut picks,
            );
            let asm_spect =
                Spectrogram { frames: asm, hop_seconds: hop, mel_bins: feats[ri].mel_bins };
            let lattice = decode_features(model, &asm_spect, opts.attention_seconds)?;
            let (s0, s1) = layout.scored;
            let hyp = words_from_rows(&lattice, s0 / ss, s1.div_ceil(ss), vocab)?;
            let t0 = layout.window.0 as f64 * hop;
            let t1 = layout.window.1 as f64 * hop;
            let refs = ref_words_in_span(&rec.words, t0, t1);
            let ops = align_words(&refs, &hyp_text(&hyp));
            let counts = ErrorCounts::from_ops(&ops, refs.len() as u64);
            report.absorb(rec.group.as_deref(), &counts, hyp.len());
            windows += 1;
        }
    }
    Ok(DistractorReport { report, windows, picks })
}

// ---------------------------------------------------------------------------
// Concatenation probe: unrelated neighbors around a whole recording
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConcatOptions {
    /// Padding added on each side, in seconds (snapped to aligned frames).
    pub pad_seconds: f64,
    /// Attention window for the decode; `None` means full attention.
    pub attention_seconds: Option<f64>,
    pub seed: u64,
}

/// Decode each recording with other recordings spliced before and after it,
/// scoring only the original recording's own output frames.
pub fn concat_eval(
    model: &mut Encoder,
    vocab: &Vocabulary,
    dataset: &[Recording],
    opts: &ConcatOptions,
    mel: &MelConfig,
) -> Result<EvalReport, EvalError> {
    let ss = model.cfg.subsampling;
    let hop = mel.hop_seconds();
    let pad_f = if opts.pad_seconds > 0.0 {
        seconds_to_aligned_frames(opts.pad_seconds, hop, ss)
    } else {
        0
    };
    let feats: Vec<Spectrogram> =
        dataset.iter().map(|r| log_mel(&r.samples, mel)).collect::<Result<_, _>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = EvalReport::default();

    for (ri, rec) in dataset.iter().enumerate() {
        let t_in = feats[ri].frames.rows;
        let mut asm = Mat::zeros(pad_f + t_in + pad_f, feats[ri].frames.cols);
        for j in 0..t_in {
            asm.row_mut(pad_f + j).copy_from_slice(feats[ri].frames.row(j));
        }
        if pad_f > 0 {
            // Splice whole other recordings until each side is covered, then
            // keep the frames adjacent to the original.
            let fill = |dst_start: usize, keep_tail: bool, rng: &mut ChaCha8Rng, asm: &mut Mat| {
                let mut rows: Vec<usize> = Vec::new();
                let mut total = 0usize;
                while total < pad_f {
                    let pick = if dataset.len() > 1 {
                        let mut p = rng.gen_range(0..dataset.len());
                        while p == ri {
                            p = rng.gen_range(0..dataset.len());
                        }
                        p
                    } else {
                        ri
                    };
                    rows.push(pick);
                    total += feats[pick].frames.rows.max(1);
                }
                // Lay the picks out and slice the window nearest the splice.
                let mut flat = Mat::zeros(total, asm.cols);
                let mut at = 0usize;
                for &p in &rows {
                    let f = &feats[p].frames;
                    for j in 0..f.rows {
                        flat.row_mut(at + j).copy_from_slice(f.row(j));
                    }
                    at += f.rows;
                }
                let src0 = if keep_tail { total - pad_f } else { 0 };
                for j in 0..pad_f {
                    asm.row_mut(dst_start + j).copy_from_slice(flat.row(src0 + j));
                }
            };
            fill(0, true, &mut rng, &mut asm);
            fill(pad_f + t_in, false, &mut rng, &mut asm);
        }
        let asm_spect = Spectrogram { frames: asm, hop_seconds: hop, mel_bins: feats[ri].mel_bins };
        let lattice = decode_features(model, &asm_spect, opts.attention_seconds)?;
        let hyp = words_from_rows(&lattice, pad_f / ss, (pad_f + t_in).div_ceil(ss), vocab)?;
        let refs = normalize_words(&rec.transcript);
        let ops = align_words(&refs, &hyp_text(&hyp));
        let counts = ErrorCounts::from_ops(&ops, refs.len() as u64);
        report.absorb(rec.group.as_deref(), &counts, hyp.len());
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// In-context repetition probe
// ---------------------------------------------------------------------------

/// Manifest row for one repetition item: audio laid out as a cue region, a
/// filler region, then the target region whose hard word is scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InContextEntry {
    pub id: String,
    pub audio: String,
    pub target_word: String,
    /// Where the filler begins — equivalently, where the cue region ends.
    #[serde(rename = "sB_start")]
    pub sb_start: f64,
    #[serde(rename = "sA_start")]
    pub sa_start: f64,
    #[serde(rename = "sA_end")]
    pub sa_end: f64,
}

/// One loaded repetition item.
#[derive(Debug, Clone)]
pub struct InContextItem {
    pub id: String,
    pub samples: Vec<f32>,
    pub target_word: String,
    pub sb_start: f64,
    pub sa: (f64, f64),
}

pub fn write_incontext_manifest(path: &Path, entries: &[InContextEntry]) -> Result<(), EvalError> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).expect("entry serializes"));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_incontext_manifest(path: &Path) -> Result<Vec<InContextItem>, EvalError> {
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let file = fs::File::open(path)?;
    let mut items = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: InContextEntry = serde_json::from_str(&line)
            .map_err(|err| EvalError::Manifest { line: i + 1, msg: err.to_string() })?;
        if !(0.0 <= e.sb_start && e.sb_start <= e.sa_start && e.sa_start < e.sa_end) {
            return Err(EvalError::Manifest {
                line: i + 1,
                msg: format!(
                    "need 0 <= sB_start <= sA_start < sA_end, got {} / {} / {}",
                    e.sb_start, e.sa_start, e.sa_end
                ),
            });
        }
        let samples = crate::audio::read_wav(&dir.join(&e.audio))?;
        let dur = samples.len() as f64 / SAMPLE_RATE as f64;
        if e.sa_end > dur + 1e-6 {
            return Err(EvalError::Manifest {
                line: i + 1,
                msg: format!("sA_end {} past audio end {dur:.3}", e.sa_end),
            });
        }
        items.push(InContextItem {
            id: e.id,
            samples,
            target_word: e.target_word,
            sb_start: e.sb_start,
            sa: (e.sa_start, e.sa_end),
        });
    }
    Ok(items)
}

/// Whether any hypothesis word overlapping `span` matches the normalized
/// target exactly.
pub fn span_hit(words: &[HypWord], target_norm: &str, span: (f64, f64)) -> bool {
    words.iter().any(|w| {
        w.start_seconds < span.1
            && w.end_seconds > span.0
            && normalize_text(&w.word) == target_norm
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InContextReport {
    pub items: u64,
    pub hits_full: u64,
    pub hits_no_repeat: u64,
    pub accuracy_full: f64,
    pub accuracy_no_repeat: f64,
}

/// Score each item twice: once on the full audio (cue present) and once with
/// the cue region removed. A hit is an exact normalized match of the target
/// word whose decoded time span intersects the target region.
pub fn in_context_score(
    model: &mut Encoder,
    vocab: &Vocabulary,
    items: &[InContextItem],
    mel: &MelConfig,
    attention_seconds: Option<f64>,
) -> Result<InContextReport, EvalError> {
    let mut hits_full = 0u64;
    let mut hits_no_repeat = 0u64;
    for item in items {
        let target = normalize_text(&item.target_word);
        if target.is_empty() {
            return Err(EvalError::BadOptions(format!(
                "item '{}' has an empty normalized target",
                item.id
            )));
        }
        let feats = log_mel(&item.samples, mel)?;
        let lattice = decode_features(model, &feats, attention_seconds)?;
        if span_hit(&lattice_to_words(&lattice, vocab), &target, item.sa) {
            hits_full += 1;
        }

        let cut = (item.sb_start * SAMPLE_RATE as f64).round() as usize;
        let cut = cut.min(item.samples.len());
        let shift = cut as f64 / SAMPLE_RATE as f64;
        let feats = log_mel(&item.samples[cut..], mel)?;
        let lattice = decode_features(model, &feats, attention_seconds)?;
        let span = (item.sa.0 - shift, item.sa.1 - shift);
        if span_hit(&lattice_to_words(&lattice, vocab), &target, span) {
            hits_no_repeat += 1;
        }
    }
    let n = items.len() as u64;
    Ok(InContextReport {
        items: n,
        hits_full,
        hits_no_repeat,
        accuracy_full: hits_full as f64 / n.max(1) as f64,
        accuracy_no_repeat: hits_no_repeat as f64 / n.max(1) as f64,
    })
}

/// Write a report CSV to disk.
pub fn write_report_csv(
    path: &Path,
    scheme: &str,
    context_seconds: f64,
    seed: u64,
    report: &EvalReport,
) -> Result<(), EvalError> {
    let mut f = fs::File::create(path)?;
    f.write_all(report_csv(scheme, context_seconds, seed, report).as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::Word;
    use crate::encoder::ModelConfig;
    use crate::longform::{buffered_decode, Scheme, WindowPlan};
    use crate::params::HasParams;

    // -- normalization ------------------------------------------------------

    #[test]
    fn normalization_lowercases_strips_and_collapses() {
        assert_eq!(normalize_text("Hello,  World!"), "hello world");
        assert_eq!(normalize_text("don't STOP."), "don't stop");
        assert_eq!(normalize_text("  a\tb\nc  "), "a b c");
        assert_eq!(normalize_text("!!!"), "");
    }

    #[test]
    fn normalization_is_idempotent_on_random_strings() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let alphabet: Vec<char> =
            "abC '.,!-_0 9\t".chars().collect();
        for _ in 0..200 {
            let n = rng.gen_range(0..24);
            let s: String = (0..n).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect();
            let once = normalize_text(&s);
            assert_eq!(normalize_text(&once), once, "not idempotent on {s:?}");
        }
    }

    // -- wer ----------------------------------------------------------------

    #[test]
    fn identical_transcripts_score_zero() {
        let r = wer("the quick brown fox", "The quick  brown fox!");
        assert_eq!(r.total.errors(), 0);
        assert_eq!(r.wer(), 0.0);
        assert!(!r.empty_reference);
    }

    #[test]
    fn one_substitution_in_three_words() {
        let r = wer("a b c", "a x c");
        assert_eq!(r.total.substitutions, 1);
        assert_eq!(r.total.insertions, 0);
        assert_eq!(r.total.deletions, 0);
        assert!((r.wer() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_hypothesis_deletes_everything() {
        let r = wer("a b", "");
        assert_eq!(r.total.deletions, 2);
        assert_eq!(r.wer(), 1.0);
        assert!(!r.empty_reference);
    }

    #[test]
    fn empty_reference_counts_insertions_over_one() {
        let r = wer("", "a b c");
        assert_eq!(r.total.ref_words, 0);
        assert_eq!(r.total.insertions, 3);
        assert_eq!(r.wer(), 3.0);
        assert!(r.empty_reference);
    }

    #[test]
    fn alignment_prefers_substitution_then_insertion_then_deletion() {
        // Two cost-2 alignments exist; the backtrace must pick the one whose
        // final step is a substitution.
        let ops = align_words(&["a"], &["b", "c"]);
        assert_eq!(ops, vec![EditOp::Insert { h: 0 }, EditOp::Substitute { r: 0, h: 1 }]);
        // A zero-cost match always wins over a same-cost detour.
        let ops = align_words(&["a", "b"], &["b"]);
        assert_eq!(ops, vec![EditOp::Delete { r: 0 }, EditOp::Match { r: 1, h: 0 }]);
    }

    /// Plain two-row edit distance, written independently of `align_words`.
    fn edit_distance_oracle(a: &[String], b: &[String]) -> u32 {
        let mut prev: Vec<u32> = (0..=b.len() as u32).collect();
        let mut cur = vec![0u32; b.len() + 1];
        for i in 1..=a.len() {
            cur[0] = i as u32;
            for j in 1..=b.len() {
                let c = u32::from(a[i - 1] != b[j - 1]);
                cur[j] = (prev[j - 1] + c).min(cur[j - 1] + 1).min(prev[j] + 1);
            }
            std::mem::swap(&mut prev, &mut cur);
        }
        prev[b.len()]
    }

    #[test]
    fn alignment_cost_matches_an_independent_oracle_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        let lexicon = ["a", "b", "c"];
        for _ in 0..1000 {
            let draw = |rng: &mut ChaCha8Rng| -> Vec<String> {
                let n = rng.gen_range(0..12);
                (0..n).map(|_| lexicon[rng.gen_range(0..3)].to_owned()).collect()
            };
            let (r, h) = (draw(&mut rng), draw(&mut rng));
            let ops = align_words(&r, &h);
            let counts = ErrorCounts::from_ops(&ops, r.len() as u64);
            assert_eq!(
                counts.errors() as u32,
                edit_distance_oracle(&r, &h),
                "ref={r:?} hyp={h:?}"
            );
        }
    }

    #[test]
    fn group_counts_sum_to_the_totals() {
        let mut report = EvalReport::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let groups = ["clean", "noisy", "far"];
        for _ in 0..30 {
            let c = ErrorCounts {
                substitutions: rng.gen_range(0..5),
                insertions: rng.gen_range(0..5),
                deletions: rng.gen_range(0..5),
                ref_words: rng.gen_range(1..20),
            };
            report.absorb(Some(groups[rng.gen_range(0..3)]), &c, 1);
        }
        let mut sum = ErrorCounts::default();
        for c in report.groups.values() {
            sum.add(c);
        }
        assert_eq!(sum, report.total);
    }

    #[test]
    fn report_csv_lists_all_then_each_group() {
        let mut report = EvalReport::default();
        report.absorb(Some("clean"), &ErrorCounts { substitutions: 1, insertions: 0, deletions: 0, ref_words: 4 }, 4);
        report.absorb(Some("noisy"), &ErrorCounts { substitutions: 0, insertions: 2, deletions: 1, ref_words: 6 }, 7);
        let csv = report_csv("buffered", 80.0, 13, &report);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "scheme,context_seconds,group,wer,S,I,D,N,seed");
        assert!(lines[1].starts_with("buffered,80,all,0.400000,1,2,1,10,13"));
        assert!(lines[2].contains(",clean,"));
        assert!(lines[3].contains(",noisy,"));
    }

    // -- lattice -> words ---------------------------------------------------

    /// A lattice that emits `ids` in order, one frame per token with a blank
    /// frame between repeats, using heavily peaked log-probs.
    fn lattice_for_ids(ids: &[usize], vocab: &Vocabulary) -> PosteriorLattice {
        let cols = vocab.size() + 1;
        let blank = vocab.blank_id();
        let mut rows: Vec<usize> = Vec::new();
        let mut prev = usize::MAX;
        for &id in ids {
            if id == prev {
                rows.push(blank);
            }
            rows.push(id);
            prev = id;
        }
        let mut m = Mat::zeros(rows.len(), cols);
        let lo = (1e-9f64 / (cols - 1) as f64).ln() as f32;
        let hi = 0.999_999_999f32.ln();
        for (t, &id) in rows.iter().enumerate() {
            for v in 0..cols {
                m.data[t * cols + v] = if v == id { hi } else { lo };
            }
        }
        PosteriorLattice::new(m, blank, 0.5).expect("valid lattice")
    }

    #[test]
    fn words_reassemble_from_leading_space_pieces_with_times() {
        let vocab = Vocabulary::train(&["hey you"], 260).expect("vocab");
        let ids: Vec<usize> = [crate::audio::word_tokens("hey", &vocab), crate::audio::word_tokens("you", &vocab)]
            .concat();
        let lattice = lattice_for_ids(&ids, &vocab);
        let words = lattice_to_words(&lattice, &vocab);
        let texts: Vec<&str> = words.iter().map(|w| w.word.as_str()).collect();
        assert_eq!(texts, vec!["hey", "you"]);
        assert!(words[0].start_seconds < words[0].end_seconds);
        assert!(words[0].end_seconds <= words[1].start_seconds + 1e-9);
        let n = lattice.num_frames() as f64;
        assert!(words[1].end_seconds <= n * 0.5 + 1e-9);
    }

    #[test]
    fn blank_only_lattice_yields_no_words() {
        let vocab = Vocabulary::train(&["hey you"], 260).expect("vocab");
        let cols = vocab.size() + 1;
        let mut m = Mat::zeros(6, cols);
        for t in 0..6 {
            for v in 0..cols {
                m.data[t * cols + v] = if v == vocab.blank_id() { -0.01 } else { -30.0 };
            }
        }
        let lattice = PosteriorLattice::new(m, vocab.blank_id(), 0.1).expect("valid");
        assert!(lattice_to_words(&lattice, &vocab).is_empty());
    }

    // -- shared toy fixtures --------------------------------------------------

    fn tone(freq: f64, seconds: f64) -> Vec<f32> {
        let n = (seconds * SAMPLE_RATE as f64) as usize;
        (0..n)
            .map(|i| (0.3 * (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin()) as f32)
            .collect()
    }

    /// A recording of pure-tone "words" with exact timestamps.
    fn tone_recording(id: &str, words: &[&str], group: Option<&str>) -> Recording {
        let dur = 0.25;
        let mut samples = Vec::new();
        let mut meta = Vec::new();
        for (i, w) in words.iter().enumerate() {
            let f = 300.0 + 137.0 * (w.bytes().map(|b| b as u64).sum::<u64>() % 7) as f64;
            samples.extend(tone(f, dur));
            meta.push(Word { w: (*w).to_owned(), s: i as f64 * dur, e: (i + 1) as f64 * dur });
        }
        Recording {
            id: id.to_owned(),
            samples,
            transcript: words.join(" "),
            words: meta,
            group: group.map(str::to_owned),
        }
    }

    fn tiny_model(vocab: &Vocabulary) -> Encoder {
        let cfg = ModelConfig {
            layers: 1,
            width: 8,
            heads: 2,
            subsampling: 4,
            conv_kernel: 9,
            pos_enc: crate::posenc::SchemeKind::NoPos,
            rotary_theta: 1.0e4,
            window_frames: None,
            vocab_size: vocab.size(),
            mel_bins: 16,
        };
        Encoder::new(cfg, 3).expect("model")
    }

    fn tiny_mel() -> MelConfig {
        MelConfig { mel_bins: 16, ..Default::default() }
    }

    fn zeroed(model: &mut Encoder) {
        model.visit_params("", &mut |_, p| p.v.data.fill(0.0));
    }

    // -- fragmentation ------------------------------------------------------

    #[test]
    fn even_boundaries_stop_before_the_end() {
        assert_eq!(even_boundaries(10.0, 3.0), vec![3.0, 6.0, 9.0]);
        assert_eq!(even_boundaries(6.0, 3.0), vec![3.0]);
        assert!(even_boundaries(2.0, 3.0).is_empty());
    }

    #[test]
    fn constant_model_scores_identically_segmented_and_continuous() {
        let vocab = Vocabulary::train(&["ba do ki"], 260).expect("vocab");
        let mut model = tiny_model(&vocab);
        zeroed(&mut model);
        let rec = tone_recording("r0", &["ba", "do", "ki", "ba"], None);
        let report = fragmentation_compare(
            &mut model, &vocab, &rec, &tiny_mel(), &[0.5], 0.4, 0.2,
        )
        .expect("fragmentation");
        assert_eq!(report.segmented, report.continuous);
        assert_eq!(report.wer_segmented(), report.wer_continuous());
    }

    #[test]
    fn fragmentation_bins_account_for_every_reference_word() {
        let vocab = Vocabulary::train(&["ba do ki"], 260).expect("vocab");
        let mut model = tiny_model(&vocab);
        let rec = tone_recording("r0", &["ba", "do", "ki", "ba", "do", "ki"], None);
        let report = fragmentation_compare(
            &mut model, &vocab, &rec, &tiny_mel(), &[0.75], 0.5, 0.25,
        )
        .expect("fragmentation");
        let binned: u64 = report.bins.iter().map(|b| b.ref_words).sum();
        assert_eq!(binned, report.segmented.ref_words);
        assert_eq!(report.boundary_words + report.interior_words, report.segmented.ref_words);
        assert_eq!(
            report.boundary_errors + report.interior_errors,
            report.bins.iter().map(|b| b.errors).sum::<u64>()
        );
    }

    // -- distractor assemblies ----------------------------------------------

    #[test]
    fn assembly_keeps_the_scored_window_bit_identical() {
        let rec = tone_recording("r0", &["ba", "do", "ki", "ba", "do", "ki", "ba", "do"], None);
        let mel = tiny_mel();
        let feats = log_mel(&rec.samples, &mel).expect("mel");
        let ss = 4;
        let w_f = seconds_to_aligned_frames(0.5, mel.hop_seconds(), ss);
        let ctx_f = seconds_to_aligned_frames(0.25, mel.hop_seconds(), ss);
        let total = (4.0 / mel.hop_seconds()).round() as usize;
        let t_in = feats.frames.rows;
        for k in 0..t_in.div_ceil(w_f) {
            let layout = assembly_layout(t_in, k, w_f, ctx_f, total, ss).expect("layout");
            assert_eq!(layout.total_frames, total);
            assert_eq!(layout.scored.0 % ss, 0, "scored start must stay aligned");
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let asm = build_assembly(&feats, &layout, &[], &[], w_f, k, "r0", &mut rng, &mut Vec::new());
            assert_eq!(asm.rows, total);
            let (f0, f1) = layout.window;
            let (s0, _) = layout.scored;
            for j in 0..(f1 - f0) {
                assert_eq!(asm.row(s0 + j), feats.frames.row(f0 + j), "window row {j} differs");
            }
            // Padding rows are exactly zero for the no-context source.
            for j in 0..layout.left_pad {
                assert!(asm.row(j).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn no_context_assembly_length_is_exact_for_the_default_hour() {
        // Layout math only; no features are materialized.
        let mel = MelConfig::default();
        let hop = mel.hop_seconds();
        let ss = 8;
        let w_f = seconds_to_aligned_frames(20.0, hop, ss);
        let ctx_f = seconds_to_aligned_frames(40.0, hop, ss);
        let total = (3600.0 / hop).round() as usize;
        let t_in = (600.0 / hop).round() as usize;
        for k in [0, 7, 29] {
            let l = assembly_layout(t_in, k, w_f, ctx_f, total, ss).expect("layout");
            assert_eq!(l.total_frames, total);
            assert_eq!(l.left_pad + (l.real.1 - l.real.0) + l.right_pad, total);
            assert!((l.total_frames as f64 * hop - 3600.0).abs() <= hop);
        }
    }

    #[test]
    fn degenerate_total_leaves_interior_windows_unpadded_and_matches_buffered() {
        let vocab = Vocabulary::train(&["ba do ki"], 260).expect("vocab");
        let mut model = tiny_model(&vocab);
        let mel = tiny_mel();
        let rec = tone_recording("r0", &["ba"; 16].as_slice(), None);
        let feats = log_mel(&rec.samples, &mel).expect("mel");
        let ss = model.cfg.subsampling;
        let hop = mel.hop_seconds();
        let (win_s, ctx_s) = (0.5, 0.5);
        let w_f = seconds_to_aligned_frames(win_s, hop, ss);
        let ctx_f = seconds_to_aligned_frames(ctx_s, hop, ss);
        let total = 2 * ctx_f + w_f;
        let t_in = feats.frames.rows;

        let plan = WindowPlan::new(
            Scheme::Buffered,
            total as f64 * hop,
            1.0,
            w_f as f64 / total as f64,
        )
        .expect("plan");
        let buffered = buffered_decode(&mut model, &feats, &plan).expect("buffered");

        let mut compared = 0;
        for k in 0..t_in.div_ceil(w_f) {
            let layout = assembly_layout(t_in, k, w_f, ctx_f, total, ss).expect("layout");
            if layout.left_pad != 0 || layout.right_pad != 0 {
                continue; // edge window: real context clamped, padding present
            }
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let asm = build_assembly(&feats, &layout, &[], &[], w_f, k, "r0", &mut rng, &mut Vec::new());
            let spect = Spectrogram { frames: asm, hop_seconds: hop, mel_bins: feats.mel_bins };
            let logits = model.forward_eval(&spect.frames, None).expect("eval");
            let (s0, s1) = layout.scored;
            let (f0, _) = layout.window;
            for (g, row) in (s0 / ss..s1 / ss).enumerate() {
                let global = f0 / ss + g;
                assert_eq!(
                    logits.row(row),
                    buffered.log_probs.row(global),
                    "window {k} row {g} differs from the buffered decode"
                );
            }
            compared += 1;
        }
        assert!(compared >= 2, "expected interior windows to compare");
    }

    fn distractor_fixture() -> (Vocabulary, Encoder, Vec<Recording>, MelConfig) {
        let vocab = Vocabulary::train(&["ba do ki"], 260).expect("vocab");
        let model = tiny_model(&vocab);
        let recs = vec![
            tone_recording("a", &["ba", "do", "ki", "ba", "do", "ki", "ba", "do"], Some("g0")),
            tone_recording("b", &["ki", "do", "ba", "ki", "do", "ba", "ki", "do"], Some("g1")),
        ];
        (vocab, model, recs, tiny_mel())
    }

    #[test]
    fn distractor_eval_is_deterministic_and_logged() {
        let (vocab, mut model, recs, mel) = distractor_fixture();
        let opts = DistractorOptions {
            source: DistractorSource::WithinDataset,
            real_context_seconds: 0.25,
            scoring_seconds: 0.5,
            total_seconds: 3.0,
            attention_seconds: None,
            seed: 5,
        };
        let one = distractor_eval(&mut model, &vocab, &recs, &[], &opts, &mel).expect("eval");
        let two = distractor_eval(&mut model, &vocab, &recs, &[], &opts, &mel).expect("eval");
        assert_eq!(one.report, two.report);
        assert_eq!(one.picks, two.picks);
        assert!(!one.picks.is_empty(), "padding must be sampled and logged");
        assert!(one.windows >= 8);
        // Picks reference only other recordings of the dataset.
        for p in &one.picks {
            assert_ne!(p.recording, p.pool_id);
        }
        // Group breakdown covers both recordings.
        assert_eq!(one.report.groups.len(), 2);
        let mut sum = ErrorCounts::default();
        for c in one.report.groups.values() {
            sum.add(c);
        }
        assert_eq!(sum, one.report.total);
    }

    #[test]
    fn short_pool_recordings_are_rejected() {
        let (vocab, mut model, mut recs, mel) = distractor_fixture();
        recs.push(tone_recording("tiny", &["ba"], None)); // 0.25 s < one 0.5 s segment
        let opts = DistractorOptions {
            source: DistractorSource::WithinDataset,
            real_context_seconds: 0.25,
            scoring_seconds: 0.5,
            total_seconds: 3.0,
            attention_seconds: None,
            seed: 5,
        };
        let err = distractor_eval(&mut model, &vocab, &recs, &[], &opts, &mel).unwrap_err();
        assert!(matches!(err, EvalError::ShortPoolSegment { .. }), "got {err}");
    }

    #[test]
    fn cross_dataset_requires_a_pool() {
        let (vocab, mut model, recs, mel) = distractor_fixture();
        let opts = DistractorOptions {
            source: DistractorSource::CrossDataset,
            real_context_seconds: 0.25,
            scoring_seconds: 0.5,
            total_seconds: 3.0,
            attention_seconds: None,
            seed: 5,
        };
        let err = distractor_eval(&mut model, &vocab, &recs, &[], &opts, &mel).unwrap_err();
        assert!(matches!(err, EvalError::EmptyPool), "got {err}");
    }

    // -- concatenation ------------------------------------------------------

    #[test]
    fn zero_padding_concat_equals_a_plain_masked_decode() {
        let (vocab, mut model, recs, mel) = distractor_fixture();
        let opts = ConcatOptions { pad_seconds: 0.0, attention_seconds: Some(0.5), seed: 3 };
        let padded = concat_eval(&mut model, &vocab, &recs, &opts, &mel).expect("concat");
        let mut plain = EvalReport::default();
        for rec in &recs {
            let feats = log_mel(&rec.samples, &mel).expect("mel");
            let lattice = swa_decode(&mut model, &feats, 0.5).expect("swa");
            let hyp = lattice_to_words(&lattice, &vocab);
            let refs = normalize_words(&rec.transcript);
            let ops = align_words(&refs, &hyp_text(&hyp));
            let counts = ErrorCounts::from_ops(&ops, refs.len() as u64);
            plain.absorb(rec.group.as_deref(), &counts, hyp.len());
        }
        assert_eq!(padded, plain);
    }

    #[test]
    fn constant_model_is_indifferent_to_concatenated_neighbors() {
        let (vocab, mut model, recs, mel) = distractor_fixture();
        zeroed(&mut model);
        let plain = concat_eval(
            &mut model, &vocab, &recs,
            &ConcatOptions { pad_seconds: 0.0, attention_seconds: None, seed: 3 },
            &mel,
        )
        .expect("concat");
        let padded = concat_eval(
            &mut model, &vocab, &recs,
            &ConcatOptions { pad_seconds: 1.0, attention_seconds: None, seed: 3 },
            &mel,
        )
        .expect("concat");
        assert_eq!(plain.total, padded.total);
    }

    #[test]
    fn concat_eval_is_deterministic_in_the_seed() {
        let (vocab, mut model, recs, mel) = distractor_fixture();
        let opts = ConcatOptions { pad_seconds: 0.75, attention_seconds: Some(0.5), seed: 9 };
        let a = concat_eval(&mut model, &vocab, &recs, &opts, &mel).expect("concat");
        let b = concat_eval(&mut model, &vocab, &recs, &opts, &mel).expect("concat");
        assert_eq!(a, b);
    }

    // -- in-context ---------------------------------------------------------

    #[test]
    fn span_hits_require_overlap_and_exact_match() {
        let words = vec![
            HypWord { word: "Before".into(), start_seconds: 0.0, end_seconds: 1.0 },
            HypWord { word: "Target!".into(), start_seconds: 2.0, end_seconds: 3.0 },
        ];
        assert!(span_hit(&words, "target", (2.5, 4.0)));
        assert!(span_hit(&words, "target", (0.0, 2.1))); // partial overlap
        assert!(!span_hit(&words, "target", (3.0, 4.0))); // touching, no overlap
        assert!(!span_hit(&words, "other", (2.0, 3.0)));
        assert!(span_hit(&words, "before", (0.5, 0.6)));
    }

    #[test]
    fn incontext_manifest_round_trips_and_validates() {
        let dir = tempfile::tempdir().expect("tempdir");
        let wav = dir.path().join("i0.wav");
        crate::audio::write_wav(&wav, &tone(440.0, 1.0)).expect("wav");
        let entries = vec![InContextEntry {
            id: "i0".into(),
            audio: "i0.wav".into(),
            target_word: "ba".into(),
            sb_start: 0.2,
            sa_start: 0.6,
            sa_end: 0.9,
        }];
        let path = dir.path().join("items.jsonl");
        write_incontext_manifest(&path, &entries).expect("write");
        let items = load_incontext_manifest(&path).expect("load");
        assert_eq!(items.len(), 1);
        assert_eq!(items[0].target_word, "ba");
        assert_eq!(items[0].sa, (0.6, 0.9));
        assert_eq!(items[0].samples.len(), SAMPLE_RATE as usize);

        // Out-of-order boundaries are rejected.
        let bad = vec![InContextEntry { sa_start: 0.1, sb_start: 0.5, ..entries[0].clone() }];
        write_incontext_manifest(&path, &bad).expect("write");
        assert!(load_incontext_manifest(&path).is_err());
    }

    #[test]
    fn blank_model_scores_zero_on_incontext_items() {
        let vocab = Vocabulary::train(&["ba do ki"], 260).expect("vocab");
        let mut model = tiny_model(&vocab);
        zeroed(&mut model);
        let items = vec![InContextItem {
            id: "i0".into(),
            samples: tone(440.0, 1.2),
            target_word: "ba".into(),
            sb_start: 0.2,
            sa: (0.8, 1.1),
        }];
        let report = in_context_score(&mut model, &vocab, &items, &tiny_mel(), None).expect("score");
        assert_eq!(report.items, 1);
        assert_eq!(report.accuracy_full, 0.0);
        assert_eq!(report.accuracy_no_repeat, 0.0);
    }
}
