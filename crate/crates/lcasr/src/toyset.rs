//! Deterministic synthetic speech: every vocabulary word renders as a fixed
//! 100 ms tone chord, so transcripts and word timestamps are exact by
//! construction and corpora regenerate byte-identically from a seed.
//!
//! The optional cue rule creates a measurable long-range dependency: paired
//! words share one chord (their audio is identical), and only a distinct cue
//! word at the start of the recording says which spelling is correct for
//! every ambiguous chord appearing after a time threshold.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{
    mix_noise_at_snr, write_manifest, write_wav, AudioError, ManifestEntry, Recording, Word,
    SAMPLE_RATE,
};
use crate::eval::{write_incontext_manifest, EvalError, InContextEntry};

/// Fixed duration of one rendered token.
pub const TOKEN_SECONDS: f64 = 0.1;

/// Most chords that stay spectrally separable in the rendering band.
pub const MAX_CHORDS: usize = 24;

#[derive(Debug, thiserror::Error)]
pub enum ToysetError {
    #[error("bad toyset spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Long-context rule: one cue word at the start of each recording decides the
/// spelling of every ambiguous chord after `ambiguous_after_seconds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CueRule {
    /// Number of ambiguous word pairs (each pair shares one chord).
    pub pairs: usize,
    /// Earliest time an ambiguous word may appear.
    pub ambiguous_after_seconds: f64,
    /// Probability that an eligible slot draws an ambiguous word.
    pub ambiguous_rate: f64,
    /// Rendered duration of the cue tone. Longer cues occupy more encoder
    /// frames, which sets how much initial attention mass a model has
    /// available to discover the dependency.
    #[serde(default = "default_cue_seconds")]
    pub cue_seconds: f64,
}

fn default_cue_seconds() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    /// Distinct unambiguous vocabulary words.
    pub vocab_words: usize,
    /// Sine tones summed into each chord.
    pub tones_per_token: usize,
    pub utterances: usize,
    /// Tokens per utterance, the cue word included when a rule is set.
    pub words_per_utterance: usize,
    pub lead_silence_seconds: f64,
    /// Mixing SNR for added white noise; `None` renders clean.
    pub noise_snr_db: Option<f64>,
    pub cue_rule: Option<CueRule>,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            vocab_words: 8,
            tones_per_token: 2,
            utterances: 20,
            words_per_utterance: 40,
            lead_silence_seconds: 0.2,
            noise_snr_db: None,
            cue_rule: None,
            seed: 0,
        }
    }
}

/// The generated word inventory with its word-to-chord assignment.
#[derive(Debug, Clone)]
pub struct ToyLexicon {
    /// Regular words; chord indices `0..words.len()`.
    pub words: Vec<String>,
    /// First spelling of each ambiguous pair.
    pub pair_a: Vec<String>,
    /// Second spelling; `pair_b[p]` shares `pair_a[p]`'s chord.
    pub pair_b: Vec<String>,
    pub cue_a: String,
    pub cue_b: String,
    n_chords: usize,
}

impl ToyLexicon {
    /// Chord index a word renders as, if the word is in the lexicon.
    pub fn chord_of(&self, word: &str) -> Option<usize> {
        let v = self.words.len();
        if let Some(i) = self.words.iter().position(|w| w == word) {
            return Some(i);
        }
        if let Some(p) = self.pair_a.iter().position(|w| w == word) {
            return Some(v + p);
        }
        if let Some(p) = self.pair_b.iter().position(|w| w == word) {
            return Some(v + p);
        }
        if word == self.cue_a {
            return Some(v + self.pair_a.len());
        }
        if word == self.cue_b {
            return Some(v + self.pair_a.len() + 1);
        }
        None
    }

    pub fn is_ambiguous(&self, word: &str) -> bool {
        self.pair_a.iter().any(|w| w == word) || self.pair_b.iter().any(|w| w == word)
    }
}

fn syllables() -> Vec<String> {
    let consonants = ["b", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "y", "z"];
    let vowels = ["a", "e", "i", "o", "u"];
    let mut out = Vec::with_capacity(consonants.len() * vowels.len());
    for v in vowels {
        for c in consonants {
            out.push(format!("{c}{v}"));
        }
    }
    out
}

/// Build the word inventory for a spec.
pub fn lexicon(spec: &ToySpec) -> Result<ToyLexicon, ToysetError> {
    if spec.vocab_words == 0 {
        return Err(ToysetError::BadSpec("need at least one vocabulary word".into()));
    }
    if spec.tones_per_token == 0 || spec.tones_per_token > 4 {
        return Err(ToysetError::BadSpec("tones_per_token must be 1..=4".into()));
    }
    let pairs = spec.cue_rule.as_ref().map_or(0, |r| r.pairs);
    if spec.cue_rule.is_some() && pairs == 0 {
        return Err(ToysetError::BadSpec("a cue rule needs at least one ambiguous pair".into()));
    }
    let n_chords = spec.vocab_words + pairs + if spec.cue_rule.is_some() { 2 } else { 0 };
    if n_chords > MAX_CHORDS {
        return Err(ToysetError::BadSpec(format!(
            "{n_chords} chords requested; only {MAX_CHORDS} stay separable"
        )));
    }
    let names = syllables();
    let needed = spec.vocab_words + 2 * pairs + 2;
    if needed > names.len() {
        return Err(ToysetError::BadSpec(format!("{needed} word names requested")));
    }
    let words = names[..spec.vocab_words].to_vec();
    let mut pair_a = Vec::new();
    let mut pair_b = Vec::new();
    for p in 0..pairs {
        pair_a.push(names[spec.vocab_words + 2 * p].clone());
        pair_b.push(names[spec.vocab_words + 2 * p + 1].clone());
    }
    let cue_a = names[spec.vocab_words + 2 * pairs].clone();
    let cue_b = names[spec.vocab_words + 2 * pairs + 1].clone();
    Ok(ToyLexicon { words, pair_a, pair_b, cue_a, cue_b, n_chords })
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Fundamentals are spaced evenly on the mel scale so chords stay separable
/// through a coarse filterbank; partials sit at 1.5x steps above each.
fn chord_freqs(chord: usize, n_chords: usize, tones: usize) -> Vec<f64> {
    let lo = hz_to_mel(260.0);
    let hi = hz_to_mel(3600.0);
    let m0 = lo + (hi - lo) * chord as f64 / MAX_CHORDS.max(n_chords) as f64;
    let f0 = mel_to_hz(m0);
    (0..tones).map(|j| (f0 * (1.0 + 0.5 * j as f64)).min(7400.0)).collect()
}

/// Render one chord: summed sines under a raised-cosine edge envelope, all
/// inside the given duration.
fn chord_samples(chord: usize, n_chords: usize, tones: usize, seconds: f64) -> Vec<f32> {
    let n = (seconds * SAMPLE_RATE as f64).round() as usize;
    let edge = (0.008 * SAMPLE_RATE as f64).round() as usize;
    let freqs = chord_freqs(chord, n_chords, tones);
    let amp = 0.5 / tones as f64;
    (0..n)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            let mut v = 0.0;
            for f in &freqs {
                v += amp * (2.0 * std::f64::consts::PI * f * t).sin();
            }
            let env = if i < edge {
                0.5 * (1.0 - (std::f64::consts::PI * i as f64 / edge as f64).cos())
            } else if i >= n - edge {
                let k = (n - 1 - i) as f64;
                0.5 * (1.0 - (std::f64::consts::PI * k / edge as f64).cos())
            } else {
                1.0
            };
            (v * env) as f32
        })
        .collect()
}

/// Duration a word renders at: the fixed token length, except the cue tone
/// which takes the rule's `cue_seconds`.
fn word_seconds(w: &str, lex: &ToyLexicon, spec: &ToySpec) -> f64 {
    match &spec.cue_rule {
        Some(rule) if w == lex.cue_a || w == lex.cue_b => rule.cue_seconds,
        _ => TOKEN_SECONDS,
    }
}

/// Render a word sequence: lead silence, then one chord per word. Returns
/// the samples and the exact word timing metadata.
pub fn render_words(
    words: &[String],
    lex: &ToyLexicon,
    spec: &ToySpec,
) -> Result<(Vec<f32>, Vec<Word>), ToysetError> {
    let lead = (spec.lead_silence_seconds * SAMPLE_RATE as f64).round() as usize;
    let tok = (TOKEN_SECONDS * SAMPLE_RATE as f64).round() as usize;
    let mut samples = vec![0.0f32; lead];
    samples.reserve(words.len() * tok);
    let mut meta = Vec::with_capacity(words.len());
    let mut t = lead as f64 / SAMPLE_RATE as f64;
    for w in words {
        let chord = lex
            .chord_of(w)
            .ok_or_else(|| ToysetError::BadSpec(format!("word '{w}' not in the lexicon")))?;
        let dur = word_seconds(w, lex, spec);
        samples.extend(chord_samples(chord, lex.n_chords, spec.tones_per_token, dur));
        meta.push(Word { w: w.clone(), s: t, e: t + dur });
        t += dur;
    }
    Ok((samples, meta))
}

fn add_noise(samples: Vec<f32>, snr_db: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f32>, ToysetError> {
    let noise: Vec<f32> = (0..samples.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Ok(mix_noise_at_snr(&samples, &noise, snr_db)?)
}

/// Draw the word sequence for utterance `idx`; `mapping` selects the cue and
/// the spelling of every ambiguous chord.
fn utterance_words(spec: &ToySpec, lex: &ToyLexicon, mapping: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let n = spec.words_per_utterance;
    let mut out = Vec::with_capacity(n);
    let Some(rule) = &spec.cue_rule else {
        for _ in 0..n {
            out.push(lex.words[rng.gen_range(0..lex.words.len())].clone());
        }
        return out;
    };
    out.push(if mapping == 0 { lex.cue_a.clone() } else { lex.cue_b.clone() });
    let mut any_ambiguous = false;
    // Running start time of the next slot; the cue may render longer than a
    // regular token.
    let mut start = spec.lead_silence_seconds + rule.cue_seconds;
    while out.len() < n {
        let eligible = start >= rule.ambiguous_after_seconds;
        if eligible && rng.gen::<f64>() < rule.ambiguous_rate {
            let p = rng.gen_range(0..rule.pairs);
            out.push(if mapping == 0 { lex.pair_a[p].clone() } else { lex.pair_b[p].clone() });
            any_ambiguous = true;
        } else {
            out.push(lex.words[rng.gen_range(0..lex.words.len())].clone());
        }
        start += TOKEN_SECONDS;
    }
    if !any_ambiguous {
        // The rule is the point of the corpus; guarantee one ambiguous slot.
        let p = rng.gen_range(0..rule.pairs);
        let last = out.len() - 1;
        out[last] = if mapping == 0 { lex.pair_a[p].clone() } else { lex.pair_b[p].clone() };
    }
    out
}

#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub recordings: Vec<Recording>,
    pub lexicon: ToyLexicon,
}

fn validate(spec: &ToySpec) -> Result<(), ToysetError> {
    if spec.utterances == 0 || spec.words_per_utterance == 0 {
        return Err(ToysetError::BadSpec("need at least one utterance and one word".into()));
    }
    if spec.lead_silence_seconds < 0.0 {
        return Err(ToysetError::BadSpec("lead silence must be non-negative".into()));
    }
    if let Some(rule) = &spec.cue_rule {
        if !(0.0 < rule.ambiguous_rate && rule.ambiguous_rate <= 1.0) {
            return Err(ToysetError::BadSpec("ambiguous_rate must be in (0, 1]".into()));
        }
        let last_start =
            spec.lead_silence_seconds + (spec.words_per_utterance - 1) as f64 * TOKEN_SECONDS;
        if last_start < rule.ambiguous_after_seconds {
            return Err(ToysetError::BadSpec(format!(
                "no word starts after the ambiguity threshold {}s (last start {last_start}s)",
                rule.ambiguous_after_seconds
            )));
        }
    }
    Ok(())
}

/// Generate the corpus in memory. The same spec always produces the same
/// recordings, sample for sample.
pub fn synth_corpus(spec: &ToySpec) -> Result<ToyCorpus, ToysetError> {
    validate(spec)?;
    let lex = lexicon(spec)?;
    let mut recordings = Vec::with_capacity(spec.utterances);
    for idx in 0..spec.utterances {
        let mut rng =
            ChaCha8Rng::seed_from_u64(spec.seed ^ (idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mapping = idx % 2;
        let words = utterance_words(spec, &lex, mapping, &mut rng);
        let (mut samples, meta) = render_words(&words, &lex, spec)?;
        if let Some(snr) = spec.noise_snr_db {
            samples = add_noise(samples, snr, &mut rng)?;
        }
        let group = spec
            .cue_rule
            .as_ref()
            .map(|_| if mapping == 0 { "map-a".to_owned() } else { "map-b".to_owned() });
        recordings.push(Recording {
            id: format!("toy-{idx:04}"),
            transcript: words.join(" "),
            samples,
            words: meta,
            group,
        });
    }
    Ok(ToyCorpus { recordings, lexicon: lex })
}

/// Generate the corpus and write it to disk: one WAV per utterance plus a
/// manifest. Returns the manifest path.
pub fn make_toyset(spec: &ToySpec, outdir: &Path) -> Result<PathBuf, ToysetError> {
    let corpus = synth_corpus(spec)?;
    std::fs::create_dir_all(outdir)?;
    let mut entries = Vec::with_capacity(corpus.recordings.len());
    for rec in &corpus.recordings {
        let file = format!("{}.wav", rec.id);
        write_wav(&outdir.join(&file), &rec.samples)?;
        entries.push(ManifestEntry {
            id: rec.id.clone(),
            audio: file,
            text: rec.transcript.clone(),
            words: rec.words.clone(),
            group: rec.group.clone(),
        });
    }
    let manifest = outdir.join("manifest.jsonl");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Repeat-task items
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncontextSpec {
    /// Base rendering spec; must carry a cue rule.
    pub base: ToySpec,
    pub items: usize,
    /// Regular words between the cue region and the target region.
    pub filler_words: usize,
    /// Regular words surrounding the ambiguous target in the target region.
    pub tail_words: usize,
}

/// One generated repeat-task item, in memory.
#[derive(Debug, Clone)]
pub struct ToyIncontextItem {
    pub id: String,
    pub samples: Vec<f32>,
    pub target_word: String,
    pub sb_start: f64,
    pub sa_start: f64,
    pub sa_end: f64,
}

/// Generate repeat-task items: a cue region (cue word plus the target's
/// resolvable repeat), filler, then the target rendered as its ambiguous
/// chord. Removing the cue region removes everything that disambiguates it.
pub fn synth_incontext(spec: &IncontextSpec) -> Result<Vec<ToyIncontextItem>, ToysetError> {
    let rule = spec
        .base
        .cue_rule
        .clone()
        .ok_or_else(|| ToysetError::BadSpec("repeat-task items need a cue rule".into()))?;
    if spec.items == 0 {
        return Err(ToysetError::BadSpec("need at least one item".into()));
    }
    if spec.tail_words == 0 {
        return Err(ToysetError::BadSpec("need at least one tail word".into()));
    }
    let lex = lexicon(&spec.base)?;
    let mut out = Vec::with_capacity(spec.items);
    for idx in 0..spec.items {
        let mut rng = ChaCha8Rng::seed_from_u64(
            spec.base.seed ^ 0xC0FF_EE00 ^ (idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let mapping = idx % 2;
        let p = rng.gen_range(0..rule.pairs);
        let target =
            if mapping == 0 { lex.pair_a[p].clone() } else { lex.pair_b[p].clone() };
        let cue = if mapping == 0 { lex.cue_a.clone() } else { lex.cue_b.clone() };

        let mut words = vec![cue, target.clone()];
        for _ in 0..spec.filler_words {
            words.push(lex.words[rng.gen_range(0..lex.words.len())].clone());
        }
        let target_at = words.len() + spec.tail_words / 2;
        for _ in 0..spec.tail_words {
            words.push(lex.words[rng.gen_range(0..lex.words.len())].clone());
        }
        words.insert(target_at, target.clone());

        let (mut samples, meta) = render_words(&words, &lex, &spec.base)?;
        if let Some(snr) = spec.base.noise_snr_db {
            samples = add_noise(samples, snr, &mut rng)?;
        }
        let sb_start = meta[2].s; // first filler word: the cue region ends here
        out.push(ToyIncontextItem {
            id: format!("rep-{idx:04}"),
            samples,
            target_word: target,
            sb_start,
            sa_start: meta[target_at].s,
            sa_end: meta[target_at].e,
        });
    }
    Ok(out)
}

/// Write repeat-task items to disk (WAVs plus their manifest); returns the
/// manifest path.
pub fn make_incontext(spec: &IncontextSpec, outdir: &Path) -> Result<PathBuf, ToysetError> {
    let items = synth_incontext(spec)?;
    std::fs::create_dir_all(outdir)?;
    let mut entries = Vec::with_capacity(items.len());
    for item in &items {
        let file = format!("{}.wav", item.id);
        write_wav(&outdir.join(&file), &item.samples)?;
        entries.push(InContextEntry {
            id: item.id.clone(),
            audio: file,
            target_word: item.target_word.clone(),
            sb_start: item.sb_start,
            sa_start: item.sa_start,
            sa_end: item.sa_end,
        });
    }
    let manifest = outdir.join("items.jsonl");
    write_incontext_manifest(&manifest, &entries)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::load_incontext_manifest;

    fn cue_spec() -> ToySpec {
        ToySpec {
            vocab_words: 6,
            utterances: 4,
            words_per_utterance: 30,
            lead_silence_seconds: 0.2,
            cue_rule: Some(CueRule {
                pairs: 1,
                ambiguous_after_seconds: 1.5,
                ambiguous_rate: 0.3,
            }),
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_renders_identical_corpora() {
        let spec = ToySpec { noise_snr_db: Some(30.0), ..cue_spec() };
        let a = synth_corpus(&spec).expect("corpus");
        let b = synth_corpus(&spec).expect("corpus");
        assert_eq!(a.recordings.len(), b.recordings.len());
        for (ra, rb) in a.recordings.iter().zip(&b.recordings) {
            assert_eq!(ra.transcript, rb.transcript);
            assert_eq!(ra.samples, rb.samples);
            assert_eq!(ra.words, rb.words);
        }
        // A different seed moves the samples.
        let c = synth_corpus(&ToySpec { seed: 1, ..spec }).expect("corpus");
        assert!(a.recordings[0].samples != c.recordings[0].samples);
    }

    #[test]
    fn written_toyset_is_byte_identical_across_runs() {
        let spec = ToySpec { utterances: 2, words_per_utterance: 5, ..Default::default() };
        let d1 = tempfile::tempdir().expect("dir");
        let d2 = tempfile::tempdir().expect("dir");
        let m1 = make_toyset(&spec, d1.path()).expect("write");
        let m2 = make_toyset(&spec, d2.path()).expect("write");
        assert_eq!(std::fs::read(&m1).expect("m1"), std::fs::read(&m2).expect("m2"));
        let w1 = std::fs::read(d1.path().join("toy-0000.wav")).expect("w1");
        let w2 = std::fs::read(d2.path().join("toy-0000.wav")).expect("w2");
        assert_eq!(w1, w2);
    }

    #[test]
    fn rendered_duration_is_lead_plus_token_count() {
        let spec = ToySpec { utterances: 1, words_per_utterance: 17, ..Default::default() };
        let corpus = synth_corpus(&spec).expect("corpus");
        let rec = &corpus.recordings[0];
        let expect = (0.2 * SAMPLE_RATE as f64).round() as usize
            + 17 * (TOKEN_SECONDS * SAMPLE_RATE as f64).round() as usize;
        assert_eq!(rec.samples.len(), expect);
        // Timestamps are exact multiples of the token length after the lead.
        for (i, w) in rec.words.iter().enumerate() {
            assert!((w.s - (0.2 + i as f64 * TOKEN_SECONDS)).abs() < 1e-9);
            assert!((w.e - w.s - TOKEN_SECONDS).abs() < 1e-9);
        }
    }

    #[test]
    fn paired_words_render_bit_identical_audio() {
        let spec = cue_spec();
        let lex = lexicon(&spec).expect("lexicon");
        let a = render_words(&[lex.pair_a[0].clone()], &lex, &spec).expect("a").0;
        let b = render_words(&[lex.pair_b[0].clone()], &lex, &spec).expect("b").0;
        assert_eq!(a, b, "ambiguous pair must be acoustically indistinguishable");
        // The cues, by contrast, are audibly distinct.
        let ca = render_words(&[lex.cue_a.clone()], &lex, &spec).expect("ca").0;
        let cb = render_words(&[lex.cue_b.clone()], &lex, &spec).expect("cb").0;
        assert!(ca != cb, "cue words must be distinguishable");
    }

    #[test]
    fn cue_corpus_layout_follows_the_rule() {
        let spec = cue_spec();
        let corpus = synth_corpus(&spec).expect("corpus");
        let lex = &corpus.lexicon;
        let mut saw_ambiguous = 0;
        for (idx, rec) in corpus.recordings.iter().enumerate() {
            let first = &rec.words[0].w;
            let expect_cue = if idx % 2 == 0 { &lex.cue_a } else { &lex.cue_b };
            assert_eq!(first, expect_cue, "recording {idx} must open with its cue");
            for w in &rec.words {
                if lex.is_ambiguous(&w.w) {
                    saw_ambiguous += 1;
                    assert!(
                        w.s >= 1.5,
                        "ambiguous word '{}' at {}s before the threshold",
                        w.w,
                        w.s
                    );
                    let from_a = lex.pair_a.contains(&w.w);
                    assert_eq!(from_a, idx % 2 == 0, "spelling must follow the cue mapping");
                }
            }
            assert_eq!(rec.group.as_deref(), Some(if idx % 2 == 0 { "map-a" } else { "map-b" }));
        }
        assert!(saw_ambiguous >= corpus.recordings.len(), "every recording carries the rule");
    }

    #[test]
    fn bad_specs_are_rejected() {
        let too_many = ToySpec { vocab_words: MAX_CHORDS + 1, ..Default::default() };
        assert!(matches!(synth_corpus(&too_many), Err(ToysetError::BadSpec(_))));

        let rule_without_room = ToySpec {
            words_per_utterance: 5,
            cue_rule: Some(CueRule {
                pairs: 1,
                ambiguous_after_seconds: 10.0,
                ambiguous_rate: 0.5,
            }),
            ..Default::default()
        };
        assert!(matches!(synth_corpus(&rule_without_room), Err(ToysetError::BadSpec(_))));

        let no_pairs = ToySpec {
            cue_rule: Some(CueRule { pairs: 0, ambiguous_after_seconds: 0.0, ambiguous_rate: 0.5 }),
            ..Default::default()
        };
        assert!(matches!(synth_corpus(&no_pairs), Err(ToysetError::BadSpec(_))));
    }

    #[test]
    fn repeat_items_round_trip_through_their_manifest() {
        let spec = IncontextSpec {
            base: cue_spec(),
            items: 4,
            filler_words: 12,
            tail_words: 5,
        };
        let items = synth_incontext(&spec).expect("items");
        assert_eq!(items.len(), 4);
        let lex = lexicon(&spec.base).expect("lexicon");
        for (idx, item) in items.iter().enumerate() {
            assert!(lex.is_ambiguous(&item.target_word));
            let from_a = lex.pair_a.contains(&item.target_word);
            assert_eq!(from_a, idx % 2 == 0, "targets alternate mappings");
            assert!(0.0 < item.sb_start && item.sb_start <= item.sa_start);
            assert!(item.sa_start < item.sa_end);
            assert!(item.sa_end <= item.samples.len() as f64 / SAMPLE_RATE as f64 + 1e-9);
        }

        let dir = tempfile::tempdir().expect("dir");
        let manifest = make_incontext(&spec, dir.path()).expect("write");
        let loaded = load_incontext_manifest(&manifest).expect("load");
        assert_eq!(loaded.len(), items.len());
        for (l, i) in loaded.iter().zip(&items) {
            assert_eq!(l.target_word, i.target_word);
            assert_eq!(l.sa, (i.sa_start, i.sa_end));
            assert_eq!(l.samples.len(), i.samples.len());
        }
    }

    #[test]
    fn repeat_items_are_deterministic() {
        let spec = IncontextSpec { base: cue_spec(), items: 3, filler_words: 8, tail_words: 3 };
        let a = synth_incontext(&spec).expect("items");
        let b = synth_incontext(&spec).expect("items");
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.samples, y.samples);
            assert_eq!(x.target_word, y.target_word);
        }
    }
}
