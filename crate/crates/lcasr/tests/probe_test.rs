use lcasr::audio::{chunk_recording, log_mel, MelConfig};
use lcasr::tokenizer::Vocabulary;
use lcasr::toyset::{synth_corpus, CueRule, ToySpec};

#[test]
fn probe() {
    let spec = ToySpec {
        vocab_words: 6,
        tones_per_token: 2,
        utterances: 12,
        words_per_utterance: 78,
        lead_silence_seconds: 0.2,
        noise_snr_db: None,
        cue_rule: Some(CueRule { pairs: 1, ambiguous_after_seconds: 2.0, ambiguous_rate: 0.25 }),
        seed: 7,
    };
    let corpus = synth_corpus(&spec).unwrap();
    let transcripts: Vec<String> = corpus.recordings.iter().map(|r| r.transcript.clone()).collect();
    let vocab = Vocabulary::train(&transcripts, 300).unwrap();
    let mel = MelConfig { mel_bins: 32, ..Default::default() };
    let rec = &corpus.recordings[0];
    let feats = log_mel(&rec.samples, &mel).unwrap();
    println!("feat rows {} -> out frames {}", feats.frames.rows, feats.frames.rows.div_ceil(4));
    let chunks = chunk_recording(rec, &feats, 8.5, &vocab).unwrap();
    for c in &chunks {
        let mut min_t = c.targets.len();
        for w in c.targets.windows(2) { if w[0] == w[1] { min_t += 1; } }
        println!("chunk rows {} out {} targets {} min_frames {}", c.features.rows, c.features.rows.div_ceil(4), c.targets.len(), min_t);
    }
    let toks = vocab.encode(" ba");
    println!("' ba' -> {} tokens", toks.len());
    let sample: Vec<usize> = vocab.encode(&format!(" {}", rec.transcript));
    println!("full transcript tokens: {}", sample.len());
}
