//! `lcasr` — train, decode, evaluate, and bench long-context CTC models.
//!
//! Every subcommand is driven by one flat JSON config (see
//! [`lcasr::config::RunConfig`]); the resolved document is written next to
//! each run's outputs so any run can be reproduced from its snapshot.
//!
//! Exit codes: 0 success, 2 configuration error (bad flags, unreadable or
//! invalid config, missing required keys), 1 runtime failure.

use std::fs;
use std::io::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lcasr::attention::{attend_naive, attend_tiled, AttnImpl, TileSpec};
use lcasr::audio::{load_manifest, log_mel};
use lcasr::checkpoint;
use lcasr::config::{RunConfig, OUT_ROOT_ENV};
use lcasr::ctc::write_lattice;
use lcasr::encoder::Encoder;
use lcasr::eval::{
    concat_eval, distractor_eval, eval_recordings, even_boundaries, fragmentation_compare,
    in_context_score, lattice_to_words, load_incontext_manifest, write_report_csv,
    DistractorSource,
};
use lcasr::longform::decode_longform;
use lcasr::tensor::Mat;
use lcasr::tokenizer::Vocabulary;
use lcasr::toyset::make_toyset;
use lcasr::train::{train, Adam, TrainOptions};

#[global_allocator]
static ALLOC: lcasr::alloc_meter::CountingAlloc = lcasr::alloc_meter::CountingAlloc;

/// Long-context CTC speech-recognition laboratory.
#[derive(Parser)]
#[command(name = "lcasr", version, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArg {
    /// Flat JSON run configuration.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct OptConfigArg {
    /// Flat JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model on a manifest of recordings.
    Train(ConfigArg),
    /// Decode recordings to posterior lattices and hypothesis text.
    Decode(ConfigArg),
    /// Score long-form decoding against reference transcripts.
    EvalWer(ConfigArg),
    /// Compare segmented decoding against continuous decoding.
    EvalFrag(ConfigArg),
    /// Score fixed windows embedded in distractor context.
    EvalDistractor(ConfigArg),
    /// Score recordings spliced between other recordings.
    EvalConcat(ConfigArg),
    /// Score target-word recovery with and without the priming region.
    EvalIncontext(ConfigArg),
    /// Time and meter the raw attention kernels.
    BenchAttn(OptConfigArg),
    /// Measure encoder throughput and peak memory across lengths.
    BenchThroughput(OptConfigArg),
    /// Synthesize a deterministic tone-word corpus.
    MakeToyset(OptConfigArg),
}

/// Failures carry which exit code they deserve.
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

trait IntoFailure<T> {
    fn or_config(self) -> Result<T, Failure>;
    fn or_runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> IntoFailure<T> for Result<T, E> {
    fn or_config(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Config(e.into()))
    }
    fn or_runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn main() {
    let cli = Cli::parse();
    let code = match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            1
        }
    };
    std::process::exit(code);
}

fn dispatch(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Train(a) => cmd_train(&load_required(&a)?),
        Cmd::Decode(a) => cmd_decode(&load_required(&a)?),
        Cmd::EvalWer(a) => cmd_eval_wer(&load_required(&a)?),
        Cmd::EvalFrag(a) => cmd_eval_frag(&load_required(&a)?),
        Cmd::EvalDistractor(a) => cmd_eval_distractor(&load_required(&a)?),
        Cmd::EvalConcat(a) => cmd_eval_concat(&load_required(&a)?),
        Cmd::EvalIncontext(a) => cmd_eval_incontext(&load_required(&a)?),
        Cmd::BenchAttn(a) => cmd_bench_attn(&load_optional(&a)?),
        Cmd::BenchThroughput(a) => cmd_bench_throughput(&load_optional(&a)?),
        Cmd::MakeToyset(a) => cmd_make_toyset(&load_optional(&a)?),
    }
}

fn load_required(arg: &ConfigArg) -> Result<RunConfig, Failure> {
    RunConfig::load(&arg.config).or_config()
}

fn load_optional(arg: &OptConfigArg) -> Result<RunConfig, Failure> {
    match &arg.config {
        Some(p) => RunConfig::load(p).or_config(),
        None => Ok(RunConfig::default()),
    }
}

/// Create the run's output directory and drop the resolved config snapshot
/// into it.
fn open_out_dir(cfg: &RunConfig, subcommand: &str) -> Result<PathBuf, Failure> {
    let out = cfg.resolve_out_dir(subcommand, std::env::var(OUT_ROOT_ENV).ok().as_deref());
    fs::create_dir_all(&out).or_runtime()?;
    cfg.write_resolved(&out).or_runtime()?;
    Ok(out)
}

/// Load the tokenizer and checkpointed model named by the config.
fn load_model(cfg: &RunConfig) -> Result<(Encoder, Vocabulary), Failure> {
    let vocab = Vocabulary::load(cfg.require("tokenizer").or_config()?).or_runtime()?;
    let model_cfg = cfg.model_config(vocab.size());
    model_cfg.validate().or_config()?;
    if let Some(note) = model_cfg.head_dim_advisory() {
        eprintln!("note: {note}");
    }
    let mut model = Encoder::new(model_cfg, cfg.seed).or_config()?;
    checkpoint::load(cfg.require("checkpoint").or_config()?, &mut model).or_runtime()?;
    Ok((model, vocab))
}

fn cmd_train(cfg: &RunConfig) -> Result<(), Failure> {
    let warmup = cfg.warmup().or_config()?;
    let lr_total_steps = cfg.resolved_lr_total_steps().or_config()?;
    let manifest = cfg.require("manifest").or_config()?;
    let out = open_out_dir(cfg, "train")?;

    let recordings = load_manifest(manifest).or_runtime()?;
    let vocab = match &cfg.tokenizer {
        Some(p) => Vocabulary::load(p).or_runtime()?,
        None => {
            let transcripts: Vec<&str> =
                recordings.iter().map(|r| r.transcript.as_str()).collect();
            Vocabulary::train(&transcripts, cfg.vocab_size).or_runtime()?
        }
    };
    vocab.save(&out.join("tokenizer.json")).or_runtime()?;

    let model_cfg = cfg.model_config(vocab.size());
    model_cfg.validate().or_config()?;
    if let Some(note) = model_cfg.head_dim_advisory() {
        eprintln!("note: {note}");
    }
    let mut model = Encoder::new(model_cfg, cfg.seed).or_config()?;

    let opts = TrainOptions {
        warmup,
        max_batch_duration: cfg.max_batch_seconds,
        epochs: cfg.epochs,
        max_steps: cfg.max_steps,
        peak_lr: cfg.peak_lr,
        lr_warmup_steps: cfg.lr_warmup_steps,
        lr_total_steps,
        grad_clip: cfg.grad_clip,
        seed: cfg.seed,
        checkpoint_interval: cfg.checkpoint_interval,
        out_dir: out.clone(),
        window_frames: cfg.window_frames(),
        mel: cfg.mel(),
    };
    let mut adam = Adam::default();
    let report = train(&mut model, &vocab, &recordings, &mut adam, &opts).or_runtime()?;
    println!(
        "trained {} steps (last loss {:.4}); checkpoint {}, metrics {}",
        report.steps,
        report.last_loss,
        report.checkpoint_path.display(),
        report.metrics_path.display()
    );
    Ok(())
}

fn cmd_decode(cfg: &RunConfig) -> Result<(), Failure> {
    let plan = cfg.window_plan().or_config()?;
    let out = open_out_dir(cfg, "decode")?;
    let (mut model, vocab) = load_model(cfg)?;
    let recordings = load_manifest(cfg.require("manifest").or_config()?).or_runtime()?;
    let mel = cfg.mel();

    let lat_dir = out.join("lattices");
    fs::create_dir_all(&lat_dir).or_runtime()?;
    let mut hyps = fs::File::create(out.join("hyps.tsv")).or_runtime()?;
    for rec in &recordings {
        let feats = log_mel(&rec.samples, &mel).or_runtime()?;
        let lattice = decode_longform(&mut model, &feats, &plan).or_runtime()?;
        write_lattice(&lat_dir.join(format!("{}.lattice", rec.id)), &lattice).or_runtime()?;
        let text: Vec<String> =
            lattice_to_words(&lattice, &vocab).into_iter().map(|w| w.word).collect();
        writeln!(hyps, "{}\t{}", rec.id, text.join(" ")).or_runtime()?;
    }
    println!("decoded {} recordings into {}", recordings.len(), out.display());
    Ok(())
}

fn cmd_eval_wer(cfg: &RunConfig) -> Result<(), Failure> {
    let plan = cfg.window_plan().or_config()?;
    let out = open_out_dir(cfg, "eval-wer")?;
    let (mut model, vocab) = load_model(cfg)?;
    let recordings = load_manifest(cfg.require("manifest").or_config()?).or_runtime()?;

    let report =
        eval_recordings(&mut model, &vocab, &recordings, &cfg.mel(), &plan).or_runtime()?;
    let csv = out.join("report.csv");
    write_report_csv(&csv, &plan.scheme.to_string(), cfg.decode_window_seconds, cfg.seed, &report)
        .or_runtime()?;
    println!(
        "wer {:.4} (S={} I={} D={} N={}) -> {}",
        report.wer(),
        report.total.substitutions,
        report.total.insertions,
        report.total.deletions,
        report.total.ref_words,
        csv.display()
    );
    Ok(())
}

fn cmd_eval_frag(cfg: &RunConfig) -> Result<(), Failure> {
    let out = open_out_dir(cfg, "eval-frag")?;
    let (mut model, vocab) = load_model(cfg)?;
    let recordings = load_manifest(cfg.require("manifest").or_config()?).or_runtime()?;
    let mel = cfg.mel();

    let mut rows = vec![
        "recording,segmented_wer,continuous_wer,boundary_errors,boundary_ref_words,interior_errors,interior_ref_words"
            .to_string(),
    ];
    for rec in &recordings {
        let bounds = even_boundaries(rec.duration_seconds(), cfg.segment_seconds);
        let frag = fragmentation_compare(
            &mut model,
            &vocab,
            rec,
            &mel,
            &bounds,
            cfg.decode_window_seconds,
            cfg.boundary_margin_seconds,
        )
        .or_runtime()?;
        println!(
            "{}: segmented {:.4} vs continuous {:.4}; boundary density {:.4} vs interior {:.4}",
            rec.id,
            frag.wer_segmented(),
            frag.wer_continuous(),
            frag.boundary_density(),
            frag.interior_density()
        );
        rows.push(format!(
            "{},{},{},{},{},{},{}",
            rec.id,
            frag.wer_segmented(),
            frag.wer_continuous(),
            frag.boundary_errors,
            frag.boundary_words,
            frag.interior_errors,
            frag.interior_words
        ));
    }
    let csv = out.join("fragmentation.csv");
    fs::write(&csv, rows.join("\n") + "\n").or_runtime()?;
    println!("-> {}", csv.display());
    Ok(())
}

fn cmd_eval_distractor(cfg: &RunConfig) -> Result<(), Failure> {
    let opts = cfg.distractor_options();
    let out = open_out_dir(cfg, "eval-distractor")?;
    let (mut model, vocab) = load_model(cfg)?;
    let recordings = load_manifest(cfg.require("manifest").or_config()?).or_runtime()?;
    let pool = match cfg.distractor_source {
        DistractorSource::CrossDataset => {
            load_manifest(cfg.require("pool_manifest").or_config()?).or_runtime()?
        }
        _ => Vec::new(),
    };

    let rep =
        distractor_eval(&mut model, &vocab, &recordings, &pool, &opts, &cfg.mel()).or_runtime()?;
    let csv = out.join("report.csv");
    let scheme = format!("distractor_{}", serde_name(&cfg.distractor_source));
    write_report_csv(&csv, &scheme, cfg.real_context_seconds, cfg.seed, &rep.report)
        .or_runtime()?;
    // The seeded sampling log: one line per scored window.
    let mut picks = fs::File::create(out.join("picks.jsonl")).or_runtime()?;
    for p in &rep.picks {
        writeln!(picks, "{}", serde_json::to_string(p).or_runtime()?).or_runtime()?;
    }
    println!(
        "{}: wer {:.4} over {} windows -> {}",
        scheme,
        rep.report.wer(),
        rep.windows,
        csv.display()
    );
    Ok(())
}

fn cmd_eval_concat(cfg: &RunConfig) -> Result<(), Failure> {
    let out = open_out_dir(cfg, "eval-concat")?;
    let (mut model, vocab) = load_model(cfg)?;
    let recordings = load_manifest(cfg.require("manifest").or_config()?).or_runtime()?;

    let report = concat_eval(&mut model, &vocab, &recordings, &cfg.concat_options(), &cfg.mel())
        .or_runtime()?;
    let csv = out.join("report.csv");
    write_report_csv(&csv, "concat", cfg.concat_pad_seconds, cfg.seed, &report).or_runtime()?;
    println!("concat wer {:.4} -> {}", report.wer(), csv.display());
    Ok(())
}

fn cmd_eval_incontext(cfg: &RunConfig) -> Result<(), Failure> {
    let out = open_out_dir(cfg, "eval-incontext")?;
    let (mut model, vocab) = load_model(cfg)?;
    let items =
        load_incontext_manifest(cfg.require("manifest").or_config()?).or_runtime()?;

    let rep = in_context_score(&mut model, &vocab, &items, &cfg.mel(), cfg.attention_window_seconds)
        .or_runtime()?;
    let csv = out.join("incontext.csv");
    fs::write(
        &csv,
        format!(
            "items,hits_full,hits_no_repeat,accuracy_full,accuracy_no_repeat\n{},{},{},{},{}\n",
            rep.items, rep.hits_full, rep.hits_no_repeat, rep.accuracy_full, rep.accuracy_no_repeat
        ),
    )
    .or_runtime()?;
    println!(
        "accuracy full {:.4} vs no-repeat {:.4} over {} items -> {}",
        rep.accuracy_full,
        rep.accuracy_no_repeat,
        rep.items,
        csv.display()
    );
    Ok(())
}

fn cmd_make_toyset(cfg: &RunConfig) -> Result<(), Failure> {
    let spec = cfg.toy_spec();
    let out = open_out_dir(cfg, "make-toyset")?;
    let manifest = make_toyset(&spec, &out).or_runtime()?;
    println!("wrote {}", manifest.display());
    Ok(())
}

/// Estimated bytes of the full score matrix the naive kernel materializes.
fn naive_score_bytes(l: usize) -> u64 {
    (l as u64) * (l as u64) * 4
}

fn cmd_bench_attn(cfg: &RunConfig) -> Result<(), Failure> {
    let out = open_out_dir(cfg, "bench-attn")?;
    let d = cfg.width / cfg.heads.max(1);
    let mut rows = vec!["l,attn_impl,status,seconds,peak_bytes".to_string()];
    for &l in &cfg.bench_lengths {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ l as u64);
        let randm = |rng: &mut ChaCha8Rng| {
            Mat::from_vec(l, d, (0..l * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
        };
        let (q, k, v) = (randm(&mut rng), randm(&mut rng), randm(&mut rng));
        for imp in [AttnImpl::Naive, AttnImpl::Tiled] {
            if imp == AttnImpl::Naive && naive_score_bytes(l) > cfg.mem_budget_bytes {
                rows.push(format!("{l},{imp},oom,,"));
                println!("l={l} {imp}: past the memory budget, recorded as oom");
                continue;
            }
            let t0 = Instant::now();
            let (res, peak) = lcasr::alloc_meter::measure_peak(|| match imp {
                AttnImpl::Naive => attend_naive(&q, &k, &v, None).map(|r| r.out),
                AttnImpl::Tiled => {
                    attend_tiled(&q, &k, &v, None, TileSpec::default()).map(|r| r.out)
                }
            });
            res.or_runtime()?;
            let secs = t0.elapsed().as_secs_f64();
            println!("l={l} {imp}: {secs:.3}s, peak {peak} bytes");
            rows.push(format!("{l},{imp},ok,{secs},{peak}"));
        }
    }
    let csv = out.join("bench_attn.csv");
    fs::write(&csv, rows.join("\n") + "\n").or_runtime()?;
    println!("-> {}", csv.display());
    Ok(())
}

fn cmd_bench_throughput(cfg: &RunConfig) -> Result<(), Failure> {
    let out = open_out_dir(cfg, "bench-throughput")?;
    let mel = cfg.mel();
    let mut rows =
        vec!["seq_seconds,subsampling,attn_impl,status,audio_hours_per_second,peak_bytes"
            .to_string()];
    for ss in [4usize, 8] {
        for imp in [AttnImpl::Naive, AttnImpl::Tiled] {
            for &seq in &cfg.bench_seq_seconds {
                let t_in = (seq / mel.hop_seconds()).round() as usize;
                let l_out = t_in.div_ceil(ss);
                // Only the quadratic score matrix is gated; linear-memory
                // allocations are attempted directly.
                if imp == AttnImpl::Naive && naive_score_bytes(l_out) > cfg.mem_budget_bytes {
                    rows.push(format!("{seq},{ss},{imp},oom,,"));
                    println!("seq={seq}s ss={ss} {imp}: past the memory budget, recorded as oom");
                    continue;
                }
                let mut model_cfg = cfg.model_config(cfg.vocab_size);
                model_cfg.subsampling = ss;
                model_cfg.validate().or_config()?;
                let mut model = Encoder::new(model_cfg, cfg.seed).or_config()?;
                model.set_attn_impl(imp);
                let window = cfg.window_frames();
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xBE9C);
                let feats = Mat::from_vec(
                    t_in,
                    mel.mel_bins,
                    (0..t_in * mel.mel_bins).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                );
                let t0 = Instant::now();
                let (res, peak) = lcasr::alloc_meter::measure_peak(|| {
                    if cfg.bench_train_mode {
                        let (logits, cache) = model.forward_train(
                            std::slice::from_ref(&feats),
                            window,
                            0,
                            cfg.seed,
                        )?;
                        let dl = vec![Mat::zeros(logits[0].rows, logits[0].cols)];
                        model.backward_train(&cache, &dl, window)?;
                        Ok(())
                    } else {
                        model.forward_eval(&feats, window).map(|_| ())
                    }
                });
                res.or_runtime()?;
                let secs = t0.elapsed().as_secs_f64();
                let hps = (seq / 3600.0) / secs;
                println!(
                    "seq={seq}s ss={ss} {imp}: {secs:.3}s ({hps:.4} audio-hours/s), peak {peak} bytes"
                );
                rows.push(format!("{seq},{ss},{imp},ok,{hps},{peak}"));
            }
        }
    }
    let csv = out.join("bench_throughput.csv");
    fs::write(&csv, rows.join("\n") + "\n").or_runtime()?;
    println!("-> {}", csv.display());
    Ok(())
}

/// The snake_case name serde uses for a distractor source.
fn serde_name(src: &DistractorSource) -> String {
    serde_json::to_string(src)
        .map(|s| s.trim_matches('"').to_string())
        .unwrap_or_else(|_| "unknown".into())
}

// The subcommand surface is integration-tested in tests/cli.rs; the helpers
// here are thin glue over the library.
