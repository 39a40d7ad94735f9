//! Command-line frontend: corpus synthesis, training, quantization,
//! evaluation, streaming gating, and gradient checking.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::io::Read;
use std::path::PathBuf;

use pvad::container::{load_model, save_model, SavedModel};
use pvad::datagen::{
    assemble_examples_seeded, export_corpus, import_corpus, read_embedding_file, synth_corpus,
    AssembleSpec, CorpusMode,
};
use pvad::frontend::{self, AudioBuffer};
use pvad::layers::gradcheck;
use pvad::model::{build_model, Decision, ModelConfig, SpeakerEmbedding, Variant};
use pvad::quant::quantize_model;
use pvad::stream::stream_init;
use pvad::trainer::{evaluate, train, OptimizerKind, TrainConfig};

#[derive(Parser)]
#[command(
    name = "pvad",
    about = "Personalized voice activity detection at desk scale",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic corpus directory.
    SynthData(SynthArgs),
    /// Train a model variant on a corpus directory.
    Train(TrainArgs),
    /// Quantize a float model container to int8 weights.
    Quantize(QuantizeArgs),
    /// Evaluate a model on concatenated examples from a corpus.
    Eval(EvalArgs),
    /// Stream audio through a model, gating target-speaker frames.
    Stream(StreamArgs),
    /// Finite-difference checks for layer primitives and a 1-layer model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Corpus seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Number of synthetic speakers (>= 2).
    #[arg(long, default_value_t = 4)]
    speakers: usize,
    /// Utterances per speaker.
    #[arg(long, default_value_t = 6)]
    utterances_per_speaker: usize,
    /// audio (tone bursts through the frontend) or feature (direct clusters).
    #[arg(long, default_value = "feature")]
    mode: String,
    /// Speaker embedding dimensionality.
    #[arg(long, default_value_t = 256)]
    embedding_dim: usize,
    /// Output directory.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory from synth-data.
    #[arg(long)]
    corpus: PathBuf,
    /// concat, film, prenet or combined.
    #[arg(long, default_value = "combined")]
    variant: String,
    /// Zero-embedding probability per example per epoch.
    #[arg(long, default_value_t = 0.2)]
    p0: f64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f32,
    /// sgd or adam.
    #[arg(long, default_value = "adam")]
    optimizer: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Apply SpecAugment-style masking during training.
    #[arg(long, default_value_t = false)]
    spec_augment: bool,
    /// Concatenated examples per epoch.
    #[arg(long, default_value_t = 32)]
    examples_per_epoch: usize,
    /// Speakers per concatenated example, e.g. 2 or 2-3.
    #[arg(long, default_value = "2-3")]
    speakers_per_example: String,
    /// Output model container path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QuantizeArgs {
    /// Input float model container.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output quantized container.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Model container (float or quantized).
    #[arg(long)]
    model: PathBuf,
    /// Corpus directory.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    threshold: f32,
    /// Evaluate with the zero embedding and standard-VAD ground truth.
    #[arg(long, default_value_t = false)]
    enrollment_less: bool,
    /// Seed for assembling the concatenated eval set.
    #[arg(long, default_value_t = 999)]
    eval_seed: u64,
    /// Concatenated examples to score.
    #[arg(long, default_value_t = 32)]
    examples: usize,
    /// Speakers per concatenated example, e.g. 2 or 2-3.
    #[arg(long, default_value = "2-3")]
    speakers_per_example: String,
    /// Write key=value metrics here as well as printing the report.
    #[arg(long)]
    metrics_out: Option<PathBuf>,
}

#[derive(Args)]
struct StreamArgs {
    /// Model container (float or quantized).
    #[arg(long)]
    model: PathBuf,
    /// WAV file (PCM16 mono 16 kHz), or `-` to read raw PCM16 from stdin.
    #[arg(long)]
    wav: String,
    /// Enrollment: a WAV to embed via the model's own pre-net, or a raw
    /// f32-LE embedding file.
    #[arg(long, conflicts_with = "no_enroll")]
    enroll: Option<PathBuf>,
    /// Run enrollment-less (zero speaker embedding).
    #[arg(long, default_value_t = false)]
    no_enroll: bool,
    #[arg(long, default_value_t = 0.1)]
    threshold: f32,
    /// Push size in milliseconds.
    #[arg(long, default_value_t = 100)]
    chunk_ms: usize,
    /// Print every frame, not just the summary.
    #[arg(long, default_value_t = false)]
    frames: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// concat, film, prenet or combined.
    #[arg(long, default_value = "combined")]
    variant: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        // One line, machine-parsable.
        eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Quantize(a) => quantize_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Stream(a) => stream_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn parse_mode(s: &str) -> Result<CorpusMode> {
    match s {
        "audio" => Ok(CorpusMode::Audio),
        "feature" => Ok(CorpusMode::Feature),
        other => bail!("unknown mode {other:?} (expected audio or feature)"),
    }
}

fn parse_speaker_range(s: &str) -> Result<(usize, usize)> {
    if let Some((lo, hi)) = s.split_once('-') {
        let lo: usize = lo.trim().parse().context("bad speaker range")?;
        let hi: usize = hi.trim().parse().context("bad speaker range")?;
        if lo == 0 || hi < lo {
            bail!("speaker range {s:?} must satisfy 1 <= lo <= hi");
        }
        Ok((lo, hi))
    } else {
        let n: usize = s.trim().parse().context("bad speaker count")?;
        if n == 0 {
            bail!("speakers per example must be positive");
        }
        Ok((n, n))
    }
}

fn synth_data(a: SynthArgs) -> Result<()> {
    let mode = parse_mode(&a.mode)?;
    let corpus = synth_corpus(
        a.seed,
        a.speakers,
        a.utterances_per_speaker,
        mode,
        a.embedding_dim,
    )?;
    export_corpus(&corpus, &a.out_dir)?;
    let frames: usize = corpus.utterances.iter().map(|u| u.features.rows()).sum();
    println!(
        "wrote corpus: {} speakers, {} utterances, {} frames -> {}",
        corpus.speakers.len(),
        corpus.utterances.len(),
        frames,
        a.out_dir.display()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let corpus = import_corpus(&a.corpus)
        .with_context(|| format!("loading corpus {}", a.corpus.display()))?;
    let variant = Variant::parse(&a.variant)?;
    let optimizer = match a.optimizer.as_str() {
        "sgd" => OptimizerKind::Sgd,
        "adam" => OptimizerKind::Adam,
        other => bail!("unknown optimizer {other:?} (expected sgd or adam)"),
    };
    let (lo, hi) = parse_speaker_range(&a.speakers_per_example)?;
    let mut config = ModelConfig::with_variant(variant);
    config.embedding_dim = corpus.embedding_dim;
    let bundle = build_model(&config, a.seed)?;
    let train_cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        optimizer,
        p0: a.p0,
        seed: a.seed,
        spec_augment: a.spec_augment,
    };
    let assemble = AssembleSpec {
        n_examples: a.examples_per_epoch,
        min_speakers: lo,
        max_speakers: hi,
    };
    let (trained, history) = train(&bundle, &corpus, &assemble, &train_cfg)?;
    for (epoch, loss) in history.iter().enumerate() {
        println!("epoch {epoch:>3}: loss {loss:.5}");
    }
    save_model(&SavedModel::Float(trained), &a.out)?;
    println!("saved model -> {}", a.out.display());
    Ok(())
}

fn quantize_cmd(a: QuantizeArgs) -> Result<()> {
    let loaded = load_model(&a.input)
        .with_context(|| format!("loading model {}", a.input.display()))?;
    let bundle = match loaded {
        SavedModel::Float(b) => b,
        SavedModel::Quantized(_) => bail!("{} is already quantized", a.input.display()),
    };
    let (qb, report) = quantize_model(&bundle)?;
    save_model(&SavedModel::Quantized(qb), &a.out)?;
    print!("{}", report.to_text());
    println!("saved quantized model -> {}", a.out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let bundle = load_model(&a.model)
        .with_context(|| format!("loading model {}", a.model.display()))?
        .to_float();
    let corpus = import_corpus(&a.corpus)?;
    let (lo, hi) = parse_speaker_range(&a.speakers_per_example)?;
    let examples = assemble_examples_seeded(
        &corpus,
        &AssembleSpec {
            n_examples: a.examples,
            min_speakers: lo,
            max_speakers: hi,
        },
        a.eval_seed,
    )?;
    let report = evaluate(&bundle, &examples, a.threshold, a.enrollment_less)?;
    print!("{}", report.to_text());
    if let Some(path) = a.metrics_out {
        std::fs::write(&path, report.to_kv())?;
        println!("metrics -> {}", path.display());
    }
    Ok(())
}

/// Enroll from audio with the model's own speaker pre-net: mean-pool the
/// per-frame pre-net embeddings and normalize.
fn enroll_from_wav(bundle: &pvad::model::ModelBundle, path: &PathBuf) -> Result<SpeakerEmbedding> {
    if !bundle.config.variant.has_prenet() {
        bail!(
            "variant {} has no speaker pre-net; enroll with an embedding file instead",
            bundle.config.variant.name()
        );
    }
    let audio = frontend::wav::read_wav(path)?;
    let feats = frontend::extract_features(&audio)?;
    if feats.rows() == 0 {
        bail!("enrollment audio too short ({} samples)", audio.len());
    }
    let e_pre = bundle.prenet_embeddings(&feats)?;
    let mut pooled = vec![0.0f32; bundle.config.embedding_dim];
    for t in 0..e_pre.rows() {
        for (acc, &v) in pooled.iter_mut().zip(e_pre.row(t)) {
            *acc += v;
        }
    }
    for v in &mut pooled {
        *v /= e_pre.rows() as f32;
    }
    SpeakerEmbedding::unit(pooled).map_err(|e| anyhow!("enrollment pooling failed: {e}"))
}

fn stream_cmd(a: StreamArgs) -> Result<()> {
    let loaded = load_model(&a.model)
        .with_context(|| format!("loading model {}", a.model.display()))?;
    let bundle = loaded.to_float();
    let embedding = if a.no_enroll {
        SpeakerEmbedding::zero(bundle.config.embedding_dim)
    } else {
        let path = a
            .enroll
            .as_ref()
            .ok_or_else(|| anyhow!("provide --enroll <file> or --no-enroll"))?;
        if path.extension().map(|e| e == "wav").unwrap_or(false) {
            enroll_from_wav(&bundle, path)?
        } else {
            read_embedding_file(path, bundle.config.embedding_dim)?
        }
    };
    let mut session = stream_init(&bundle, &embedding, a.threshold)?;
    let chunk_samples = (a.chunk_ms * frontend::SAMPLE_RATE as usize / 1000).max(1);

    let samples: Vec<i16> = if a.wav == "-" {
        let mut bytes = Vec::new();
        std::io::stdin().read_to_end(&mut bytes)?;
        bytes
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]))
            .collect()
    } else {
        frontend::wav::read_wav(&PathBuf::from(&a.wav))?.samples
    };

    let mut passed = 0usize;
    let mut total = 0usize;
    for chunk in samples.chunks(chunk_samples) {
        let out = session.push(&AudioBuffer::new(chunk.to_vec(), frontend::SAMPLE_RATE)?)?;
        for f in out {
            total += 1;
            let verdict = match f.decision {
                Decision::Pass => {
                    passed += 1;
                    "pass"
                }
                Decision::Suppress => "suppress",
            };
            if a.frames {
                println!(
                    "frame {:>6} p_tss={:.4} p_ntss={:.4} p_ns={:.4} {}",
                    f.index, f.posterior[0], f.posterior[1], f.posterior[2], verdict
                );
            }
        }
    }
    println!(
        "streamed {} frames: {} passed, {} suppressed (threshold {}, {})",
        total,
        passed,
        total - passed,
        a.threshold,
        if session.enrollment_less() {
            "enrollment-less"
        } else {
            "enrolled"
        }
    );
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    let variant = Variant::parse(&a.variant)?;
    let mut failed = false;
    for (name, err) in gradcheck::sweep(a.seed)? {
        let ok = err < gradcheck::PRIMITIVE_TOL;
        failed |= !ok;
        println!(
            "primitive {name:<22} max_rel_err {err:.3e}  {}",
            if ok { "ok" } else { "FAIL" }
        );
    }
    let err = gradcheck::check_model_end_to_end(variant, a.seed)?;
    let ok = err < gradcheck::END_TO_END_TOL;
    failed |= !ok;
    println!(
        "model {:<26} max_rel_err {err:.3e}  {}",
        format!("({}, 1 layer, end-to-end)", variant.name()),
        if ok { "ok" } else { "FAIL" }
    );
    if failed {
        bail!("gradient check failed");
    }
    Ok(())
}
