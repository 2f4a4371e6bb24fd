//! `dstream` command implementations, shared by the binary and the acceptance suite.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dstream_core::checkpoint;
use dstream_core::config::{Conditioning, ModelConfig};
use dstream_core::decoder::{DelaySpec, FRAME_MS};
use dstream_core::eval::{self, EvalReport, EvalUtterance};
use dstream_core::model::Model;
use dstream_core::session::{Engine, TokenEvent};
use dstream_core::targets::{build_targets, Grouping, TimedWord};
use dstream_core::tokenizer::TokenKind;
use dstream_core::train::corpus::{CorpusConfig, PreparedSample, SynthSample, Synthesizer};
use dstream_core::train::{self, StepMetrics, TrainConfig, TrainReport};
use dstream_core::wav::{read_labels, read_wav, write_wav, Label};
use dstream_gateway::GatewayConfig;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Seeds of the default synthetic splits.
pub const TRAIN_CORPUS_SEED: u64 = 1;
pub const HELDOUT_CORPUS_SEED: u64 = 2;
pub const DEFAULT_TRAIN_UTTERANCES: usize = 2000;
pub const DEFAULT_TRAIN_STEPS: usize = 5000;

#[derive(Debug, Parser)]
#[command(name = "dstream", version, about = "Streaming speech-to-text with delay-conditioned decoding")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the tiny preset on the synthetic corpus and write a checkpoint.
    Train(TrainArgs),
    /// Transcribe a 16 kHz mono PCM16 WAV file.
    Transcribe(TranscribeArgs),
    /// Run the WebSocket gateway.
    Serve(ServeArgs),
    /// WER/CER over a (delay, left pad) grid.
    Eval(EvalArgs),
    /// Print the target stream of a labelled utterance.
    Targets(TargetsArgs),
    /// Write synthetic WAVs and a labels.jsonl file.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Checkpoint directory to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TRAIN_STEPS)]
    pub steps: usize,
    #[arg(long, default_value_t = DEFAULT_TRAIN_UTTERANCES)]
    pub utterances: usize,
    #[arg(long, default_value_t = TRAIN_CORPUS_SEED)]
    pub corpus_seed: u64,
    /// Seeds both initialisation and batch sampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub zloss: f32,
    #[arg(long)]
    pub lr: Option<f32>,
    /// Examples per step.
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    /// Delays per sampled utterance, sharing one encoder pass.
    #[arg(long, default_value_t = 4)]
    pub delays_per_sample: usize,
    #[arg(long, default_value = "ada_rmsnorm")]
    pub conditioning: Conditioning,
    /// Disable `[W]` sharing between back-to-back words.
    #[arg(long)]
    pub no_grouping: bool,
    /// Metrics log; defaults to `<out>/metrics.jsonl`.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

impl TrainArgs {
    pub fn new(out: PathBuf) -> Self {
        Self {
            out,
            steps: DEFAULT_TRAIN_STEPS,
            utterances: DEFAULT_TRAIN_UTTERANCES,
            corpus_seed: TRAIN_CORPUS_SEED,
            seed: 0,
            zloss: 1e-4,
            lr: None,
            batch: 16,
            delays_per_sample: 4,
            conditioning: Conditioning::AdaRmsNorm,
            no_grouping: false,
            metrics: None,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut c = TrainConfig::desk(self.steps);
        c.seed = self.seed;
        c.zloss_coeff = self.zloss;
        c.batch_size = self.batch;
        c.delays_per_sample = self.delays_per_sample;
        if let Some(lr) = self.lr {
            c.lr_warmup = lr;
            c.lr_joint = lr;
        }
        c.grouping = if self.no_grouping { Grouping::Off } else { Grouping::Contiguous };
        c
    }
}

#[derive(Debug, Clone, Args)]
pub struct TranscribeArgs {
    pub file: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 480)]
    pub delay_ms: u32,
    #[arg(long, default_value_t = 0)]
    pub left_pad_frames: usize,
    /// Print a JSON object with per-token timing instead of plain text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value_t = 16)]
    pub max_sessions: usize,
    #[arg(long, default_value_t = dstream_core::paging::DEFAULT_NUM_BLOCKS)]
    pub pool_blocks: usize,
    /// Environment variable holding the bearer token.
    #[arg(long, default_value = dstream_gateway::DEFAULT_AUTH_ENV)]
    pub auth_env: String,
    #[arg(long, default_value_t = 30)]
    pub idle_timeout_secs: u64,
    #[arg(long, default_value_t = 10.0)]
    pub max_buffer_secs: f32,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Delays in milliseconds.
    #[arg(long, value_delimiter = ',', default_value = "240,480,960,2400")]
    pub taus: Vec<u32>,
    #[arg(long, value_delimiter = ',', default_value = "0,16,32")]
    pub pads: Vec<usize>,
    /// Directory with labels.jsonl and WAVs; a synthetic held-out split otherwise.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = HELDOUT_CORPUS_SEED)]
    pub corpus_seed: u64,
    /// JSONL report path.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Clone, Args)]
pub struct TargetsArgs {
    /// labels.jsonl produced by `synth`.
    #[arg(long, conflicts_with = "words")]
    pub labels: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Inline words as `text:end_ms,...`.
    #[arg(long)]
    pub words: Option<String>,
    #[arg(long, default_value_t = 480)]
    pub delay_ms: u32,
    /// Stream length; defaults to the shortest that flushes every word.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub no_grouping: bool,
    /// Per-frame table instead of the id line.
    #[arg(long)]
    pub debug: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long, default_value_t = HELDOUT_CORPUS_SEED)]
    pub seed: u64,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => {
            let (model, report) = train_command(&a, |m| {
                if (m.step + 1) % 100 == 0 {
                    eprintln!("step {:>6} ce {:.4} zloss {:.2e} |logZ| {:.3} lr {:.2e}", m.step + 1, m.ce, m.zloss, m.log_z_abs_mean, m.lr);
                }
            })?;
            let last = report.metrics.last().map(|m| m.ce).unwrap_or(f32::NAN);
            println!("trained {} params for {} steps in {:.1}s, final ce {last:.4}", model.weights().n_params(), a.steps, report.seconds);
            println!("checkpoint written to {}", a.out.display());
        }
        Command::Transcribe(a) => {
            let out = transcribe_file(&a)?;
            if a.json {
                println!("{}", serde_json::to_string(&out)?);
            } else {
                println!("{}", out.transcript);
            }
        }
        Command::Serve(a) => serve_command(&a)?,
        Command::Eval(a) => {
            let report = eval_command(&a)?;
            if let Some(p) = &a.report {
                fs::write(p, report.to_jsonl()).with_context(|| format!("writing {}", p.display()))?;
            }
            print!("{}", report.table());
        }
        Command::Targets(a) => print!("{}", targets_command(&a)?),
        Command::Synth(a) => {
            let n = synth_command(&a)?;
            println!("wrote {n} utterances to {}", a.out.display());
        }
    }
    Ok(())
}

pub fn synthesizer() -> Synthesizer {
    Synthesizer::new(CorpusConfig::default()).expect("default corpus config")
}

/// Train from scratch; writes the checkpoint and metrics log to `args.out`.
pub fn train_command(args: &TrainArgs, mut progress: impl FnMut(&StepMetrics)) -> Result<(Model, TrainReport)> {
    let synth = synthesizer();
    let cfg = ModelConfig::tiny().with_conditioning(args.conditioning);
    let mut model = Model::init(cfg, args.seed)?;
    let corpus: Vec<PreparedSample> =
        synth.corpus(args.utterances, args.corpus_seed).iter().map(|s| PreparedSample::new(s, model.frontend())).collect();
    fs::create_dir_all(&args.out)?;
    let metrics_path = args.metrics.clone().unwrap_or_else(|| args.out.join("metrics.jsonl"));
    let mut log = BufWriter::new(File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?);
    let report = train::train(&mut model, &corpus, &args.train_config(), Some(&mut log), &mut progress)?;
    log.flush()?;
    checkpoint::save(&model, &args.out)?;
    Ok((model, report))
}

#[derive(Debug, Clone, Serialize)]
pub struct TimedToken {
    pub frame_index: usize,
    /// End of the frame the token was emitted in, counted from the first real sample.
    pub time_ms: i64,
    pub token_id: u32,
    pub kind: TokenKind,
    pub text: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Transcription {
    pub transcript: String,
    pub delay_ms: u32,
    pub left_pad_frames: usize,
    /// Non-pad tokens only.
    pub tokens: Vec<TimedToken>,
    /// Every emitted `(frame_index, token_id)` pair, pads included.
    pub stream: Vec<(usize, u32)>,
}

pub fn timed(events: &[TokenEvent], left_pad_frames: usize) -> Vec<TimedToken> {
    events
        .iter()
        .filter(|e| e.kind != TokenKind::Pad)
        .map(|e| TimedToken {
            frame_index: e.frame_index,
            time_ms: (e.frame_index as i64 + 1 - left_pad_frames as i64) * FRAME_MS as i64,
            token_id: e.token_id,
            kind: e.kind,
            text: e.text_delta.clone(),
        })
        .collect()
}

pub fn transcribe_with(engine: &Engine, pcm: &[f32], delay: DelaySpec, left_pad_frames: usize) -> Result<Transcription> {
    let (transcript, events) = eval::transcribe(engine, pcm, delay, left_pad_frames)?;
    Ok(Transcription {
        transcript,
        delay_ms: delay.ms(),
        left_pad_frames,
        tokens: timed(&events, left_pad_frames),
        stream: events.iter().map(|e| (e.frame_index, e.token_id)).collect(),
    })
}

pub fn load_engine(checkpoint: &Path, pool_blocks: usize) -> Result<Engine> {
    let model = checkpoint::load(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    Ok(Engine::new(Arc::new(model), pool_blocks))
}

pub fn transcribe_file(a: &TranscribeArgs) -> Result<Transcription> {
    let delay = DelaySpec::from_ms(a.delay_ms)?;
    let engine = load_engine(&a.checkpoint, dstream_core::paging::DEFAULT_NUM_BLOCKS)?;
    let pcm = read_wav(&a.file)?;
    transcribe_with(&engine, &pcm, delay, a.left_pad_frames)
}

pub fn serve_command(a: &ServeArgs) -> Result<()> {
    let engine = load_engine(&a.checkpoint, a.pool_blocks)?;
    let cfg = GatewayConfig {
        port: a.port,
        checkpoint: Some(a.checkpoint.clone()),
        max_sessions: a.max_sessions,
        auth_env: a.auth_env.clone(),
        pool_blocks: a.pool_blocks,
        max_buffer_samples: (a.max_buffer_secs * dstream_core::frontend::SAMPLE_RATE as f32) as usize,
        idle_timeout: Duration::from_secs(a.idle_timeout_secs),
    };
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(dstream_gateway::serve(engine, &cfg)).context("gateway")?;
    Ok(())
}

/// Labelled utterances from a `synth` directory.
pub fn load_dataset(dir: &Path) -> Result<Vec<EvalUtterance>> {
    let labels = read_labels(&dir.join("labels.jsonl"))?;
    labels
        .into_iter()
        .map(|l| {
            Ok(EvalUtterance {
                subset: if l.words.len() <= 4 { "short" } else { "long" }.into(),
                pcm: read_wav(&dir.join(&l.file))?,
                id: l.file,
                reference: l.text,
            })
        })
        .collect()
}

pub fn eval_command(a: &EvalArgs) -> Result<EvalReport> {
    let engine = load_engine(&a.checkpoint, dstream_core::paging::DEFAULT_NUM_BLOCKS)?;
    let corpus = match &a.data {
        Some(d) => load_dataset(d)?,
        None => EvalUtterance::from_synth(&synthesizer().corpus(a.count, a.corpus_seed)),
    };
    let delays = a.taus.iter().map(|&t| DelaySpec::from_ms(t)).collect::<dstream_core::Result<Vec<_>>>()?;
    let threads = if a.threads == 0 { std::thread::available_parallelism().map_or(1, |n| n.get()) } else { a.threads };
    Ok(eval::eval_sweep(&engine, &corpus, &delays, &a.pads, threads)?)
}

fn parse_words(s: &str) -> Result<Vec<TimedWord>> {
    s.split(',')
        .filter(|w| !w.trim().is_empty())
        .map(|w| {
            let (text, end) = w.trim().rsplit_once(':').with_context(|| format!("expected text:end_ms, got {w:?}"))?;
            Ok(TimedWord::new(text, end.parse().with_context(|| format!("bad end time in {w:?}"))?))
        })
        .collect()
}

pub fn targets_command(a: &TargetsArgs) -> Result<String> {
    let words = match (&a.labels, &a.words) {
        (Some(p), _) => {
            let labels = read_labels(p)?;
            let n = labels.len();
            labels.into_iter().nth(a.index).with_context(|| format!("index {} out of range ({n} labels)", a.index))?.words
        }
        (None, Some(w)) => parse_words(w)?,
        (None, None) => bail!("one of --labels or --words is required"),
    };
    let vocab = synthesizer().vocab().clone();
    let delay = DelaySpec::from_ms(a.delay_ms)?;
    let grouping = if a.no_grouping { Grouping::Off } else { Grouping::Contiguous };
    let n_frames = match a.frames {
        Some(n) => n,
        None => {
            let tokens: usize = words.iter().map(|w| vocab.tokenize_word(&w.text).map(|t| t.len() + 1)).sum::<dstream_core::Result<_>>()?;
            let last = words.last().map_or(0, |w| dstream_core::targets::emission_frame(w.end_ms, delay));
            let full = build_targets(&words, delay, last + tokens + 1, &vocab, grouping)?;
            full.tokens.iter().rposition(|t| t.kind != TokenKind::Pad).map_or(1, |i| i + 1)
        }
    };
    let t = build_targets(&words, delay, n_frames, &vocab, grouping)?;
    Ok(if a.debug { t.render_debug(&vocab) } else { t.to_line() + "\n" })
}

/// Write `count` held-out style utterances; returns the number written.
pub fn synth_command(a: &SynthArgs) -> Result<usize> {
    fs::create_dir_all(&a.out)?;
    let samples: Vec<SynthSample> = synthesizer().corpus(a.count, a.seed);
    let mut labels = BufWriter::new(File::create(a.out.join("labels.jsonl"))?);
    for (i, s) in samples.iter().enumerate() {
        let file = format!("utt{i:04}.wav");
        write_wav(&a.out.join(&file), &s.pcm)?;
        let l = Label { file, text: s.text(), words: s.words.clone() };
        writeln!(labels, "{}", serde_json::to_string(&l)?)?;
    }
    labels.flush()?;
    Ok(samples.len())
}
