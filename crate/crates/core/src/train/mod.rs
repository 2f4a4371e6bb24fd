//! Desk-scale training: two-phase schedule, AdamW, cross-entropy + z-loss.

pub mod corpus;
pub mod forward;

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::DelaySpec;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{Graph, LossParts, NodeId, Tensor};
use crate::targets::Grouping;
use crate::tokenizer::TokenId;
use crate::weights::{Group, ParamKind, Weights};
use corpus::PreparedSample;
pub use forward::{forward, ForwardNodes};

pub const MIN_DELAY_FRAMES: u32 = 1;
pub const MAX_DELAY_FRAMES: u32 = 30;

/// Uniform over `1..=30` frames.
pub fn sample_delay<R: Rng + ?Sized>(rng: &mut R) -> DelaySpec {
    sample_delay_in(rng, MIN_DELAY_FRAMES, MAX_DELAY_FRAMES)
}

pub fn sample_delay_in<R: Rng + ?Sized>(rng: &mut R, lo: u32, hi: u32) -> DelaySpec {
    DelaySpec::from_frames(rng.random_range(lo..=hi)).expect("delay in range")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub warmup_fraction: f32,
    pub lr_warmup: f32,
    pub lr_joint: f32,
    /// Linear ramp at the start of each phase, in steps.
    pub lr_ramp_steps: usize,
    /// Joint-phase cosine decay floor as a fraction of `lr_joint`.
    pub lr_final_fraction: f32,
    pub zloss_coeff: f32,
    /// Loss weight of `[P]` frames relative to other frames.
    pub pad_weight: f32,
    /// Examples per step.
    pub batch_size: usize,
    /// Delays drawn per sampled utterance; they share one encoder pass.
    pub delays_per_sample: usize,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    pub weight_decay: f32,
    pub grad_clip: f32,
    pub grouping: Grouping,
    /// Training delays are drawn uniformly from this inclusive frame range.
    pub delay_frames: (u32, u32),
    /// Extra decoder frames past the last emitted token.
    pub flush_margin: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Large-model rates: 4e-4 warm-up, 6e-5 joint.
    pub fn paper_schedule(total_steps: usize) -> Self {
        Self { lr_warmup: 4e-4, lr_joint: 6e-5, ..Self::desk(total_steps) }
    }

    /// Desk-scale defaults for the tiny preset trained from scratch.
    pub fn desk(total_steps: usize) -> Self {
        Self {
            total_steps,
            warmup_fraction: 0.05,
            lr_warmup: 3e-3,
            lr_joint: 3e-3,
            lr_ramp_steps: 50,
            lr_final_fraction: 0.05,
            zloss_coeff: 1e-4,
            pad_weight: 1.0,
            batch_size: 16,
            delays_per_sample: 4,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: 1.0,
            grouping: Grouping::Contiguous,
            delay_frames: (MIN_DELAY_FRAMES, MAX_DELAY_FRAMES),
            flush_margin: 2,
            seed: 0,
        }
    }

    /// Utterances drawn per step.
    pub fn samples_per_step(&self) -> usize {
        (self.batch_size / self.delays_per_sample.max(1)).max(1)
    }

    pub fn warmup_steps(&self) -> usize {
        (self.total_steps as f32 * self.warmup_fraction).round() as usize
    }

    pub fn in_warmup(&self, step: usize) -> bool {
        step < self.warmup_steps()
    }

    pub fn lr_at(&self, step: usize) -> f32 {
        let w = self.warmup_steps();
        let ramp = |k: usize| ((k + 1) as f32 / self.lr_ramp_steps.max(1) as f32).min(1.0);
        if step < w {
            return self.lr_warmup * ramp(step);
        }
        let k = step - w;
        let span = (self.total_steps - w).max(1) as f32;
        let cos = 0.5 * (1.0 + (std::f32::consts::PI * (k as f32 / span).min(1.0)).cos());
        let f = self.lr_final_fraction;
        self.lr_joint * ramp(k) * (f + (1.0 - f) * cos)
    }

    /// Whether a parameter group is updated at `step`.
    pub fn trainable(&self, step: usize, group: Group) -> bool {
        !(self.in_warmup(step) && group == Group::Decoder)
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub ce: f32,
    pub zloss: f32,
    #[serde(rename = "logZ_abs_mean")]
    pub log_z_abs_mean: f32,
    pub text_emb_norm: f32,
    pub audio_emb_norm: f32,
    pub lr: f32,
    pub grad_norm: f32,
}

/// Teacher-forced inputs and targets for one sample at one delay.
pub struct Example {
    pub mel: Vec<f32>,
    pub prev: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    pub delay: DelaySpec,
}

pub fn make_example(model: &Model, sample: &PreparedSample, delay: DelaySpec, grouping: Grouping, margin: usize) -> Result<Example> {
    let n = sample.frames_for(delay, model.vocab(), grouping, margin)?;
    example_with_frames(model, sample, delay, grouping, n)
}

/// Examples of one sample at several delays, all as long as the longest.
pub fn make_examples(model: &Model, sample: &PreparedSample, delays: &[DelaySpec], grouping: Grouping, margin: usize) -> Result<Vec<Example>> {
    let mut n = 0;
    for &d in delays {
        n = n.max(sample.frames_for(d, model.vocab(), grouping, margin)?);
    }
    delays.iter().map(|&d| example_with_frames(model, sample, d, grouping, n)).collect()
}

fn example_with_frames(model: &Model, sample: &PreparedSample, delay: DelaySpec, grouping: Grouping, n: usize) -> Result<Example> {
    let vocab = model.vocab();
    let targets = sample.targets(delay, n, vocab, grouping)?.ids();
    let mut prev = Vec::with_capacity(n);
    prev.push(vocab.pad_id());
    prev.extend_from_slice(&targets[..n - 1]);
    let mel = sample.mel_rows(n, model.config().encoder.n_mels, model.frontend().floor_value());
    Ok(Example { mel, prev, targets, delay })
}

/// Loss, gradients and logging quantities for one example.
pub struct ExampleResult {
    pub parts: LossParts,
    pub grads: Weights<Option<Tensor>>,
    pub frames: usize,
    pub audio_norm: f32,
    pub correct: usize,
}

pub fn example_grads(model: &Model, ex: &Example, cfg: &TrainConfig, trainable: impl Fn(Group) -> bool) -> ExampleResult {
    group_grads(model, std::slice::from_ref(ex), cfg, trainable)
}

/// Summed loss over examples that share their mel input; `parts`,
/// `audio_norm` and `frames` are summed as well.
pub fn group_grads(model: &Model, exs: &[Example], cfg: &TrainConfig, trainable: impl Fn(Group) -> bool) -> ExampleResult {
    let mut g = Graph::new();
    let params = forward::param_leaves(&mut g, model, trainable);
    let audio = forward::forward_audio(&mut g, model, &params, &exs[0].mel, exs[0].prev.len());
    let av = g.value(audio);
    let audio_norm = (0..av.rows()).map(|r| l2(av.row(r))).sum::<f32>() / av.rows() as f32 * exs.len() as f32;
    let pad = model.vocab().pad_id();
    let mut total: Option<NodeId> = None;
    let mut parts = LossParts::default();
    let (mut frames, mut correct) = (0, 0);
    for ex in exs {
        debug_assert!(ex.mel == exs[0].mel, "group_grads: examples must share mel");
        let logits = forward::forward_text(&mut g, model, &params, audio, &ex.prev, ex.delay);
        let weights: Vec<f32> = ex.targets.iter().map(|&t| if t == pad { cfg.pad_weight } else { 1.0 }).collect();
        let targets: Vec<usize> = ex.targets.iter().map(|&t| t as usize).collect();
        let (loss, p) = g.cross_entropy_z(logits, targets, weights, cfg.zloss_coeff);
        let lv = g.value(logits);
        correct += (0..lv.rows()).filter(|&r| crate::decoder::argmax(lv.row(r)) as TokenId == ex.targets[r]).count();
        frames += ex.targets.len();
        parts.ce += p.ce;
        parts.z += p.z;
        parts.log_z_abs_mean += p.log_z_abs_mean;
        total = Some(match total {
            Some(t) => g.add(t, loss),
            None => loss,
        });
    }
    let mut grads = g.backward(total.expect("at least one example"));
    let grads = params.map(|_, &id| grads.take(id));
    ExampleResult { parts, grads, frames, audio_norm, correct }
}

fn l2(x: &[f32]) -> f32 {
    x.iter().map(|v| v * v).sum::<f32>().sqrt()
}

/// AdamW with decoupled weight decay on matrices only.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Weights<Tensor>,
    v: Weights<Tensor>,
    steps: Weights<u32>,
}

impl AdamW {
    pub fn new(params: &Weights<Tensor>) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), steps: params.map(|_, _| 0) }
    }

    /// Apply one update; parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut Weights<Tensor>, grads: &Weights<Option<Tensor>>, lr: f32, cfg: &TrainConfig) {
        let mut m_refs: Vec<&mut Tensor> = Vec::new();
        self.m.for_each_mut(|_, t| m_refs.push(t));
        let mut v_refs: Vec<&mut Tensor> = Vec::new();
        self.v.for_each_mut(|_, t| v_refs.push(t));
        let mut s_refs: Vec<&mut u32> = Vec::new();
        self.steps.for_each_mut(|_, t| s_refs.push(t));
        let mut state = m_refs.into_iter().zip(v_refs).zip(s_refs);
        params.zip_mut(grads, |info, p, g| {
            let ((m, v), s) = state.next().expect("optimizer layout");
            let Some(g) = g else { return };
            *s += 1;
            let t = *s as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            let decay = if info.kind == ParamKind::Matrix { cfg.weight_decay } else { 0.0 };
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (((w, mi), vi), gi) in pd.iter_mut().zip(md.iter_mut()).zip(vd.iter_mut()).zip(g.data()) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + cfg.adam_eps);
                *w -= lr * (update + decay * *w);
            }
        });
    }
}

fn add_grads(acc: &mut Weights<Option<Tensor>>, g: Weights<Option<Tensor>>) {
    let mut it = Vec::new();
    let mut g = g;
    g.for_each_mut(|_, t| it.push(t.take()));
    let mut it = it.into_iter();
    acc.for_each_mut(|_, a| {
        let Some(t) = it.next().expect("layout") else { return };
        match a {
            Some(a) => a.data_mut().iter_mut().zip(t.data()).for_each(|(x, y)| *x += y),
            None => *a = Some(t),
        }
    });
}

fn global_norm(grads: &Weights<Option<Tensor>>) -> f32 {
    let mut s = 0.0f64;
    grads.for_each(|_, g| {
        if let Some(g) = g {
            s += g.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>();
        }
    });
    s.sqrt() as f32
}

/// Summary of a finished run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub metrics: Vec<StepMetrics>,
    pub seconds: f64,
}

/// Train in place. Metrics are appended to `log` as JSON lines when given.
pub fn train(
    model: &mut Model,
    corpus: &[PreparedSample],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
    mut progress: impl FnMut(&StepMetrics),
) -> Result<TrainReport> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("train corpus"));
    }
    if cfg.delays_per_sample == 0 || cfg.batch_size % cfg.delays_per_sample != 0 {
        return Err(Error::Config(format!("batch {} is not a multiple of {} delays per sample", cfg.batch_size, cfg.delays_per_sample)));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(model.weights());
    let mut metrics = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let trainable = |g: Group| cfg.trainable(step, g);
        let mut acc: Weights<Option<Tensor>> = model.weights().map(|_, _| None);
        let (mut ce, mut z, mut lz, mut audio_norm) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..cfg.samples_per_step() {
            let sample = &corpus[rng.random_range(0..corpus.len())];
            let delays: Vec<DelaySpec> =
                (0..cfg.delays_per_sample).map(|_| sample_delay_in(&mut rng, cfg.delay_frames.0, cfg.delay_frames.1)).collect();
            let exs = make_examples(model, sample, &delays, cfg.grouping, cfg.flush_margin)?;
            let r = group_grads(model, &exs, cfg, trainable);
            if !r.parts.ce.is_finite() || !r.parts.z.is_finite() {
                return Err(Error::Diverged(step));
            }
            ce += r.parts.ce;
            z += r.parts.z;
            lz += r.parts.log_z_abs_mean;
            audio_norm += r.audio_norm;
            add_grads(&mut acc, r.grads);
        }
        let b = (cfg.samples_per_step() * cfg.delays_per_sample) as f32;
        let inv = 1.0 / b;
        acc.for_each_mut(|_, g| {
            if let Some(g) = g {
                g.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
        });
        let norm = global_norm(&acc);
        if !norm.is_finite() {
            return Err(Error::Diverged(step));
        }
        if norm > cfg.grad_clip {
            let s = cfg.grad_clip / norm;
            acc.for_each_mut(|_, g| {
                if let Some(g) = g {
                    g.data_mut().iter_mut().for_each(|v| *v *= s);
                }
            });
        }
        let lr = cfg.lr_at(step);
        opt.step(model.weights_mut(), &acc, lr, cfg);
        let emb = &model.weights().decoder.embedding;
        let text_emb_norm = (0..emb.rows()).map(|r| l2(emb.row(r))).sum::<f32>() / emb.rows() as f32;
        let m = StepMetrics {
            step,
            ce: ce / b,
            zloss: z / b,
            log_z_abs_mean: lz / b,
            text_emb_norm,
            audio_emb_norm: audio_norm / b,
            lr,
            grad_norm: norm,
        };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(&m)?)?;
        }
        progress(&m);
        metrics.push(m);
    }
    Ok(TrainReport { metrics, seconds: start.elapsed().as_secs_f64() })
}

/// Teacher-forced token accuracy over `samples` at a fixed delay.
pub fn teacher_forced_accuracy(model: &Model, samples: &[PreparedSample], delay: DelaySpec, cfg: &TrainConfig) -> Result<f32> {
    let (mut ok, mut total) = (0usize, 0usize);
    for s in samples {
        let ex = make_example(model, s, delay, cfg.grouping, cfg.flush_margin)?;
        let r = example_grads(model, &ex, cfg, |_| false);
        ok += r.correct;
        total += r.frames;
    }
    Ok(ok as f32 / total.max(1) as f32)
}
