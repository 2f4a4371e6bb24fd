//! Resumable streaming sessions: 80 ms frames in, one token out per frame.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::Serialize;

use crate::cache::KvStore;
use crate::decoder::{DecoderState, DelaySpec};
use crate::encoder::EncoderState;
use crate::error::{Error, Result};
use crate::frontend::FrontendState;
use crate::model::Model;
use crate::paging::{CacheKind, PagedKv, PagedKvPool, PoolConfig, PoolStats, DEFAULT_BLOCK_SIZE, DEFAULT_NUM_BLOCKS};
use crate::tokenizer::{StreamToken, TokenId, TokenKind};

/// Samples per decoder frame (80 ms at 16 kHz).
pub const FRAME_SAMPLES: usize = 1280;
/// Mel frames per decoder frame.
pub const MEL_PER_FRAME: usize = 8;
/// Silent frames appended at finish beyond the delay.
pub const FLUSH_EXTRA_FRAMES: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TokenEvent {
    /// Decoder frame, counting prefill frames.
    pub frame_index: usize,
    pub token_id: TokenId,
    pub kind: TokenKind,
    pub text_delta: String,
}

impl TokenEvent {
    pub fn token(&self) -> StreamToken {
        StreamToken { id: self.token_id, kind: self.kind }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SessionStats {
    pub id: u64,
    pub delay_ms: u32,
    pub left_pad_frames: usize,
    pub frames_processed: usize,
    pub tokens_emitted: usize,
    pub samples_received: usize,
    pub pool_blocks: usize,
    pub closed: bool,
}

/// Output of [`Session::finish`].
#[derive(Debug, Clone)]
pub struct Finished {
    pub events: Vec<TokenEvent>,
    pub transcript: String,
}

/// Shared model plus KV pool; hands out sessions.
#[derive(Debug, Clone)]
pub struct Engine {
    model: Arc<Model>,
    pool: PagedKvPool,
    next_id: Arc<AtomicU64>,
}

impl Engine {
    pub fn new(model: Arc<Model>, num_blocks: usize) -> Self {
        let pool = PagedKvPool::new(PoolConfig::for_model(model.config(), DEFAULT_BLOCK_SIZE, num_blocks));
        Self { model, pool, next_id: Arc::new(AtomicU64::new(1)) }
    }

    pub fn with_default_pool(model: Arc<Model>) -> Self {
        Self::new(model, DEFAULT_NUM_BLOCKS)
    }

    pub fn model(&self) -> &Arc<Model> {
        &self.model
    }

    pub fn pool(&self) -> &PagedKvPool {
        &self.pool
    }

    pub fn pool_stats(&self) -> PoolStats {
        self.pool.stats()
    }

    pub fn create_session(&self, delay: DelaySpec, left_pad_frames: usize) -> Result<Session> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        Session::new(self.model.clone(), &self.pool, id, delay, left_pad_frames)
    }
}

/// One streaming transcription.
#[derive(Debug)]
pub struct Session {
    id: u64,
    model: Arc<Model>,
    left_pad: usize,
    frontend: FrontendState,
    mel: Vec<Vec<f32>>,
    enc_frames: Vec<f32>,
    encoder: EncoderState<PagedKv>,
    decoder: DecoderState<PagedKv>,
    frames: usize,
    samples: usize,
    tokens: Vec<TokenId>,
    closed: bool,
}

impl Session {
    pub fn new(model: Arc<Model>, pool: &PagedKvPool, id: u64, delay: DelaySpec, left_pad_frames: usize) -> Result<Self> {
        let cfg = model.config();
        let p = cfg.decoder.pooling;
        let enc_kv = PagedKv::new(pool, id, CacheKind::Encoder, cfg.encoder.n_layers, p, cfg.encoder.attention().kv_dim())?;
        let dec_kv = PagedKv::new(pool, id, CacheKind::Decoder, cfg.decoder.n_layers, p, cfg.decoder.attention().kv_dim())?;
        let mut s = Self {
            id,
            frontend: model.frontend().stream(),
            mel: Vec::with_capacity(MEL_PER_FRAME),
            enc_frames: Vec::with_capacity(p * cfg.encoder.d_model),
            encoder: model.encoder_state_with(enc_kv),
            decoder: model.decoder_state_with(delay, dec_kv),
            left_pad: left_pad_frames,
            frames: 0,
            samples: 0,
            tokens: Vec::new(),
            closed: false,
            model,
        };
        let silence = vec![0.0f32; FRAME_SAMPLES];
        let pad = s.model.vocab().pad_id();
        for _ in 0..left_pad_frames {
            s.feed(&silence, Some(pad), &mut Vec::new())?;
        }
        Ok(s)
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn delay(&self) -> DelaySpec {
        self.decoder.delay()
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Decoder frames processed, including prefill.
    pub fn frames_processed(&self) -> usize {
        self.frames
    }

    pub fn last_token(&self) -> TokenId {
        self.decoder.last_token()
    }

    /// Logical (decoder, encoder) KV lengths of layer 0.
    pub fn kv_lengths(&self) -> (usize, usize) {
        (self.decoder.kv.len(0), self.encoder.kv().len(0))
    }

    pub fn pool_blocks(&self) -> usize {
        self.decoder.kv.resident_blocks() + self.encoder.kv().resident_blocks()
    }

    pub fn stats(&self) -> SessionStats {
        SessionStats {
            id: self.id,
            delay_ms: self.delay().ms(),
            left_pad_frames: self.left_pad,
            frames_processed: self.frames,
            tokens_emitted: self.tokens.len(),
            samples_received: self.samples,
            pool_blocks: self.pool_blocks(),
            closed: self.closed,
        }
    }

    /// Emitted token ids so far (prefill excluded).
    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn transcript(&self) -> String {
        self.model.vocab().detokenize(&self.tokens)
    }

    /// Push samples through frontend and encoder; every completed decoder
    /// frame either emits an event or, with `forced`, advances silently.
    fn feed(&mut self, pcm: &[f32], forced: Option<TokenId>, events: &mut Vec<TokenEvent>) -> Result<()> {
        let frames = self.frontend.feed(pcm);
        let model = self.model.clone();
        let d_enc = model.config().encoder.d_model;
        let p = model.config().decoder.pooling;
        for f in frames {
            self.mel.push(f.bins);
            if self.mel.len() < 2 {
                continue;
            }
            let pair: Vec<Vec<f32>> = std::mem::take(&mut self.mel);
            let out = model.encode_step(&mut self.encoder, [&pair[0], &pair[1]])?;
            self.enc_frames.extend_from_slice(&out);
            if self.enc_frames.len() < p * d_enc {
                continue;
            }
            let audio = model.adapt(&self.enc_frames)?;
            self.enc_frames.clear();
            match forced {
                Some(id) => model.decode_forced(&mut self.decoder, &audio, id)?,
                None => {
                    let out = model.decode_step(&mut self.decoder, &audio)?;
                    let id = out.token.id;
                    self.tokens.push(id);
                    events.push(TokenEvent {
                        frame_index: self.frames,
                        token_id: id,
                        kind: out.token.kind,
                        text_delta: model.vocab().piece_text(id),
                    });
                }
            }
            self.frames += 1;
        }
        Ok(())
    }

    /// Buffer audio and decode every completed 80 ms frame.
    pub fn append_audio(&mut self, pcm: &[f32]) -> Result<Vec<TokenEvent>> {
        if self.closed {
            return Err(Error::SessionClosed(self.id));
        }
        let mut events = Vec::new();
        let r = self.feed(pcm, None, &mut events);
        self.samples += pcm.len();
        r.map(|_| events)
    }

    pub fn append_pcm16(&mut self, pcm: &[i16]) -> Result<Vec<TokenEvent>> {
        let x: Vec<f32> = pcm.iter().map(|&s| crate::frontend::pcm16_to_f32(s)).collect();
        self.append_audio(&x)
    }

    /// Complete the partial frame with zeros, flush `τ + 8` silent frames,
    /// close the session and release its blocks.
    pub fn finish(&mut self) -> Result<Finished> {
        if self.closed {
            return Err(Error::SessionClosed(self.id));
        }
        let partial = self.samples % FRAME_SAMPLES;
        let mut pad = if partial == 0 { 0 } else { FRAME_SAMPLES - partial };
        pad += flush_frames(self.delay()) * FRAME_SAMPLES;
        let mut events = Vec::new();
        let r = self.feed(&vec![0.0; pad], None, &mut events);
        self.close();
        r?;
        Ok(Finished { events, transcript: self.transcript() })
    }

    /// Release blocks without flushing.
    pub fn close(&mut self) {
        self.closed = true;
        self.decoder.kv.clear();
        self.encoder.kv_mut().clear();
    }
}

pub fn flush_frames(delay: DelaySpec) -> usize {
    delay.frames() as usize + FLUSH_EXTRA_FRAMES
}

/// Single-shot reference: the whole padded signal through the batch
/// frontend and encoder, then greedy stepwise decoding with contiguous caches.
pub fn offline_transcribe(model: &Model, pcm: &[f32], delay: DelaySpec, left_pad_frames: usize) -> Result<Vec<StreamToken>> {
    let mut audio = vec![0.0f32; left_pad_frames * FRAME_SAMPLES];
    audio.extend_from_slice(pcm);
    let frames = pcm.len().div_ceil(FRAME_SAMPLES) + flush_frames(delay) + left_pad_frames;
    audio.resize(frames * FRAME_SAMPLES, 0.0);
    let mel: Vec<f32> = model.frontend().log_mel(&audio).into_iter().flat_map(|f| f.bins).collect();
    let enc = model.encode_batch(&mel)?;
    let d_enc = model.config().encoder.d_model;
    let p = model.config().decoder.pooling;
    let mut st = model.decoder_state(delay);
    let pad = model.vocab().pad_id();
    let mut out = Vec::new();
    for t in 0..frames {
        let a = model.adapt(&enc[t * p * d_enc..(t + 1) * p * d_enc])?;
        if t < left_pad_frames {
            model.decode_forced(&mut st, &a, pad)?;
        } else {
            out.push(model.decode_step(&mut st, &a)?.token);
        }
    }
    Ok(out)
}
