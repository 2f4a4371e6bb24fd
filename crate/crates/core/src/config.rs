//! Model configuration and presets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;
use crate::nn::ops::{DEFAULT_RMS_EPS, DEFAULT_ROPE_THETA};
use crate::nn::AttentionConfig;
use crate::tokenizer::Vocabulary;

/// How the decoder is told the target delay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Scale the FFN branch's normalised input by `1 + g(τ)`.
    AdaRmsNorm,
    /// Add a sinusoidal delay embedding to every fused input.
    SumEmbedding,
    /// Put a delay token on the text stream at stream start and whenever
    /// the previous one slides out of the attention window.
    SpecialToken,
}

impl std::str::FromStr for Conditioning {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ada_rmsnorm" => Ok(Self::AdaRmsNorm),
            "sum_embedding" => Ok(Self::SumEmbedding),
            "special_token" => Ok(Self::SpecialToken),
            other => Err(Error::Config(format!("unknown conditioning mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub window_frames: usize,
    pub conv_channels: usize,
    pub ffn_hidden: usize,
    pub n_mels: usize,
    pub rope_theta: f32,
    pub norm_eps: f32,
}

impl EncoderConfig {
    pub fn tiny() -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            window_frames: 32,
            conv_channels: 64,
            ffn_hidden: 192,
            n_mels: 128,
            rope_theta: DEFAULT_ROPE_THETA,
            norm_eps: DEFAULT_RMS_EPS,
        }
    }

    pub fn paper() -> Self {
        Self {
            n_layers: 32,
            d_model: 1280,
            n_heads: 32,
            window_frames: 750,
            conv_channels: 1280,
            ffn_hidden: 5120,
            n_mels: 128,
            rope_theta: DEFAULT_ROPE_THETA,
            norm_eps: DEFAULT_RMS_EPS,
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            n_heads: self.n_heads,
            n_kv_heads: self.n_heads,
            head_dim: self.d_model / self.n_heads,
            window: self.window_frames,
            rope_theta: self.rope_theta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub window_tokens: usize,
    pub pooling: usize,
    pub ffn_hidden: usize,
    /// Inner width of the per-layer delay MLP.
    pub cond_inner: usize,
    pub conditioning: Conditioning,
    pub rope_theta: f32,
    pub norm_eps: f32,
}

impl DecoderConfig {
    pub fn tiny() -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            n_kv_heads: 2,
            window_tokens: 128,
            pooling: 4,
            ffn_hidden: 192,
            cond_inner: 32,
            conditioning: Conditioning::AdaRmsNorm,
            rope_theta: DEFAULT_ROPE_THETA,
            norm_eps: DEFAULT_RMS_EPS,
        }
    }

    pub fn paper() -> Self {
        Self {
            n_layers: 26,
            d_model: 3072,
            n_heads: 32,
            n_kv_heads: 8,
            window_tokens: 8192,
            pooling: 4,
            ffn_hidden: 9216,
            cond_inner: 32,
            conditioning: Conditioning::AdaRmsNorm,
            rope_theta: DEFAULT_ROPE_THETA,
            norm_eps: DEFAULT_RMS_EPS,
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            n_heads: self.n_heads,
            n_kv_heads: self.n_kv_heads,
            head_dim: self.d_model / self.n_heads,
            window: self.window_tokens,
            rope_theta: self.rope_theta,
        }
    }

    /// Extra parameters introduced by the per-layer delay MLPs (no biases).
    pub fn conditioning_params(&self) -> usize {
        match self.conditioning {
            Conditioning::AdaRmsNorm => self.n_layers * (self.d_model * self.cond_inner + self.cond_inner * self.d_model),
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: String,
    pub frontend: FrontendConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub vocab: Vocabulary,
}

pub const DEFAULT_VOCAB_WORDS: usize = 24;

impl ModelConfig {
    pub fn tiny() -> Self {
        Self {
            preset: "tiny".into(),
            frontend: FrontendConfig::default(),
            encoder: EncoderConfig::tiny(),
            decoder: DecoderConfig::tiny(),
            vocab: Vocabulary::synthetic(DEFAULT_VOCAB_WORDS).expect("default vocabulary"),
        }
    }

    /// Full-size dimensions; used for arithmetic only, never allocated here.
    pub fn paper() -> Self {
        Self {
            preset: "paper".into(),
            frontend: FrontendConfig::default(),
            encoder: EncoderConfig::paper(),
            decoder: DecoderConfig::paper(),
            vocab: Vocabulary::synthetic(DEFAULT_VOCAB_WORDS).expect("default vocabulary"),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn with_conditioning(mut self, mode: Conditioning) -> Self {
        self.decoder.conditioning = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let d = &self.decoder;
        e.attention().validate()?;
        d.attention().validate()?;
        if e.d_model % e.n_heads != 0 || d.d_model % d.n_heads != 0 {
            return Err(Error::Config("d_model must be divisible by n_heads".into()));
        }
        if d.pooling != 4 {
            return Err(Error::Config(format!("adapter pooling must be 4, got {}", d.pooling)));
        }
        if e.n_mels != self.frontend.n_mels {
            return Err(Error::Config("encoder n_mels must match the frontend".into()));
        }
        if d.d_model % 2 != 0 {
            return Err(Error::Config("decoder d_model must be even for sinusoidal delay embeddings".into()));
        }
        Ok(())
    }

    /// Adapter parameters: `4·d_enc → d_dec → d_dec`.
    pub fn adapter_params(&self) -> usize {
        let (e, d) = (self.encoder.d_model, self.decoder.d_model);
        self.decoder.pooling * e * d + d * d
    }
}
