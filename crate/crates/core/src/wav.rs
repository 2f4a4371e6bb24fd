//! PCM16 mono 16 kHz WAV files, plus the label sidecar used by synthetic sets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{f32_to_pcm16, pcm16_to_f32, SAMPLE_RATE};
use crate::targets::TimedWord;

pub fn read_wav(path: &Path) -> Result<Vec<f32>> {
    let mut r = hound::WavReader::open(path).map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?;
    let s = r.spec();
    if s.channels != 1 || s.sample_rate != SAMPLE_RATE || s.bits_per_sample != 16 || s.sample_format != hound::SampleFormat::Int {
        return Err(Error::Wav(format!(
            "{}: need 16-bit PCM mono at {SAMPLE_RATE} Hz, got {} ch {} Hz {} bit {:?}",
            path.display(),
            s.channels,
            s.sample_rate,
            s.bits_per_sample,
            s.sample_format
        )));
    }
    r.samples::<i16>()
        .map(|v| v.map(pcm16_to_f32).map_err(|e| Error::Wav(e.to_string())))
        .collect()
}

pub fn write_wav(path: &Path, pcm: &[f32]) -> Result<()> {
    let spec = hound::WavSpec { channels: 1, sample_rate: SAMPLE_RATE, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let err = |e: hound::Error| Error::Wav(format!("{}: {e}", path.display()));
    let mut w = hound::WavWriter::create(path, spec).map_err(err)?;
    for &x in pcm {
        w.write_sample(f32_to_pcm16(x)).map_err(err)?;
    }
    w.finalize().map_err(err)
}

/// One line of `labels.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub file: String,
    pub text: String,
    pub words: Vec<TimedWord>,
}

pub fn read_labels(path: &Path) -> Result<Vec<Label>> {
    let s = std::fs::read_to_string(path)?;
    s.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}
