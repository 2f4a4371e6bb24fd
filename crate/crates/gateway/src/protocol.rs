//! v1 wire schema: one JSON object per text frame, tagged by `type`.

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use dstream_core::session::TokenEvent;
use dstream_core::tokenizer::TokenKind;

pub const DEFAULT_DELAY_MS: u32 = 480;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "type")]
pub enum ClientMessage {
    #[serde(rename = "session.create")]
    SessionCreate {
        #[serde(default = "default_delay")]
        delay_ms: u32,
        #[serde(default)]
        left_pad_frames: usize,
    },
    #[serde(rename = "audio.append")]
    AudioAppend { audio: String },
    #[serde(rename = "audio.commit")]
    AudioCommit {},
    #[serde(rename = "session.finish")]
    SessionFinish {},
}

fn default_delay() -> u32 {
    DEFAULT_DELAY_MS
}

const CLIENT_TYPES: [&str; 4] = ["session.create", "audio.append", "audio.commit", "session.finish"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum ServerMessage {
    #[serde(rename = "session.created")]
    SessionCreated { id: u64 },
    #[serde(rename = "token.delta")]
    TokenDelta { frame_index: usize, token_id: u32, kind: TokenKind, text: String },
    #[serde(rename = "transcript.final")]
    TranscriptFinal { text: String },
    #[serde(rename = "error")]
    Error { code: ErrorCode, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    InvalidJson,
    UnknownType,
    InvalidMessage,
    InvalidDelay,
    InvalidAudio,
    NoSession,
    SessionExists,
    TooManySessions,
    BufferOverflow,
    SessionError,
}

impl ServerMessage {
    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        Self::Error { code, message: message.into() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("serialisable")
    }
}

impl From<&TokenEvent> for ServerMessage {
    fn from(e: &TokenEvent) -> Self {
        Self::TokenDelta { frame_index: e.frame_index, token_id: e.token_id, kind: e.kind, text: e.text_delta.clone() }
    }
}

/// Parse a text frame. Unknown fields are ignored; unknown types are errors.
pub fn parse_client(text: &str) -> Result<ClientMessage, ServerMessage> {
    let v: serde_json::Value =
        serde_json::from_str(text).map_err(|e| ServerMessage::error(ErrorCode::InvalidJson, e.to_string()))?;
    let ty = match v.get("type").and_then(|t| t.as_str()) {
        Some(t) => t,
        None => return Err(ServerMessage::error(ErrorCode::InvalidMessage, "missing string field \"type\"")),
    };
    if !CLIENT_TYPES.contains(&ty) {
        return Err(ServerMessage::error(ErrorCode::UnknownType, format!("unknown message type {ty:?}")));
    }
    serde_json::from_value(v).map_err(|e| ServerMessage::error(ErrorCode::InvalidMessage, e.to_string()))
}

/// Base64 of little-endian PCM16.
pub fn decode_audio(b64: &str) -> Result<Vec<i16>, ServerMessage> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(b64)
        .map_err(|e| ServerMessage::error(ErrorCode::InvalidAudio, e.to_string()))?;
    if bytes.len() % 2 != 0 {
        return Err(ServerMessage::error(ErrorCode::InvalidAudio, "odd number of PCM16 bytes"));
    }
    Ok(bytes.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]])).collect())
}

pub fn encode_audio(pcm: &[i16]) -> String {
    let bytes: Vec<u8> = pcm.iter().flat_map(|s| s.to_le_bytes()).collect();
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_ignores_unknown_fields() {
        let m = parse_client(r#"{"type":"session.create","delay_ms":480,"left_pad_frames":32,"extra":1}"#).unwrap();
        assert_eq!(m, ClientMessage::SessionCreate { delay_ms: 480, left_pad_frames: 32 });
        assert_eq!(parse_client(r#"{"type":"audio.commit"}"#).unwrap(), ClientMessage::AudioCommit {});
        let code = |t: &str| match parse_client(t) {
            Err(ServerMessage::Error { code, .. }) => code,
            other => panic!("{other:?}"),
        };
        assert_eq!(code(r#"{"type":"nope"}"#), ErrorCode::UnknownType);
        assert_eq!(code("{"), ErrorCode::InvalidJson);
        assert_eq!(code(r#"{"type":"audio.append"}"#), ErrorCode::InvalidMessage);
    }

    #[test]
    fn audio_roundtrip() {
        let pcm = [0i16, -1, 32767, -32768, 5];
        assert_eq!(decode_audio(&encode_audio(&pcm)).unwrap(), pcm);
        assert!(decode_audio("AAEC").is_err());
        let j = ServerMessage::error(ErrorCode::InvalidDelay, "x").to_json();
        assert_eq!(j, r#"{"type":"error","code":"invalid_delay","message":"x"}"#);
    }
}
