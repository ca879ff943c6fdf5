//! Scorer wire protocol, version 1.
//!
//! Every message is one JSON header line terminated by `\n`, followed by
//! `payload_bytes` bytes of little-endian `f32`. Image and gradient blobs
//! are `H * W * 3` values, row-major with RGB interleaved.
//!
//! ```text
//! service -> engine  {"version":1,"model":"...","input_size":224,"temperature":100.0,"payload_bytes":0}
//! engine  -> service {"version":1,"id":7,"height":H,"width":W,"positive":"...","negatives":[...],"payload_bytes":12HW}
//! service -> engine  {"version":1,"id":7,"height":H,"width":W,"loss":1.25,"payload_bytes":12HW}
//! service -> engine  {"version":1,"id":7,"error":"...","payload_bytes":0}
//! ```
//!
//! The handshake is the first frame the service sends on a connection.

use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROTOCOL_VERSION: u32 = 1;
pub const MAX_HEADER_BYTES: usize = 1 << 20;
pub const MAX_PAYLOAD_BYTES: usize = 1 << 30;

/// Union of all header fields; which ones are present depends on the frame.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negatives: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub payload_bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub header: Header,
    pub payload: Vec<f32>,
}

/// Reads one frame; `Ok(None)` on a clean end of stream before any header byte.
pub fn read_frame<R: BufRead>(reader: &mut R) -> Result<Option<Frame>> {
    let mut line = Vec::new();
    let n = reader.by_ref().take(MAX_HEADER_BYTES as u64 + 1).read_until(b'\n', &mut line)?;
    if n == 0 {
        return Ok(None);
    }
    if line.last() != Some(&b'\n') {
        return Err(if line.len() > MAX_HEADER_BYTES {
            Error::protocol("header line exceeds size limit")
        } else {
            Error::protocol("stream ended inside a header line")
        });
    }
    let header: Header = serde_json::from_slice(&line[..line.len() - 1])
        .map_err(|e| Error::protocol(format!("malformed header: {e}")))?;
    if header.version != PROTOCOL_VERSION {
        return Err(Error::protocol(format!(
            "protocol version mismatch: peer speaks {}, expected {PROTOCOL_VERSION}",
            header.version
        )));
    }
    if header.payload_bytes > MAX_PAYLOAD_BYTES || !header.payload_bytes.is_multiple_of(4) {
        return Err(Error::protocol(format!("invalid payload length {}", header.payload_bytes)));
    }
    let mut bytes = Vec::new();
    reader.by_ref().take(header.payload_bytes as u64).read_to_end(&mut bytes)?;
    if bytes.len() != header.payload_bytes {
        return Err(Error::protocol(format!(
            "payload truncated: {} of {} bytes",
            bytes.len(),
            header.payload_bytes
        )));
    }
    let payload = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Some(Frame { header, payload }))
}

/// Writes `header` (with `payload_bytes` filled in) and the payload.
pub fn write_frame<W: Write>(writer: &mut W, header: &Header, payload: &[f32]) -> Result<()> {
    let mut header = header.clone();
    header.payload_bytes = payload.len() * 4;
    let mut buf = serde_json::to_vec(&header).map_err(|e| Error::protocol(e.to_string()))?;
    buf.push(b'\n');
    buf.reserve(payload.len() * 4);
    for v in payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    writer.write_all(&buf)?;
    writer.flush()?;
    Ok(())
}

fn image_len(height: usize, width: usize) -> Result<usize> {
    height
        .checked_mul(width)
        .and_then(|p| p.checked_mul(3))
        .filter(|&n| n > 0 && n * 4 <= MAX_PAYLOAD_BYTES)
        .ok_or_else(|| Error::protocol(format!("invalid image size {height}x{width}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Handshake {
    pub model: String,
    pub input_size: Option<usize>,
    pub temperature: Option<f64>,
}

impl Handshake {
    pub fn to_header(&self) -> Header {
        Header {
            version: PROTOCOL_VERSION,
            model: Some(self.model.clone()),
            input_size: self.input_size,
            temperature: self.temperature,
            ..Default::default()
        }
    }

    pub fn from_frame(frame: &Frame) -> Result<Self> {
        let h = &frame.header;
        let model = h
            .model
            .clone()
            .ok_or_else(|| Error::protocol("expected a handshake frame with a `model` field"))?;
        if !frame.payload.is_empty() {
            return Err(Error::protocol("handshake frame carries a payload"));
        }
        Ok(Handshake { model, input_size: h.input_size, temperature: h.temperature })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRequest {
    pub id: u64,
    pub height: usize,
    pub width: usize,
    pub positive: String,
    pub negatives: Vec<String>,
    pub image: Vec<f32>,
}

impl ScoreRequest {
    pub fn header(&self) -> Header {
        Header {
            version: PROTOCOL_VERSION,
            id: Some(self.id),
            height: Some(self.height),
            width: Some(self.width),
            positive: Some(self.positive.clone()),
            negatives: Some(self.negatives.clone()),
            ..Default::default()
        }
    }

    pub fn write_to<W: Write>(&self, writer: &mut W) -> Result<()> {
        write_frame(writer, &self.header(), &self.image)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_frame(frame: Frame) -> Result<Self> {
        let h = frame.header;
        let missing = |f: &str| Error::protocol(format!("request header lacks `{f}`"));
        let id = h.id.ok_or_else(|| missing("id"))?;
        let height = h.height.ok_or_else(|| missing("height"))?;
        let width = h.width.ok_or_else(|| missing("width"))?;
        let positive = h.positive.ok_or_else(|| missing("positive"))?;
        if frame.payload.len() != image_len(height, width)? {
            return Err(Error::protocol("request payload does not match image size"));
        }
        Ok(ScoreRequest { id, height, width, positive, negatives: h.negatives.unwrap_or_default(), image: frame.payload })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let frame = read_frame(&mut cursor)?.ok_or_else(|| Error::protocol("empty request"))?;
        Self::from_frame(frame)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScoreReply {
    Ok { id: u64, height: usize, width: usize, loss: f64, gradient: Vec<f32> },
    Error { id: u64, message: String },
}

impl ScoreReply {
    pub fn id(&self) -> u64 {
        match self {
            ScoreReply::Ok { id, .. } | ScoreReply::Error { id, .. } => *id,
        }
    }

    pub fn write_to<W: Write>(&self, writer: &mut W) -> Result<()> {
        match self {
            ScoreReply::Ok { id, height, width, loss, gradient } => {
                let header = Header {
                    version: PROTOCOL_VERSION,
                    id: Some(*id),
                    height: Some(*height),
                    width: Some(*width),
                    loss: Some(*loss),
                    ..Default::default()
                };
                write_frame(writer, &header, gradient)
            }
            ScoreReply::Error { id, message } => {
                let header = Header {
                    version: PROTOCOL_VERSION,
                    id: Some(*id),
                    error: Some(message.clone()),
                    ..Default::default()
                };
                write_frame(writer, &header, &[])
            }
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_frame(frame: Frame) -> Result<Self> {
        let h = frame.header;
        let id = h.id.ok_or_else(|| Error::protocol("reply header lacks `id`"))?;
        if let Some(message) = h.error {
            return Ok(ScoreReply::Error { id, message });
        }
        let (Some(height), Some(width), Some(loss)) = (h.height, h.width, h.loss) else {
            return Err(Error::protocol("reply header needs `height`, `width`, and `loss`"));
        };
        if frame.payload.len() != image_len(height, width)? {
            return Err(Error::protocol("reply payload does not match image size"));
        }
        Ok(ScoreReply::Ok { id, height, width, loss, gradient: frame.payload })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let frame = read_frame(&mut cursor)?.ok_or_else(|| Error::protocol("empty reply"))?;
        Self::from_frame(frame)
    }
}

/// Service-side loop: sends `handshake`, then answers requests until the
/// peer closes the stream. Handler failures become error frames.
pub fn serve<R, W, F>(reader: &mut R, writer: &mut W, handshake: &Handshake, mut handler: F) -> Result<()>
where
    R: BufRead,
    W: Write,
    F: FnMut(&ScoreRequest) -> std::result::Result<(f64, Vec<f32>), String>,
{
    write_frame(writer, &handshake.to_header(), &[])?;
    while let Some(frame) = read_frame(reader)? {
        let id = frame.header.id.unwrap_or(0);
        let reply = match ScoreRequest::from_frame(frame) {
            Ok(req) => match handler(&req) {
                Ok((loss, gradient)) => ScoreReply::Ok { id, height: req.height, width: req.width, loss, gradient },
                Err(message) => ScoreReply::Error { id, message },
            },
            Err(e) => ScoreReply::Error { id, message: e.to_string() },
        };
        reply.write_to(writer)?;
    }
    Ok(())
}
