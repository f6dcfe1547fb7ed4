//! Wire protocol shared by the engine, the stub server and model services.
//!
//! Each message is a 4-byte big-endian length followed by that many bytes of
//! UTF-8 JSON. Requests and successful responses are `{"kind", "payload"}`;
//! failures are `{"kind": "error", "message"}`. Responses list their items in
//! request order.
//!
//! | kind              | request payload                        | response payload                  |
//! |-------------------|----------------------------------------|-----------------------------------|
//! | `handshake`       | `{}`                                   | `{dim, identity}`                 |
//! | `text_embed`      | `{texts: [str]}`                       | `{embeddings: [b64 f32le]}`       |
//! | `image_embed_roi` | `{image, boxes: [[x1,y1,x2,y2]], context_pad}` | `{embeddings: [b64 f32le]}` |
//! | `segment_boxes`   | `{image, boxes}`                       | `{results: [{height,width,counts,score}]}` |

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{BackendError, BackendInfo, ImageRef};
use crate::bbox::BBox;
use crate::embedding::Embedding;
use crate::ingest::SegmentationResult;

/// Upper bound on a single frame.
pub const MAX_FRAME_BYTES: u32 = 256 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum Request {
    Handshake {},
    TextEmbed {
        texts: Vec<String>,
    },
    ImageEmbedRoi {
        image: ImageRef,
        boxes: Vec<BBox>,
        context_pad: f64,
    },
    SegmentBoxes {
        image: ImageRef,
        boxes: Vec<BBox>,
    },
}

impl Request {
    pub fn kind(&self) -> &'static str {
        match self {
            Request::Handshake {} => "handshake",
            Request::TextEmbed { .. } => "text_embed",
            Request::ImageEmbedRoi { .. } => "image_embed_roi",
            Request::SegmentBoxes { .. } => "segment_boxes",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Handshake(BackendInfo),
    TextEmbed(Vec<Embedding>),
    ImageEmbedRoi(Vec<Embedding>),
    SegmentBoxes(Vec<SegmentationResult>),
    Error(String),
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    payload: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    message: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingsPayload {
    embeddings: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct SegmentPayload {
    results: Vec<SegmentationResult>,
}

fn protocol<E: std::fmt::Display>(e: E) -> BackendError {
    BackendError::Protocol(e.to_string())
}

impl Response {
    pub fn to_json(&self) -> Vec<u8> {
        let env = |kind: &str, payload: Value| Envelope {
            kind: kind.to_string(),
            payload: Some(payload),
            message: None,
        };
        let embeds = |e: &[Embedding]| {
            serde_json::to_value(EmbeddingsPayload {
                embeddings: e.iter().map(Embedding::to_base64).collect(),
            })
            .expect("string list serializes")
        };
        let envelope = match self {
            Response::Handshake(info) => env(
                "handshake",
                serde_json::to_value(info).expect("info serializes"),
            ),
            Response::TextEmbed(e) => env("text_embed", embeds(e)),
            Response::ImageEmbedRoi(e) => env("image_embed_roi", embeds(e)),
            Response::SegmentBoxes(r) => env(
                "segment_boxes",
                serde_json::to_value(SegmentPayload { results: r.clone() })
                    .expect("segmentation results serialize"),
            ),
            Response::Error(m) => Envelope {
                kind: "error".into(),
                payload: None,
                message: Some(m.clone()),
            },
        };
        serde_json::to_vec(&envelope).expect("envelope serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, BackendError> {
        let env: Envelope = serde_json::from_slice(bytes).map_err(protocol)?;
        let payload = || {
            env.payload
                .clone()
                .ok_or_else(|| protocol(format!("{} without payload", env.kind)))
        };
        let embeds = |v: Value| -> Result<Vec<Embedding>, BackendError> {
            let p: EmbeddingsPayload = serde_json::from_value(v).map_err(protocol)?;
            p.embeddings
                .iter()
                .map(|s| Embedding::from_base64(s).map_err(Into::into))
                .collect()
        };
        Ok(match env.kind.as_str() {
            "handshake" => {
                Response::Handshake(serde_json::from_value(payload()?).map_err(protocol)?)
            }
            "text_embed" => Response::TextEmbed(embeds(payload()?)?),
            "image_embed_roi" => Response::ImageEmbedRoi(embeds(payload()?)?),
            "segment_boxes" => {
                let p: SegmentPayload = serde_json::from_value(payload()?).map_err(protocol)?;
                Response::SegmentBoxes(p.results)
            }
            "error" => Response::Error(env.message.unwrap_or_else(|| "unspecified error".into())),
            other => return Err(protocol(format!("unknown response kind {other:?}"))),
        })
    }
}

pub fn write_frame<W: Write>(w: &mut W, body: &[u8]) -> io::Result<()> {
    let len = u32::try_from(body.len())
        .ok()
        .filter(|&n| n <= MAX_FRAME_BYTES)
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(body)?;
    w.flush()
}

/// Read one frame. `Ok(None)` on a clean end of stream before the length.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..])? {
            0 if got == 0 => return Ok(None),
            0 => return Err(io::ErrorKind::UnexpectedEof.into()),
            n => got += n,
        }
    }
    let len = u32::from_be_bytes(len);
    if len > MAX_FRAME_BYTES {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame of {len} bytes exceeds limit"),
        ));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}
