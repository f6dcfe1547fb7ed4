use std::fmt;
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::str::FromStr;

use super::protocol::{read_frame, write_frame, Request, Response};
use super::{Backend, BackendError, BackendFactory, BackendInfo, ImageRef};
use crate::bbox::BBox;
use crate::embedding::Embedding;
use crate::ingest::SegmentationResult;

const DEFAULT_MAX_BATCH: usize = 256;

/// Where a model service lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendEndpoint {
    /// In-process deterministic stub built from the ground-truth scene.
    Stub,
    /// `tcp://host:port`
    Tcp(String),
    /// `exec:program arg...`; the child speaks the protocol on stdin/stdout.
    Exec(Vec<String>),
}

impl FromStr for BackendEndpoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "stub" {
            Ok(Self::Stub)
        } else if let Some(addr) = s.strip_prefix("tcp://") {
            if addr.is_empty() {
                return Err("tcp endpoint needs host:port".into());
            }
            Ok(Self::Tcp(addr.to_string()))
        } else if let Some(cmd) = s.strip_prefix("exec:") {
            let argv: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
            if argv.is_empty() {
                return Err("exec endpoint needs a command".into());
            }
            Ok(Self::Exec(argv))
        } else {
            Err(format!(
                "unrecognised backend endpoint {s:?} (use stub, tcp://host:port or exec:cmd)"
            ))
        }
    }
}

impl fmt::Display for BackendEndpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Stub => f.write_str("stub"),
            Self::Tcp(a) => write!(f, "tcp://{a}"),
            Self::Exec(argv) => write!(f, "exec:{}", argv.join(" ")),
        }
    }
}

impl BackendFactory for BackendEndpoint {
    fn connect(&self) -> Result<Box<dyn Backend>, BackendError> {
        match self {
            Self::Stub => Err(BackendError::Protocol(
                "the stub endpoint is built from a scene, not connected to".into(),
            )),
            Self::Tcp(addr) => Ok(Box::new(WireClient::connect_tcp(addr)?)),
            Self::Exec(argv) => Ok(Box::new(WireClient::spawn(argv)?)),
        }
    }
}

/// Protocol client over any byte stream.
///
/// Large requests are split into batches of at most `max_batch` items; results
/// are concatenated in request order. The client checks that every response
/// has one item per request item and that the embedding dimension never
/// changes within the session.
pub struct WireClient {
    reader: Box<dyn Read + Send>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
    dim: Option<usize>,
    info: Option<BackendInfo>,
    max_batch: usize,
}

impl WireClient {
    pub fn new(reader: impl Read + Send + 'static, writer: impl Write + Send + 'static) -> Self {
        Self {
            reader: Box::new(reader),
            writer: Box::new(writer),
            child: None,
            dim: None,
            info: None,
            max_batch: DEFAULT_MAX_BATCH,
        }
    }

    pub fn with_max_batch(mut self, n: usize) -> Self {
        self.max_batch = n.max(1);
        self
    }

    pub fn connect_tcp(addr: &str) -> Result<Self, BackendError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let read = stream.try_clone()?;
        Ok(Self::new(BufReader::new(read), BufWriter::new(stream)))
    }

    pub fn spawn(argv: &[String]) -> Result<Self, BackendError> {
        let (prog, args) = argv
            .split_first()
            .ok_or_else(|| BackendError::Protocol("empty command".into()))?;
        let mut child = Command::new(prog)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut client = Self::new(BufReader::new(stdout), BufWriter::new(stdin));
        client.child = Some(child);
        Ok(client)
    }

    fn call(&mut self, req: &Request) -> Result<Response, BackendError> {
        let body = serde_json::to_vec(req).map_err(|e| BackendError::Protocol(e.to_string()))?;
        write_frame(&mut self.writer, &body)?;
        let reply = read_frame(&mut self.reader)?.ok_or_else(|| {
            BackendError::Protocol(format!("stream closed awaiting {} reply", req.kind()))
        })?;
        match Response::from_json(&reply)? {
            Response::Error(m) => Err(BackendError::Remote(m)),
            r => Ok(r),
        }
    }

    fn check_dims(&mut self, embeds: &[Embedding]) -> Result<(), BackendError> {
        for e in embeds {
            match self.dim {
                None => self.dim = Some(e.dim()),
                Some(d) if d != e.dim() => {
                    return Err(BackendError::DimensionDrift {
                        expected: d,
                        got: e.dim(),
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn batched<T, I: Clone>(
        &mut self,
        items: &[I],
        mut make: impl FnMut(Vec<I>) -> Request,
        mut take: impl FnMut(Response) -> Option<Vec<T>>,
    ) -> Result<Vec<T>, BackendError> {
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(self.max_batch) {
            let req = make(chunk.to_vec());
            let kind = req.kind();
            let resp = self.call(&req)?;
            let part = take(resp).ok_or_else(|| {
                BackendError::Protocol(format!("mismatched reply kind for {kind}"))
            })?;
            if part.len() != chunk.len() {
                return Err(BackendError::Cardinality {
                    expected: chunk.len(),
                    got: part.len(),
                });
            }
            out.extend(part);
        }
        Ok(out)
    }
}

impl Drop for WireClient {
    fn drop(&mut self) {
        if let Some(mut child) = self.child.take() {
            // Closing stdin lets a well-behaved server exit on EOF.
            self.writer = Box::new(std::io::sink());
            if child.wait().is_err() {
                let _ = child.kill();
            }
        }
    }
}

impl Backend for WireClient {
    fn info(&mut self) -> Result<BackendInfo, BackendError> {
        if let Some(info) = &self.info {
            return Ok(info.clone());
        }
        match self.call(&Request::Handshake {})? {
            Response::Handshake(info) => {
                if let Some(d) = self.dim {
                    if d != info.dim {
                        return Err(BackendError::DimensionDrift {
                            expected: d,
                            got: info.dim,
                        });
                    }
                }
                self.dim = Some(info.dim);
                self.info = Some(info.clone());
                Ok(info)
            }
            _ => Err(BackendError::Protocol(
                "mismatched reply kind for handshake".into(),
            )),
        }
    }

    fn text_embed(&mut self, texts: &[String]) -> Result<Vec<Embedding>, BackendError> {
        let out = self.batched(
            texts,
            |texts| Request::TextEmbed { texts },
            |r| match r {
                Response::TextEmbed(e) => Some(e),
                _ => None,
            },
        )?;
        self.check_dims(&out)?;
        Ok(out)
    }

    fn image_embed_roi(
        &mut self,
        image: &ImageRef,
        boxes: &[BBox],
        context_pad: f64,
    ) -> Result<Vec<Embedding>, BackendError> {
        let out = self.batched(
            boxes,
            |boxes| Request::ImageEmbedRoi {
                image: image.clone(),
                boxes,
                context_pad,
            },
            |r| match r {
                Response::ImageEmbedRoi(e) => Some(e),
                _ => None,
            },
        )?;
        self.check_dims(&out)?;
        Ok(out)
    }

    fn segment_boxes(
        &mut self,
        image: &ImageRef,
        boxes: &[BBox],
    ) -> Result<Vec<SegmentationResult>, BackendError> {
        let out = self.batched(
            boxes,
            |boxes| Request::SegmentBoxes {
                image: image.clone(),
                boxes,
            },
            |r| match r {
                Response::SegmentBoxes(s) => Some(s),
                _ => None,
            },
        )?;
        for (i, s) in out.iter().enumerate() {
            s.mask
                .validate()
                .map_err(|e| BackendError::Protocol(format!("mask {i}: {e}")))?;
            if !s.score.is_finite() {
                return Err(BackendError::Protocol(format!(
                    "mask {i}: non-finite score"
                )));
            }
        }
        Ok(out)
    }
}
