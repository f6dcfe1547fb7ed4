//! Synonym-averaged class text features and zero-shot labelling of
//! background proposals.
//!
//! For every class, each synonym is expanded through all prompt templates;
//! the prompt embeddings are L2-normalised and averaged into a synonym
//! feature, and the normalised synonym features are averaged into the class
//! feature. The class feature is deliberately left un-normalised: cosine
//! similarity at classification time absorbs its norm.
//!
//! Averages are summed sequentially in input order so results are
//! bit-reproducible for a given input order.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::backend::{Backend, BackendError, ImageRef};
use crate::detection::{ClassId, LabeledDetection, RawDetection, SourceTag};
use crate::embedding::Embedding;
use crate::ingest::{ClassVocabulary, PromptTemplateSet};

const MATRIX_MAGIC: &[u8; 4] = b"OTMX";
const MATRIX_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum SaegError {
    #[error("cannot average an empty set of {0}")]
    Empty(&'static str),
    #[error("{what} {index} has zero norm and cannot be normalised")]
    ZeroNorm { what: &'static str, index: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error("backend returned {got} embeddings for {expected} inputs")]
    Cardinality { expected: usize, got: usize },
    #[error("class {class_id} failed after {completed}/{total} classes were embedded: {source}")]
    MatrixBuild {
        class_id: ClassId,
        completed: usize,
        total: usize,
        #[source]
        source: Box<SaegError>,
    },
    #[error("detection {0} is not a background proposal")]
    NotBackground(usize),
    #[error("no candidate classes to classify against")]
    NoCandidates,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("class matrix file: {0}")]
    Io(#[from] std::io::Error),
    #[error("class matrix file: {0}")]
    Format(String),
}

/// Mean of L2-normalised vectors, summed in input order.
fn normalized_mean(items: &[Embedding], what: &'static str) -> Result<Embedding, SaegError> {
    let first = items.first().ok_or(SaegError::Empty(what))?;
    let dim = first.dim();
    let mut acc = vec![0.0f64; dim];
    for (index, e) in items.iter().enumerate() {
        if e.dim() != dim {
            return Err(SaegError::Dimension {
                expected: dim,
                got: e.dim(),
            });
        }
        let norm = e.norm();
        if norm == 0.0 {
            return Err(SaegError::ZeroNorm { what, index });
        }
        for (a, v) in acc.iter_mut().zip(e.values()) {
            *a += v / norm;
        }
    }
    let n = items.len() as f64;
    Ok(Embedding::new(acc.into_iter().map(|a| a / n).collect())
        .expect("finite mean of unit vectors"))
}

/// Synonym feature: mean of the normalised per-prompt embeddings.
pub fn synonym_feature(per_prompt: &[Embedding]) -> Result<Embedding, SaegError> {
    normalized_mean(per_prompt, "prompt embedding")
}

/// Class feature: mean of the normalised synonym features.
pub fn class_feature(synonym_features: &[Embedding]) -> Result<Embedding, SaegError> {
    normalized_mean(synonym_features, "synonym feature")
}

/// `d x |C|` text feature matrix, one column per class id.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTextMatrix {
    columns: Vec<Embedding>,
    dim: usize,
    vocabulary_hash: u64,
    cache_key: u64,
}

impl ClassTextMatrix {
    /// Columns are stored at `f32` precision so that a freshly built matrix
    /// and one loaded from the cache file classify identically.
    pub fn new(
        columns: Vec<Embedding>,
        vocabulary_hash: u64,
        cache_key: u64,
    ) -> Result<Self, SaegError> {
        let columns: Vec<Embedding> = columns.iter().map(Embedding::rounded_to_f32).collect();
        let dim = columns
            .first()
            .ok_or(SaegError::Empty("class columns"))?
            .dim();
        if let Some(bad) = columns.iter().find(|c| c.dim() != dim) {
            return Err(SaegError::Dimension {
                expected: dim,
                got: bad.dim(),
            });
        }
        Ok(Self {
            columns,
            dim,
            vocabulary_hash,
            cache_key,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, class: ClassId) -> &Embedding {
        &self.columns[class]
    }

    pub fn columns(&self) -> &[Embedding] {
        &self.columns
    }

    pub fn vocabulary_hash(&self) -> u64 {
        self.vocabulary_hash
    }

    pub fn cache_key(&self) -> u64 {
        self.cache_key
    }

    /// Binary layout, all little-endian: magic `OTMX`, `u32` version, `u32` d,
    /// `u32` class count, `u64` vocabulary hash, `u64` cache key, then
    /// `d * |C|` `f32` values column by column.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MATRIX_MAGIC)?;
        w.write_all(&MATRIX_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.columns.len() as u32).to_le_bytes())?;
        w.write_all(&self.vocabulary_hash.to_le_bytes())?;
        w.write_all(&self.cache_key.to_le_bytes())?;
        for c in &self.columns {
            for v in c.to_f32() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, SaegError> {
        let mut header = [0u8; 32];
        r.read_exact(&mut header)?;
        if &header[..4] != MATRIX_MAGIC {
            return Err(SaegError::Format("bad magic".into()));
        }
        let u32_at = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().expect("4 bytes"));
        let u64_at = |i: usize| u64::from_le_bytes(header[i..i + 8].try_into().expect("8 bytes"));
        if u32_at(4) != MATRIX_VERSION {
            return Err(SaegError::Format(format!(
                "unsupported version {}",
                u32_at(4)
            )));
        }
        let (dim, n) = (u32_at(8) as usize, u32_at(12) as usize);
        if dim == 0 || n == 0 {
            return Err(SaegError::Format("empty matrix".into()));
        }
        let (vocabulary_hash, cache_key) = (u64_at(16), u64_at(24));
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        if body.len() != dim * n * 4 {
            return Err(SaegError::Format(format!(
                "expected {} payload bytes, found {}",
                dim * n * 4,
                body.len()
            )));
        }
        let columns = body
            .chunks_exact(dim * 4)
            .map(|col| {
                let vals: Vec<f32> = col
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                    .collect();
                Embedding::from_f32(&vals).map_err(|e| SaegError::Format(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(columns, vocabulary_hash, cache_key)
    }

    pub fn save(&self, path: &Path) -> Result<(), SaegError> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SaegError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Digest identifying the inputs of a matrix build.
pub fn matrix_cache_key(
    vocab: &ClassVocabulary,
    templates: &PromptTemplateSet,
    backend_identity: &str,
    ensemble: bool,
) -> u64 {
    let mut h = Sha256::new();
    h.update(vocab.content_hash().to_le_bytes());
    h.update(templates.content_hash().to_le_bytes());
    h.update((backend_identity.len() as u64).to_le_bytes());
    h.update(backend_identity.as_bytes());
    h.update([ensemble as u8]);
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("32-byte digest"))
}

/// Embed every class through the backend.
///
/// With `ensemble` set, all synonyms and all templates are used. Without it
/// each class uses only its name and the first template.
pub fn build_class_matrix(
    vocab: &ClassVocabulary,
    templates: &PromptTemplateSet,
    backend: &mut dyn Backend,
    ensemble: bool,
) -> Result<ClassTextMatrix, SaegError> {
    let identity = backend.info()?.identity;
    let key = matrix_cache_key(vocab, templates, &identity, ensemble);
    let total = vocab.len();
    let mut dim: Option<usize> = None;
    let mut columns = Vec::with_capacity(total);
    for (completed, entry) in vocab.entries().iter().enumerate() {
        let fail = |source: SaegError| SaegError::MatrixBuild {
            class_id: entry.class_id,
            completed,
            total,
            source: Box::new(source),
        };
        let synonyms = if ensemble {
            &entry.synonyms[..]
        } else {
            &entry.synonyms[..1]
        };
        let mut features = Vec::with_capacity(synonyms.len());
        for syn in synonyms {
            let prompts = if ensemble {
                templates.prompts_for(syn)
            } else {
                templates.prompts_for(syn).into_iter().take(1).collect()
            };
            let embeds = backend.text_embed(&prompts).map_err(|e| fail(e.into()))?;
            if embeds.len() != prompts.len() {
                return Err(fail(SaegError::Cardinality {
                    expected: prompts.len(),
                    got: embeds.len(),
                }));
            }
            for e in &embeds {
                let d = *dim.get_or_insert(e.dim());
                if e.dim() != d {
                    return Err(fail(SaegError::Dimension {
                        expected: d,
                        got: e.dim(),
                    }));
                }
            }
            features.push(synonym_feature(&embeds).map_err(fail)?);
        }
        columns.push(class_feature(&features).map_err(fail)?);
    }
    ClassTextMatrix::new(columns, vocab.content_hash(), key)
}

/// How a background box's confidence is derived from its cosine logits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConfidenceMode {
    /// Softmax over `cosine / temperature`, read at the winning class.
    Softmax { temperature: f64 },
    /// The winning cosine itself, clipped to `[0, 1]`.
    RawCosine,
}

impl Default for ConfidenceMode {
    fn default() -> Self {
        ConfidenceMode::Softmax { temperature: 0.01 }
    }
}

/// Zero-shot class and confidence for one image embedding.
///
/// `candidates` restricts the argmax (and the softmax support) to a subset of
/// classes; `None` means every column. Ties resolve to the lowest class id.
pub fn classify_embedding(
    image_embedding: &Embedding,
    matrix: &ClassTextMatrix,
    mode: ConfidenceMode,
    candidates: Option<&[ClassId]>,
) -> Result<(ClassId, f64), SaegError> {
    if image_embedding.dim() != matrix.dim() {
        return Err(SaegError::Dimension {
            expected: matrix.dim(),
            got: image_embedding.dim(),
        });
    }
    if image_embedding.norm() == 0.0 {
        return Err(SaegError::ZeroNorm {
            what: "image embedding",
            index: 0,
        });
    }
    let all: Vec<ClassId>;
    let classes = match candidates {
        Some(c) => c,
        None => {
            all = (0..matrix.num_classes()).collect();
            &all
        }
    };
    if classes.is_empty() {
        return Err(SaegError::NoCandidates);
    }
    let logits: Vec<f64> = classes
        .iter()
        .map(|&c| image_embedding.cosine(matrix.column(c)))
        .collect();
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    let confidence = match mode {
        ConfidenceMode::RawCosine => logits[best].clamp(0.0, 1.0),
        ConfidenceMode::Softmax { temperature } => {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(SaegError::Temperature(temperature));
            }
            let top = logits[best];
            let denom: f64 = logits.iter().map(|l| ((l - top) / temperature).exp()).sum();
            1.0 / denom
        }
    };
    Ok((classes[best], confidence))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelOptions {
    pub confidence: ConfidenceMode,
    /// Fractional crop enlargement passed to the backend; 0 crops the box exactly.
    pub context_pad: f64,
    /// Classes a background box may be assigned to; `None` means all.
    pub candidates: Option<Vec<ClassId>>,
}

impl Default for LabelOptions {
    fn default() -> Self {
        Self {
            confidence: ConfidenceMode::default(),
            context_pad: 0.0,
            candidates: None,
        }
    }
}

/// Label background proposals with one batched ROI-embedding request.
/// Boxes are clamped to the image before cropping. Output order follows
/// input order and keeps the BG source tag.
pub fn label_background(
    dets: &[RawDetection],
    image: &ImageRef,
    matrix: &ClassTextMatrix,
    backend: &mut dyn Backend,
    opts: &LabelOptions,
) -> Result<Vec<LabeledDetection>, SaegError> {
    if let Some(i) = dets.iter().position(|d| d.source != SourceTag::Background) {
        return Err(SaegError::NotBackground(i));
    }
    if dets.is_empty() {
        return Ok(Vec::new());
    }
    let (w, h) = (image.width as f64, image.height as f64);
    let boxes: Vec<_> = dets.iter().map(|d| d.bbox.clamp_to_image(w, h)).collect();
    let embeds = backend.image_embed_roi(image, &boxes, opts.context_pad)?;
    if embeds.len() != boxes.len() {
        return Err(SaegError::Cardinality {
            expected: boxes.len(),
            got: embeds.len(),
        });
    }
    boxes
        .into_iter()
        .zip(&embeds)
        .map(|(bbox, e)| {
            let (class_id, score) =
                classify_embedding(e, matrix, opts.confidence, opts.candidates.as_deref())?;
            Ok(LabeledDetection {
                bbox,
                class_id,
                score,
                source: SourceTag::Background,
            })
        })
        .collect()
}
