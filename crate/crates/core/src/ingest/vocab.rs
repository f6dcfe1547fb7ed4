use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{read_file, IngestError};
use crate::detection::ClassId;

pub const CLASS_PLACEHOLDER: &str = "[CLASS]";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    #[serde(rename = "id")]
    pub class_id: ClassId,
    pub name: String,
    /// Never empty; the first entry is always `name`.
    pub synonyms: Vec<String>,
    pub known: bool,
}

/// Ordered class list with dense ids `0..len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassVocabulary {
    entries: Vec<ClassEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    classes: Vec<RawClass>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawClass {
    id: ClassId,
    name: String,
    #[serde(default)]
    synonyms: Vec<String>,
    known: bool,
}

impl ClassVocabulary {
    /// Validate and normalise entries. Entries may arrive in any order; they
    /// are stored by id. The class name is moved (or inserted) to the front
    /// of its synonym list and repeated synonyms are dropped.
    pub fn new(entries: Vec<ClassEntry>) -> Result<Self, IngestError> {
        Self::from_entries(entries, "vocabulary")
    }

    fn from_entries(mut entries: Vec<ClassEntry>, origin: &str) -> Result<Self, IngestError> {
        let field_err = |field: String, message: String| IngestError::Field {
            origin: origin.to_string(),
            field,
            message,
        };
        entries.sort_by_key(|e| e.class_id);
        for pair in entries.windows(2) {
            if pair[0].class_id == pair[1].class_id {
                return Err(IngestError::DuplicateClassId(pair[0].class_id));
            }
        }
        for (pos, e) in entries.iter_mut().enumerate() {
            if e.class_id != pos {
                return Err(field_err(
                    "classes".into(),
                    format!("class ids must be dense starting at 0; missing id {pos}"),
                ));
            }
            let name = e.name.trim().to_string();
            if name.is_empty() {
                return Err(field_err(
                    format!("classes[id={}].name", e.class_id),
                    "empty name".into(),
                ));
            }
            let mut seen = BTreeSet::new();
            let mut synonyms = vec![name.clone()];
            seen.insert(name.clone());
            for s in &e.synonyms {
                let s = s.trim();
                if s.is_empty() {
                    return Err(field_err(
                        format!("classes[id={}].synonyms", e.class_id),
                        "empty synonym".into(),
                    ));
                }
                if seen.insert(s.to_string()) {
                    synonyms.push(s.to_string());
                }
            }
            e.name = name;
            e.synonyms = synonyms;
        }
        if !entries.iter().any(|e| e.known) {
            return Err(field_err(
                "classes".into(),
                "at least one class must be known".into(),
            ));
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn get(&self, id: ClassId) -> Option<&ClassEntry> {
        self.entries.get(id)
    }

    pub fn contains(&self, id: ClassId) -> bool {
        id < self.entries.len()
    }

    pub fn is_known(&self, id: ClassId) -> bool {
        self.entries.get(id).is_some_and(|e| e.known)
    }

    pub fn known_count(&self) -> usize {
        self.entries.iter().filter(|e| e.known).count()
    }

    pub fn novel_count(&self) -> usize {
        self.len() - self.known_count()
    }

    /// Stable 64-bit digest of ids, names, synonyms and known flags.
    pub fn content_hash(&self) -> u64 {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.class_id.to_le_bytes());
            h.update([e.known as u8]);
            for s in &e.synonyms {
                h.update((s.len() as u64).to_le_bytes());
                h.update(s.as_bytes());
            }
            h.update([0xff]);
        }
        digest_u64(h)
    }
}

pub(crate) fn digest_u64(h: Sha256) -> u64 {
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 has 32 bytes"))
}

pub fn parse_vocabulary(text: &str, origin: &str) -> Result<ClassVocabulary, IngestError> {
    let file: VocabFile = serde_json::from_str(text).map_err(|source| IngestError::Json {
        origin: origin.to_string(),
        source,
    })?;
    let entries = file
        .classes
        .into_iter()
        .map(|c| ClassEntry {
            class_id: c.id,
            name: c.name,
            synonyms: c.synonyms,
            known: c.known,
        })
        .collect();
    let vocab = ClassVocabulary::from_entries(entries, origin)?;
    if vocab.novel_count() == 0 {
        tracing::warn!(origin, "vocabulary has no novel classes");
    }
    Ok(vocab)
}

/// Load `vocab.json`: `{"classes": [{"id", "name", "synonyms", "known"}]}`.
pub fn load_vocabulary(path: &Path) -> Result<ClassVocabulary, IngestError> {
    parse_vocabulary(&read_file(path)?, &path.display().to_string())
}

/// Prompt templates, each containing [`CLASS_PLACEHOLDER`] exactly once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptTemplateSet {
    templates: Vec<String>,
}

impl PromptTemplateSet {
    pub fn new(templates: Vec<String>) -> Result<Self, IngestError> {
        Self::validated(templates, "templates")
    }

    fn validated(templates: Vec<String>, origin: &str) -> Result<Self, IngestError> {
        if templates.is_empty() {
            return Err(IngestError::Field {
                origin: origin.into(),
                field: "templates".into(),
                message: "at least one template is required".into(),
            });
        }
        for (i, t) in templates.iter().enumerate() {
            let n = t.matches(CLASS_PLACEHOLDER).count();
            if n != 1 {
                return Err(IngestError::Field {
                    origin: origin.into(),
                    field: format!("templates[{i}]"),
                    message: format!(
                        "expected exactly one {CLASS_PLACEHOLDER} placeholder, found {n}"
                    ),
                });
            }
        }
        Ok(Self { templates })
    }

    /// The set used when prompt ensembling is switched off.
    pub fn single(template: impl Into<String>) -> Result<Self, IngestError> {
        Self::new(vec![template.into()])
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    /// `{T(s) : T in templates}` in template order.
    pub fn prompts_for(&self, synonym: &str) -> Vec<String> {
        self.templates
            .iter()
            .map(|t| t.replacen(CLASS_PLACEHOLDER, synonym, 1))
            .collect()
    }

    pub fn content_hash(&self) -> u64 {
        let mut h = Sha256::new();
        for t in &self.templates {
            h.update((t.len() as u64).to_le_bytes());
            h.update(t.as_bytes());
        }
        digest_u64(h)
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TemplatesFile {
    List(Vec<String>),
    Object { templates: Vec<String> },
}

/// Accepts either a bare JSON array or `{"templates": [...]}`.
pub fn parse_templates(text: &str, origin: &str) -> Result<PromptTemplateSet, IngestError> {
    let file: TemplatesFile = serde_json::from_str(text).map_err(|source| IngestError::Json {
        origin: origin.to_string(),
        source,
    })?;
    let templates = match file {
        TemplatesFile::List(t) | TemplatesFile::Object { templates: t } => t,
    };
    PromptTemplateSet::validated(templates, origin)
}

pub fn load_templates(path: &Path) -> Result<PromptTemplateSet, IngestError> {
    parse_templates(&read_file(path)?, &path.display().to_string())
}
