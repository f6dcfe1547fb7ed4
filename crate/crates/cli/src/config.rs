//! Pipeline configuration: one TOML file plus command-line overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use opendet_core::backend::BackendEndpoint;
use opendet_core::eval::IouCmp;
use opendet_core::saeg::ConfidenceMode;
use serde::{Deserialize, Serialize};

/// Environment variable that overrides the configured backend endpoint.
pub const BACKEND_ENV: &str = "OPENDET_BACKEND";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Mode {
    #[default]
    #[serde(rename = "LVIS")]
    Lvis,
    #[serde(rename = "COCO_OVD")]
    CocoOvd,
}

impl Mode {
    /// Detections kept per image under this protocol.
    pub fn default_k(self) -> usize {
        match self {
            Mode::Lvis => 300,
            Mode::CocoOvd => 100,
        }
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "LVIS" => Ok(Mode::Lvis),
            "COCO_OVD" | "COCO" => Ok(Mode::CocoOvd),
            _ => Err(format!("unknown mode {s:?}, expected LVIS or COCO_OVD")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Lvis => "LVIS",
            Mode::CocoOvd => "COCO_OVD",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub vocab: PathBuf,
    pub templates: PathBuf,
    pub gt: PathBuf,
    pub dets_kn: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dets_bg: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dets_gd: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_root: Option<PathBuf>,
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_cache_dir() -> PathBuf {
    PathBuf::from("cache")
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Confidence {
    #[default]
    Softmax,
    RawCosine,
}

/// Which classes a background box may be labelled as.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifyScope {
    #[default]
    All,
    Novel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Labelling {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub confidence: Confidence,
    #[serde(default)]
    pub context_pad: f64,
    #[serde(default)]
    pub classify_scope: ClassifyScope,
    /// Optional class-wise NMS on the fused pool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nms_iou: Option<f64>,
}

fn default_temperature() -> f64 {
    0.01
}

impl Default for Labelling {
    fn default() -> Self {
        Self {
            temperature: default_temperature(),
            confidence: Confidence::default(),
            context_pad: 0.0,
            classify_scope: ClassifyScope::default(),
            nms_iou: None,
        }
    }
}

impl Labelling {
    pub fn confidence_mode(&self) -> ConfidenceMode {
        match self.confidence {
            Confidence::Softmax => ConfidenceMode::Softmax {
                temperature: self.temperature,
            },
            Confidence::RawCosine => ConfidenceMode::RawCosine,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Switches {
    #[serde(default = "yes")]
    pub use_gdino: bool,
    #[serde(default = "yes")]
    pub use_bg_labelling: bool,
    #[serde(default = "yes")]
    pub use_sam: bool,
    #[serde(default = "yes")]
    pub use_srm: bool,
    #[serde(default = "yes")]
    pub use_saeg: bool,
}

fn yes() -> bool {
    true
}

impl Default for Switches {
    fn default() -> Self {
        Self {
            use_gdino: true,
            use_bg_labelling: true,
            use_sam: true,
            use_srm: true,
            use_saeg: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    /// Require IoU strictly above the threshold instead of at least equal.
    #[serde(default)]
    pub strict_iou: bool,
}

impl EvalSettings {
    pub fn cmp(&self) -> IouCmp {
        if self.strict_iou {
            IouCmp::Greater
        } else {
            IouCmp::AtLeast
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub mode: Mode,
    /// Overrides the mode's default number of final detections per image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_final: Option<usize>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_backend")]
    pub backend: String,
    pub paths: Paths,
    #[serde(default)]
    pub labelling: Labelling,
    #[serde(default)]
    pub switches: Switches,
    #[serde(default)]
    pub eval: EvalSettings,
    /// Directory relative paths are resolved against; the config file's own
    /// directory when loaded from disk.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_workers() -> usize {
    1
}

fn default_backend() -> String {
    "stub".into()
}

/// Command-line overrides; `None` and `false` leave the file value alone.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub k: Option<usize>,
    pub temperature: Option<f64>,
    pub workers: Option<usize>,
    pub backend: Option<String>,
    pub no_gdino: bool,
    pub no_sam: bool,
    pub no_srm: bool,
    pub no_saeg: bool,
    pub no_bg_labelling: bool,
}

impl PipelineConfig {
    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text).context("invalid configuration")?;
        cfg.base_dir = base_dir.into();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, base).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always representable as TOML")
    }

    /// Apply overrides with precedence flags > `env_backend` > file.
    pub fn apply(&mut self, o: &Overrides, env_backend: Option<String>) -> Result<()> {
        if let Some(m) = o.mode {
            self.mode = m;
        }
        if let Some(k) = o.k {
            self.k_final = Some(k);
        }
        if let Some(t) = o.temperature {
            self.labelling.temperature = t;
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
        if let Some(b) = o.backend.clone().or(env_backend) {
            self.backend = b;
        }
        let s = &mut self.switches;
        s.use_gdino &= !o.no_gdino;
        s.use_sam &= !o.no_sam;
        s.use_srm &= !o.no_srm;
        s.use_saeg &= !o.no_saeg;
        s.use_bg_labelling &= !o.no_bg_labelling;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_final == Some(0) {
            bail!("k_final must be positive");
        }
        let t = self.labelling.temperature;
        if !(t > 0.0 && t.is_finite()) {
            bail!("temperature must be positive and finite, got {t}");
        }
        let pad = self.labelling.context_pad;
        if !(pad >= 0.0 && pad.is_finite()) {
            bail!("context_pad must be non-negative, got {pad}");
        }
        if let Some(n) = self.labelling.nms_iou {
            if !(n > 0.0 && n <= 1.0) {
                bail!("nms_iou must lie in (0, 1], got {n}");
            }
        }
        if self.workers == 0 {
            bail!("workers must be at least 1");
        }
        self.endpoint()?;
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k_final.unwrap_or(self.mode.default_k())
    }

    pub fn endpoint(&self) -> Result<BackendEndpoint> {
        self.backend
            .parse()
            .map_err(|e| anyhow::anyhow!("backend {:?}: {e}", self.backend))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn matrix_path(&self) -> PathBuf {
        self.resolve(&self.paths.cache_dir).join("class_matrix.bin")
    }

    pub fn output_path(&self, name: &str) -> PathBuf {
        self.resolve(&self.paths.output_dir).join(name)
    }
}
