//! Stage orchestration behind the `build-matrix`, `run`, `eval` and
//! `serve-stub` subcommands.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, Context, Result};
use opendet_core::backend::{
    Backend, BackendEndpoint, BackendFactory, ImageRef, MeteredFactory, SceneStub, StubFactory,
};
use opendet_core::eval::{grouped_map, predictions_by_image, EvalParams, EvalReport};
use opendet_core::fusion::{
    group_sources, label_image, FusedPool, ImageFailure, ImageSources, LabellingConfig,
};
use opendet_core::ingest::{
    load_detections, load_ground_truth, load_templates, load_vocabulary, ClassVocabulary,
    GroundTruthSet, PerImage, PromptTemplateSet,
};
use opendet_core::refine::{load_final, refine, write_final, RefineOptions};
use opendet_core::saeg::{build_class_matrix, matrix_cache_key, ClassTextMatrix, LabelOptions};
use opendet_core::{ImageId, RefinedDetection, SourceTag};
use serde::{Deserialize, Serialize};

use crate::config::{ClassifyScope, Mode, PipelineConfig};

/// Inputs shared by every subcommand.
pub struct Inputs {
    pub vocab: ClassVocabulary,
    pub gt: GroundTruthSet,
}

impl Inputs {
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let vocab = load_vocabulary(&cfg.resolve(&cfg.paths.vocab))?;
        let gt = load_ground_truth(&cfg.resolve(&cfg.paths.gt), &vocab)?;
        Ok(Self { vocab, gt })
    }
}

/// Session factory for the configured endpoint. `stub` serves the scene
/// described by the ground truth in-process.
pub fn backend_factory(cfg: &PipelineConfig, inputs: &Inputs) -> Result<Box<dyn BackendFactory>> {
    Ok(match cfg.endpoint()? {
        BackendEndpoint::Stub => {
            Box::new(StubFactory::new(SceneStub::new(&inputs.vocab, &inputs.gt)))
        }
        other => Box::new(other),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixOutcome {
    CacheHit,
    Built,
    Rebuilt,
}

/// Load the cached class-text matrix if it matches the current vocabulary,
/// templates, backend and ensemble switch; otherwise build and store it.
pub fn ensure_matrix(
    cfg: &PipelineConfig,
    vocab: &ClassVocabulary,
    backend: &mut dyn Backend,
) -> Result<(ClassTextMatrix, MatrixOutcome)> {
    let templates: PromptTemplateSet = load_templates(&cfg.resolve(&cfg.paths.templates))?;
    let ensemble = cfg.switches.use_saeg;
    let identity = backend.info().context("backend handshake")?.identity;
    let key = matrix_cache_key(vocab, &templates, &identity, ensemble);
    let path = cfg.matrix_path();
    let mut outcome = MatrixOutcome::Built;
    if path.exists() {
        match ClassTextMatrix::load(&path) {
            Ok(m) if m.vocabulary_hash() == vocab.content_hash() && m.cache_key() == key => {
                tracing::info!(path = %path.display(), stage = "build-matrix", "class matrix cache hit");
                return Ok((m, MatrixOutcome::CacheHit));
            }
            Ok(_) => {
                tracing::warn!(path = %path.display(), stage = "build-matrix", "cached class matrix is stale; rebuilding")
            }
            Err(e) => {
                tracing::warn!(path = %path.display(), stage = "build-matrix", error = %e, "unreadable class matrix cache; rebuilding")
            }
        }
        outcome = MatrixOutcome::Rebuilt;
    }
    let matrix = build_class_matrix(vocab, &templates, backend, ensemble)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    matrix.save(&path)?;
    tracing::info!(
        path = %path.display(),
        stage = "build-matrix",
        classes = matrix.num_classes(),
        dim = matrix.dim(),
        ensemble,
        "class matrix written"
    );
    Ok((matrix, outcome))
}

/// Returns how the matrix was obtained and the number of model requests made.
pub fn cmd_build_matrix(cfg: &PipelineConfig) -> Result<(MatrixOutcome, usize)> {
    let inputs = Inputs::load(cfg)?;
    let factory = MeteredFactory::new(backend_factory(cfg, &inputs)?);
    let mut backend = factory.connect()?;
    let outcome = ensure_matrix(cfg, &inputs.vocab, backend.as_mut())?.1;
    Ok((outcome, factory.counts().total()))
}

/// Per-image pool composition, written next to `final.jsonl`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolCounts {
    pub image_id: ImageId,
    pub n_kn: usize,
    pub n_bg: usize,
    pub n_gd: usize,
    pub n_c: usize,
    pub n_final: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub images: usize,
    pub detections: usize,
    pub failures: Vec<ImageFailure>,
    pub matrix: Option<MatrixOutcome>,
    /// Model requests made, handshakes excluded.
    pub backend_calls: usize,
    pub final_path: PathBuf,
}

fn load_source(cfg: &PipelineConfig, path: Option<&PathBuf>, tag: SourceTag) -> Result<PerImage> {
    match path {
        Some(p) => Ok(load_detections(&cfg.resolve(p), tag)?),
        None => Ok(PerImage::new()),
    }
}

struct ImageOutcome {
    refined: Vec<RefinedDetection>,
    counts: PoolCounts,
}

fn process_image(
    id: ImageId,
    sources: &ImageSources,
    image: &ImageRef,
    ctx: &RunContext,
    backend: &mut dyn Backend,
) -> Result<ImageOutcome, ImageFailure> {
    let fail = |stage: &str, e: &dyn std::fmt::Display| ImageFailure {
        image_id: id,
        stage: stage.into(),
        message: e.to_string(),
    };
    let pool: FusedPool = label_image(
        sources,
        image,
        ctx.vocab,
        ctx.matrix,
        backend,
        &ctx.labelling,
    )
    .map_err(|e| fail("labelling", &e))?;
    let refined = refine(&pool, image, backend, &ctx.refine).map_err(|e| fail("refine", &e))?;
    let c = pool.counts();
    tracing::info!(
        image_id = id,
        stage = "image",
        n_kn = c.n_kn,
        n_bg = c.n_bg,
        n_gd = c.n_gd,
        n_c = pool.len(),
        n_final = refined.len(),
        "image done"
    );
    Ok(ImageOutcome {
        counts: PoolCounts {
            image_id: id,
            n_kn: c.n_kn,
            n_bg: c.n_bg,
            n_gd: c.n_gd,
            n_c: pool.len(),
            n_final: refined.len(),
        },
        refined,
    })
}

struct RunContext<'a> {
    vocab: &'a ClassVocabulary,
    matrix: Option<&'a ClassTextMatrix>,
    labelling: LabellingConfig,
    refine: RefineOptions,
}

/// Full pipeline over every image with ground-truth metadata. Images are
/// handed out to `cfg.workers` threads, each with its own backend session;
/// results are merged by image id so the output does not depend on
/// scheduling.
pub fn cmd_run(cfg: &PipelineConfig) -> Result<RunSummary> {
    let inputs = Inputs::load(cfg)?;
    let kn = load_source(cfg, Some(&cfg.paths.dets_kn), SourceTag::Known)?;
    let bg = if cfg.switches.use_bg_labelling {
        load_source(cfg, cfg.paths.dets_bg.as_ref(), SourceTag::Background)?
    } else {
        PerImage::new()
    };
    let gd = if cfg.switches.use_gdino {
        load_source(cfg, cfg.paths.dets_gd.as_ref(), SourceTag::Grounded)?
    } else {
        PerImage::new()
    };
    let (mut grouped, partial) = group_sources(kn, bg, gd);
    if !partial.is_empty() {
        tracing::warn!(count = partial.len(), ids = ?partial, stage = "ingest", "images missing from some detection dumps");
    }

    let factory = MeteredFactory::new(backend_factory(cfg, &inputs)?);
    let counts = factory.counts();

    let mut matrix_outcome = None;
    let matrix = if cfg.switches.use_bg_labelling {
        let mut session = factory.connect()?;
        let (m, outcome) = ensure_matrix(cfg, &inputs.vocab, session.as_mut())?;
        matrix_outcome = Some(outcome);
        Some(m)
    } else {
        None
    };

    let image_root = cfg
        .paths
        .image_root
        .as_ref()
        .map(|p| cfg.resolve(p).to_string_lossy().into_owned());
    let images: BTreeMap<ImageId, ImageRef> = inputs
        .gt
        .images
        .iter()
        .map(|(id, img)| (*id, ImageRef::from_info(&img.info, image_root.as_deref())))
        .collect();

    let mut failures: Vec<ImageFailure> = Vec::new();
    grouped.retain(|id, _| {
        let known = images.contains_key(id);
        if !known {
            failures.push(ImageFailure {
                image_id: *id,
                stage: "ingest".into(),
                message: "image has detections but no metadata in the ground-truth file".into(),
            });
        }
        known
    });
    for id in images.keys() {
        grouped.entry(*id).or_default();
    }

    let candidates = match cfg.labelling.classify_scope {
        ClassifyScope::All => None,
        ClassifyScope::Novel => Some(
            inputs
                .vocab
                .entries()
                .iter()
                .filter(|e| !e.known)
                .map(|e| e.class_id)
                .collect(),
        ),
    };
    let ctx = RunContext {
        vocab: &inputs.vocab,
        matrix: matrix.as_ref(),
        labelling: LabellingConfig {
            use_gdino: cfg.switches.use_gdino,
            use_bg_labelling: cfg.switches.use_bg_labelling,
            label: LabelOptions {
                confidence: cfg.labelling.confidence_mode(),
                context_pad: cfg.labelling.context_pad,
                candidates,
            },
            nms_iou: cfg.labelling.nms_iou,
        },
        refine: RefineOptions {
            use_sam: cfg.switches.use_sam,
            use_srm: cfg.switches.use_srm,
            k: cfg.k(),
        },
    };

    let work: Vec<(ImageId, &ImageSources)> = grouped.iter().map(|(id, s)| (*id, s)).collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<BTreeMap<ImageId, Result<ImageOutcome, ImageFailure>>> =
        Mutex::new(BTreeMap::new());
    let workers = cfg.workers.min(work.len()).max(1);
    std::thread::scope(|scope| -> Result<()> {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| -> Result<()> {
                    let mut backend = factory.connect()?;
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(&(id, sources)) = work.get(i) else { break };
                        let outcome = process_image(id, sources, &images[&id], &ctx, backend.as_mut());
                        if let Err(f) = &outcome {
                            tracing::warn!(image_id = id, stage = %f.stage, error = %f.message, "image failed");
                        }
                        results.lock().expect("no worker panics while holding the lock").insert(id, outcome);
                    }
                    Ok(())
                })
            })
            .collect();
        for h in handles {
            h.join().map_err(|_| anyhow!("worker thread panicked"))??;
        }
        Ok(())
    })?;

    let mut finals: BTreeMap<ImageId, Vec<RefinedDetection>> = BTreeMap::new();
    let mut pool_counts = Vec::new();
    for (id, r) in results.into_inner().expect("workers joined") {
        match r {
            Ok(o) => {
                pool_counts.push(o.counts);
                finals.insert(id, o.refined);
            }
            Err(f) => failures.push(f),
        }
    }
    failures.sort_by_key(|f| f.image_id);

    let out_dir = cfg.resolve(&cfg.paths.output_dir);
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let final_path = cfg.output_path("final.jsonl");
    let mut w = BufWriter::new(
        File::create(&final_path).with_context(|| format!("creating {}", final_path.display()))?,
    );
    write_final(&mut w, &finals)?;
    w.flush()?;
    write_jsonl(&cfg.output_path("pool_counts.jsonl"), &pool_counts)?;
    write_jsonl(&cfg.output_path("run_errors.jsonl"), &failures)?;

    let detections = finals.values().map(Vec::len).sum();
    tracing::info!(
        images = finals.len(),
        detections,
        failed = failures.len(),
        text_embed = counts.text_embed.load(Ordering::Relaxed),
        image_embed_roi = counts.image_embed_roi.load(Ordering::Relaxed),
        segment_boxes = counts.segment_boxes.load(Ordering::Relaxed),
        stage = "run",
        "run finished"
    );
    Ok(RunSummary {
        images: finals.len(),
        detections,
        failures,
        matrix: matrix_outcome,
        backend_calls: counts.total(),
        final_path,
    })
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w =
        BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Evaluate `predictions` (default: the run's `final.jsonl`) and write
/// `report.json` and `report.md` to the output directory.
pub fn cmd_eval(cfg: &PipelineConfig, predictions: Option<&Path>) -> Result<EvalReport> {
    let inputs = Inputs::load(cfg)?;
    let pred_path = predictions
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_path("final.jsonl"));
    let records = load_final(&pred_path)?;
    let preds = predictions_by_image(&records);
    let params = EvalParams {
        cmp: cfg.eval.cmp(),
        ..EvalParams::new(cfg.k())
    };
    let report = grouped_map(&preds, &inputs.gt, &inputs.vocab, &params)?;
    for w in &report.warnings {
        tracing::warn!(stage = "eval", "{w}");
    }
    let out_dir = cfg.resolve(&cfg.paths.output_dir);
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(cfg.output_path("report.json"), json + "\n")?;
    fs::write(
        cfg.output_path("report.md"),
        report.to_markdown(cfg.mode == Mode::CocoOvd),
    )?;
    tracing::info!(
        stage = "eval",
        ap_novel = ?report.ap_novel,
        ap_known = ?report.ap_known,
        ap_all = ?report.ap_all,
        recall = ?report.recall_05,
        "evaluation written"
    );
    Ok(report)
}

/// Serve the stub scene of `cfg` over stdin/stdout until end of input.
pub fn cmd_serve_stub(cfg: &PipelineConfig, variant: Option<(&str, f64)>) -> Result<usize> {
    let inputs = Inputs::load(cfg)?;
    let mut stub = SceneStub::new(&inputs.vocab, &inputs.gt);
    if let Some((name, noise)) = variant {
        stub = stub.with_variant(name, noise);
    }
    let stdin = std::io::stdin().lock();
    let stdout = BufWriter::new(std::io::stdout().lock());
    Ok(opendet_core::backend::serve(stdin, stdout, &mut stub)?)
}
