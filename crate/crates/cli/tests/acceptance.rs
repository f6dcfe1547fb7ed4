//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

#[path = "../../core/tests/support/oracle.rs"]
mod oracle;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use opendet::config::{Overrides, PipelineConfig};
use opendet::pipeline::{cmd_eval, cmd_run, PoolCounts};
use opendet_core::eval::{grouped_map, localization_recall, EvalParams, IouCmp, Prediction};
use opendet_core::ingest::{
    decode_rle, encode_rle, load_detections, BinaryMask, ClassEntry, ClassVocabulary,
    GroundTruthSet, GtObject, ImageGt, ImageInfo,
};
use opendet_core::refine::{minmax, srm, srm_scores, ScorePair};
use opendet_core::saeg::{class_feature, synonym_feature};
use opendet_core::{BBox, Embedding, SourceTag};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, Option<Duration>, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Check) -> (Check, Duration) {
    let start = Instant::now();
    let mut r = f();
    let took = start.elapsed();
    if let (Some(limit), Ok(_)) = (limit, &r) {
        if took > limit {
            r = Err(format!("took {took:.2?}, limit {limit:?}"));
        }
    }
    (r, took)
}

fn srm_exactness() -> Check {
    ensure(
        minmax(&[0.2, 0.6, 1.0]).unwrap() == vec![0.0, 0.5, 1.0],
        || "minmax [0.2,0.6,1.0]".into(),
    )?;
    ensure(minmax(&[0.4, 0.4, 0.4]).unwrap() == vec![0.0; 3], || {
        "constant input".into()
    })?;
    ensure(minmax(&[5.0]).unwrap() == vec![0.0], || {
        "single element".into()
    })?;
    let pairs = [
        ScorePair {
            combined: 0.2,
            sam: 0.5,
        },
        ScorePair {
            combined: 0.6,
            sam: 0.75,
        },
        ScorePair {
            combined: 1.0,
            sam: 1.0,
        },
    ];
    ensure(srm(&pairs).unwrap() == vec![0.0, 0.25, 1.0], || {
        format!("srm hand case gave {:?}", srm(&pairs))
    })?;
    ensure(srm(&pairs[..1]).unwrap() == vec![0.0], || {
        "single detection".into()
    })?;
    ensure(srm_scores(&[0.1], &[0.1, 0.2]).is_err(), || {
        "length mismatch accepted".into()
    })?;
    ensure(minmax(&[]).is_err(), || "empty accepted".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_affine: f64 = 0.0;
    for case in 0..10_000 {
        let n = rng.gen_range(1..=64);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let m = minmax(&x).unwrap();
        ensure(m.iter().all(|v| (0.0..=1.0).contains(v)), || {
            format!("case {case}: minmax out of range")
        })?;
        for i in 0..n {
            for j in 0..n {
                if x[i] <= x[j] {
                    ensure(m[i] <= m[j], || format!("case {case}: order not preserved"))?;
                }
            }
        }
        let a = rng.gen_range(0.1..10.0);
        let b = rng.gen_range(-5.0..5.0);
        let moved = minmax(&x.iter().map(|v| a * v + b).collect::<Vec<_>>()).unwrap();
        let err = m
            .iter()
            .zip(&moved)
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        worst_affine = worst_affine.max(err);
        let r = srm_scores(&x, &s).unwrap();
        ensure(r.iter().all(|v| (0.0..=1.0).contains(v)), || {
            format!("case {case}: srm out of range")
        })?;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let rp = srm_scores(
            &perm.iter().map(|&i| x[i]).collect::<Vec<_>>(),
            &perm.iter().map(|&i| s[i]).collect::<Vec<_>>(),
        )
        .unwrap();
        ensure(perm.iter().enumerate().all(|(k, &i)| rp[k] == r[i]), || {
            format!("case {case}: not permutation-equivariant")
        })?;
        let c = vec![x[0]; n];
        ensure(minmax(&c).unwrap().iter().all(|&v| v == 0.0), || {
            format!("case {case}: constant rule")
        })?;
    }
    ensure(worst_affine <= 1e-12, || {
        format!("affine invariance error {worst_affine:e} > 1e-12")
    })?;
    Ok(format!(
        "10000 vectors, worst affine error {worst_affine:.1e}"
    ))
}

fn unit_sum_feature(groups: &[Vec<Embedding>]) -> Embedding {
    let syns: Vec<Embedding> = groups.iter().map(|g| synonym_feature(g).unwrap()).collect();
    class_feature(&syns).unwrap()
}

fn saeg_properties() -> Check {
    let v = Embedding::new(vec![3.0, 4.0]).unwrap();
    ensure(
        synonym_feature(std::slice::from_ref(&v)).unwrap().values() == [0.6, 0.8],
        || "single prompt collapse".into(),
    )?;
    let unit = Embedding::new(vec![0.6, 0.8]).unwrap();
    ensure(
        class_feature(std::slice::from_ref(&unit)).unwrap().values() == unit.values(),
        || "single synonym collapse".into(),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_perm: f64 = 0.0;
    let mut worst_dup: f64 = 0.0;
    let mut max_norm: f64 = 0.0;
    let mut sets = 0;
    for &d in &[4usize, 512, 1152] {
        for _ in 0..100 {
            let n_syn = rng.gen_range(1..=5);
            let groups: Vec<Vec<Embedding>> = (0..n_syn)
                .map(|_| {
                    (0..rng.gen_range(1..=8))
                        .map(|_| {
                            Embedding::new((0..d).map(|_| rng.gen_range(-1.0..1.0) + 0.5).collect())
                                .unwrap()
                        })
                        .collect()
                })
                .collect();
            let f = unit_sum_feature(&groups);
            max_norm = max_norm.max(f.norm());

            let mut perm = groups.clone();
            perm.shuffle(&mut rng);
            for g in &mut perm {
                g.shuffle(&mut rng);
            }
            let fp = unit_sum_feature(&perm);
            worst_perm = worst_perm.max(
                f.values()
                    .iter()
                    .zip(fp.values())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max),
            );

            let single = unit_sum_feature(&groups[..1]);
            let doubled = unit_sum_feature(&[groups[0].clone(), groups[0].clone()]);
            worst_dup = worst_dup.max(
                single
                    .values()
                    .iter()
                    .zip(doubled.values())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max),
            );
            sets += 1;
        }
    }
    ensure(worst_perm <= 1e-9, || {
        format!("permutation error {worst_perm:e}")
    })?;
    ensure(worst_dup <= 1e-12, || {
        format!("duplicate-synonym error {worst_dup:e}")
    })?;
    ensure(max_norm <= 1.0 + 1e-12, || format!("norm {max_norm} > 1"))?;
    Ok(format!(
        "{sets} sets over d in {{4, 512, 1152}}, max norm {max_norm:.6}, perm err {worst_perm:.1e}"
    ))
}

fn evaluator_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let scene = oracle::random_scene(&mut rng, 5, 10, 20);
        let max_dets = if case % 4 == 0 { 5 } else { 300 };
        let (vocab, gt, preds) = oracle::to_engine(&scene);
        let report = grouped_map(&preds, &gt, &vocab, &EvalParams::new(max_dets))
            .map_err(|e| e.to_string())?;
        let want = oracle::ref_evaluate(&scene, max_dets);
        let pairs = [
            (report.ap_all, want.ap_all),
            (report.ap_known, want.ap_known),
            (report.ap_novel, want.ap_novel),
        ];
        let per_class = report
            .per_class
            .iter()
            .zip(&want.class_ap)
            .map(|(g, w)| (g.ap, *w));
        for (got, exp) in pairs.into_iter().chain(per_class) {
            ensure(oracle::close(got, exp, 1e-9), || {
                format!("case {case}: {got:?} vs {exp:?}")
            })?;
            if let (Some(a), Some(b)) = (got, exp) {
                worst = worst.max((a - b).abs());
            }
        }
        let r =
            localization_recall(&preds, &gt, 0.5, IouCmp::AtLeast).map_err(|e| e.to_string())?;
        let (tp, n_gt, n_pred) = oracle::ref_recall(&scene, usize::MAX, 0.5);
        ensure((r.tp, r.n_gt, r.n_pred) == (tp, n_gt, n_pred), || {
            format!("case {case}: recall counts differ")
        })?;
        let want_recall = (n_gt > 0).then(|| tp as f64 / n_gt as f64);
        ensure(oracle::close(r.recall, want_recall, 1e-9), || {
            format!("case {case}: recall differs")
        })?;
    }
    Ok(format!("200 scenes, worst AP difference {worst:.1e}"))
}

fn protocol_arithmetic() -> Check {
    // Class-agnostic recall with 17026 true positives out of 45570 objects:
    // 735 images of 62 disjoint boxes each; the first 121 images get 24 exact
    // hits and the rest 23.
    let cell = |i: usize| {
        let (x, y) = ((i % 8) as f64 * 10.0, (i / 8) as f64 * 10.0);
        BBox::new(x, y, x + 5.0, y + 5.0).unwrap()
    };
    let mut gt = GroundTruthSet::default();
    let mut preds: BTreeMap<u64, Vec<Prediction>> = BTreeMap::new();
    for id in 0..735u64 {
        gt.images.insert(
            id,
            ImageGt {
                info: ImageInfo {
                    id,
                    width: 80,
                    height: 80,
                    file_name: None,
                },
                objects: (0..62)
                    .map(|i| GtObject {
                        bbox: cell(i),
                        class_id: 0,
                    })
                    .collect(),
            },
        );
        let hits = if id < 121 { 24 } else { 23 };
        preds.insert(
            id,
            (0..hits)
                .map(|i| Prediction {
                    bbox: cell(i),
                    score: 0.5,
                    class_id: 0,
                })
                .collect(),
        );
    }
    let r = localization_recall(&preds, &gt, 0.5, IouCmp::AtLeast).map_err(|e| e.to_string())?;
    let pct = 100.0 * r.recall.unwrap();
    ensure((r.tp, r.n_gt) == (17_026, 45_570), || {
        format!("counts {} / {}", r.tp, r.n_gt)
    })?;
    ensure((pct - 37.36).abs() <= 0.005, || format!("recall {pct}%"))?;

    // 745 images x 300 predictions written and read back as a detection dump.
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("dets_kn.jsonl");
    let mut text = String::new();
    for img in 0..745u64 {
        for j in 0..300 {
            let x = (j % 30) as f64;
            text.push_str(&format!(
                "{{\"image_id\": {img}, \"box\": [{x}, 0, {}, 10], \"score\": 0.{:03}, \"class_id\": 0}}\n",
                x + 5.0,
                (j * 3 + 1) % 1000
            ));
        }
    }
    fs::write(&path, text).map_err(|e| e.to_string())?;
    let dump = load_detections(&path, SourceTag::Known).map_err(|e| e.to_string())?;
    let preds: BTreeMap<u64, Vec<Prediction>> = dump
        .iter()
        .map(|(id, ds)| {
            (
                *id,
                ds.iter()
                    .map(|d| Prediction {
                        bbox: d.bbox,
                        score: d.score.unwrap(),
                        class_id: 0,
                    })
                    .collect(),
            )
        })
        .collect();
    let mut gt = GroundTruthSet::default();
    for id in 0..745u64 {
        gt.images.insert(
            id,
            ImageGt {
                info: ImageInfo {
                    id,
                    width: 64,
                    height: 64,
                    file_name: None,
                },
                objects: vec![GtObject {
                    bbox: BBox::new(0., 0., 5., 10.).unwrap(),
                    class_id: 0,
                }],
            },
        );
    }
    let vocab = ClassVocabulary::new(vec![ClassEntry {
        class_id: 0,
        name: "thing".into(),
        synonyms: vec![],
        known: true,
    }])
    .map_err(|e| e.to_string())?;
    let report =
        grouped_map(&preds, &gt, &vocab, &EvalParams::new(300)).map_err(|e| e.to_string())?;
    let rec = localization_recall(&preds, &gt, 0.5, IouCmp::AtLeast).map_err(|e| e.to_string())?;
    ensure(
        report.pred_count == 223_500 && rec.n_pred == 223_500,
        || format!("pred_count {} / {}", report.pred_count, rec.n_pred),
    )?;
    Ok(format!(
        "recall {pct:.4}%, pred_count {}",
        report.pred_count
    ))
}

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/three_images")
}

fn copy_fixture(dst: &Path) -> PathBuf {
    for entry in fs::read_dir(fixture_dir()).unwrap() {
        let p = entry.unwrap().path();
        if p.is_file() {
            fs::copy(&p, dst.join(p.file_name().unwrap())).unwrap();
        }
    }
    dst.join("config.toml")
}

fn config(path: &Path, o: &Overrides) -> Result<PipelineConfig, String> {
    let mut cfg = PipelineConfig::load(path).map_err(|e| format!("{e:#}"))?;
    cfg.apply(o, None).map_err(|e| format!("{e:#}"))?;
    Ok(cfg)
}

fn read_counts(cfg: &PipelineConfig) -> Vec<PoolCounts> {
    fs::read_to_string(cfg.output_path("pool_counts.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn pipeline_determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg_path = copy_fixture(dir.path());

    let mut outputs = Vec::new();
    for (run, workers) in [1usize, 1, 1, 1, 1, 2, 3, 8].into_iter().enumerate() {
        let cfg = config(
            &cfg_path,
            &Overrides {
                workers: Some(workers),
                ..Overrides::default()
            },
        )?;
        let summary = cmd_run(&cfg).map_err(|e| format!("{e:#}"))?;
        ensure(summary.failures.is_empty(), || {
            format!("run {run} had failures {:?}", summary.failures)
        })?;
        outputs.push((
            workers,
            fs::read(cfg.output_path("final.jsonl")).map_err(|e| e.to_string())?,
        ));
    }
    ensure(!outputs[0].1.is_empty(), || "empty final.jsonl".into())?;
    for (w, bytes) in &outputs {
        ensure(bytes == &outputs[0].1, || {
            format!("final.jsonl differs with {w} workers")
        })?;
    }

    // pool accounting against the raw dumps
    let cfg = config(&cfg_path, &Overrides::default())?;
    cmd_run(&cfg).map_err(|e| format!("{e:#}"))?;
    let count = |name: &str, tag| {
        load_detections(&dir.path().join(name), tag)
            .unwrap()
            .into_iter()
            .map(|(k, v)| (k, v.len()))
            .collect::<BTreeMap<_, _>>()
    };
    let (kn, bg, gd) = (
        count("dets_kn.jsonl", SourceTag::Known),
        count("dets_bg.jsonl", SourceTag::Background),
        count("dets_gd.jsonl", SourceTag::Grounded),
    );
    let counts = read_counts(&cfg);
    ensure(counts.len() == 3, || {
        format!("{} images in pool counts", counts.len())
    })?;
    for c in &counts {
        let id = c.image_id;
        let want = (
            kn.get(&id).copied().unwrap_or(0),
            bg.get(&id).copied().unwrap_or(0),
            gd.get(&id).copied().unwrap_or(0),
        );
        ensure((c.n_kn, c.n_bg, c.n_gd) == want, || {
            format!("image {id}: counts {c:?} vs dumps {want:?}")
        })?;
        ensure(c.n_c == c.n_kn + c.n_bg + c.n_gd, || {
            format!("image {id}: N_C {} != sum", c.n_c)
        })?;
        ensure(c.n_final <= c.n_c.min(cfg.k()), || {
            format!("image {id}: {} final > min(k, N_C)", c.n_final)
        })?;
    }

    // the ablation table: the full system and each single component removed
    let exe = env!("CARGO_BIN_EXE_opendet");
    let weaker_encoder = format!(
        "exec:{exe} serve-stub --config {} --variant clip --roi-noise 1.5",
        cfg_path.display()
    );
    let rows: Vec<(&str, Overrides)> = vec![
        ("full", Overrides::default()),
        (
            "weaker image encoder",
            Overrides {
                backend: Some(weaker_encoder),
                ..Overrides::default()
            },
        ),
        (
            "no SAM",
            Overrides {
                no_sam: true,
                ..Overrides::default()
            },
        ),
        (
            "no GDINO",
            Overrides {
                no_gdino: true,
                ..Overrides::default()
            },
        ),
        (
            "no SRM",
            Overrides {
                no_srm: true,
                ..Overrides::default()
            },
        ),
        (
            "no SAEG",
            Overrides {
                no_saeg: true,
                ..Overrides::default()
            },
        ),
    ];
    let mut table = Vec::new();
    for (name, o) in &rows {
        let cfg = config(&cfg_path, o)?;
        let summary = cmd_run(&cfg).map_err(|e| format!("{name}: {e:#}"))?;
        ensure(summary.failures.is_empty(), || {
            format!("{name}: failures {:?}", summary.failures)
        })?;
        let r = cmd_eval(&cfg, None).map_err(|e| format!("{name}: {e:#}"))?;
        for c in read_counts(&cfg) {
            ensure(c.n_c == c.n_kn + c.n_bg + c.n_gd, || {
                format!("{name}: accounting broken")
            })?;
        }
        table.push((
            name.to_string(),
            r.ap_novel.unwrap_or(f64::NAN),
            r.ap_known.unwrap_or(f64::NAN),
            r.ap_all.unwrap_or(f64::NAN),
        ));
    }
    let full = table[0].clone();
    for row in &table {
        let ok = [row.1, row.2, row.3]
            .iter()
            .all(|v| (0.0..=1.0).contains(v))
            && row.3 <= full.3 + 1e-12;
        ensure(ok, || {
            format!("{} report not sensible: {row:?} vs full {full:?}", row.0)
        })?;
    }

    let cfg = config(
        &cfg_path,
        &Overrides {
            no_bg_labelling: true,
            ..Overrides::default()
        },
    )?;
    cmd_run(&cfg).map_err(|e| format!("{e:#}"))?;
    let closed = cmd_eval(&cfg, None).map_err(|e| format!("{e:#}"))?;
    ensure(closed.ap_novel == Some(0.0), || {
        format!("novel AP without BG labelling is {:?}", closed.ap_novel)
    })?;
    ensure(closed.ap_known.unwrap_or(0.0) > 0.0, || {
        "known AP vanished without BG labelling".into()
    })?;

    let summary: Vec<String> = table
        .iter()
        .map(|(n, nv, _, all)| format!("{n}: novel {:.1} all {:.1}", 100.0 * nv, 100.0 * all))
        .collect();
    Ok(format!(
        "8 identical runs (1/2/3/8 workers); {}; no BG labelling: novel 0.0",
        summary.join(", ")
    ))
}

fn rle_round_trip() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..1000 {
        let h = rng.gen_range(1..=64u32);
        let w = rng.gen_range(1..=64u32);
        let density = rng.gen_range(0.0..1.0);
        let blocky = rng.gen_bool(0.5);
        let mut m = BinaryMask::new(h, w);
        for c in 0..w {
            for r in 0..h {
                let on = if blocky {
                    ((r / 7 + c / 5) % 3 == 0) ^ rng.gen_bool(0.02)
                } else {
                    rng.gen_bool(density)
                };
                m.set(r, c, on);
            }
        }
        let rle = encode_rle(&m);
        ensure(rle.validate().is_ok(), || {
            format!("case {case}: invalid encoding")
        })?;
        ensure(rle.counts.iter().skip(1).all(|&n| n > 0), || {
            format!("case {case}: non-canonical runs")
        })?;
        let back = decode_rle(&rle).map_err(|e| e.to_string())?;
        ensure(back == m, || format!("case {case}: decode(encode(m)) != m"))?;
        ensure(encode_rle(&back) == rle, || {
            format!("case {case}: encode(decode(r)) != r")
        })?;
    }
    Ok("1000 masks up to 64x64".into())
}

fn main() -> ExitCode {
    let criteria: Vec<Criterion> = vec![
        ("SRM exactness", Some(Duration::from_secs(5)), srm_exactness),
        (
            "SAEG properties",
            Some(Duration::from_secs(10)),
            saeg_properties,
        ),
        (
            "Evaluator matches oracle",
            Some(Duration::from_secs(60)),
            evaluator_oracle,
        ),
        ("Protocol arithmetic", None, protocol_arithmetic),
        (
            "Pipeline determinism and accounting",
            None,
            pipeline_determinism,
        ),
        (
            "RLE round-trip",
            Some(Duration::from_secs(5)),
            rle_round_trip,
        ),
    ];
    let mut failed = 0;
    for (name, limit, f) in criteria {
        let (r, took) = timed(limit, f);
        match r {
            Ok(detail) => println!("PASS  {name} ({took:.2?}): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name} ({took:.2?}): {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
