//! Acceptance run. Prints one PASS/FAIL line per check and exits non-zero
//! on any unexpected outcome. Checks listed in `KNOWN_FAILURES` are
//! unattainable as stated; they still print FAIL, and the run only errors if
//! one of them starts passing.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use bev2d::depth::DepthMap;
use bev2d::finetune::{eval_scenes, finetune, History, ToyDetector, TrainConfig};
use bev2d::geometry::{Box2D, Box3D, Vec3};
use bev2d::gradcheck::{run_grad_check, GradCheckConfig};
use bev2d::losses::{
    focal_loss, giou, total_loss_grad_2d, total_loss_grad_3d, CameraView, FocalParams, LossConfig, PipelineConfig,
    Prediction3D, RegressionNorm,
};
use bev2d::matching::{brute_force_assignment, hungarian, Annotation2D, Assignment, CostMatrix, Prediction2D};
use bev2d::metrics::{nds, MetricConfig, TPErrors};
use bev2d::scenegen::{
    generate_dataset, read_dataset, write_dataset, Dataset, SceneConfig, SceneError, MANIFEST_FILE, SCENES_FILE,
};

const NDS_TOL: f64 = 5e-4;
const KNOWN_FAILURES: &[&str] = &["AC1 reference pre-trained row"];

const DATASET_SEED: u64 = 2024;
const SCENES: usize = 60;
const FULL3D_FRACTION: f64 = 1.0 / 3.0;
const IMAGE_SCALE: f64 = 0.25;

struct Outcome {
    name: String,
    pass: bool,
}

#[derive(Default)]
struct Run {
    outcomes: Vec<Outcome>,
}

impl Run {
    fn check(&mut self, name: &str, pass: bool, detail: String) {
        let known = KNOWN_FAILURES.contains(&name);
        let verdict = if pass { "PASS" } else { "FAIL" };
        let note = if known && !pass { "  (known failure)" } else { "" };
        println!("{name}: {detail} ... {verdict}{note}");
        self.outcomes.push(Outcome {
            name: name.to_string(),
            pass,
        });
    }

    fn timed(&mut self, name: &str, elapsed: Duration, limit: Duration) {
        self.check(
            name,
            elapsed <= limit,
            format!("{:.3} s (limit {} s)", elapsed.as_secs_f64(), limit.as_secs()),
        );
    }
}

fn ac1(run: &mut Run) {
    let rows = [
        ("AC1 reference pre-trained row", 0.2524, [0.8976, 0.2931, 0.6501, 0.6557, 0.2160], 0.3540),
        ("AC1 reference fine-tuned row", 0.2775, [0.8926, 0.2908, 0.6364, 0.6017, 0.2333], 0.3733),
        ("AC1 reference 2D-only fine-tuned row", 0.3100, [0.8061, 0.4752, 0.5761, 1.0, 1.0], 0.2693),
    ];
    for (name, map, tp, want) in rows {
        let tp = TPErrors {
            ate: tp[0],
            ase: tp[1],
            aoe: tp[2],
            ave: tp[3],
            aae: tp[4],
        };
        let got = nds(map, &tp);
        run.check(
            name,
            (got - want).abs() <= NDS_TOL,
            format!("nds {got:.6} vs {want:.4} (|diff| {:.2e}, tol {NDS_TOL:.0e})", (got - want).abs()),
        );
    }
}

fn ac2(run: &mut Run) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for k in 0..1000 {
        let (n, m) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        // every fourth matrix uses small integers so ties are common
        let data: Vec<f64> = (0..n * m)
            .map(|_| {
                if k % 4 == 0 {
                    f64::from(rng.gen_range(0..4u8))
                } else {
                    rng.gen_range(0.0..10.0)
                }
            })
            .collect();
        let c = CostMatrix::new(n, m, data).unwrap();
        let h = hungarian(&c);
        let b = brute_force_assignment(&c).unwrap();
        if h.total_cost != b.total_cost || h.pairs != b.pairs {
            mismatches += 1;
        }
    }
    run.check(
        "AC2 assignment oracle",
        mismatches == 0,
        format!("1000 matrices, {mismatches} mismatches"),
    );
    run.timed("AC2 runtime", start.elapsed(), Duration::from_secs(5));
}

fn ac3(run: &mut Run) {
    let start = Instant::now();
    let cfg = GradCheckConfig::default();
    let r = run_grad_check(&cfg);
    let elapsed = start.elapsed();
    let excluded_frac = r.excluded as f64 / r.results.len() as f64;
    run.check(
        "AC3 gradient audit",
        r.passed && r.results.len() == 200,
        format!(
            "{} trials, worst 3D {:.2e} (tol {:.0e}), worst 2D {:.2e} (tol {:.0e}), excluded {:.1}%",
            r.results.len(),
            r.worst_3d,
            cfg.tol_3d,
            r.worst_2d,
            cfg.tol_2d,
            100.0 * excluded_frac
        ),
    );
    run.check(
        "AC3 exclusions under 5%",
        excluded_frac < 0.05,
        format!("{} of {}", r.excluded, r.results.len()),
    );
    let mutated = run_grad_check(&GradCheckConfig {
        trials: 20,
        analytic_scale: 1.1,
        ..cfg
    });
    run.check(
        "AC3 injected gradient bug detected",
        !mutated.passed,
        format!("{} of 20 trials flagged", mutated.failures.len()),
    );
    run.timed("AC3 runtime", elapsed, Duration::from_secs(30));
}

fn confident(class: usize, n: usize) -> Vec<f64> {
    let mut l = vec![0.0; n + 1];
    l[class] = 60.0;
    l
}

fn ac4(run: &mut Run) {
    // 2D fixed point
    let gts: Vec<Annotation2D> = (0..3)
        .map(|k| Annotation2D {
            bbox: Box2D::new(100.0 + 150.0 * k as f64, 200.0, 40.0, 30.0, 10.0 + k as f64).unwrap(),
            class_id: k,
        })
        .collect();
    let preds: Vec<Prediction2D> = gts
        .iter()
        .map(|g| Prediction2D {
            bbox: g.bbox,
            logits: confident(g.class_id, 3),
        })
        .collect();
    let a = Assignment {
        pairs: vec![(0, 0), (1, 1), (2, 2)],
        unmatched_preds: vec![],
        unmatched_gts: vec![],
        total_cost: 0.0,
    };
    let norm = RegressionNorm {
        image_height: 900.0,
        d_max: 61.2,
    };
    let (l, g) = total_loss_grad_2d(&a, &preds, &gts, &LossConfig::default(), &norm).unwrap();
    let zero_2d = l.total == 0.0 && g.iter().all(|p| p.bbox == [0.0; 5] && p.logits.iter().all(|v| *v == 0.0));

    // the same through projection
    let rig = bev2d::scenegen::Rig::new(bev2d::scenegen::RigPreset::Nuscenes, 1.0).unwrap();
    let boxes: Vec<Box3D> = [(12.0, 1.0, 0.2), (20.0, -3.0, 1.1), (-15.0, 4.0, -0.4)]
        .iter()
        .enumerate()
        .map(|(k, &(x, y, yaw))| {
            let mut b = Box3D::new(Vec3::new(x, y, 0.9), [4.2, 1.8, 1.6], yaw);
            b.class_id = k;
            b
        })
        .collect();
    let views: Vec<CameraView> = rig
        .cameras
        .iter()
        .map(|c| CameraView {
            camera: c,
            annotations: boxes
                .iter()
                .filter_map(|b| {
                    bev2d::geometry::project_box(c, b).ok().map(|bbox| Annotation2D {
                        bbox,
                        class_id: b.class_id,
                    })
                })
                .collect(),
        })
        .collect();
    let preds3: Vec<Prediction3D> = boxes
        .iter()
        .map(|b| Prediction3D {
            bbox: *b,
            logits: confident(b.class_id, 3),
        })
        .collect();
    let g3 = total_loss_grad_3d(&preds3, &views, &PipelineConfig::default()).unwrap();
    let zero_3d = g3.breakdown.total == 0.0
        && g3.params.iter().all(|p| *p == [0.0; 7])
        && g3.logits.iter().flatten().all(|v| *v == 0.0)
        && g3.visible_in.iter().all(|n| *n > 0);
    run.check(
        "AC4 zero-loss fixed point",
        zero_2d && zero_3d,
        format!("2D total {:.1e}, projected total {:.1e}", l.total, g3.breakdown.total),
    );

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rand_box = |rng: &mut ChaCha8Rng| {
        Box2D::new(
            rng.gen_range(-500.0..1500.0),
            rng.gen_range(-500.0..1500.0),
            rng.gen_range(0.5..400.0),
            rng.gen_range(0.5..400.0),
            rng.gen_range(1.0..60.0),
        )
        .unwrap()
    };
    let mut worst_sym: f64 = 0.0;
    let mut worst_shift: f64 = 0.0;
    for _ in 0..1000 {
        let a = rand_box(&mut rng);
        let b = rand_box(&mut rng);
        let (dx, dy) = (rng.gen_range(-1e3..1e3), rng.gen_range(-1e3..1e3));
        let shift = |p: Box2D| Box2D {
            x: p.x + dx,
            y: p.y + dy,
            ..p
        };
        worst_sym = worst_sym.max((giou(&a, &b) - giou(&b, &a)).abs());
        worst_shift = worst_shift.max((giou(&a, &b) - giou(&shift(a), &shift(b))).abs());
    }
    run.check(
        "AC4 GIoU symmetry and translation invariance",
        worst_sym <= 1e-9 && worst_shift <= 1e-9,
        format!("1000 pairs, worst asymmetry {worst_sym:.1e}, worst shift change {worst_shift:.1e} (tol 1e-9)"),
    );

    let f = focal_loss(
        0.5,
        &FocalParams {
            alpha: 0.25,
            gamma: 2.0,
        },
    );
    run.check(
        "AC4 focal loss value",
        (f - 0.0433217).abs() <= 1e-6,
        format!("focal(0.5) = {f:.7} vs 0.0433217 (tol 1e-6)"),
    );
}

fn acceptance_dataset() -> Dataset {
    let cfg = SceneConfig {
        image_scale: IMAGE_SCALE,
        ..SceneConfig::default()
    };
    generate_dataset(DATASET_SEED, SCENES, FULL3D_FRACTION, &cfg).unwrap()
}

fn train(ds: &Dataset, mix_ratio: f64, seed: u64) -> (History, ToyDetector) {
    let cfg = TrainConfig {
        mix_ratio,
        seed,
        ..TrainConfig::default()
    };
    let mut det = ToyDetector::from_dataset(ds, &bev2d::scenegen::NoiseConfig::default(), seed).unwrap();
    let h = finetune(&mut det, ds, &cfg, &MetricConfig::default()).unwrap();
    (h, det)
}

fn ac5(run: &mut Run, ds: &Dataset) {
    let start = Instant::now();
    let (h, det) = train(ds, 0.0, DATASET_SEED);
    let elapsed = start.elapsed();
    let (a, b) = (h.first(), h.last());
    let eval = eval_scenes(ds);
    let split_ok = ds.manifest.split.full3d == 20 && ds.manifest.split.only2d == 40 && eval.len() == 20;
    run.check(
        "AC5 dataset and budget",
        split_ok && det.steps <= 500,
        format!(
            "{} scenes ({} full3d eval, {} only2d), {} steps (limit 500)",
            ds.scenes.len(),
            ds.manifest.split.full3d,
            ds.manifest.split.only2d,
            det.steps
        ),
    );
    run.check(
        "AC5 mAP improves",
        b.report.map - a.report.map >= 0.05,
        format!("{:.4} -> {:.4} (+{:.4}, need +0.05)", a.report.map, b.report.map, b.report.map - a.report.map),
    );
    run.check(
        "AC5 NDS improves",
        b.report.nds - a.report.nds >= 0.05,
        format!("{:.4} -> {:.4} (+{:.4}, need +0.05)", a.report.nds, b.report.nds, b.report.nds - a.report.nds),
    );
    let drop = 1.0 - b.median_center_error / a.median_center_error;
    run.check(
        "AC5 median center error halves",
        drop >= 0.5,
        format!(
            "{:.3} m -> {:.3} m ({:.1}% drop, need 50%)",
            a.median_center_error,
            b.median_center_error,
            100.0 * drop
        ),
    );
    let pairs: Vec<(f64, f64)> = h.rows.windows(2).map(|w| (w[0].loss.total, w[1].loss.total)).collect();
    let down = pairs.iter().filter(|(x, y)| y < x).count();
    run.check(
        "AC5 epoch loss decreases",
        down as f64 >= 0.9 * pairs.len() as f64,
        format!("{down} of {} consecutive epochs decrease (need 90%)", pairs.len()),
    );
    run.timed("AC5 runtime", elapsed, Duration::from_secs(120));
}

fn ac6(run: &mut Run, ds: &Dataset) {
    for seed in [DATASET_SEED, 7, 99] {
        let (solo, _) = train(ds, 0.0, seed);
        let (joint, _) = train(ds, 0.5, seed);
        let (s, j) = (solo.last().report.tp.aoe, joint.last().report.tp.aoe);
        run.check(
            &format!("AC6 joint training keeps orientation (seed {seed})"),
            j <= s,
            format!("mAOE 2D-only {s:.4}, joint {j:.4}"),
        );
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn rewrite_checksum(dir: &Path, file: &str) {
    let digest = hex::encode(Sha256::digest(fs::read(dir.join(file)).unwrap()));
    let mpath = dir.join(MANIFEST_FILE);
    let mut m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&mpath).unwrap()).unwrap();
    for f in m["files"].as_array_mut().unwrap() {
        if f["path"] == file {
            f["sha256"] = serde_json::Value::String(digest.clone());
        }
    }
    fs::write(&mpath, serde_json::to_string_pretty(&m).unwrap()).unwrap();
}

fn ac7(run: &mut Run, ds: &Dataset) {
    let tmp = tempfile::tempdir().unwrap();
    let (d1, d2) = (tmp.path().join("a"), tmp.path().join("b"));
    let manifest = write_dataset(ds, &d1).unwrap();
    write_dataset(&acceptance_dataset(), &d2).unwrap();
    let (b1, b2) = (dir_bytes(&d1), dir_bytes(&d2));
    run.check(
        "AC7 dataset regeneration is byte-identical",
        b1 == b2,
        format!("{} files compared", b1.len()),
    );

    let small = |seed| {
        let cfg = SceneConfig {
            image_scale: IMAGE_SCALE,
            ..SceneConfig::default()
        };
        generate_dataset(seed, 12, 0.5, &cfg).unwrap()
    };
    let tiny = small(5);
    let cfg = TrainConfig {
        epochs: 3,
        mix_ratio: 0.5,
        seed: 5,
        ..TrainConfig::default()
    };
    let history = |ds: &Dataset| {
        let mut det = ToyDetector::from_dataset(ds, &bev2d::scenegen::NoiseConfig::default(), 5).unwrap();
        finetune(&mut det, ds, &cfg, &MetricConfig::default()).unwrap().to_csv()
    };
    let (h1, h2) = (history(&tiny), history(&small(5)));
    run.check(
        "AC7 training history is byte-identical",
        h1 == h2,
        format!("{} bytes of history CSV", h1.len()),
    );

    let back = read_dataset(&d1).unwrap();
    run.check(
        "AC7 dataset round trip is lossless",
        back.scenes == ds.scenes && back.manifest == manifest,
        format!("{} scenes re-read", back.scenes.len()),
    );
    let depth_ok = ds.scenes.iter().flat_map(|s| &s.depth_maps).all(|m| {
        let bytes = m.to_bytes();
        DepthMap::from_bytes(&bytes).map(|r| r == *m).unwrap_or(false)
    });
    run.check(
        "AC7 depth file round trip is lossless",
        depth_ok,
        format!("{} depth maps", ds.scenes.len() * ds.scenes[0].depth_maps.len()),
    );

    // corrupted depth payload
    let c = tmp.path().join("corrupt");
    write_dataset(&tiny, &c).unwrap();
    let f = fs::read_dir(c.join("depth")).unwrap().next().unwrap().unwrap().path();
    let mut bytes = fs::read(&f).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    fs::write(&f, bytes).unwrap();
    let e = read_dataset(&c).unwrap_err();
    run.check(
        "AC7 corrupted depth file",
        matches!(e, SceneError::ChecksumMismatch { .. }),
        format!("{e}"),
    );

    // version bump without migration
    let v = tmp.path().join("version");
    write_dataset(&tiny, &v).unwrap();
    let mpath = v.join(MANIFEST_FILE);
    let mut m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&mpath).unwrap()).unwrap();
    m["version"] = serde_json::json!(2);
    fs::write(&mpath, serde_json::to_string_pretty(&m).unwrap()).unwrap();
    let e = read_dataset(&v).unwrap_err();
    run.check(
        "AC7 future format version",
        matches!(e, SceneError::UnsupportedVersion { found: 2, .. }),
        format!("{e}"),
    );

    // malformed scene record with a matching checksum
    let s = tmp.path().join("format");
    write_dataset(&tiny, &s).unwrap();
    let text = fs::read_to_string(s.join(SCENES_FILE)).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[2] = lines[2].replacen("\"yaw\":", "\"yow\":", 1);
    fs::write(s.join(SCENES_FILE), lines.join("\n") + "\n").unwrap();
    rewrite_checksum(&s, SCENES_FILE);
    let e = read_dataset(&s).unwrap_err();
    run.check(
        "AC7 malformed scene record",
        matches!(e, SceneError::Format { line: 3, .. }),
        format!("{e}"),
    );
}

fn main() {
    let mut run = Run::default();
    let start = Instant::now();
    ac1(&mut run);
    ac2(&mut run);
    ac3(&mut run);
    ac4(&mut run);
    let ds = acceptance_dataset();
    ac5(&mut run, &ds);
    ac6(&mut run, &ds);
    ac7(&mut run, &ds);

    let unexpected: Vec<&Outcome> = run
        .outcomes
        .iter()
        .filter(|o| o.pass == KNOWN_FAILURES.contains(&o.name.as_str()))
        .collect();
    let failed = run.outcomes.iter().filter(|o| !o.pass).count();
    println!(
        "\nacceptance: {} checks, {} passed, {} failed ({} known), {:.1} s",
        run.outcomes.len(),
        run.outcomes.len() - failed,
        failed,
        KNOWN_FAILURES.len(),
        start.elapsed().as_secs_f64()
    );
    if !unexpected.is_empty() {
        for o in &unexpected {
            let what = if o.pass { "passed but is listed as a known failure" } else { "failed" };
            println!("unexpected: {} {what}", o.name);
        }
        std::process::exit(1);
    }
}
