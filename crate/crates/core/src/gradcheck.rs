//! Finite-difference audit of the analytic gradients on random
//! configurations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::geometry::{extreme_corners, project_box, Box2D, Box3D, Camera, Intrinsics, Vec3};
use crate::losses::{
    total_loss_grad_2d, total_loss_grad_3d, CameraView, LossConfig, PipelineConfig, Prediction3D, RegressionNorm,
};
use crate::matching::{build_cost_matrix, hungarian, Annotation2D, Prediction2D};
use crate::scenegen::splitmix64;

const N_CLASSES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckConfig {
    pub trials: usize,
    pub seed: u64,
    pub step: f64,
    pub tol_3d: f64,
    pub tol_2d: f64,
    pub max_excluded_fraction: f64,
    /// Multiplies every analytic gradient; anything but 1 must fail.
    pub analytic_scale: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            trials: 200,
            seed: 0,
            step: 1e-5,
            tol_3d: 1e-3,
            tol_2d: 1e-4,
            max_excluded_fraction: 0.05,
            analytic_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialResult {
    pub trial: usize,
    /// Why the trial was skipped, if it was.
    pub excluded: Option<String>,
    pub rel_err_3d: f64,
    pub rel_err_2d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub config: GradCheckConfig,
    pub results: Vec<TrialResult>,
    pub excluded: usize,
    pub worst_3d: f64,
    pub worst_2d: f64,
    pub failures: Vec<usize>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn summary(&self) -> String {
        format!(
            "trials {}  excluded {}  worst rel err 3D {:.3e} (tol {:.0e})  2D {:.3e} (tol {:.0e})  failures {}  {}",
            self.results.len(),
            self.excluded,
            self.worst_3d,
            self.config.tol_3d,
            self.worst_2d,
            self.config.tol_2d,
            self.failures.len(),
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, 1e-10)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let inf = |v: &mut dyn Iterator<Item = f64>| v.fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = inf(&mut analytic.iter().zip(numeric).map(|(a, b)| a - b));
    let scale = inf(&mut analytic.iter().copied())
        .max(inf(&mut numeric.iter().copied()))
        .max(1e-10);
    diff / scale
}

fn random_logits(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..=N_CLASSES).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

fn random_camera(rng: &mut ChaCha8Rng, id: &str, yaw: f64) -> Camera {
    let w = rng.gen_range(600..1200) as u32;
    let h = rng.gen_range(400..800) as u32;
    let f = rng.gen_range(400.0..1200.0);
    let k = Intrinsics::new(f, f * rng.gen_range(0.95..1.05), w as f64 / 2.0, h as f64 / 2.0).expect("positive focal");
    let pos = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(1.0..2.0));
    Camera::looking_along(id, k, yaw, pos, w, h).expect("valid rig")
}

/// A box somewhere in front of the first camera.
fn random_box(rng: &mut ChaCha8Rng) -> Box3D {
    let r = rng.gen_range(6.0..35.0);
    let a = rng.gen_range(-0.5..0.5);
    let mut b = Box3D::new(
        Vec3::new(r * f64::cos(a), r * f64::sin(a), rng.gen_range(0.3..2.0)),
        [rng.gen_range(0.5..6.0), rng.gen_range(0.5..2.5), rng.gen_range(0.8..3.0)],
        rng.gen_range(-3.1..3.1),
    );
    b.class_id = rng.gen_range(0..N_CLASSES);
    b
}

fn jitter(rng: &mut ChaCha8Rng, b: &Box3D) -> Box3D {
    let mut p = b.params();
    for v in &mut p[..3] {
        *v += rng.gen_range(-0.6..0.6);
    }
    for v in &mut p[3..6] {
        *v *= rng.gen_range(0.8..1.25);
    }
    p[6] += rng.gen_range(-0.3..0.3);
    b.with_params(&p)
}

/// Signs of every L1 and overlap term of a matched 2D pair. A probe that
/// flips one of them has stepped across a kink.
fn pair_signs(p: &Box2D, g: &Box2D) -> [bool; 13] {
    let d = [
        p.x - g.x,
        p.y - g.y,
        p.w - g.w,
        p.h - g.h,
        p.depth - g.depth,
        p.x_min() - g.x_min(),
        p.x_max() - g.x_max(),
        p.y_min() - g.y_min(),
        p.y_max() - g.y_max(),
        // overlap switching on or off
        p.x_max() - g.x_min(),
        g.x_max() - p.x_min(),
        p.y_max() - g.y_min(),
        g.y_max() - p.y_min(),
    ];
    d.map(|v| v > 0.0)
}

/// Everything a probe may not change for the central difference to be
/// taken on one smooth piece.
#[derive(Debug, PartialEq)]
struct Signature3D {
    cameras: Vec<CameraSignature>,
}

#[derive(Debug, PartialEq)]
struct CameraSignature {
    camera: String,
    visible: Vec<usize>,
    corners: Vec<[usize; 4]>,
    pairs: Vec<(usize, usize)>,
    signs: Vec<[bool; 13]>,
}

struct Trial3D {
    cameras: Vec<Camera>,
    preds: Vec<Prediction3D>,
    annotations: Vec<Vec<Annotation2D>>,
}

impl Trial3D {
    fn views(&self) -> Vec<CameraView<'_>> {
        self.cameras
            .iter()
            .zip(&self.annotations)
            .map(|(camera, a)| CameraView {
                camera,
                annotations: a.clone(),
            })
            .collect()
    }
}

fn build_trial_3d(rng: &mut ChaCha8Rng) -> Trial3D {
    let mut cameras = vec![random_camera(rng, "A", 0.0)];
    if rng.gen_bool(0.5) {
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let yaw = side * rng.gen_range(0.3..0.7);
        cameras.push(random_camera(rng, "B", yaw));
    }
    loop {
        let n_gt = rng.gen_range(1..=3);
        let gts: Vec<Box3D> = (0..n_gt).map(|_| random_box(rng)).collect();
        let mut preds: Vec<Prediction3D> = gts
            .iter()
            .map(|g| Prediction3D {
                bbox: jitter(rng, g),
                logits: random_logits(rng),
            })
            .collect();
        for _ in 0..rng.gen_range(0..=1) {
            preds.push(Prediction3D {
                bbox: random_box(rng),
                logits: random_logits(rng),
            });
        }
        let mut annotations: Vec<Vec<Annotation2D>> = Vec::with_capacity(cameras.len());
        for c in &cameras {
            let mut list = Vec::new();
            for g in &gts {
                if let Ok(bb) = project_box(c, g) {
                    // depth target offset so the L1 depth term is off its kink
                    let depth = bb.depth + rng.gen_range(-2.0..2.0);
                    list.push(Annotation2D {
                        bbox: Box2D { depth, ..bb },
                        class_id: g.class_id,
                    });
                }
            }
            annotations.push(list);
        }
        let visible = preds
            .iter()
            .any(|p| cameras.iter().any(|c| project_box(c, &p.bbox).is_ok()));
        if visible {
            return Trial3D {
                cameras,
                preds,
                annotations,
            };
        }
    }
}

fn loss_3d(preds: &[Prediction3D], t: &Trial3D, pipe: &PipelineConfig) -> (f64, Signature3D) {
    let g = total_loss_grad_3d(preds, &t.views(), pipe).expect("trial inputs are valid");
    let cameras = g
        .cameras
        .iter()
        .map(|c| {
            let ci = t.cameras.iter().position(|x| x.id == c.camera).expect("known camera");
            let corners = c
                .visible
                .iter()
                .map(|&i| extreme_corners(&t.cameras[ci], &preds[i].bbox).expect("visible"))
                .collect();
            let signs = c
                .assignment
                .pairs
                .iter()
                .map(|&(r, a)| pair_signs(&c.projections[r], &t.annotations[ci][a].bbox))
                .collect();
            CameraSignature {
                camera: c.camera.clone(),
                visible: c.visible.clone(),
                corners,
                pairs: c.assignment.pairs.clone(),
                signs,
            }
        })
        .collect();
    (g.breakdown.total, Signature3D { cameras })
}

/// Returns (relative error, exclusion reason).
fn check_3d(t: &Trial3D, cfg: &GradCheckConfig, pipe: &PipelineConfig) -> (f64, Option<String>) {
    let g = total_loss_grad_3d(&t.preds, &t.views(), pipe).expect("trial inputs are valid");
    let (_, base) = loss_3d(&t.preds, t, pipe);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let h = cfg.step;
    for i in 0..t.preds.len() {
        for k in 0..7 {
            let probe = |sign: f64| {
                let mut preds = t.preds.clone();
                let mut p = preds[i].bbox.params();
                p[k] += sign * h;
                preds[i].bbox = preds[i].bbox.with_params(&p);
                loss_3d(&preds, t, pipe)
            };
            let (lp, ap) = probe(1.0);
            let (lm, am) = probe(-1.0);
            if ap != base || am != base {
                return (0.0, Some(format!("probing pred {i} param {k} crosses a kink or tie")));
            }
            analytic.push(cfg.analytic_scale * g.params[i][k]);
            numeric.push((lp - lm) / (2.0 * h));
        }
        for k in 0..t.preds[i].logits.len() {
            let probe = |sign: f64| {
                let mut preds = t.preds.clone();
                preds[i].logits[k] += sign * h;
                loss_3d(&preds, t, pipe)
            };
            let (lp, ap) = probe(1.0);
            let (lm, am) = probe(-1.0);
            if ap != base || am != base {
                return (0.0, Some(format!("probing pred {i} logit {k} changes the assignment")));
            }
            analytic.push(cfg.analytic_scale * g.logits[i][k]);
            numeric.push((lp - lm) / (2.0 * h));
        }
    }
    (relative_error(&analytic, &numeric), None)
}

struct Trial2D {
    preds: Vec<Prediction2D>,
    gts: Vec<Annotation2D>,
    norm: RegressionNorm,
}

fn build_trial_2d(rng: &mut ChaCha8Rng) -> Trial2D {
    let n = rng.gen_range(1..=4);
    let gts: Vec<Annotation2D> = (0..n)
        .map(|_| Annotation2D {
            bbox: Box2D::new(
                rng.gen_range(50.0..950.0),
                rng.gen_range(50.0..650.0),
                rng.gen_range(10.0..200.0),
                rng.gen_range(10.0..200.0),
                rng.gen_range(3.0..50.0),
            )
            .expect("positive extents"),
            class_id: rng.gen_range(0..N_CLASSES),
        })
        .collect();
    let mut preds: Vec<Prediction2D> = gts
        .iter()
        .map(|g| {
            let b = g.bbox;
            Prediction2D {
                bbox: Box2D {
                    x: b.x + rng.gen_range(-20.0..20.0),
                    y: b.y + rng.gen_range(-20.0..20.0),
                    w: b.w * rng.gen_range(0.7..1.4),
                    h: b.h * rng.gen_range(0.7..1.4),
                    depth: b.depth + rng.gen_range(-3.0..3.0),
                },
                logits: random_logits(rng),
            }
        })
        .collect();
    for _ in 0..rng.gen_range(0..=1) {
        preds.push(Prediction2D {
            bbox: Box2D::new(500.0, 350.0, 80.0, 60.0, 20.0).expect("positive extents"),
            logits: random_logits(rng),
        });
    }
    Trial2D {
        preds,
        gts,
        norm: RegressionNorm {
            image_height: 700.0,
            d_max: 61.2,
        },
    }
}

fn check_2d(t: &Trial2D, cfg: &GradCheckConfig, pipe: &PipelineConfig) -> (f64, Option<String>) {
    let loss_cfg: &LossConfig = &pipe.loss;
    let costs = build_cost_matrix(&t.preds, &t.gts, &pipe.cost, &t.norm).expect("valid 2D trial");
    let assignment = hungarian(&costs);
    let signs = |preds: &[Prediction2D]| -> Vec<[bool; 13]> {
        assignment
            .pairs
            .iter()
            .map(|&(i, j)| pair_signs(&preds[i].bbox, &t.gts[j].bbox))
            .collect()
    };
    let base = signs(&t.preds);
    let (_, grads) = total_loss_grad_2d(&assignment, &t.preds, &t.gts, loss_cfg, &t.norm).expect("valid 2D trial");
    let loss = |preds: &[Prediction2D]| {
        total_loss_grad_2d(&assignment, preds, &t.gts, loss_cfg, &t.norm)
            .expect("valid 2D trial")
            .0
            .total
    };
    let h = cfg.step;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for i in 0..t.preds.len() {
        for k in 0..5 {
            let probe = |sign: f64| {
                let mut preds = t.preds.clone();
                let mut a = preds[i].bbox.to_array();
                a[k] += sign * h;
                preds[i].bbox = Box2D::from_array(a);
                (loss(&preds), signs(&preds))
            };
            let ((lp, sp), (lm, sm)) = (probe(1.0), probe(-1.0));
            if sp != base || sm != base {
                return (0.0, Some(format!("probing 2D pred {i} coordinate {k} crosses a kink")));
            }
            analytic.push(cfg.analytic_scale * grads[i].bbox[k]);
            numeric.push((lp - lm) / (2.0 * h));
        }
        for k in 0..t.preds[i].logits.len() {
            let probe = |sign: f64| {
                let mut preds = t.preds.clone();
                preds[i].logits[k] += sign * h;
                loss(&preds)
            };
            analytic.push(cfg.analytic_scale * grads[i].logits[k]);
            numeric.push((probe(1.0) - probe(-1.0)) / (2.0 * h));
        }
    }
    (relative_error(&analytic, &numeric), None)
}

/// Runs `cfg.trials` independent trials, each auditing one random
/// multi-camera 3D configuration and one random 2D configuration.
pub fn run_grad_check(cfg: &GradCheckConfig) -> GradCheckReport {
    let pipe = PipelineConfig {
        near_plane: 0.5,
        ..PipelineConfig::default()
    };
    let mut results = Vec::with_capacity(cfg.trials);
    for trial in 0..cfg.trials {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed, trial as u64));
        let t3 = build_trial_3d(&mut rng);
        let t2 = build_trial_2d(&mut rng);
        let (e3, x3) = check_3d(&t3, cfg, &pipe);
        let (e2, x2) = check_2d(&t2, cfg, &pipe);
        results.push(TrialResult {
            trial,
            excluded: x3.or(x2),
            rel_err_3d: e3,
            rel_err_2d: e2,
        });
    }
    let kept: Vec<&TrialResult> = results.iter().filter(|r| r.excluded.is_none()).collect();
    let excluded = results.len() - kept.len();
    let worst_3d = kept.iter().map(|r| r.rel_err_3d).fold(0.0, f64::max);
    let worst_2d = kept.iter().map(|r| r.rel_err_2d).fold(0.0, f64::max);
    let failures: Vec<usize> = kept
        .iter()
        .filter(|r| r.rel_err_3d > cfg.tol_3d || r.rel_err_2d > cfg.tol_2d)
        .map(|r| r.trial)
        .collect();
    let excluded_ok = excluded as f64 <= cfg.max_excluded_fraction * results.len() as f64;
    GradCheckReport {
        config: *cfg,
        passed: failures.is_empty() && excluded_ok && !kept.is_empty(),
        results,
        excluded,
        worst_3d,
        worst_2d,
        failures,
    }
}
