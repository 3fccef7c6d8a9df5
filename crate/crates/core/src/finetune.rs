//! Directly parameterized per-scene detector and the fine-tuning loop that
//! drives it with projected 2D supervision, optionally interleaved with 3D
//! supervision.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::depth::{box_depth_from_map, DepthError};
use crate::geometry::{normalize_angle, Box2D, Box3D};
use crate::losses::{
    focal_from_logits, total_loss_grad_3d, CameraView, FocalParams, LossBreakdown, LossConfig, LossError,
    LossWeights, PairContribution, PipelineConfig, Prediction3D, DEFAULT_D_MAX,
};
use crate::matching::{hungarian, Annotation2D, CostMatrix, CostWeights, MatchingError};
use crate::metrics::{evaluate as score_boxes, EvalBox, MetricConfig, MetricReport};
use crate::scenegen::{perturb_predictions, splitmix64, Dataset, LabelMode, NoiseConfig, Scene, SceneError};

/// Smallest box dimension kept after an update, meters.
pub const MIN_DIM: f64 = 0.1;
/// Normalizer for center and size residuals under 3D supervision, meters.
pub const LENGTH_SCALE: f64 = 10.0;

pub const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("parameter file does not fit the dataset: {0}")]
    ParamsMismatch(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Matching(#[from] MatchingError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Depth(#[from] DepthError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Cosine annealing from `base_lr` to 0 over all steps; constant if off.
    pub cosine: bool,
    pub epochs: usize,
    /// Probability that a visit to a fully labelled scene uses 3D labels.
    pub mix_ratio: f64,
    pub seed: u64,
    /// Largest L2 norm of one box's parameter gradient; larger ones are
    /// rescaled. Zero disables clipping.
    pub max_grad_norm: f64,
    /// Minimum corner depth, meters, for a box to be supervised in a camera.
    pub near_plane: f64,
    pub d_max: f64,
    pub loss_weights: LossWeights,
    pub focal: FocalParams,
    pub cost_weights: CostWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 6.0,
            cosine: true,
            epochs: 8,
            mix_ratio: 0.0,
            seed: 0,
            max_grad_norm: 0.1,
            near_plane: 1.0,
            d_max: DEFAULT_D_MAX,
            loss_weights: LossWeights::default(),
            focal: FocalParams::default(),
            cost_weights: CostWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr {}", self.base_lr));
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return bad(format!("mix_ratio {}", self.mix_ratio));
        }
        if !(self.max_grad_norm >= 0.0 && self.max_grad_norm.is_finite()) {
            return bad(format!("max_grad_norm {}", self.max_grad_norm));
        }
        if !(self.near_plane > 0.0 && self.near_plane.is_finite()) {
            return bad(format!("near_plane {}", self.near_plane));
        }
        if !(self.d_max > 0.0) {
            return bad(format!("d_max {}", self.d_max));
        }
        self.pipeline().loss.validate()?;
        self.cost_weights.validate()?;
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            cost: self.cost_weights,
            loss: LossConfig {
                weights: self.loss_weights,
                focal: self.focal,
            },
            d_max: self.d_max,
            near_plane: self.near_plane,
        }
    }

    /// Rate for step `t` of `total`.
    pub fn lr_at(&self, t: usize, total: usize) -> f64 {
        if !self.cosine || total == 0 {
            return self.base_lr;
        }
        self.base_lr * 0.5 * (1.0 + (PI * t as f64 / total as f64).cos())
    }
}

/// Gradient-descent step: rate and optional per-box gradient clip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSize {
    pub lr: f64,
    pub max_grad_norm: f64,
}

impl StepSize {
    /// Unclipped step.
    pub fn plain(lr: f64) -> Self {
        Self { lr, max_grad_norm: 0.0 }
    }
}

/// One learnable box. `logits` has one slot per class plus background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorBox {
    pub bbox: Box3D,
    pub logits: Vec<f64>,
    /// Index of the simulated object this box started from, if any.
    pub origin: Option<usize>,
}

impl DetectorBox {
    /// Logits whose softmax gives `score` to `class` and splits the rest
    /// evenly over the other slots.
    pub fn init_logits(class: usize, score: f64, n_classes: usize) -> Vec<f64> {
        let mut logits = vec![0.0; n_classes + 1];
        logits[class] = (score * n_classes as f64 / (1.0 - score)).ln();
        logits
    }

    /// Detection output: most likely foreground class and its probability.
    pub fn output(&self) -> Box3D {
        let probs = crate::losses::softmax(&self.logits);
        let fg = &probs[..probs.len() - 1];
        let (class_id, score) = fg
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, p)| if *p > acc.1 { (i, *p) } else { acc });
        Box3D {
            class_id,
            score,
            ..self.bbox
        }
    }

    fn apply(&mut self, grad: &[f64; 7], dlogits: &[f64], step: StepSize) {
        let (lr, max_norm) = (step.lr, step.max_grad_norm);
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let scale = if max_norm > 0.0 && norm > max_norm { max_norm / norm } else { 1.0 };
        let mut p = self.bbox.params();
        for (v, g) in p.iter_mut().zip(grad) {
            *v -= lr * scale * g;
        }
        for d in &mut p[3..6] {
            *d = d.max(MIN_DIM);
        }
        p[6] = normalize_angle(p[6]);
        self.bbox = self.bbox.with_params(&p);
        for (z, g) in self.logits.iter_mut().zip(dlogits) {
            *z -= lr * g;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub id: String,
    pub boxes: Vec<DetectorBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDetector {
    pub version: u32,
    pub scenes: Vec<SceneParams>,
    /// Updates applied so far.
    pub steps: usize,
}

impl ToyDetector {
    /// Starts every scene from perturbed simulation truth.
    pub fn from_dataset(dataset: &Dataset, noise: &NoiseConfig, seed: u64) -> Result<Self, TrainError> {
        let n_classes = dataset.class_names().len();
        let scenes = dataset
            .scenes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let noisy = perturb_predictions(s.simulation_gt(), noise, splitmix64(seed, i as u64))?;
                Ok(SceneParams {
                    id: s.id.clone(),
                    boxes: noisy
                        .into_iter()
                        .map(|n| DetectorBox {
                            logits: DetectorBox::init_logits(n.bbox.class_id, n.bbox.score, n_classes),
                            bbox: n.bbox,
                            origin: n.origin,
                        })
                        .collect(),
                })
            })
            .collect::<Result<Vec<_>, TrainError>>()?;
        Ok(Self {
            version: PARAMS_VERSION,
            scenes,
            steps: 0,
        })
    }

    /// Confident, exact copies of the simulation truth.
    pub fn perfect(dataset: &Dataset) -> Self {
        let n_classes = dataset.class_names().len();
        let scenes = dataset
            .scenes
            .iter()
            .map(|s| SceneParams {
                id: s.id.clone(),
                boxes: s
                    .simulation_gt()
                    .iter()
                    .enumerate()
                    .map(|(k, b)| DetectorBox {
                        bbox: *b,
                        logits: confident_logits(b.class_id, n_classes),
                        origin: Some(k),
                    })
                    .collect(),
            })
            .collect();
        Self {
            version: PARAMS_VERSION,
            scenes,
            steps: 0,
        }
    }

    pub fn check_dataset(&self, dataset: &Dataset) -> Result<(), TrainError> {
        if self.version != PARAMS_VERSION {
            return Err(TrainError::ParamsMismatch(format!("version {}", self.version)));
        }
        if self.scenes.len() != dataset.scenes.len() {
            return Err(TrainError::ParamsMismatch(format!(
                "{} scenes vs {}",
                self.scenes.len(),
                dataset.scenes.len()
            )));
        }
        let n = dataset.class_names().len() + 1;
        for (p, s) in self.scenes.iter().zip(&dataset.scenes) {
            if p.id != s.id {
                return Err(TrainError::ParamsMismatch(format!("scene {} vs {}", p.id, s.id)));
            }
            if let Some(b) = p.boxes.iter().find(|b| b.logits.len() != n) {
                return Err(TrainError::ParamsMismatch(format!("{} logits, expected {n}", b.logits.len())));
            }
            if let Some(b) = p.boxes.iter().find(|b| b.bbox.validate().is_err()) {
                return Err(TrainError::ParamsMismatch(format!("invalid box {:?}", b.bbox)));
            }
        }
        Ok(())
    }
}

/// Logits large enough that the target class probability rounds to 1.
pub fn confident_logits(class: usize, n_classes: usize) -> Vec<f64> {
    let mut logits = vec![0.0; n_classes + 1];
    logits[class] = 60.0;
    logits
}

/// Per-camera 2D supervision with each annotation's depth read off the
/// camera's depth map. Annotations with no depth under them are skipped.
pub fn prepare_2d_targets(scene: &Scene) -> Vec<Vec<Annotation2D>> {
    scene
        .ann2d
        .iter()
        .zip(&scene.depth_maps)
        .map(|(anns, map)| {
            anns.iter()
                .filter_map(|a| match box_depth_from_map(map, &a.bbox) {
                    Ok(depth) => Some(Annotation2D {
                        bbox: Box2D { depth, ..a.bbox },
                        class_id: a.class_id,
                    }),
                    Err(e) => {
                        log::warn!("{}: annotation of box {} skipped: {e}", scene.id, a.source);
                        None
                    }
                })
                .collect()
        })
        .collect()
}

fn predictions(boxes: &[DetectorBox]) -> Vec<Prediction3D> {
    boxes
        .iter()
        .map(|b| Prediction3D {
            bbox: b.bbox,
            logits: b.logits.clone(),
        })
        .collect()
}

/// 2D loss and gradient of one scene without updating anything. `None` when
/// no prediction is visible in any camera.
pub fn scene_loss_2d(
    boxes: &[DetectorBox],
    scene: &Scene,
    targets: &[Vec<Annotation2D>],
    cfg: &PipelineConfig,
) -> Result<Option<crate::losses::SceneGradient>, TrainError> {
    let preds = predictions(boxes);
    let views: Vec<CameraView> = scene
        .cameras
        .iter()
        .zip(targets)
        .map(|(camera, anns)| CameraView {
            camera,
            annotations: anns.clone(),
        })
        .collect();
    let grad = total_loss_grad_3d(&preds, &views, cfg)?;
    Ok(if grad.visible_in.iter().all(|v| *v == 0) { None } else { Some(grad) })
}

/// One gradient step on the projected 2D loss.
pub fn step_2d(
    boxes: &mut [DetectorBox],
    scene: &Scene,
    targets: &[Vec<Annotation2D>],
    cfg: &PipelineConfig,
    step: StepSize,
) -> Result<LossBreakdown, TrainError> {
    let Some(grad) = scene_loss_2d(boxes, scene, targets, cfg)? else {
        log::warn!("{}: no visible predictions, step skipped", scene.id);
        return Ok(LossBreakdown::default());
    };
    for (k, b) in boxes.iter_mut().enumerate() {
        b.apply(&grad.params[k], &grad.logits[k], step);
    }
    Ok(grad.breakdown)
}

/// L1 residual terms `(center/10, dims/10, yaw/π)` and their signs.
fn residual_3d(pred: &Box3D, gt: &Box3D) -> (f64, [f64; 7]) {
    let p = pred.params();
    let g = gt.params();
    let mut loss = 0.0;
    let mut grad = [0.0; 7];
    for k in 0..7 {
        let (d, scale) = if k == 6 {
            (normalize_angle(p[6] - g[6]), PI)
        } else {
            (p[k] - g[k], LENGTH_SCALE)
        };
        loss += d.abs() / scale;
        grad[k] = if d > 0.0 {
            1.0 / scale
        } else if d < 0.0 {
            -1.0 / scale
        } else {
            0.0
        };
    }
    (loss, grad)
}

/// 3D loss and gradient: Hungarian on center distance, L1 on normalized
/// box parameters for matched pairs, focal for every prediction.
pub fn loss_grad_3d(
    boxes: &[DetectorBox],
    gt: &[Box3D],
    weights: &LossWeights,
    focal: &FocalParams,
) -> Result<(LossBreakdown, Vec<[f64; 7]>, Vec<Vec<f64>>), TrainError> {
    let n = boxes.len();
    let mut dparams = vec![[0.0; 7]; n];
    let mut dlogits: Vec<Vec<f64>> = boxes.iter().map(|b| vec![0.0; b.logits.len()]).collect();
    if n == 0 {
        return Ok((LossBreakdown::default(), dparams, dlogits));
    }
    let data = boxes
        .iter()
        .flat_map(|b| gt.iter().map(move |g| (b.bbox.center - g.center).norm()))
        .collect();
    let costs = CostMatrix::new(n, gt.len(), data)?;
    let assignment = hungarian(&costs);
    let n_cls = n as f64;
    let n_reg = assignment.pairs.len() as f64;
    let (mut sum_cls, mut sum_reg) = (0.0, 0.0);
    let mut contributions = Vec::with_capacity(n);
    for (i, b) in boxes.iter().enumerate() {
        let background = b.logits.len() - 1;
        let gt_idx = assignment.gt_for(i);
        let target = gt_idx.map_or(background, |j| gt[j].class_id);
        let (cls, dl) = focal_from_logits(&b.logits, target, focal);
        sum_cls += cls;
        for (acc, d) in dlogits[i].iter_mut().zip(&dl) {
            *acc += weights.cls * d / n_cls;
        }
        let mut reg = 0.0;
        if let Some(j) = gt_idx {
            let (r, g) = residual_3d(&b.bbox, &gt[j]);
            reg = r;
            sum_reg += r;
            for k in 0..7 {
                dparams[i][k] += weights.reg * g[k] / n_reg;
            }
        }
        contributions.push(PairContribution {
            pred: i,
            gt: gt_idx,
            cls,
            reg,
            iou: 0.0,
        });
    }
    let l_cls = sum_cls / n_cls;
    let l_reg = if n_reg > 0.0 { sum_reg / n_reg } else { 0.0 };
    let breakdown = LossBreakdown {
        l_cls,
        l_reg,
        l_iou: 0.0,
        total: weights.cls * l_cls + weights.reg * l_reg,
        contributions,
    };
    Ok((breakdown, dparams, dlogits))
}

/// One gradient step on the direct 3D loss.
pub fn step_3d(
    boxes: &mut [DetectorBox],
    gt: &[Box3D],
    weights: &LossWeights,
    focal: &FocalParams,
    step: StepSize,
) -> Result<LossBreakdown, TrainError> {
    let (breakdown, dparams, dlogits) = loss_grad_3d(boxes, gt, weights, focal)?;
    for (k, b) in boxes.iter_mut().enumerate() {
        b.apply(&dparams[k], &dlogits[k], step);
    }
    Ok(breakdown)
}

/// Scenes scored during training: the fully labelled ones, or every scene
/// when none is.
pub fn eval_scenes(dataset: &Dataset) -> Vec<usize> {
    let full: Vec<usize> = (0..dataset.scenes.len())
        .filter(|&i| dataset.scenes[i].label_mode == LabelMode::Full3d)
        .collect();
    if full.is_empty() {
        (0..dataset.scenes.len()).collect()
    } else {
        full
    }
}

/// Metrics of the detector's outputs against simulation truth on `scenes`.
pub fn evaluate(detector: &ToyDetector, dataset: &Dataset, scenes: &[usize], config: &MetricConfig) -> MetricReport {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for &i in scenes {
        preds.extend(detector.scenes[i].boxes.iter().map(|b| EvalBox {
            scene: i,
            bbox: b.output(),
        }));
        gts.extend(dataset.scenes[i].simulation_gt().iter().map(|b| EvalBox { scene: i, bbox: *b }));
    }
    score_boxes(&preds, &gts, dataset.class_names(), config)
}

/// Median 3D distance between each box and the object it started from.
pub fn median_center_error(detector: &ToyDetector, dataset: &Dataset, scenes: &[usize]) -> f64 {
    let mut errs: Vec<f64> = scenes
        .iter()
        .flat_map(|&i| {
            let gt = dataset.scenes[i].simulation_gt();
            detector.scenes[i]
                .boxes
                .iter()
                .filter_map(move |b| b.origin.map(|o| (b.bbox.center - gt[o].center).norm()))
        })
        .collect();
    if errs.is_empty() {
        return 0.0;
    }
    errs.sort_by(f64::total_cmp);
    let n = errs.len();
    if n % 2 == 1 {
        errs[n / 2]
    } else {
        0.5 * (errs[n / 2 - 1] + errs[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub lr: f64,
    /// Mean 2D loss over all scenes with visible predictions.
    pub loss: LossBreakdown,
    pub report: MetricReport,
    pub median_center_error: f64,
    pub steps_3d: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub const CSV_HEADER: &'static str = "epoch,lr,l_cls,l_reg,l_iou,total,mAP,NDS,mATE,mASE,mAOE,mAVE,mAAE";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let t = &r.report.tp;
            let _ = writeln!(
                s,
                "{},{:.6e},{:.8},{:.8},{:.8},{:.8},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.epoch,
                r.lr,
                r.loss.l_cls,
                r.loss.l_reg,
                r.loss.l_iou,
                r.loss.total,
                r.report.map,
                r.report.nds,
                t.ate,
                t.ase,
                t.aoe,
                t.ave,
                t.aae
            );
        }
        s
    }

    pub fn first(&self) -> &HistoryRow {
        &self.rows[0]
    }

    pub fn last(&self) -> &HistoryRow {
        self.rows.last().expect("history has the initial row")
    }
}

/// Mean projected 2D loss over all scenes.
pub fn mean_loss_2d(
    detector: &ToyDetector,
    dataset: &Dataset,
    targets: &[Vec<Vec<Annotation2D>>],
    cfg: &PipelineConfig,
) -> Result<LossBreakdown, TrainError> {
    let mut acc = LossBreakdown::default();
    let mut count = 0usize;
    for (i, scene) in dataset.scenes.iter().enumerate() {
        if let Some(g) = scene_loss_2d(&detector.scenes[i].boxes, scene, &targets[i], cfg)? {
            acc.accumulate(&g.breakdown);
            count += 1;
        }
    }
    if count > 0 {
        let c = count as f64;
        acc.l_cls /= c;
        acc.l_reg /= c;
        acc.l_iou /= c;
        acc.total /= c;
    }
    Ok(acc)
}

/// Runs `config.epochs` passes over the dataset in a seeded order. Each visit
/// to a fully labelled scene uses 3D labels with probability `mix_ratio`;
/// every other visit uses the projected 2D loss. Row `k` of the history is
/// the state after `k` epochs.
pub fn finetune(
    detector: &mut ToyDetector,
    dataset: &Dataset,
    config: &TrainConfig,
    metrics: &MetricConfig,
) -> Result<History, TrainError> {
    finetune_with(detector, dataset, config, metrics, |_, _| {})
}

/// [`finetune`] with a callback invoked on every history row, including the
/// initial one, together with the detector state it describes.
pub fn finetune_with(
    detector: &mut ToyDetector,
    dataset: &Dataset,
    config: &TrainConfig,
    metrics: &MetricConfig,
    mut on_row: impl FnMut(&ToyDetector, &HistoryRow),
) -> Result<History, TrainError> {
    config.validate()?;
    metrics.validate().map_err(TrainError::InvalidConfig)?;
    detector.check_dataset(dataset)?;
    let pipeline = config.pipeline();
    let targets: Vec<_> = dataset.scenes.iter().map(prepare_2d_targets).collect();
    let eval = eval_scenes(dataset);
    let total_steps = config.epochs * dataset.scenes.len();

    let row = |detector: &ToyDetector, epoch: usize, lr: f64, steps_3d: usize| -> Result<HistoryRow, TrainError> {
        Ok(HistoryRow {
            epoch,
            lr,
            loss: mean_loss_2d(detector, dataset, &targets, &pipeline)?,
            report: evaluate(detector, dataset, &eval, metrics),
            median_center_error: median_center_error(detector, dataset, &eval),
            steps_3d,
        })
    };

    let first = row(detector, 0, config.lr_at(0, total_steps), 0)?;
    on_row(detector, &first);
    let mut rows = vec![first];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.scenes.len()).collect();
    let mut t = 0usize;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut steps_3d = 0;
        let mut last_lr = config.lr_at(t, total_steps);
        for &i in &order {
            let scene = &dataset.scenes[i];
            let lr = config.lr_at(t, total_steps);
            last_lr = lr;
            let step = StepSize {
                lr,
                max_grad_norm: config.max_grad_norm,
            };
            let draw: f64 = rng.gen();
            let boxes = &mut detector.scenes[i].boxes;
            if scene.label_mode == LabelMode::Full3d && draw < config.mix_ratio {
                step_3d(boxes, scene.gt_boxes()?, &config.loss_weights, &config.focal, step)?;
                steps_3d += 1;
            } else {
                step_2d(boxes, scene, &targets[i], &pipeline, step)?;
            }
            t += 1;
            detector.steps += 1;
        }
        let r = row(detector, epoch, last_lr, steps_3d)?;
        log::info!(
            "epoch {epoch}: loss {:.5} mAP {:.4} NDS {:.4} median center error {:.3} m",
            r.loss.total,
            r.report.map,
            r.report.nds,
            r.median_center_error
        );
        on_row(detector, &r);
        rows.push(r);
    }
    Ok(History { rows })
}
