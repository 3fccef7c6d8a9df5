//! Combined classification / regression / GIoU loss over matched 2D boxes,
//! with analytic gradients to the 2D boxes and, through the projection
//! Jacobian, to the 3D box parameters.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{min_corner_depth, project_box_jacobian, Box2D, Box3D, Camera, GeometryError, EPS_Z};
use crate::matching::{
    build_cost_matrix, hungarian, Annotation2D, Assignment, CostMatrix, CostWeights,
    MatchingError, Prediction2D,
};

/// Probabilities are clamped to `[EPS_P, 1]` before the log.
pub const EPS_P: f64 = 1e-7;

/// Default depth normalizer (m).
pub const DEFAULT_D_MAX: f64 = 61.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("no matched pairs and no unmatched predictions")]
    EmptyMatch,
    #[error("class {class} out of range for {len} logits")]
    ClassOutOfRange { class: usize, len: usize },
    #[error("assignment refers to prediction {0} or ground truth outside the inputs")]
    BadAssignment(usize),
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Matching(#[from] MatchingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub cls: f64,
    pub reg: f64,
    pub iou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            reg: 0.75,
            iou: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

/// Normalizers for the L1 terms: image height for `(x, y, w, h)`, `d_max`
/// for depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionNorm {
    pub image_height: f64,
    pub d_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub focal: FocalParams,
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let w = [
            self.weights.cls,
            self.weights.reg,
            self.weights.iou,
        ];
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || w.iter().all(|v| *v == 0.0) {
            return Err(LossError::InvalidConfig(format!("loss weights {w:?}")));
        }
        let f = &self.focal;
        if !(f.alpha > 0.0 && f.alpha <= 1.0) || !(f.gamma >= 0.0) {
            return Err(LossError::InvalidConfig(format!(
                "focal alpha={} gamma={}",
                f.alpha, f.gamma
            )));
        }
        Ok(())
    }
}

/// Numerically stable normalized exponential.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `−α (1 − p)^γ ln p`, with `p` clamped to `[EPS_P, 1]`.
pub fn focal_loss(p: f64, params: &FocalParams) -> f64 {
    let p = p.clamp(EPS_P, 1.0);
    -params.alpha * (1.0 - p).powf(params.gamma) * p.ln()
}

/// `d focal / d p`; zero where the clamp is active.
pub fn focal_loss_dp(p: f64, params: &FocalParams) -> f64 {
    if !(p > EPS_P) || p >= 1.0 {
        return 0.0;
    }
    let q = 1.0 - p;
    let g = params.gamma;
    let modulation = if g == 0.0 { 0.0 } else { g * q.powf(g - 1.0) * p.ln() };
    params.alpha * (modulation - q.powf(g) / p)
}

/// Focal loss of the softmax probability at `target`, and its gradient
/// with respect to the logits.
pub fn focal_from_logits(logits: &[f64], target: usize, params: &FocalParams) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let pk = p[target];
    let dl_dp = focal_loss_dp(pk, params);
    let grad = p
        .iter()
        .enumerate()
        .map(|(j, pj)| {
            let delta = if j == target { 1.0 } else { 0.0 };
            dl_dp * pk * (delta - pj)
        })
        .collect();
    (focal_loss(pk, params), grad)
}

/// `Σ |b − b̂|` over `(x, y, w, h)` divided by image height, plus
/// `|d − d̂| / d_max`.
pub fn l1_regression_loss(pred: &Box2D, gt: &Box2D, norm: &RegressionNorm) -> f64 {
    let p = pred.to_array();
    let g = gt.to_array();
    let planar: f64 = (0..4).map(|k| (p[k] - g[k]).abs()).sum();
    planar / norm.image_height + (p[4] - g[4]).abs() / norm.d_max
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of [`l1_regression_loss`] in `pred`; zero at each kink.
pub fn l1_regression_grad(pred: &Box2D, gt: &Box2D, norm: &RegressionNorm) -> [f64; 5] {
    let p = pred.to_array();
    let g = gt.to_array();
    let mut out = [0.0; 5];
    for k in 0..4 {
        out[k] = sign0(p[k] - g[k]) / norm.image_height;
    }
    out[4] = sign0(p[4] - g[4]) / norm.d_max;
    out
}

pub fn iou(a: &Box2D, b: &Box2D) -> f64 {
    let iw = (a.x_max().min(b.x_max()) - a.x_min().max(b.x_min())).max(0.0);
    let ih = (a.y_max().min(b.y_max()) - a.y_min().max(b.y_min())).max(0.0);
    let inter = iw * ih;
    inter / (a.w * a.h + b.w * b.h - inter)
}

/// Generalized IoU: `|I|/|U| − (|E| − |U|)/|E|` with `E` the enclosing box.
pub fn giou(a: &Box2D, b: &Box2D) -> f64 {
    let iw = (a.x_max().min(b.x_max()) - a.x_min().max(b.x_min())).max(0.0);
    let ih = (a.y_max().min(b.y_max()) - a.y_min().max(b.y_min())).max(0.0);
    let inter = iw * ih;
    let union = corner_area(a) + corner_area(b) - inter;
    let ew = a.x_max().max(b.x_max()) - a.x_min().min(b.x_min());
    let eh = a.y_max().max(b.y_max()) - a.y_min().min(b.y_min());
    let hull = ew * eh;
    inter / union - (hull - union) / hull
}

// area from the corner extents, so it matches the overlap bit for bit
fn corner_area(b: &Box2D) -> f64 {
    (b.x_max() - b.x_min()) * (b.y_max() - b.y_min())
}

pub fn giou_loss(a: &Box2D, b: &Box2D) -> f64 {
    1.0 - giou(a, b)
}

/// One interval axis of the GIoU derivative: returns `(len_i, dlen_i/d(a0,a1),
/// len_e, dlen_e/d(a0,a1))`. Ties hand control to `a`.
fn axis_terms(a0: f64, a1: f64, b0: f64, b1: f64) -> (f64, [f64; 2], f64, [f64; 2]) {
    let i0 = a0.max(b0);
    let i1 = a1.min(b1);
    let di = [if a0 >= b0 { -1.0 } else { 0.0 }, if a1 <= b1 { 1.0 } else { 0.0 }];
    let e0 = a0.min(b0);
    let e1 = a1.max(b1);
    let de = [if a0 <= b0 { -1.0 } else { 0.0 }, if a1 >= b1 { 1.0 } else { 0.0 }];
    (i1 - i0, di, e1 - e0, de)
}

/// Gradient of [`giou`] with respect to `a`'s `(x, y, w, h)`.
pub fn giou_grad(a: &Box2D, b: &Box2D) -> [f64; 4] {
    let (iw, diw, ew, dew) = axis_terms(a.x_min(), a.x_max(), b.x_min(), b.x_max());
    let (ih, dih, eh, deh) = axis_terms(a.y_min(), a.y_max(), b.y_min(), b.y_max());
    let overlapping = iw > 0.0 && ih > 0.0;
    let inter = if overlapping { iw * ih } else { 0.0 };
    let union = corner_area(a) + corner_area(b) - inter;
    let hull = ew * eh;

    // derivatives in corner coordinates (x0, x1, y0, y1)
    let d_inter = if overlapping {
        [diw[0] * ih, diw[1] * ih, dih[0] * iw, dih[1] * iw]
    } else {
        [0.0; 4]
    };
    let (aw, ah) = (a.x_max() - a.x_min(), a.y_max() - a.y_min());
    let d_area = [-ah, ah, -aw, aw];
    let d_hull = [dew[0] * eh, dew[1] * eh, deh[0] * ew, deh[1] * ew];

    let mut dc = [0.0; 4];
    for k in 0..4 {
        let du = d_area[k] - d_inter[k];
        dc[k] = d_inter[k] / union - inter * du / (union * union) + du / hull
            - union / hull * d_hull[k] / hull;
    }
    [
        dc[0] + dc[1],
        dc[2] + dc[3],
        (dc[1] - dc[0]) / 2.0,
        (dc[3] - dc[2]) / 2.0,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairContribution {
    pub pred: usize,
    /// `None` for a prediction supervised as background.
    pub gt: Option<usize>,
    pub cls: f64,
    pub reg: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_iou: f64,
    pub total: f64,
    pub contributions: Vec<PairContribution>,
}

impl LossBreakdown {
    fn finish(l_cls: f64, l_reg: f64, l_iou: f64, w: &LossWeights, contributions: Vec<PairContribution>) -> Self {
        Self {
            l_cls,
            l_reg,
            l_iou,
            total: w.cls * l_cls + w.reg * l_reg + w.iou * l_iou,
            contributions,
        }
    }

    /// Component-wise sum, used to aggregate cameras.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.l_cls += other.l_cls;
        self.l_reg += other.l_reg;
        self.l_iou += other.l_iou;
        self.total += other.total;
    }
}

/// Per-prediction gradient: `(x, y, w, h, depth)` and class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct PredGrad2D {
    pub bbox: [f64; 5],
    pub logits: Vec<f64>,
}

fn check_inputs(assignment: &Assignment, preds: &[Prediction2D], gts: &[Annotation2D]) -> Result<(), LossError> {
    if assignment.pairs.is_empty() && assignment.unmatched_preds.is_empty() {
        return Err(LossError::EmptyMatch);
    }
    for &(i, j) in &assignment.pairs {
        if i >= preds.len() || j >= gts.len() {
            return Err(LossError::BadAssignment(i));
        }
    }
    if let Some(&i) = assignment.unmatched_preds.iter().find(|i| **i >= preds.len()) {
        return Err(LossError::BadAssignment(i));
    }
    for &(i, j) in &assignment.pairs {
        let len = preds[i].logits.len();
        if gts[j].class_id + 1 >= len {
            return Err(LossError::ClassOutOfRange {
                class: gts[j].class_id,
                len,
            });
        }
    }
    Ok(())
}

/// Loss and gradients for one image. Matched predictions get all three
/// terms; unmatched ones get focal loss toward the trailing background
/// slot. Each component is the mean over its contributing terms.
pub fn total_loss_grad_2d(
    assignment: &Assignment,
    preds: &[Prediction2D],
    gts: &[Annotation2D],
    cfg: &LossConfig,
    norm: &RegressionNorm,
) -> Result<(LossBreakdown, Vec<PredGrad2D>), LossError> {
    check_inputs(assignment, preds, gts)?;
    let w = &cfg.weights;
    let n_cls = (assignment.pairs.len() + assignment.unmatched_preds.len()) as f64;
    let n_reg = assignment.pairs.len() as f64;

    let mut grads: Vec<PredGrad2D> = preds
        .iter()
        .map(|p| PredGrad2D {
            bbox: [0.0; 5],
            logits: vec![0.0; p.logits.len()],
        })
        .collect();
    let mut contributions = Vec::with_capacity(preds.len());
    let (mut sum_cls, mut sum_reg, mut sum_iou) = (0.0, 0.0, 0.0);

    for &(i, j) in &assignment.pairs {
        let p = &preds[i];
        let g = &gts[j];
        let (cls, dlogits) = focal_from_logits(&p.logits, g.class_id, &cfg.focal);
        let reg = l1_regression_loss(&p.bbox, &g.bbox, norm);
        let iou_l = giou_loss(&p.bbox, &g.bbox);
        sum_cls += cls;
        sum_reg += reg;
        sum_iou += iou_l;

        let dreg = l1_regression_grad(&p.bbox, &g.bbox, norm);
        let dgiou = giou_grad(&p.bbox, &g.bbox);
        let gr = &mut grads[i];
        for k in 0..5 {
            gr.bbox[k] += w.reg * dreg[k] / n_reg;
        }
        for k in 0..4 {
            gr.bbox[k] -= w.iou * dgiou[k] / n_reg;
        }
        for (acc, d) in gr.logits.iter_mut().zip(&dlogits) {
            *acc += w.cls * d / n_cls;
        }
        contributions.push(PairContribution {
            pred: i,
            gt: Some(j),
            cls,
            reg,
            iou: iou_l,
        });
    }
    for &i in &assignment.unmatched_preds {
        let p = &preds[i];
        let background = p.logits.len() - 1;
        let (cls, dlogits) = focal_from_logits(&p.logits, background, &cfg.focal);
        sum_cls += cls;
        for (acc, d) in grads[i].logits.iter_mut().zip(&dlogits) {
            *acc += w.cls * d / n_cls;
        }
        contributions.push(PairContribution {
            pred: i,
            gt: None,
            cls,
            reg: 0.0,
            iou: 0.0,
        });
    }
    contributions.sort_by_key(|c| c.pred);

    let mean = |s: f64, n: f64| if n > 0.0 { s / n } else { 0.0 };
    let breakdown = LossBreakdown::finish(
        mean(sum_cls, n_cls),
        mean(sum_reg, n_reg),
        mean(sum_iou, n_reg),
        w,
        contributions,
    );
    Ok((breakdown, grads))
}

/// Loss only; see [`total_loss_grad_2d`].
pub fn total_loss(
    assignment: &Assignment,
    preds: &[Prediction2D],
    gts: &[Annotation2D],
    cfg: &LossConfig,
    norm: &RegressionNorm,
) -> Result<LossBreakdown, LossError> {
    total_loss_grad_2d(assignment, preds, gts, cfg, norm).map(|(b, _)| b)
}

/// A 3D prediction with raw class logits (last slot is background).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction3D {
    pub bbox: Box3D,
    pub logits: Vec<f64>,
}

/// One camera's supervision: its 2D annotations, each carrying the depth
/// used as the regression target.
#[derive(Debug, Clone)]
pub struct CameraView<'a> {
    pub camera: &'a Camera,
    pub annotations: Vec<Annotation2D>,
}

/// Matching and loss settings for the projected pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub cost: CostWeights,
    pub loss: LossConfig,
    pub d_max: f64,
    /// A prediction takes part in a camera's loss only if every corner is at
    /// least this deep in that camera, on top of the projection rule.
    pub near_plane: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            cost: CostWeights::default(),
            loss: LossConfig::default(),
            d_max: DEFAULT_D_MAX,
            near_plane: EPS_Z,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CameraOutcome {
    pub camera: String,
    /// Prediction indices visible in this camera, in row order of `costs`.
    pub visible: Vec<usize>,
    pub projections: Vec<Box2D>,
    pub costs: Option<CostMatrix>,
    /// Indices inside the assignment refer to rows of `visible`.
    pub assignment: Assignment,
    pub breakdown: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct SceneGradient {
    /// Sum over cameras.
    pub breakdown: LossBreakdown,
    pub cameras: Vec<CameraOutcome>,
    /// `∂L/∂(cx, cy, cz, l, w, h, yaw)` per prediction.
    pub params: Vec<[f64; 7]>,
    pub logits: Vec<Vec<f64>>,
    /// Number of cameras each prediction was visible in; zero means the
    /// prediction took no part in the loss.
    pub visible_in: Vec<usize>,
}

/// Projects every prediction into every camera, matches per camera, and sums
/// the chained gradients over all cameras where a box is visible.
pub fn total_loss_grad_3d(
    preds: &[Prediction3D],
    views: &[CameraView<'_>],
    cfg: &PipelineConfig,
) -> Result<SceneGradient, LossError> {
    cfg.loss.validate()?;
    let mut out = SceneGradient {
        breakdown: LossBreakdown::default(),
        cameras: Vec::with_capacity(views.len()),
        params: vec![[0.0; 7]; preds.len()],
        logits: preds.iter().map(|p| vec![0.0; p.logits.len()]).collect(),
        visible_in: vec![0; preds.len()],
    };
    for view in views {
        let cam = view.camera;
        let mut visible = Vec::new();
        let mut jacobians = Vec::new();
        let mut rows = Vec::new();
        for (i, p) in preds.iter().enumerate() {
            match project_box_jacobian(cam, &p.bbox) {
                Ok(_) if min_corner_depth(cam, &p.bbox) < cfg.near_plane => {}
                Ok((bb, j)) => {
                    visible.push(i);
                    jacobians.push(j);
                    rows.push(Prediction2D {
                        bbox: bb,
                        logits: p.logits.clone(),
                    });
                }
                Err(GeometryError::NotVisible) => {}
                Err(e) => unreachable!("projection error {e}"),
            }
        }
        if visible.is_empty() {
            continue;
        }
        let norm = RegressionNorm {
            image_height: cam.height as f64,
            d_max: cfg.d_max,
        };
        let (costs, assignment) = if view.annotations.is_empty() {
            let empty = CostMatrix::new(rows.len(), 0, Vec::new())?;
            let a = hungarian(&empty);
            (None, a)
        } else {
            let c = build_cost_matrix(&rows, &view.annotations, &cfg.cost, &norm)?;
            let a = hungarian(&c);
            (Some(c), a)
        };
        let (breakdown, grads) =
            total_loss_grad_2d(&assignment, &rows, &view.annotations, &cfg.loss, &norm)?;
        out.breakdown.accumulate(&breakdown);
        for (row, &i) in visible.iter().enumerate() {
            out.visible_in[i] += 1;
            let g = &grads[row];
            let j = &jacobians[row];
            for c in 0..7 {
                out.params[i][c] += (0..5).map(|r| j[r][c] * g.bbox[r]).sum::<f64>();
            }
            for (acc, d) in out.logits[i].iter_mut().zip(&g.logits) {
                *acc += d;
            }
        }
        out.cameras.push(CameraOutcome {
            camera: cam.id.clone(),
            visible,
            projections: rows.iter().map(|r| r.bbox).collect(),
            costs,
            assignment,
            breakdown,
        });
    }
    Ok(out)
}
