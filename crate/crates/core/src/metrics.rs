//! Detection scoring: per-class AP over BEV center-distance thresholds,
//! true-positive errors, mAP and NDS.

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::geometry::{normalize_angle, Box3D};

/// Number of recall samples on the interpolated precision curve.
pub const RECALL_SAMPLES: usize = 101;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub thresholds: Vec<f64>,
    pub tp_threshold: f64,
    pub min_recall: f64,
    pub min_precision: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![0.5, 1.0, 2.0, 4.0],
            tp_threshold: 2.0,
            min_recall: 0.1,
            min_precision: 0.1,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.thresholds.is_empty() || self.thresholds.windows(2).any(|w| w[0] > w[1]) {
            return Err(format!("thresholds must be nonempty and ascending: {:?}", self.thresholds));
        }
        if self.thresholds.iter().any(|t| !(*t > 0.0)) || !(self.tp_threshold > 0.0) {
            return Err("thresholds must be positive".into());
        }
        if !(0.0..1.0).contains(&self.min_recall) || !(0.0..1.0).contains(&self.min_precision) {
            return Err("min_recall and min_precision must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// A box tagged with the scene it belongs to; matching never crosses scenes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalBox {
    pub scene: usize,
    pub bbox: Box3D,
}

fn bev_distance(a: &Box3D, b: &Box3D) -> f64 {
    let dx = a.center.x - b.center.x;
    let dy = a.center.y - b.center.y;
    (dx * dx + dy * dy).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CenterMatch {
    /// TP flag per prediction, in descending-score order.
    pub labels: Vec<bool>,
    /// Prediction index for each entry of `labels`.
    pub order: Vec<usize>,
    /// `(pred, gt)` of every true positive.
    pub pairs: Vec<(usize, usize)>,
}

/// Greedy matching: predictions by descending score (stable on ties), each
/// taking the nearest unmatched ground truth of its scene within `threshold`.
pub fn match_by_center_distance(preds: &[EvalBox], gts: &[EvalBox], threshold: f64) -> CenterMatch {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].bbox.score.total_cmp(&preds[a].bbox.score));
    let mut taken = vec![false; gts.len()];
    let mut labels = Vec::with_capacity(preds.len());
    let mut pairs = Vec::new();
    for &i in &order {
        let p = &preds[i];
        let best = gts
            .iter()
            .enumerate()
            .filter(|(j, g)| !taken[*j] && g.scene == p.scene)
            .map(|(j, g)| (j, bev_distance(&p.bbox, &g.bbox)))
            .filter(|(_, d)| *d < threshold)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match best {
            Some((j, _)) => {
                taken[j] = true;
                labels.push(true);
                pairs.push((i, j));
            }
            None => labels.push(false),
        }
    }
    CenterMatch {
        labels,
        order,
        pairs,
    }
}

/// Precision sampled at `RECALL_SAMPLES` evenly spaced recalls, linearly
/// interpolated, with zero beyond the highest achieved recall.
pub fn interpolated_precision(labels: &[bool], n_gt: usize) -> Vec<f64> {
    let mut recall = Vec::with_capacity(labels.len());
    let mut precision = Vec::with_capacity(labels.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &l in labels {
        if l {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    (0..RECALL_SAMPLES)
        .map(|k| {
            let r = k as f64 / (RECALL_SAMPLES - 1) as f64;
            interp(r, &recall, &precision)
        })
        .collect()
}

/// Piecewise-linear lookup with `xp` nondecreasing: left of the data takes
/// the first value, right of it is 0, and repeated abscissae resolve to the
/// last sample at that abscissa.
fn interp(x: f64, xp: &[f64], fp: &[f64]) -> f64 {
    let n = xp.len();
    if n == 0 || x > xp[n - 1] {
        return 0.0;
    }
    if x < xp[0] {
        return fp[0];
    }
    let j = xp.partition_point(|v| *v <= x) - 1;
    if j == n - 1 || xp[j] == x {
        return fp[j];
    }
    fp[j] + (fp[j + 1] - fp[j]) * (x - xp[j]) / (xp[j + 1] - xp[j])
}

/// Area under the precision curve above `min_recall`, with precision below
/// `min_precision` clipped away, normalized to `[0, 1]`.
pub fn average_precision(labels: &[bool], n_gt: usize, config: &MetricConfig) -> f64 {
    if n_gt == 0 || labels.is_empty() {
        return 0.0;
    }
    let prec = interpolated_precision(labels, n_gt);
    let first = (100.0 * config.min_recall).round() as usize + 1;
    let tail = &prec[first.min(prec.len())..];
    if tail.is_empty() {
        return 0.0;
    }
    let mean = tail
        .iter()
        .map(|p| (p - config.min_precision).max(0.0))
        .sum::<f64>()
        / tail.len() as f64;
    (mean / (1.0 - config.min_precision)).clamp(0.0, 1.0)
}

pub fn mean_ap(cells: &[f64]) -> f64 {
    if cells.is_empty() {
        return 0.0;
    }
    cells.iter().sum::<f64>() / cells.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TPErrors {
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
    pub ave: f64,
    pub aae: f64,
}

impl TPErrors {
    pub const WORST: TPErrors = TPErrors {
        ate: 1.0,
        ase: 1.0,
        aoe: 1.0,
        ave: 1.0,
        aae: 1.0,
    };

    pub fn as_array(&self) -> [f64; 5] {
        [self.ate, self.ase, self.aoe, self.ave, self.aae]
    }

    fn from_array(a: [f64; 5]) -> Self {
        Self {
            ate: a[0],
            ase: a[1],
            aoe: a[2],
            ave: a[3],
            aae: a[4],
        }
    }
}

/// `1 − IoU` of the two boxes after aligning centers and headings.
pub fn scale_error(pred: &Box3D, gt: &Box3D) -> f64 {
    let inter: f64 = (0..3).map(|k| pred.dims[k].min(gt.dims[k])).product();
    let vp: f64 = pred.dims.iter().product();
    let vg: f64 = gt.dims.iter().product();
    1.0 - inter / (vp + vg - inter)
}

/// Smallest absolute heading difference, in `[0, π]`.
pub fn orientation_error(pred: &Box3D, gt: &Box3D) -> f64 {
    normalize_angle(pred.yaw - gt.yaw).abs().min(PI)
}

/// Mean errors over the given true-positive pairs; `None` when empty.
pub fn tp_errors(pairs: &[(Box3D, Box3D)]) -> Option<TPErrors> {
    if pairs.is_empty() {
        return None;
    }
    let mut acc = [0.0; 5];
    for (p, g) in pairs {
        let dv = ((p.velocity[0] - g.velocity[0]).powi(2) + (p.velocity[1] - g.velocity[1]).powi(2)).sqrt();
        let e = [
            bev_distance(p, g),
            scale_error(p, g),
            orientation_error(p, g),
            dv,
            if p.attribute_id == g.attribute_id { 0.0 } else { 1.0 },
        ];
        for k in 0..5 {
            acc[k] += e[k];
        }
    }
    let n = pairs.len() as f64;
    Some(TPErrors::from_array(acc.map(|v| v / n)))
}

/// `(5·mAP + Σ (1 − min(1, mTP))) / 10`.
pub fn nds(map: f64, tp: &TPErrors) -> f64 {
    let penalty: f64 = tp.as_array().iter().map(|e| 1.0 - e.min(1.0)).sum();
    (5.0 * map + penalty) / 10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub name: String,
    pub n_gt: usize,
    pub n_pred: usize,
    /// One AP per distance threshold.
    pub ap: Vec<f64>,
    pub tp: TPErrors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub thresholds: Vec<f64>,
    /// Classes with neither ground truth nor predictions are omitted.
    pub classes: Vec<ClassReport>,
    pub tp: TPErrors,
    pub map: f64,
    pub nds: f64,
}

/// Scores `preds` against `gts` over `class_names`. Classes with no ground
/// truth and no predictions do not count; a class without any true positive
/// at `tp_threshold` takes the worst TP errors.
pub fn evaluate(preds: &[EvalBox], gts: &[EvalBox], class_names: &[String], config: &MetricConfig) -> MetricReport {
    let mut classes = Vec::new();
    for (c, name) in class_names.iter().enumerate() {
        let cp: Vec<EvalBox> = preds.iter().filter(|b| b.bbox.class_id == c).copied().collect();
        let cg: Vec<EvalBox> = gts.iter().filter(|b| b.bbox.class_id == c).copied().collect();
        if cp.is_empty() && cg.is_empty() {
            continue;
        }
        let ap = config
            .thresholds
            .iter()
            .map(|&t| {
                let m = match_by_center_distance(&cp, &cg, t);
                average_precision(&m.labels, cg.len(), config)
            })
            .collect();
        let m = match_by_center_distance(&cp, &cg, config.tp_threshold);
        let pairs: Vec<(Box3D, Box3D)> = m.pairs.iter().map(|&(i, j)| (cp[i].bbox, cg[j].bbox)).collect();
        classes.push(ClassReport {
            name: name.clone(),
            n_gt: cg.len(),
            n_pred: cp.len(),
            ap,
            tp: tp_errors(&pairs).unwrap_or(TPErrors::WORST),
        });
    }
    let cells: Vec<f64> = classes.iter().flat_map(|c| c.ap.iter().copied()).collect();
    let map = mean_ap(&cells);
    let tp = if classes.is_empty() {
        TPErrors::WORST
    } else {
        let mut acc = [0.0; 5];
        for c in &classes {
            for (a, e) in acc.iter_mut().zip(c.tp.as_array()) {
                *a += e;
            }
        }
        TPErrors::from_array(acc.map(|v| v / classes.len() as f64))
    };
    MetricReport {
        thresholds: config.thresholds.clone(),
        nds: nds(map, &tp),
        classes,
        tp,
        map,
    }
}

impl MetricReport {
    /// CSV with one row per class plus a trailing `ALL` row. Columns:
    /// `class,n_gt,n_pred,ap@<t>...,ate,ase,aoe,ave,aae,map,nds`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,n_gt,n_pred");
        for t in &self.thresholds {
            let _ = write!(s, ",ap@{t}");
        }
        s.push_str(",ate,ase,aoe,ave,aae,map,nds\n");
        let row = |s: &mut String, name: &str, ngt: String, npred: String, ap: Vec<String>, tp: &TPErrors, tail: (String, String)| {
            let _ = write!(s, "{name},{ngt},{npred}");
            for a in ap {
                let _ = write!(s, ",{a}");
            }
            for e in tp.as_array() {
                let _ = write!(s, ",{e:.6}");
            }
            let _ = writeln!(s, ",{},{}", tail.0, tail.1);
        };
        for c in &self.classes {
            row(
                &mut s,
                &c.name,
                c.n_gt.to_string(),
                c.n_pred.to_string(),
                c.ap.iter().map(|a| format!("{a:.6}")).collect(),
                &c.tp,
                (String::new(), String::new()),
            );
        }
        let mean_per_threshold: Vec<String> = (0..self.thresholds.len())
            .map(|k| {
                let v: Vec<f64> = self.classes.iter().map(|c| c.ap[k]).collect();
                format!("{:.6}", mean_ap(&v))
            })
            .collect();
        row(
            &mut s,
            "ALL",
            self.classes.iter().map(|c| c.n_gt).sum::<usize>().to_string(),
            self.classes.iter().map(|c| c.n_pred).sum::<usize>().to_string(),
            mean_per_threshold,
            &self.tp,
            (format!("{:.6}", self.map), format!("{:.6}", self.nds)),
        );
        s
    }

    /// Human-readable summary.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mAP:  {:.4}", self.map);
        let _ = writeln!(s, "NDS:  {:.4}", self.nds);
        let _ = writeln!(s, "mATE: {:.4}", self.tp.ate);
        let _ = writeln!(s, "mASE: {:.4}", self.tp.ase);
        let _ = writeln!(s, "mAOE: {:.4}", self.tp.aoe);
        let _ = writeln!(s, "mAVE: {:.4}", self.tp.ave);
        let _ = writeln!(s, "mAAE: {:.4}", self.tp.aae);
        let _ = write!(s, "\n{:<22}{:>6}{:>6}", "class", "gt", "pred");
        for t in &self.thresholds {
            let _ = write!(s, "{:>9}", format!("AP@{t}"));
        }
        s.push('\n');
        for c in &self.classes {
            let _ = write!(s, "{:<22}{:>6}{:>6}", c.name, c.n_gt, c.n_pred);
            for a in &c.ap {
                let _ = write!(s, "{a:>9.4}");
            }
            s.push('\n');
        }
        s
    }
}
