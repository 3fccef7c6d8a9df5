//! Matching cost between projected predictions and 2D annotations, and the
//! minimum-cost bipartite assignment over it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Box2D;
use crate::losses::{giou, softmax, RegressionNorm};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchingError {
    #[error("class {class} out of range for {len} scores")]
    ClassOutOfRange { class: usize, len: usize },
    #[error("probabilities sum to {0}, expected 1")]
    NotNormalized(f64),
    #[error("cost matrix needs at least one prediction and one ground truth")]
    Empty,
    #[error("non-finite cost at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("brute force limited to min(n, m) <= {max}, got {got}")]
    SizeLimit { max: usize, got: usize },
    #[error("invalid cost weights: {0}")]
    InvalidWeights(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostWeights {
    pub cls: f64,
    pub reg: f64,
    pub iou: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            reg: 0.75,
            iou: 0.25,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<(), MatchingError> {
        let w = [self.cls, self.reg, self.iou];
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || w.iter().all(|v| *v == 0.0) {
            return Err(MatchingError::InvalidWeights(format!("{w:?}")));
        }
        Ok(())
    }
}

/// Dense `n_pred × m_gt` matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, MatchingError> {
        assert_eq!(data.len(), rows * cols, "cost data length");
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            return Err(MatchingError::NonFinite(k / cols.max(1), k % cols.max(1)));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MatchingError> {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged cost rows");
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> CostMatrix {
        CostMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(pred, gt)` sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
    pub total_cost: f64,
}

impl Assignment {
    fn from_pairs(costs: &CostMatrix, mut pairs: Vec<(usize, usize)>) -> Self {
        pairs.sort_unstable();
        let mut pred_used = vec![false; costs.rows];
        let mut gt_used = vec![false; costs.cols];
        for &(i, j) in &pairs {
            pred_used[i] = true;
            gt_used[j] = true;
        }
        Self {
            total_cost: pair_cost(costs, &pairs),
            unmatched_preds: (0..costs.rows).filter(|i| !pred_used[*i]).collect(),
            unmatched_gts: (0..costs.cols).filter(|j| !gt_used[*j]).collect(),
            pairs,
        }
    }

    /// Ground-truth index matched to prediction `i`, if any.
    pub fn gt_for(&self, i: usize) -> Option<usize> {
        self.pairs.iter().find(|(p, _)| *p == i).map(|(_, g)| *g)
    }
}

/// Sum in prediction order; both solvers share this so totals compare exactly.
fn pair_cost(costs: &CostMatrix, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| costs.get(i, j)).sum()
}

/// `1 − p(gt_class)`.
pub fn classification_cost(probs: &[f64], gt_class: usize) -> Result<f64, MatchingError> {
    let p = *probs.get(gt_class).ok_or(MatchingError::ClassOutOfRange {
        class: gt_class,
        len: probs.len(),
    })?;
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(MatchingError::NotNormalized(sum));
    }
    Ok(1.0 - p)
}

/// L1 distance over `(x, y, w, h)` in image heights plus depth over `d_max`.
pub fn regression_cost(pred: &Box2D, gt: &Box2D, norm: &RegressionNorm) -> f64 {
    crate::losses::l1_regression_loss(pred, gt, norm)
}

/// `1 − GIoU`, in `[0, 2)`.
pub fn iou_cost(pred: &Box2D, gt: &Box2D) -> f64 {
    1.0 - giou(pred, gt)
}

/// A projected prediction: image box plus raw class logits (the last slot
/// is background).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction2D {
    pub bbox: Box2D,
    pub logits: Vec<f64>,
}

impl Prediction2D {
    pub fn probs(&self) -> Vec<f64> {
        softmax(&self.logits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation2D {
    pub bbox: Box2D,
    pub class_id: usize,
}

pub fn build_cost_matrix(
    preds: &[Prediction2D],
    gts: &[Annotation2D],
    weights: &CostWeights,
    norm: &RegressionNorm,
) -> Result<CostMatrix, MatchingError> {
    if preds.is_empty() || gts.is_empty() {
        return Err(MatchingError::Empty);
    }
    weights.validate()?;
    let mut data = Vec::with_capacity(preds.len() * gts.len());
    for p in preds {
        let probs = p.probs();
        for g in gts {
            let c = weights.cls * classification_cost(&probs, g.class_id)?
                + weights.reg * regression_cost(&p.bbox, &g.bbox, norm)
                + weights.iou * iou_cost(&p.bbox, &g.bbox);
            data.push(c);
        }
    }
    CostMatrix::new(preds.len(), gts.len(), data)
}

/// Square Hungarian solve with dual potentials. Returns `row → col`, `u`, `v`.
fn solve_square(n: usize, cost: impl Fn(usize, usize) -> f64) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    // 1-indexed potentials; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    (row_to_col, u[1..].to_vec(), v[1..].to_vec())
}

/// Zero-padded square view; rows `>= n` and columns `>= m` are dummies.
struct Padded<'a> {
    costs: &'a CostMatrix,
}

impl Padded<'_> {
    fn get(&self, i: usize, j: usize) -> f64 {
        if i < self.costs.rows && j < self.costs.cols {
            self.costs.get(i, j)
        } else {
            0.0
        }
    }

    /// Optimal completion over the free rows/columns; returns its cost and
    /// the row → column map restricted to them.
    fn solve_sub(&self, rows: &[usize], cols: &[usize]) -> (f64, Vec<(usize, usize)>) {
        let (map, _, _) = solve_square(rows.len(), |a, b| self.get(rows[a], cols[b]));
        let pairs: Vec<_> = map.iter().enumerate().map(|(a, &b)| (rows[a], cols[b])).collect();
        let total = pairs.iter().map(|&(i, j)| self.get(i, j)).sum();
        (total, pairs)
    }
}

/// Minimum-cost assignment of size `min(n, m)`.
///
/// Among optimal assignments the lexicographically smallest pair list is
/// returned: predictions are fixed in index order, each taking the smallest
/// ground-truth index (or staying unmatched last) that still admits an
/// optimal completion. Dual potentials prune options that cannot be tight.
pub fn hungarian(costs: &CostMatrix) -> Assignment {
    let (n, m) = (costs.rows, costs.cols);
    if n == 0 || m == 0 {
        return Assignment::from_pairs(costs, Vec::new());
    }
    let size = n.max(m);
    let pad = Padded { costs };
    let (mut cur, u, v) = solve_square(size, |i, j| pad.get(i, j));
    let best: f64 = (0..size).map(|i| pad.get(i, cur[i])).sum();
    let scale = 1.0 + costs.data.iter().fold(0.0f64, |a, c| a.max(c.abs()));
    let tol = 1e-10 * scale * size as f64;

    let mut row_fixed = vec![false; size];
    let mut col_fixed = vec![false; size];
    let mut fixed_cost = 0.0;
    for i in 0..n {
        // preference order: real columns ascending, then any dummy column
        let mut options: Vec<usize> = (0..m).collect();
        if let Some(d) = (m..size)
            .filter(|&d| !col_fixed[d])
            .min_by(|&a, &b| (-v[a]).total_cmp(&-v[b]))
        {
            options.push(d);
        }
        let current = cur[i];
        let chosen = options
            .into_iter()
            .find(|&j| {
                if col_fixed[j] {
                    return false;
                }
                let same = j == current || (j >= m && current >= m);
                if same {
                    return true;
                }
                if pad.get(i, j) - u[i] - v[j] > tol {
                    return false;
                }
                let rows: Vec<usize> = (0..size).filter(|&r| !row_fixed[r] && r != i).collect();
                let cols: Vec<usize> = (0..size).filter(|&c| !col_fixed[c] && c != j).collect();
                let (sub, sub_pairs) = pad.solve_sub(&rows, &cols);
                if fixed_cost + pad.get(i, j) + sub <= best + tol {
                    cur[i] = j;
                    for (r, c) in sub_pairs {
                        cur[r] = c;
                    }
                    true
                } else {
                    false
                }
            })
            .unwrap_or(current);
        let chosen = if chosen >= m && current >= m { current } else { chosen };
        row_fixed[i] = true;
        col_fixed[chosen] = true;
        fixed_cost += pad.get(i, chosen);
    }

    let pairs = (0..n).filter(|&i| cur[i] < m).map(|i| (i, cur[i])).collect();
    Assignment::from_pairs(costs, pairs)
}

/// Largest `min(n, m)` the exhaustive oracle accepts.
pub const BRUTE_FORCE_LIMIT: usize = 8;

/// Exhaustive enumeration of all injections; same tie rule as [`hungarian`].
pub fn brute_force_assignment(costs: &CostMatrix) -> Result<Assignment, MatchingError> {
    let (n, m) = (costs.rows, costs.cols);
    let k = n.min(m);
    if k > BRUTE_FORCE_LIMIT {
        return Err(MatchingError::SizeLimit {
            max: BRUTE_FORCE_LIMIT,
            got: k,
        });
    }
    let mut best: Option<(f64, Vec<(usize, usize)>)> = None;
    // Assign each element of the smaller side to a distinct element of the larger.
    let (small, large) = if n <= m { (n, m) } else { (m, n) };
    let mut chosen = Vec::with_capacity(small);
    let mut used = vec![false; large];

    fn recurse(
        depth: usize,
        small: usize,
        large: usize,
        preds_small: bool,
        chosen: &mut Vec<usize>,
        used: &mut [bool],
        costs: &CostMatrix,
        best: &mut Option<(f64, Vec<(usize, usize)>)>,
    ) {
        if depth == small {
            let mut pairs: Vec<(usize, usize)> = chosen
                .iter()
                .enumerate()
                .map(|(s, &l)| if preds_small { (s, l) } else { (l, s) })
                .collect();
            pairs.sort_unstable();
            let total = pair_cost(costs, &pairs);
            let better = match best {
                None => true,
                Some((c, p)) => total < *c || (total == *c && pairs < *p),
            };
            if better {
                *best = Some((total, pairs));
            }
            return;
        }
        for l in 0..large {
            if used[l] {
                continue;
            }
            used[l] = true;
            chosen.push(l);
            recurse(depth + 1, small, large, preds_small, chosen, used, costs, best);
            chosen.pop();
            used[l] = false;
        }
    }

    recurse(0, small, large, n <= m, &mut chosen, &mut used, costs, &mut best);
    let pairs = best.map(|(_, p)| p).unwrap_or_default();
    Ok(Assignment::from_pairs(costs, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> CostMatrix {
        CostMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn classification_cost_examples() {
        assert_eq!(classification_cost(&[0.0, 1.0], 1).unwrap(), 0.0);
        assert_eq!(classification_cost(&[1.0, 0.0], 1).unwrap(), 1.0);
        let uniform = vec![0.1; 10];
        assert!((classification_cost(&uniform, 3).unwrap() - 0.9).abs() < 1e-12);
        assert!(matches!(
            classification_cost(&uniform, 10),
            Err(MatchingError::ClassOutOfRange { .. })
        ));
        assert!(matches!(
            classification_cost(&[0.5, 0.2], 0),
            Err(MatchingError::NotNormalized(_))
        ));
    }

    #[test]
    fn regression_cost_examples() {
        let norm = RegressionNorm { image_height: 900.0, d_max: 60.0 };
        let a = Box2D::new(100.0, 100.0, 50.0, 40.0, 10.0).unwrap();
        assert_eq!(regression_cost(&a, &a, &norm), 0.0);
        let shifted = Box2D { x: 100.0 + 900.0, ..a };
        assert!((regression_cost(&shifted, &a, &norm) - 1.0).abs() < 1e-12);
        let gt = Box2D::new(110.0, 100.0, 50.0, 40.0, 12.0).unwrap();
        let want = 10.0 / 900.0 + 2.0 / 60.0;
        assert!((regression_cost(&a, &gt, &norm) - want).abs() < 1e-12);
        assert!((want - 0.044444).abs() < 1e-6);
    }

    #[test]
    fn iou_cost_examples() {
        let a = Box2D::new(0.0, 0.0, 2.0, 2.0, 1.0).unwrap();
        assert_eq!(iou_cost(&a, &a), 0.0);
        let b = Box2D { x: 2.0, ..a };
        assert!((iou_cost(&a, &b) - 1.0).abs() < 1e-12);
        let far = Box2D { x: 1e6, ..a };
        let c = iou_cost(&a, &far);
        assert!(c < 2.0 && c > 1.999);
    }

    fn confident(bbox: Box2D, class: usize, k: usize) -> Prediction2D {
        let mut logits = vec![0.0; k + 1];
        logits[class] = 60.0;
        Prediction2D { bbox, logits }
    }

    #[test]
    fn cost_matrix_cells_match_components() {
        let norm = RegressionNorm { image_height: 900.0, d_max: 61.2 };
        let w = CostWeights::default();
        let b0 = Box2D::new(100.0, 200.0, 40.0, 30.0, 12.0).unwrap();
        let b1 = Box2D::new(400.0, 220.0, 80.0, 60.0, 7.0).unwrap();
        let preds = vec![
            Prediction2D { bbox: b0, logits: vec![1.0, 0.2, -0.5] },
            Prediction2D { bbox: b1, logits: vec![-0.3, 2.0, 0.1] },
        ];
        let gts = vec![
            Annotation2D { bbox: Box2D { x: 105.0, ..b0 }, class_id: 0 },
            Annotation2D { bbox: Box2D { y: 250.0, depth: 9.0, ..b1 }, class_id: 1 },
        ];
        let c = build_cost_matrix(&preds, &gts, &w, &norm).unwrap();
        for (i, p) in preds.iter().enumerate() {
            for (j, g) in gts.iter().enumerate() {
                // independent recomputation of each term
                let z: Vec<f64> = p.logits.iter().map(|l| l.exp()).collect();
                let pc = z[g.class_id] / z.iter().sum::<f64>();
                let reg = ((p.bbox.x - g.bbox.x).abs()
                    + (p.bbox.y - g.bbox.y).abs()
                    + (p.bbox.w - g.bbox.w).abs()
                    + (p.bbox.h - g.bbox.h).abs())
                    / 900.0
                    + (p.bbox.depth - g.bbox.depth).abs() / 61.2;
                let want = 2.0 * (1.0 - pc) + 0.75 * reg + 0.25 * iou_cost(&p.bbox, &g.bbox);
                assert!((c.get(i, j) - want).abs() < 1e-12);
            }
        }
        let only_reg = CostWeights { cls: 0.0, reg: 1.0, iou: 0.0 };
        let c = build_cost_matrix(&preds, &gts, &only_reg, &norm).unwrap();
        assert_eq!(c.get(1, 0), regression_cost(&b1, &gts[0].bbox, &norm));

        let one = build_cost_matrix(&[confident(b0, 0, 2)], &[Annotation2D { bbox: b0, class_id: 0 }], &w, &norm)
            .unwrap();
        assert_eq!(one.get(0, 0), 0.0);
        assert_eq!(build_cost_matrix(&[], &gts, &w, &norm), Err(MatchingError::Empty));
    }

    #[test]
    fn hungarian_examples() {
        let a = hungarian(&m(&[&[0.0]]));
        assert_eq!(a.pairs, vec![(0, 0)]);
        assert_eq!(a.total_cost, 0.0);

        let a = hungarian(&m(&[&[1.0, 2.0], &[2.0, 1.0]]));
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 2.0);

        let a = hungarian(&m(&[&[5.0, 1.0], &[2.0, 9.0], &[3.0, 3.0]]));
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(a.total_cost, 3.0);
        assert_eq!(a.unmatched_preds, vec![2]);
        assert!(a.unmatched_gts.is_empty());
    }

    #[test]
    fn ties_resolve_lexicographically() {
        // every permutation costs the same
        let a = hungarian(&m(&[&[1.0, 1.0, 1.0], &[1.0, 1.0, 1.0]]));
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        let a = hungarian(&m(&[&[1.0], &[1.0], &[1.0]]));
        assert_eq!(a.pairs, vec![(0, 0)]);
        assert_eq!(a.unmatched_preds, vec![1, 2]);
        // tie between (0,1),(1,0) and (0,0),(1,1) → the latter
        let a = hungarian(&m(&[&[0.0, 1.0], &[1.0, 0.0 + 0.0]]));
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        let a = hungarian(&m(&[&[2.0, 1.0], &[1.0, 0.0]]));
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(brute_force_assignment(&m(&[&[2.0, 1.0], &[1.0, 0.0]])).unwrap().pairs, a.pairs);
    }

    #[test]
    fn empty_sides() {
        let c = CostMatrix::new(3, 0, vec![]).unwrap();
        let a = hungarian(&c);
        assert!(a.pairs.is_empty());
        assert_eq!(a.unmatched_preds, vec![0, 1, 2]);
    }

    #[test]
    fn brute_force_size_limit() {
        let c = CostMatrix::new(9, 9, vec![0.0; 81]).unwrap();
        assert!(matches!(brute_force_assignment(&c), Err(MatchingError::SizeLimit { .. })));
    }

    fn matrix_strategy() -> impl Strategy<Value = CostMatrix> {
        (1usize..=6, 1usize..=6, any::<bool>()).prop_flat_map(|(n, m, ints)| {
            let cell = if ints {
                (0u8..4).prop_map(f64::from).boxed()
            } else {
                (0.0f64..10.0).boxed()
            };
            proptest::collection::vec(cell, n * m)
                .prop_map(move |d| CostMatrix::new(n, m, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn matches_oracle(c in matrix_strategy()) {
            let h = hungarian(&c);
            let b = brute_force_assignment(&c).unwrap();
            prop_assert_eq!(h.total_cost, b.total_cost);
            prop_assert_eq!(&h.pairs, &b.pairs);
            prop_assert_eq!(h.pairs.len(), c.rows().min(c.cols()));
        }

        #[test]
        fn scaling_keeps_pairs(c in matrix_strategy(), s in 0.1f64..20.0) {
            prop_assert_eq!(hungarian(&c).pairs, hungarian(&c.map(|v| v * 4.0)).pairs);
            let scaled = hungarian(&c.map(|v| v * s));
            let base = hungarian(&c);
            // continuous scaling may perturb exact ties; compare optimal value
            prop_assert!((scaled.total_cost - base.total_cost * s).abs() < 1e-9 * (1.0 + base.total_cost * s));
        }

        #[test]
        fn row_permutation_equivariance(c in matrix_strategy(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut perm: Vec<usize> = (0..c.rows()).collect();
            perm.shuffle(&mut rng);
            let mut cperm: Vec<usize> = (0..c.cols()).collect();
            cperm.shuffle(&mut rng);
            let rows: Vec<Vec<f64>> = perm
                .iter()
                .map(|&i| cperm.iter().map(|&j| c.get(i, j)).collect())
                .collect();
            let p = CostMatrix::from_rows(&rows).unwrap();
            let a = hungarian(&c);
            let b = hungarian(&p);
            prop_assert!((a.total_cost - b.total_cost).abs() < 1e-9);
            // permuted solution, mapped back, is optimal for the original
            let back: Vec<(usize, usize)> = b.pairs.iter().map(|&(i, j)| (perm[i], cperm[j])).collect();
            let cost: f64 = back.iter().map(|&(i, j)| c.get(i, j)).sum();
            prop_assert!((cost - a.total_cost).abs() < 1e-9);
        }

        #[test]
        fn constant_shift_square(n in 1usize..=6, d in proptest::collection::vec(0.0f64..10.0, 36), k in -5.0f64..5.0) {
            let c = CostMatrix::new(n, n, d[..n * n].to_vec()).unwrap();
            prop_assert_eq!(hungarian(&c).pairs, hungarian(&c.map(|v| v + k)).pairs);
        }
    }
}
