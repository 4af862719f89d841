//! Bipartite assignment: Hungarian solver, label-assignment costs and the
//! one-to-one vertex projection used by the topology metric.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{frechet_distance, giou_2d, iou_2d};
use crate::loss::{focal_cost, FocalParams};
use crate::matrix::DenseMatrix;
use crate::scene::{BevRange, Centerline, ImageSize, ProjectionMethod, TrafficElement};

/// Rows are predictions, columns ground truths. `+∞` forbids a pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(pub DenseMatrix);

impl CostMatrix {
    pub fn new(m: DenseMatrix) -> Result<Self> {
        if m.data().iter().any(|v| v.is_nan() || *v == f64::NEG_INFINITY) {
            return Err(Error::InvalidInput(
                "cost entries must be finite or +inf".into(),
            ));
        }
        Ok(Self(m))
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        Self::new(DenseMatrix::from_fn(rows, cols, f))
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.cols()
    }

    pub fn get(&self, pred: usize, gt: usize) -> f64 {
        self.0.get(pred, gt)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Matching {
    /// `(pred, gt)` pairs sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

impl Matching {
    pub fn from_pairs(mut pairs: Vec<(usize, usize)>, num_preds: usize, num_gts: usize) -> Self {
        pairs.sort_unstable();
        let mut pred_used = vec![false; num_preds];
        let mut gt_used = vec![false; num_gts];
        for &(p, g) in &pairs {
            pred_used[p] = true;
            gt_used[g] = true;
        }
        Self {
            pairs,
            unmatched_preds: (0..num_preds).filter(|&i| !pred_used[i]).collect(),
            unmatched_gts: (0..num_gts).filter(|&i| !gt_used[i]).collect(),
        }
    }

    pub fn total_cost(&self, cost: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(p, g)| cost.get(p, g)).sum()
    }

    /// `gt_of[pred]`.
    pub fn gt_for_pred(&self, num_preds: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_preds];
        for &(p, g) in &self.pairs {
            out[p] = Some(g);
        }
        out
    }

    /// `pred_of[gt]`.
    pub fn pred_for_gt(&self, num_gts: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_gts];
        for &(p, g) in &self.pairs {
            out[g] = Some(p);
        }
        out
    }

    /// Every index appears at most once and matched ∪ unmatched covers both sides.
    pub fn is_consistent(&self, num_preds: usize, num_gts: usize) -> bool {
        let mut preds = vec![0u8; num_preds];
        let mut gts = vec![0u8; num_gts];
        for &(p, g) in &self.pairs {
            if p >= num_preds || g >= num_gts {
                return false;
            }
            preds[p] += 1;
            gts[g] += 1;
        }
        for &p in &self.unmatched_preds {
            if p >= num_preds {
                return false;
            }
            preds[p] += 1;
        }
        for &g in &self.unmatched_gts {
            if g >= num_gts {
                return false;
            }
            gts[g] += 1;
        }
        preds.iter().chain(&gts).all(|&c| c == 1)
    }
}

/// Minimum-cost assignment of `min(rows, cols)` pairs.
///
/// Forbidden (`+∞`) pairs are avoided whenever a larger set of finite pairs
/// exists and are dropped from the result otherwise, so an all-`∞` matrix
/// gives an empty matching. Shortest-augmenting-path formulation with
/// potentials, O(n²·m); the lowest column index wins among equal reduced costs.
pub fn hungarian(cost: &CostMatrix) -> Matching {
    let (rows, cols) = (cost.rows(), cost.cols());
    if rows == 0 || cols == 0 {
        return Matching::from_pairs(Vec::new(), rows, cols);
    }
    let max_finite = cost
        .0
        .data()
        .iter()
        .filter(|v| v.is_finite())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let big = (max_finite + 1.0) * (rows.min(cols) as f64 + 1.0) * 2.0;
    let transposed = rows > cols;
    let (n, m) = if transposed { (cols, rows) } else { (rows, cols) };
    let at = |i: usize, j: usize| {
        let v = if transposed { cost.get(j, i) } else { cost.get(i, j) };
        if v.is_finite() {
            v
        } else {
            big
        }
    };

    // 1-based arrays; index 0 is the virtual source column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
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

    let pairs = (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| {
            if transposed {
                (j - 1, p[j] - 1)
            } else {
                (p[j] - 1, j - 1)
            }
        })
        .filter(|&(r, c)| cost.get(r, c).is_finite())
        .collect();
    Matching::from_pairs(pairs, rows, cols)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeCostWeights {
    pub cls: f64,
    pub reg: f64,
    pub iou: f64,
}

impl Default for TeCostWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            reg: 2.5,
            iou: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LcCostWeights {
    pub cls: f64,
    pub reg: f64,
}

impl Default for LcCostWeights {
    fn default() -> Self {
        Self {
            cls: 1.5,
            reg: 0.0075,
        }
    }
}

/// `cls·focal_cost + reg·L1(normalized cxcywh) − iou·GIoU`.
pub fn te_assignment_cost(
    pred: &TrafficElement,
    gt: &TrafficElement,
    image: ImageSize,
    weights: TeCostWeights,
    focal: FocalParams,
) -> f64 {
    let p = pred.class_scores[gt.attribute.index()];
    let pb = pred.bbox.to_cxcywh(image);
    let gb = gt.bbox.to_cxcywh(image);
    let l1: f64 = pb.iter().zip(&gb).map(|(a, b)| (a - b).abs()).sum();
    weights.cls * focal_cost(p, focal) + weights.reg * l1 - weights.iou * giou_2d(&pred.bbox, &gt.bbox)
}

/// `cls·focal_cost + reg·Σ|Δ|` over the denormalized point coordinates.
pub fn lc_assignment_cost(
    pred: &Centerline,
    gt: &Centerline,
    weights: LcCostWeights,
    focal: FocalParams,
) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidInput(format!(
            "lane point counts differ: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let l1: f64 = pred
        .points
        .iter()
        .zip(&gt.points)
        .map(|(a, b)| (a.x - b.x).abs() + (a.y - b.y).abs() + (a.z - b.z).abs())
        .sum();
    Ok(weights.cls * focal_cost(pred.confidence, focal) + weights.reg * l1)
}

pub fn te_cost_matrix(
    preds: &[TrafficElement],
    gts: &[TrafficElement],
    image: ImageSize,
    weights: TeCostWeights,
    focal: FocalParams,
) -> Result<CostMatrix> {
    CostMatrix::from_fn(preds.len(), gts.len(), |p, g| {
        te_assignment_cost(&preds[p], &gts[g], image, weights, focal)
    })
}

pub fn lc_cost_matrix(
    preds: &[Centerline],
    gts: &[Centerline],
    weights: LcCostWeights,
    focal: FocalParams,
) -> Result<CostMatrix> {
    let mut m = DenseMatrix::zeros(preds.len(), gts.len());
    for (p, pl) in preds.iter().enumerate() {
        for (g, gl) in gts.iter().enumerate() {
            m.set(p, g, lc_assignment_cost(pl, gl, weights, focal)?);
        }
    }
    CostMatrix::new(m)
}

/// Lane regression target in normalized units, used when costs are built from
/// raw head outputs rather than denormalized centerlines.
pub fn normalized_lane(line: &Centerline, range: &BevRange) -> Vec<f64> {
    line.points.iter().flat_map(|p| range.normalize(p)).collect()
}

#[derive(Debug, Clone, Copy)]
pub enum Similarity<'a> {
    /// Lane vertices compared by Fréchet distance; pairs farther than the threshold are dropped.
    Frechet {
        gt: &'a [Centerline],
        preds: &'a [Centerline],
    },
    /// Traffic-element vertices compared by IoU; pairs below the threshold are dropped.
    Iou {
        gt: &'a [TrafficElement],
        preds: &'a [TrafficElement],
    },
}

impl Similarity<'_> {
    fn sizes(&self) -> (usize, usize) {
        match self {
            Similarity::Frechet { gt, preds } => (preds.len(), gt.len()),
            Similarity::Iou { gt, preds } => (preds.len(), gt.len()),
        }
    }

    fn confidences(&self) -> Vec<f64> {
        match self {
            Similarity::Frechet { preds, .. } => preds.iter().map(|l| l.confidence).collect(),
            Similarity::Iou { preds, .. } => preds.iter().map(TrafficElement::confidence).collect(),
        }
    }

    /// Cost matrix with `+∞` wherever the pair fails the threshold.
    fn gated_cost(&self, threshold: f64) -> Result<CostMatrix> {
        let (np, ng) = self.sizes();
        let mut m = DenseMatrix::zeros(np, ng);
        for p in 0..np {
            for g in 0..ng {
                let c = match self {
                    Similarity::Frechet { gt, preds } => {
                        let d = frechet_distance(&preds[p], &gt[g])?;
                        if d <= threshold {
                            d
                        } else {
                            f64::INFINITY
                        }
                    }
                    Similarity::Iou { gt, preds } => {
                        let iou = iou_2d(&preds[p].bbox, &gt[g].bbox);
                        if iou >= threshold {
                            1.0 - iou
                        } else {
                            f64::INFINITY
                        }
                    }
                };
                m.set(p, g, c);
            }
        }
        CostMatrix::new(m)
    }
}

/// One-to-one projection of ground-truth vertices onto predictions.
///
/// Pairs that fail the similarity threshold are never matched. With
/// [`ProjectionMethod::Hungarian`] the result has the largest number of
/// admissible pairs and, among those, the smallest total cost; with
/// [`ProjectionMethod::Greedy`] predictions are visited by descending
/// confidence and take the cheapest admissible free ground truth.
pub fn evaluation_projection(
    similarity: Similarity<'_>,
    threshold: f64,
    method: ProjectionMethod,
) -> Result<Matching> {
    let cost = similarity.gated_cost(threshold)?;
    let (np, ng) = similarity.sizes();
    Ok(match method {
        ProjectionMethod::Hungarian => hungarian(&cost),
        ProjectionMethod::Greedy => {
            let conf = similarity.confidences();
            let mut order: Vec<usize> = (0..np).collect();
            order.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]).then(a.cmp(&b)));
            let mut taken = vec![false; ng];
            let mut pairs = Vec::new();
            for p in order {
                let best = (0..ng)
                    .filter(|&g| !taken[g] && cost.get(p, g).is_finite())
                    .min_by(|&a, &b| cost.get(p, a).total_cmp(&cost.get(p, b)));
                if let Some(g) = best {
                    taken[g] = true;
                    pairs.push((p, g));
                }
            }
            Matching::from_pairs(pairs, np, ng)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Attribute, BoxCorners, Point3};
    use proptest::prelude::*;

    /// Exhaustive search over injective maps from the smaller side, maximizing
    /// the number of finite pairs first and minimizing their total cost second.
    pub(crate) fn brute_force(cost: &CostMatrix) -> (usize, f64) {
        let (r, c) = (cost.rows(), cost.cols());
        let transposed = r > c;
        let (n, m) = if transposed { (c, r) } else { (r, c) };
        let at = |i: usize, j: usize| if transposed { cost.get(j, i) } else { cost.get(i, j) };
        fn rec(
            i: usize,
            n: usize,
            m: usize,
            used: &mut Vec<bool>,
            at: &dyn Fn(usize, usize) -> f64,
            count: usize,
            total: f64,
            best: &mut (usize, f64),
        ) {
            if i == n {
                if count > best.0 || (count == best.0 && total < best.1) {
                    *best = (count, total);
                }
                return;
            }
            for j in 0..m {
                if !used[j] {
                    used[j] = true;
                    let v = at(i, j);
                    if v.is_finite() {
                        rec(i + 1, n, m, used, at, count + 1, total + v, best);
                    } else {
                        rec(i + 1, n, m, used, at, count, total, best);
                    }
                    used[j] = false;
                }
            }
        }
        let mut best = (0, f64::INFINITY);
        rec(0, n, m, &mut vec![false; m], &at, 0, 0.0, &mut best);
        if best.0 == 0 {
            best.1 = 0.0;
        }
        best
    }

    fn cm(rows: &[&[f64]]) -> CostMatrix {
        CostMatrix::new(DenseMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>(), 0).unwrap())
            .unwrap()
    }

    #[test]
    fn small_examples() {
        let c = cm(&[&[1.0, 2.0], &[2.0, 1.0]]);
        let m = hungarian(&c);
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(m.total_cost(&c), 2.0);
        assert_eq!(hungarian(&cm(&[&[5.0]])).pairs, vec![(0, 0)]);
    }

    #[test]
    fn rectangular_and_forbidden() {
        let c = cm(&[&[4.0, 1.0, 6.0], &[2.0, 0.0, 5.0]]);
        let m = hungarian(&c);
        assert_eq!(m.total_cost(&c), 3.0);
        assert_eq!(m.unmatched_gts, vec![2]);

        let inf = f64::INFINITY;
        let c = cm(&[&[inf, inf], &[inf, inf]]);
        let m = hungarian(&c);
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched_preds, vec![0, 1]);

        // Forbidding the cheap diagonal forces the off-diagonal pair set.
        let c = cm(&[&[1.0, 10.0], &[inf, 1.0], &[inf, inf]]);
        let m = hungarian(&c);
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        assert!(m.is_consistent(3, 2));
    }

    #[test]
    fn nan_rejected() {
        assert!(CostMatrix::new(DenseMatrix::from_vec(1, 1, vec![f64::NAN]).unwrap()).is_err());
    }

    fn te(b: [f64; 4], attr: Attribute) -> TrafficElement {
        TrafficElement::new(BoxCorners::new(b[0], b[1], b[2], b[3]), attr)
    }

    #[test]
    fn te_cost_of_exact_prediction() {
        let gt = te([100.0, 100.0, 200.0, 180.0], Attribute::Red);
        let f = FocalParams::default();
        let c = te_assignment_cost(&gt, &gt, ImageSize::default(), TeCostWeights::default(), f);
        assert!((c - (-1.0 + focal_cost(1.0, f))).abs() < 1e-15);
    }

    #[test]
    fn te_assignment_prefers_perfect_candidate() {
        let gt = te([100.0, 100.0, 200.0, 180.0], Attribute::Red);
        let mut off = te([130.0, 90.0, 260.0, 170.0], Attribute::Red);
        off.class_scores[Attribute::Red.index()] = 0.6;
        let f = FocalParams::default();
        let c = te_cost_matrix(&[off, gt.clone()], &[gt], ImageSize::default(), TeCostWeights::default(), f)
            .unwrap();
        assert_eq!(hungarian(&c).pairs, vec![(1, 0)]);
    }

    #[test]
    fn te_three_by_two_matches_exhaustive() {
        let gts = [
            te([10.0, 10.0, 60.0, 50.0], Attribute::Green),
            te([300.0, 200.0, 340.0, 290.0], Attribute::TurnLeft),
        ];
        let mut preds = vec![
            te([305.0, 190.0, 350.0, 280.0], Attribute::TurnLeft),
            te([12.0, 8.0, 55.0, 52.0], Attribute::Red),
            te([0.0, 0.0, 70.0, 70.0], Attribute::Green),
        ];
        preds[0].class_scores[Attribute::TurnLeft.index()] = 0.7;
        preds[1].class_scores[Attribute::Green.index()] = 0.3;
        preds[2].class_scores[Attribute::Green.index()] = 0.8;
        let c = te_cost_matrix(&preds, &gts, ImageSize::default(), TeCostWeights::default(), FocalParams::default())
            .unwrap();
        let m = hungarian(&c);
        let (count, best) = brute_force(&c);
        assert_eq!(m.pairs.len(), count);
        assert!((m.total_cost(&c) - best).abs() < 1e-12);
    }

    fn lane(y: f64) -> Centerline {
        Centerline::new((0..11).map(|i| Point3::new(i as f64 * 2.0, y, 0.0)).collect())
    }

    #[test]
    fn lc_cost_examples() {
        let f = FocalParams::default();
        let w = LcCostWeights::default();
        let gt = lane(0.0);
        let c0 = lc_assignment_cost(&gt, &gt, w, f).unwrap();
        assert_eq!(c0, 1.5 * focal_cost(1.0, f));
        let c1 = lc_assignment_cost(&lane(1.0), &gt, w, f).unwrap();
        assert!((c1 - c0 - 0.0825).abs() < 1e-12);
        let short = Centerline::new(gt.points[..5].to_vec());
        assert!(lc_assignment_cost(&short, &gt, w, f).is_err());
    }

    #[test]
    fn lc_four_by_three_matches_exhaustive() {
        let gts = [lane(0.0), lane(3.5), lane(-3.5)];
        let mut preds = vec![lane(3.2), lane(0.4), lane(-3.0), lane(10.0)];
        for (i, p) in preds.iter_mut().enumerate() {
            p.confidence = 0.3 + 0.15 * i as f64;
        }
        let c = lc_cost_matrix(&preds, &gts, LcCostWeights::default(), FocalParams::default()).unwrap();
        let m = hungarian(&c);
        let (count, best) = brute_force(&c);
        assert_eq!(m.pairs.len(), count);
        assert!((m.total_cost(&c) - best).abs() < 1e-12);
    }

    #[test]
    fn projection_examples() {
        let gts = [lane(0.0), lane(3.5)];
        let m = evaluation_projection(
            Similarity::Frechet { gt: &gts, preds: &gts },
            1.0,
            ProjectionMethod::Hungarian,
        )
        .unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);

        let one = [lane(0.0)];
        let preds = [lane(2.5), lane(0.5)];
        for method in [ProjectionMethod::Hungarian, ProjectionMethod::Greedy] {
            let m = evaluation_projection(Similarity::Frechet { gt: &one, preds: &preds }, 1.0, method).unwrap();
            assert_eq!(m.pairs, vec![(1, 0)]);
            assert_eq!(m.unmatched_preds, vec![0]);
        }

        let boxes = [te([0.0, 0.0, 10.0, 10.0], Attribute::Red)];
        let pb = [te([0.0, 0.0, 10.0, 9.0], Attribute::Red), te([5.0, 0.0, 15.0, 10.0], Attribute::Red)];
        let m = evaluation_projection(Similarity::Iou { gt: &boxes, preds: &pb }, 0.75, ProjectionMethod::Hungarian)
            .unwrap();
        assert_eq!(m.pairs, vec![(0, 0)]);
    }

    #[test]
    fn projection_with_infinite_threshold_saturates() {
        let gts = [lane(0.0), lane(3.5), lane(7.0)];
        let preds = [lane(40.0), lane(-20.0)];
        let m = evaluation_projection(
            Similarity::Frechet { gt: &gts, preds: &preds },
            f64::INFINITY,
            ProjectionMethod::Hungarian,
        )
        .unwrap();
        assert_eq!(m.pairs.len(), 2);
    }

    fn int_matrix(max_n: usize) -> impl Strategy<Value = CostMatrix> {
        (1..=max_n, 1..=max_n).prop_flat_map(|(r, c)| {
            prop::collection::vec(0u32..50, r * c).prop_map(move |v| {
                CostMatrix::new(DenseMatrix::from_vec(r, c, v.into_iter().map(f64::from).collect()).unwrap())
                    .unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn hungarian_is_optimal(c in int_matrix(6)) {
            let m = hungarian(&c);
            prop_assert!(m.is_consistent(c.rows(), c.cols()));
            prop_assert_eq!(m.pairs.len(), c.rows().min(c.cols()));
            prop_assert_eq!(m.total_cost(&c), brute_force(&c).1);
        }

        #[test]
        fn hungarian_with_forbidden_pairs(c in int_matrix(5), mask in prop::collection::vec(prop::bool::weighted(0.3), 25)) {
            let masked = CostMatrix::from_fn(c.rows(), c.cols(), |i, j| {
                if mask[i * 5 + j] { f64::INFINITY } else { c.get(i, j) }
            }).unwrap();
            let m = hungarian(&masked);
            let (count, best) = brute_force(&masked);
            prop_assert_eq!(m.pairs.len(), count);
            prop_assert_eq!(m.total_cost(&masked), best);
        }

        #[test]
        fn permutation_stable(c in int_matrix(5), seed in 0u64..1000) {
            let (r, k) = (c.rows(), c.cols());
            let rot_r = (seed as usize) % r;
            let rot_c = (seed as usize / 7) % k;
            let perm_r: Vec<usize> = (0..r).map(|i| (i + rot_r) % r).collect();
            let perm_c: Vec<usize> = (0..k).map(|j| (j + rot_c) % k).collect();
            let permuted = CostMatrix::from_fn(r, k, |i, j| c.get(perm_r[i], perm_c[j])).unwrap();
            let m1 = hungarian(&c);
            let m2 = hungarian(&permuted);
            // Costs agree; on unique optima the relabelled pair sets agree too.
            prop_assert_eq!(m1.total_cost(&c), m2.total_cost(&permuted));
            let mut back: Vec<(usize, usize)> = m2.pairs.iter().map(|&(i, j)| (perm_r[i], perm_c[j])).collect();
            back.sort_unstable();
            let unique = {
                let best = m1.total_cost(&c);
                let mut count = 0;
                count_optima(&c, 0, &mut vec![false; k], 0.0, best, &mut count);
                count == 1
            };
            if unique && r <= k {
                prop_assert_eq!(back, m1.pairs.clone());
            }
        }
    }

    fn count_optima(c: &CostMatrix, i: usize, used: &mut Vec<bool>, total: f64, best: f64, count: &mut usize) {
        if i == c.rows() {
            if total == best {
                *count += 1;
            }
            return;
        }
        for j in 0..c.cols() {
            if !used[j] {
                used[j] = true;
                count_optima(c, i + 1, used, total + c.get(i, j), best, count);
                used[j] = false;
            }
        }
    }
}
