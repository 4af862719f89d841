//! Focal loss and the full detection + topology loss.

use std::ops::Add;

use serde::{Deserialize, Serialize};

use crate::assignment::{hungarian, lc_cost_matrix, te_cost_matrix, LcCostWeights, Matching, TeCostWeights};
use crate::error::{Error, Result};
use crate::geometry::giou_2d_grad;
use crate::heads::{DetectionOutput, DetectionUpstream, LANE_OUTPUTS};
use crate::matrix::DenseMatrix;
use crate::scene::{BoxCorners, FrameGraph, NUM_ATTRIBUTES};

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

fn clamp_prob(p: f64) -> f64 {
    let c = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if c != p {
        log::debug!("focal: probability {p} clamped to {c}");
    }
    c
}

/// Focal term for one probability: `-α(1-p)^γ log p` for positives and
/// `-(1-α) p^γ log(1-p)` for negatives.
pub fn focal_loss(p: f64, target: bool, params: FocalParams) -> f64 {
    let p = clamp_prob(p);
    let FocalParams { alpha, gamma } = params;
    if target {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

/// d focal / dp (zero outside the clamp window).
pub fn focal_loss_grad_prob(p: f64, target: bool, params: FocalParams) -> f64 {
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
        return 0.0;
    }
    let FocalParams { alpha, gamma } = params;
    if target {
        let q = 1.0 - p;
        alpha * (gamma * q.powf(gamma - 1.0) * p.ln() - q.powf(gamma) / p)
    } else {
        let q = 1.0 - p;
        -(1.0 - alpha) * (gamma * p.powf(gamma - 1.0) * q.ln() - p.powf(gamma) / q)
    }
}

/// d focal / d logit where `p = sigmoid(logit)`.
pub fn focal_loss_grad_logit(p: f64, target: bool, params: FocalParams) -> f64 {
    focal_loss_grad_prob(p, target, params) * p * (1.0 - p)
}

/// Classification matching cost: the positive focal term minus the negative one.
pub fn focal_cost(p: f64, params: FocalParams) -> f64 {
    focal_loss(p, true, params) - focal_loss(p, false, params)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub te_cls: f64,
    pub te_reg: f64,
    pub te_iou: f64,
    pub lc_cls: f64,
    pub lc_reg: f64,
    pub top_ll: f64,
    pub top_lt: f64,
    pub focal: FocalParams,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            te_cls: 1.0,
            te_reg: 2.5,
            te_iou: 1.0,
            lc_cls: 1.5,
            lc_reg: 0.0075,
            top_ll: 5.0,
            top_lt: 5.0,
            focal: FocalParams::default(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.te_cls, self.te_reg, self.te_iou, self.lc_cls, self.lc_reg, self.top_ll, self.top_lt];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn te_cost(&self) -> TeCostWeights {
        TeCostWeights { cls: self.te_cls, reg: self.te_reg, iou: self.te_iou }
    }

    pub fn lc_cost(&self) -> LcCostWeights {
        LcCostWeights { cls: self.lc_cls, reg: self.lc_reg }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Score every query pair in the topology loss; when false only pairs
    /// whose both ends are matched contribute.
    pub include_unmatched_pairs: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { weights: LossWeights::default(), include_unmatched_pairs: true }
    }
}

/// Lane and TE matchings of one prediction set against its ground truth.
/// Treated as constants by the gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatching {
    pub lanes: Matching,
    pub tes: Matching,
}

/// Hungarian matchings with the training costs.
pub fn compute_matching(det: &DetectionOutput, gt: &FrameGraph, weights: &LossWeights) -> Result<FrameMatching> {
    let image = gt.image_size;
    let lanes = lc_cost_matrix(&det.lanes(), &gt.lanes, weights.lc_cost(), weights.focal)?;
    let tes = te_cost_matrix(&det.traffic_elements(image), &gt.tes, image, weights.te_cost(), weights.focal)?;
    Ok(FrameMatching { lanes: hungarian(&lanes), tes: hungarian(&tes) })
}

/// Weighted loss components; `total` is their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub te_cls: f64,
    pub te_reg: f64,
    pub te_iou: f64,
    pub lc_cls: f64,
    pub lc_reg: f64,
    pub top_ll: f64,
    pub top_lt: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn component_sum(&self) -> f64 {
        self.te_cls + self.te_reg + self.te_iou + self.lc_cls + self.lc_reg + self.top_ll + self.top_lt
    }
}

impl Add for LossBreakdown {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let mut r = Self {
            te_cls: self.te_cls + o.te_cls,
            te_reg: self.te_reg + o.te_reg,
            te_iou: self.te_iou + o.te_iou,
            lc_cls: self.lc_cls + o.lc_cls,
            lc_reg: self.lc_reg + o.lc_reg,
            top_ll: self.top_ll + o.top_ll,
            top_lt: self.top_lt + o.top_lt,
            total: 0.0,
        };
        r.total = r.component_sum();
        r
    }
}

/// Everything one decoder layer predicts.
#[derive(Debug, Clone)]
pub struct LayerPrediction {
    pub det: DetectionOutput,
    pub conf_ll: DenseMatrix,
    pub conf_lt: DenseMatrix,
}

/// Gradients with respect to the head outputs: detection outputs and the
/// pre-sigmoid topology logits.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub det: DetectionUpstream,
    pub logits_ll: DenseMatrix,
    pub logits_lt: DenseMatrix,
}

struct Labels {
    lane_gt: Vec<Option<usize>>,
    te_gt: Vec<Option<usize>>,
}

fn labels(pred: &LayerPrediction, gt: &FrameGraph, m: &FrameMatching) -> Result<Labels> {
    let n_l = pred.det.lc_points.rows();
    let n_t = pred.det.te_boxes.rows();
    if !m.lanes.is_consistent(n_l, gt.lanes.len()) || !m.tes.is_consistent(n_t, gt.tes.len()) {
        return Err(Error::InvalidInput("matching does not fit the prediction/ground-truth sizes".into()));
    }
    pred.conf_ll.expect_shape("conf_ll", n_l, n_l)?;
    pred.conf_lt.expect_shape("conf_lt", n_l, n_t)?;
    for &(_, g) in &m.lanes.pairs {
        if gt.lanes[g].len() * 3 != LANE_OUTPUTS {
            return Err(Error::InvalidInput(format!("ground-truth lane {g} must have {} points", LANE_OUTPUTS / 3)));
        }
    }
    Ok(Labels { lane_gt: m.lanes.gt_for_pred(n_l), te_gt: m.tes.gt_for_pred(n_t) })
}

fn count(n: usize) -> f64 {
    n.max(1) as f64
}

fn num_edges(m: &DenseMatrix) -> usize {
    m.data().iter().filter(|&&v| v > 0.5).count()
}

/// Focal topology term over a pair grid; writes logit gradients into `grad`.
#[allow(clippy::too_many_arguments)]
fn pair_loss(
    conf: &DenseMatrix,
    rows: &[Option<usize>],
    cols: &[Option<usize>],
    adj: &DenseMatrix,
    scale: f64,
    focal: FocalParams,
    include_unmatched: bool,
    mut grad: Option<&mut DenseMatrix>,
) -> f64 {
    let mut total = 0.0;
    for x in 0..conf.rows() {
        for y in 0..conf.cols() {
            let (gx, gy) = (rows[x], cols[y]);
            if !include_unmatched && (gx.is_none() || gy.is_none()) {
                continue;
            }
            let t = matches!((gx, gy), (Some(a), Some(c)) if adj.get(a, c) > 0.5);
            let p = conf.get(x, y);
            total += scale * focal_loss(p, t, focal);
            if let Some(g) = grad.as_deref_mut() {
                g.set(x, y, scale * focal_loss_grad_logit(p, t, focal));
            }
        }
    }
    total
}

fn layer_loss(pred: &LayerPrediction, gt: &FrameGraph, m: &FrameMatching, config: &LossConfig, want_grad: bool) -> Result<(LossBreakdown, Option<LossGrads>)> {
    let l = labels(pred, gt, m)?;
    let w = &config.weights;
    let f = w.focal;
    let det = &pred.det;
    let (n_l, n_t) = (det.lc_points.rows(), det.te_boxes.rows());
    // Normalized by ground-truth counts, so an extra unmatched query can only
    // add loss.
    let n_te = count(gt.tes.len());
    let n_lc = count(gt.lanes.len());
    let n_ll = count(num_edges(&gt.adj_ll));
    let n_lt = count(num_edges(&gt.adj_lt));
    let image = gt.image_size;
    let mut g = want_grad.then(|| LossGrads {
        det: DetectionUpstream::zeros(n_l, n_t),
        logits_ll: DenseMatrix::zeros(n_l, n_l),
        logits_lt: DenseMatrix::zeros(n_l, n_t),
    });
    let mut b = LossBreakdown::default();

    for i in 0..n_t {
        let target = l.te_gt[i].map(|gi| gt.tes[gi].attribute.index());
        for c in 0..NUM_ATTRIBUTES {
            let p = det.te_scores.get(i, c);
            let t = target == Some(c);
            b.te_cls += w.te_cls * focal_loss(p, t, f) / n_te;
            if let Some(g) = g.as_mut() {
                g.det.te_logits.set(i, c, w.te_cls * focal_loss_grad_logit(p, t, f) / n_te);
            }
        }
        let Some(gi) = l.te_gt[i] else { continue };
        let pb = det.te_boxes.row(i);
        let gb = gt.tes[gi].bbox.to_cxcywh(image);
        let mut d_box = [0.0; 4];
        for k in 0..4 {
            let r = pb[k] - gb[k];
            b.te_reg += w.te_reg * r.abs() / n_te;
            d_box[k] += w.te_reg * r.signum() / n_te;
        }
        let corners = BoxCorners::from_cxcywh([pb[0], pb[1], pb[2], pb[3]], image);
        let (giou, dg) = giou_2d_grad(&corners, &gt.tes[gi].bbox);
        b.te_iou += w.te_iou * (1.0 - giou) / n_te;
        // Corners (x1, y1, x2, y2) → (cx, cy, w, h), scaled by the image.
        let s = -w.te_iou / n_te;
        d_box[0] += s * image.width * (dg[0] + dg[2]);
        d_box[1] += s * image.height * (dg[1] + dg[3]);
        d_box[2] += s * image.width * 0.5 * (dg[2] - dg[0]);
        d_box[3] += s * image.height * 0.5 * (dg[3] - dg[1]);
        if let Some(g) = g.as_mut() {
            g.det.te_boxes.row_mut(i).copy_from_slice(&d_box);
        }
    }

    for i in 0..n_l {
        let p = det.lc_scores[i];
        let t = l.lane_gt[i].is_some();
        b.lc_cls += w.lc_cls * focal_loss(p, t, f) / n_lc;
        if let Some(g) = g.as_mut() {
            g.det.lc_logits[i] = w.lc_cls * focal_loss_grad_logit(p, t, f) / n_lc;
        }
        let Some(gi) = l.lane_gt[i] else { continue };
        let target = gt.lanes[gi].points.iter().flat_map(|p| p.to_array());
        for (k, (&a, t)) in det.lc_points.row(i).iter().zip(target).enumerate() {
            b.lc_reg += w.lc_reg * (a - t).abs() / n_lc;
            if let Some(g) = g.as_mut() {
                g.det.lc_points.set(i, k, w.lc_reg * (a - t).signum() / n_lc);
            }
        }
    }

    // A pair is positive iff both ends are matched and their ground-truth
    // vertices are connected.
    let unmatched = config.include_unmatched_pairs;
    let (gll, glt) = match g.as_mut() {
        Some(g) => (Some(&mut g.logits_ll), Some(&mut g.logits_lt)),
        None => (None, None),
    };
    b.top_ll = pair_loss(&pred.conf_ll, &l.lane_gt, &l.lane_gt, &gt.adj_ll, w.top_ll / n_ll, f, unmatched, gll);
    b.top_lt = pair_loss(&pred.conf_lt, &l.lane_gt, &l.te_gt, &gt.adj_lt, w.top_lt / n_lt, f, unmatched, glt);
    b.total = b.component_sum();
    Ok((b, g))
}

pub fn total_loss(pred: &LayerPrediction, gt: &FrameGraph, matching: &FrameMatching, config: &LossConfig) -> Result<LossBreakdown> {
    Ok(layer_loss(pred, gt, matching, config, false)?.0)
}

/// Loss and its gradients with respect to the head outputs.
pub fn loss_backward(pred: &LayerPrediction, gt: &FrameGraph, matching: &FrameMatching, config: &LossConfig) -> Result<(LossBreakdown, LossGrads)> {
    let (b, g) = layer_loss(pred, gt, matching, config, true)?;
    Ok((b, g.expect("gradients requested")))
}

/// Sum over per-layer supervision; one matching per layer.
pub fn multi_layer_loss(preds: &[LayerPrediction], gt: &FrameGraph, matchings: &[FrameMatching], config: &LossConfig) -> Result<LossBreakdown> {
    if preds.len() != matchings.len() {
        return Err(Error::InvalidInput(format!("{} layer outputs but {} matchings", preds.len(), matchings.len())));
    }
    preds
        .iter()
        .zip(matchings)
        .try_fold(LossBreakdown::default(), |acc, (p, m)| Ok(acc + total_loss(p, gt, m, config)?))
}

/// Smallest distance of any matched regression residual or box-edge gap from
/// a point where the loss is not differentiable, in normalized units (lane
/// residuals are divided by `lane_extent`).
pub fn loss_kink_margin(pred: &LayerPrediction, gt: &FrameGraph, matching: &FrameMatching, lane_extent: [f64; 3]) -> f64 {
    let mut m = f64::INFINITY;
    let image = gt.image_size;
    for &(i, gi) in &matching.tes.pairs {
        let pb = pred.det.te_boxes.row(i);
        let gb = gt.tes[gi].bbox.to_cxcywh(image);
        for k in 0..4 {
            m = m.min((pb[k] - gb[k]).abs());
        }
        let a = BoxCorners::from_cxcywh([pb[0], pb[1], pb[2], pb[3]], image);
        let b = &gt.tes[gi].bbox;
        let gaps = [
            (a.x1 - b.x1) / image.width,
            (a.x2 - b.x2) / image.width,
            (a.y1 - b.y1) / image.height,
            (a.y2 - b.y2) / image.height,
            (a.x2.min(b.x2) - a.x1.max(b.x1)) / image.width,
            (a.y2.min(b.y2) - a.y1.max(b.y1)) / image.height,
        ];
        for gap in gaps {
            m = m.min(gap.abs());
        }
    }
    for &(i, gi) in &matching.lanes.pairs {
        let target = gt.lanes[gi].points.iter().flat_map(|p| p.to_array());
        for (k, (a, t)) in pred.det.lc_points.row(i).iter().zip(target).enumerate() {
            m = m.min((a - t).abs() / lane_extent[k % 3]);
        }
    }
    m
}
