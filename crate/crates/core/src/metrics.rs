//! Detection and topology metrics: DET (lanes and traffic elements), TOP and OLS.
//!
//! Predictions are pooled across frames into one ranking per threshold (or
//! per attribute) before average precision is taken. DET matching is greedy by
//! confidence; the TOP vertex projection comes from
//! [`evaluation_projection`](crate::assignment::evaluation_projection).

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{evaluation_projection, Matching, Similarity};
use crate::error::{Error, Result};
use crate::geometry::{chamfer_distance, frechet_distance, iou_2d};
use crate::matrix::DenseMatrix;
use crate::scene::{
    ApInterpolation, Attribute, Centerline, EvalConfig, FrameGraph, ProjectionMethod,
    TrafficElement,
};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrCurve {
    /// `(confidence, is_true_positive)`, sorted by confidence descending.
    entries: Vec<(f64, bool)>,
    num_gt: usize,
}

impl PrCurve {
    /// Sorts by descending confidence; equal confidences keep their input order.
    pub fn new(mut entries: Vec<(f64, bool)>, num_gt: usize) -> Self {
        entries.sort_by(|a, b| b.0.total_cmp(&a.0));
        Self { entries, num_gt }
    }

    pub fn entries(&self) -> &[(f64, bool)] {
        &self.entries
    }

    pub fn num_gt(&self) -> usize {
        self.num_gt
    }
}

/// Area under the precision/recall curve with a monotone precision envelope.
pub fn average_precision(curve: &PrCurve, interpolation: ApInterpolation) -> f64 {
    if curve.num_gt == 0 {
        log::warn!("average_precision: no ground truth, AP defined as 0");
        return 0.0;
    }
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(curve.entries.len());
    let mut recall = Vec::with_capacity(curve.entries.len());
    for (k, &(_, is_tp)) in curve.entries.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / curve.num_gt as f64);
    }
    // envelope: max precision at any later rank
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    match interpolation {
        ApInterpolation::AllPoint => {
            let sum: f64 = curve
                .entries
                .iter()
                .zip(&precision)
                .filter(|((_, is_tp), _)| *is_tp)
                .fold(0.0, |acc, (_, p)| acc + p);
            sum / curve.num_gt as f64
        }
        ApInterpolation::ElevenPoint => {
            let mut sum = 0.0;
            for i in 0..=10 {
                let r = i as f64 / 10.0;
                let p = recall
                    .iter()
                    .position(|&x| x >= r - 1e-12)
                    .map_or(0.0, |k| precision[k]);
                sum += p;
            }
            sum / 11.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneMeasure {
    Frechet,
    Chamfer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdScore {
    pub threshold: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetResult {
    pub score: f64,
    pub per_threshold: Vec<ThresholdScore>,
}

fn check_point_counts<'a>(lanes: impl Iterator<Item = &'a Centerline>) -> Result<()> {
    let mut count = None;
    for l in lanes {
        match count {
            None => count = Some(l.len()),
            Some(c) if c != l.len() => {
                return Err(Error::InvalidInput(format!(
                    "mixed lane point counts ({c} and {}); resample first",
                    l.len()
                )))
            }
            _ => {}
        }
        if l.is_empty() {
            return Err(Error::InvalidInput("empty lane".into()));
        }
    }
    Ok(())
}

/// Order predictions by descending confidence, lowest index first on ties.
fn rank_by_confidence(conf: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..conf.len()).collect();
    order.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]).then(a.cmp(&b)));
    order
}

/// Greedy TP/FP labels for one frame: each prediction, by descending
/// confidence, takes the closest unconsumed ground truth and is a TP iff that
/// distance is within `threshold` (scaled by the relaxation hook).
fn greedy_labels(
    dist: &DenseMatrix,
    conf: &[f64],
    limits: &[f64],
) -> Vec<(f64, bool)> {
    let mut consumed = vec![false; dist.cols()];
    rank_by_confidence(conf)
        .into_iter()
        .map(|p| {
            let best = (0..dist.cols())
                .filter(|&g| !consumed[g])
                .min_by(|&a, &b| dist.get(p, a).total_cmp(&dist.get(p, b)).then(a.cmp(&b)));
            let tp = match best {
                Some(g) if dist.get(p, g) <= limits[g] => {
                    consumed[g] = true;
                    true
                }
                _ => false,
            };
            (conf[p], tp)
        })
        .collect()
}

fn lane_distances(gt: &[Centerline], pred: &[Centerline], measure: LaneMeasure) -> Result<DenseMatrix> {
    let mut m = DenseMatrix::zeros(pred.len(), gt.len());
    for (p, pl) in pred.iter().enumerate() {
        for (g, gl) in gt.iter().enumerate() {
            let d = match measure {
                LaneMeasure::Frechet => frechet_distance(pl, gl)?,
                LaneMeasure::Chamfer => chamfer_distance(pl, gl)?,
            };
            m.set(p, g, d);
        }
    }
    Ok(m)
}

/// Lane detection mAP averaged over distance thresholds. `gts[f]` and
/// `preds[f]` are the lanes of frame `f`.
pub fn det_lanes(
    gts: &[&[Centerline]],
    preds: &[&[Centerline]],
    thresholds: &[f64],
    measure: LaneMeasure,
    config: &EvalConfig,
) -> Result<DetResult> {
    if gts.len() != preds.len() {
        return Err(Error::InvalidInput(format!(
            "{} ground-truth frames vs {} prediction frames",
            gts.len(),
            preds.len()
        )));
    }
    if thresholds.is_empty() {
        return Err(Error::InvalidInput("no thresholds".into()));
    }
    check_point_counts(gts.iter().chain(preds).flat_map(|f| f.iter()))?;
    let dists: Vec<DenseMatrix> = gts
        .par_iter()
        .zip(preds.par_iter())
        .map(|(g, p)| lane_distances(g, p, measure))
        .collect::<Result<_>>()?;
    let num_gt: usize = gts.iter().map(|f| f.len()).sum();

    let per_threshold: Vec<ThresholdScore> = thresholds
        .iter()
        .map(|&t| {
            let entries: Vec<(f64, bool)> = dists
                .par_iter()
                .zip(gts.par_iter().zip(preds.par_iter()))
                .map(|(d, (g, p))| {
                    let conf: Vec<f64> = p.iter().map(|l| l.confidence).collect();
                    let limits: Vec<f64> =
                        g.iter().map(|l| t * config.threshold_relaxation(l)).collect();
                    greedy_labels(d, &conf, &limits)
                })
                .collect::<Vec<_>>()
                .concat();
            ThresholdScore {
                threshold: t,
                score: average_precision(&PrCurve::new(entries, num_gt), config.ap_interpolation),
            }
        })
        .collect();
    let score = per_threshold.iter().fold(0.0, |acc, s| acc + s.score) / per_threshold.len() as f64;
    Ok(DetResult {
        score,
        per_threshold,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeScore {
    pub ap: f64,
    pub num_gt: usize,
    pub num_pred: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetTrafficResult {
    pub score: f64,
    pub per_attribute: BTreeMap<String, AttributeScore>,
}

/// Traffic-element mAP averaged over attributes present in the ground truth.
/// A prediction competes only under its argmax attribute.
pub fn det_traffic(
    gts: &[&[TrafficElement]],
    preds: &[&[TrafficElement]],
    iou_threshold: f64,
    interpolation: ApInterpolation,
) -> Result<DetTrafficResult> {
    if gts.len() != preds.len() {
        return Err(Error::InvalidInput(format!(
            "{} ground-truth frames vs {} prediction frames",
            gts.len(),
            preds.len()
        )));
    }
    let mut per_attribute = BTreeMap::new();
    let mut present = Vec::new();
    for attr in Attribute::ALL {
        let per_frame: Vec<(Vec<(f64, bool)>, usize, usize)> = gts
            .par_iter()
            .zip(preds.par_iter())
            .map(|(g, p)| {
                let g_idx: Vec<usize> = (0..g.len()).filter(|&i| g[i].attribute == attr).collect();
                let p_idx: Vec<usize> = (0..p.len()).filter(|&i| p[i].attribute == attr).collect();
                // distance = 1 - IoU so the greedy rule picks the best overlap
                let dist = DenseMatrix::from_fn(p_idx.len(), g_idx.len(), |a, b| {
                    1.0 - iou_2d(&p[p_idx[a]].bbox, &g[g_idx[b]].bbox)
                });
                let conf: Vec<f64> = p_idx.iter().map(|&i| p[i].confidence()).collect();
                let limits = vec![1.0 - iou_threshold; g_idx.len()];
                (greedy_labels(&dist, &conf, &limits), g_idx.len(), p_idx.len())
            })
            .collect();
        let num_gt: usize = per_frame.iter().map(|x| x.1).sum();
        let num_pred: usize = per_frame.iter().map(|x| x.2).sum();
        if num_gt == 0 {
            continue;
        }
        let entries = per_frame.into_iter().flat_map(|x| x.0).collect();
        let ap = average_precision(&PrCurve::new(entries, num_gt), interpolation);
        present.push(ap);
        per_attribute.insert(
            attr.name().to_string(),
            AttributeScore {
                ap,
                num_gt,
                num_pred,
            },
        );
    }
    let score = if present.is_empty() {
        log::warn!("det_traffic: no ground-truth traffic elements, DET_t defined as 0");
        0.0
    } else {
        present.iter().fold(0.0, |acc, x| acc + x) / present.len() as f64
    };
    Ok(DetTrafficResult {
        score,
        per_attribute,
    })
}

/// Accumulated per-vertex TOP terms. The score is `sum / vertices`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TopTerms {
    pub sum: f64,
    /// Ground-truth vertices with at least one neighbour.
    pub vertices: usize,
    /// Ground-truth vertices skipped because they have no neighbours.
    pub excluded: usize,
}

impl TopTerms {
    pub fn merge(mut self, other: TopTerms) -> TopTerms {
        self.sum += other.sum;
        self.vertices += other.vertices;
        self.excluded += other.excluded;
        self
    }

    pub fn score(&self) -> f64 {
        if self.vertices == 0 {
            log::warn!("top: no ground-truth vertex has neighbours, TOP defined as 0");
            0.0
        } else {
            self.sum / self.vertices as f64
        }
    }
}

/// Per-vertex average precision of the predicted neighbour list of `v`.
fn vertex_ap(
    gt_row: &[f64],
    pred_row: Option<&[f64]>,
    col_gt_of_pred: &[Option<usize>],
    edge_threshold: f64,
) -> f64 {
    let num_neighbors = gt_row.iter().filter(|&&x| x > 0.5).count();
    let Some(pred_row) = pred_row else {
        return 0.0;
    };
    let mut ranked: Vec<usize> = (0..pred_row.len())
        .filter(|&c| pred_row[c] > edge_threshold)
        .collect();
    ranked.sort_by(|&a, &b| pred_row[b].total_cmp(&pred_row[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, c) in ranked.into_iter().enumerate() {
        let correct = col_gt_of_pred[c].is_some_and(|g| gt_row[g] > 0.5);
        if correct {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    sum / num_neighbors as f64
}

fn directed_terms(
    gt: &DenseMatrix,
    pred: &DenseMatrix,
    row_pred_of_gt: &[Option<usize>],
    col_gt_of_pred: &[Option<usize>],
    edge_threshold: f64,
) -> TopTerms {
    let mut terms = TopTerms::default();
    for r in 0..gt.rows() {
        let gt_row = gt.row(r);
        if !gt_row.iter().any(|&x| x > 0.5) {
            terms.excluded += 1;
            continue;
        }
        terms.vertices += 1;
        let pred_row = row_pred_of_gt[r].map(|p| pred.row(p));
        terms.sum += vertex_ap(gt_row, pred_row, col_gt_of_pred, edge_threshold);
    }
    terms
}

/// TOP terms for one frame and one relationship.
///
/// `gt_adj` is indexed by ground-truth vertices and `pred_adj` by predicted
/// ones; `row_projection` / `col_projection` map the two vertex sets. Every
/// ground-truth vertex on either side contributes a term over its neighbours
/// in the other direction, so both out- and in-neighbour lists are scored.
pub fn top_score(
    gt_adj: &DenseMatrix,
    pred_adj: &DenseMatrix,
    row_projection: &Matching,
    col_projection: &Matching,
    edge_threshold: f64,
) -> Result<TopTerms> {
    let (gr, gc) = gt_adj.shape();
    let (pr, pc) = pred_adj.shape();
    if !row_projection.is_consistent(pr, gr) || !col_projection.is_consistent(pc, gc) {
        return Err(Error::InvalidInput(format!(
            "projection inconsistent with graphs (gt {gr}x{gc}, pred {pr}x{pc})"
        )));
    }
    let rows_fwd = row_projection.pred_for_gt(gr);
    let cols_back = col_projection.gt_for_pred(pc);
    let out = directed_terms(gt_adj, pred_adj, &rows_fwd, &cols_back, edge_threshold);

    let cols_fwd = col_projection.pred_for_gt(gc);
    let rows_back = row_projection.gt_for_pred(pr);
    let inc = directed_terms(
        &gt_adj.transpose(),
        &pred_adj.transpose(),
        &cols_fwd,
        &rows_back,
        edge_threshold,
    );
    Ok(out.merge(inc))
}

/// `¼·[DET_l + DET_t + √TOP_ll + √TOP_lt]`.
pub fn ols(det_l: f64, det_t: f64, top_ll: f64, top_lt: f64) -> Result<f64> {
    for (name, v) in [
        ("det_l", det_l),
        ("det_t", det_t),
        ("top_ll", top_ll),
        ("top_lt", top_lt),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidInput(format!("{name} = {v} outside [0, 1]")));
        }
    }
    Ok(0.25 * (det_l + det_t + top_ll.sqrt() + top_lt.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopThresholdScore {
    pub threshold: f64,
    pub score: f64,
    pub vertices: usize,
    pub excluded_vertices: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub det_l: Vec<ThresholdScore>,
    pub det_l_chamfer: Vec<ThresholdScore>,
    pub det_t: BTreeMap<String, AttributeScore>,
    pub top_ll: Vec<TopThresholdScore>,
    pub top_lt: Vec<TopThresholdScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub frames: usize,
    pub gt_lanes: usize,
    pub pred_lanes: usize,
    pub gt_traffic_elements: usize,
    pub pred_traffic_elements: usize,
    pub ap_interpolation: ApInterpolation,
    pub projection: ProjectionMethod,
    pub edge_confidence_threshold: f64,
    pub te_iou_threshold: f64,
    /// TOP averages only over ground-truth vertices that have neighbours.
    pub top_vertex_rule: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub frame_id: String,
    pub det_l: f64,
    pub det_l_chamfer: f64,
    pub det_t: f64,
    pub top_ll: f64,
    pub top_lt: f64,
    pub ols: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub det_l: f64,
    pub det_l_chamfer: f64,
    pub det_t: f64,
    pub top_ll: f64,
    pub top_lt: f64,
    pub ols: f64,
    pub breakdown: Breakdown,
    pub metadata: ReportMetadata,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_frame: Option<Vec<FrameReport>>,
}

impl EvalReport {
    pub fn recomputed_ols(&self) -> Result<f64> {
        ols(self.det_l, self.det_t, self.top_ll, self.top_lt)
    }
}

/// Pairs frames by id; both sides must hold exactly the same ids.
pub fn align_frames<'a>(
    gt: &'a [FrameGraph],
    pred: &'a [FrameGraph],
) -> Result<Vec<(&'a FrameGraph, &'a FrameGraph)>> {
    let mut g: Vec<&FrameGraph> = gt.iter().collect();
    let mut p: Vec<&FrameGraph> = pred.iter().collect();
    g.sort_by(|a, b| a.frame_id.cmp(&b.frame_id));
    p.sort_by(|a, b| a.frame_id.cmp(&b.frame_id));
    for w in g.windows(2).chain(p.windows(2)) {
        if w[0].frame_id == w[1].frame_id {
            return Err(Error::InvalidInput(format!("duplicate frame id {}", w[0].frame_id)));
        }
    }
    if g.len() != p.len() || g.iter().zip(&p).any(|(a, b)| a.frame_id != b.frame_id) {
        let gi: Vec<&str> = g.iter().map(|f| f.frame_id.as_str()).collect();
        let pi: Vec<&str> = p.iter().map(|f| f.frame_id.as_str()).collect();
        let missing: Vec<&&str> = gi.iter().filter(|id| !pi.contains(id)).collect();
        let extra: Vec<&&str> = pi.iter().filter(|id| !gi.contains(id)).collect();
        return Err(Error::InvalidInput(format!(
            "frame id mismatch: missing predictions {missing:?}, unexpected predictions {extra:?}"
        )));
    }
    Ok(g.into_iter().zip(p).collect())
}

struct Projections {
    lanes: Vec<Matching>,
    tes: Matching,
}

fn frame_projections(gt: &FrameGraph, pred: &FrameGraph, config: &EvalConfig) -> Result<Projections> {
    let lanes = config
        .frechet_thresholds
        .iter()
        .map(|&t| {
            evaluation_projection(
                Similarity::Frechet {
                    gt: &gt.lanes,
                    preds: &pred.lanes,
                },
                t,
                config.projection,
            )
        })
        .collect::<Result<_>>()?;
    let tes = evaluation_projection(
        Similarity::Iou {
            gt: &gt.tes,
            preds: &pred.tes,
        },
        config.te_iou_threshold,
        config.projection,
    )?;
    Ok(Projections { lanes, tes })
}

/// Full evaluation across aligned frames.
pub fn evaluate(gt_frames: &[FrameGraph], pred_frames: &[FrameGraph], config: &EvalConfig) -> Result<EvalReport> {
    config.validate()?;
    let pairs = align_frames(gt_frames, pred_frames)?;
    for (g, p) in &pairs {
        for (who, f) in [("ground truth", g), ("prediction", p)] {
            if f.adj_ll.shape() != (f.lanes.len(), f.lanes.len())
                || f.adj_lt.shape() != (f.lanes.len(), f.tes.len())
            {
                return Err(Error::InvalidInput(format!(
                    "{who} frame {}: adjacency shape does not match vertex counts",
                    f.frame_id
                )));
            }
        }
    }

    let gt_lanes: Vec<&[Centerline]> = pairs.iter().map(|(g, _)| g.lanes.as_slice()).collect();
    let pred_lanes: Vec<&[Centerline]> = pairs.iter().map(|(_, p)| p.lanes.as_slice()).collect();
    let gt_tes: Vec<&[TrafficElement]> = pairs.iter().map(|(g, _)| g.tes.as_slice()).collect();
    let pred_tes: Vec<&[TrafficElement]> = pairs.iter().map(|(_, p)| p.tes.as_slice()).collect();

    let det_l = det_lanes(&gt_lanes, &pred_lanes, &config.frechet_thresholds, LaneMeasure::Frechet, config)?;
    let det_l_chamfer = det_lanes(
        &gt_lanes,
        &pred_lanes,
        &config.chamfer_thresholds,
        LaneMeasure::Chamfer,
        config,
    )?;
    let det_t = det_traffic(&gt_tes, &pred_tes, config.te_iou_threshold, config.ap_interpolation)?;

    let projections: Vec<Projections> = pairs
        .par_iter()
        .map(|(g, p)| frame_projections(g, p, config))
        .collect::<Result<_>>()?;

    let nt = config.frechet_thresholds.len();
    let mut ll_terms = vec![TopTerms::default(); nt];
    let mut lt_terms = vec![TopTerms::default(); nt];
    let frame_terms: Vec<Vec<(TopTerms, TopTerms)>> = pairs
        .par_iter()
        .zip(projections.par_iter())
        .map(|((g, p), proj)| {
            proj.lanes
                .iter()
                .map(|lane_proj| {
                    let ll = top_score(&g.adj_ll, &p.adj_ll, lane_proj, lane_proj, config.edge_confidence_threshold)?;
                    let lt = top_score(&g.adj_lt, &p.adj_lt, lane_proj, &proj.tes, config.edge_confidence_threshold)?;
                    Ok((ll, lt))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    for per_threshold in frame_terms {
        for (k, (ll, lt)) in per_threshold.into_iter().enumerate() {
            ll_terms[k] = ll_terms[k].merge(ll);
            lt_terms[k] = lt_terms[k].merge(lt);
        }
    }
    let to_scores = |terms: &[TopTerms]| -> Vec<TopThresholdScore> {
        terms
            .iter()
            .zip(&config.frechet_thresholds)
            .map(|(t, &th)| TopThresholdScore {
                threshold: th,
                score: t.score(),
                vertices: t.vertices,
                excluded_vertices: t.excluded,
            })
            .collect()
    };
    let top_ll_scores = to_scores(&ll_terms);
    let top_lt_scores = to_scores(&lt_terms);
    let mean = |s: &[TopThresholdScore]| s.iter().fold(0.0, |acc, x| acc + x.score) / s.len() as f64;
    let top_ll = mean(&top_ll_scores);
    let top_lt = mean(&top_lt_scores);

    Ok(EvalReport {
        det_l: det_l.score,
        det_l_chamfer: det_l_chamfer.score,
        det_t: det_t.score,
        top_ll,
        top_lt,
        ols: ols(det_l.score, det_t.score, top_ll, top_lt)?,
        breakdown: Breakdown {
            det_l: det_l.per_threshold,
            det_l_chamfer: det_l_chamfer.per_threshold,
            det_t: det_t.per_attribute,
            top_ll: top_ll_scores,
            top_lt: top_lt_scores,
        },
        metadata: ReportMetadata {
            frames: pairs.len(),
            gt_lanes: gt_lanes.iter().map(|f| f.len()).sum(),
            pred_lanes: pred_lanes.iter().map(|f| f.len()).sum(),
            gt_traffic_elements: gt_tes.iter().map(|f| f.len()).sum(),
            pred_traffic_elements: pred_tes.iter().map(|f| f.len()).sum(),
            ap_interpolation: config.ap_interpolation,
            projection: config.projection,
            edge_confidence_threshold: config.edge_confidence_threshold,
            te_iou_threshold: config.te_iou_threshold,
            top_vertex_rule: "vertices without ground-truth neighbours are excluded".into(),
        },
        per_frame: None,
    })
}

/// [`evaluate`] plus an independent report for every frame, in frame-id order.
pub fn evaluate_with_frames(
    gt_frames: &[FrameGraph],
    pred_frames: &[FrameGraph],
    config: &EvalConfig,
) -> Result<EvalReport> {
    let mut report = evaluate(gt_frames, pred_frames, config)?;
    let pairs = align_frames(gt_frames, pred_frames)?;
    let per_frame = pairs
        .par_iter()
        .map(|(g, p)| {
            let r = evaluate(std::slice::from_ref(*g), std::slice::from_ref(*p), config)?;
            Ok(FrameReport {
                frame_id: g.frame_id.clone(),
                det_l: r.det_l,
                det_l_chamfer: r.det_l_chamfer,
                det_t: r.det_t,
                top_ll: r.top_ll,
                top_lt: r.top_lt,
                ols: r.ols,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    report.per_frame = Some(per_frame);
    Ok(report)
}
