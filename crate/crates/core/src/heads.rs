//! Detection and topology heads on top of the refined queries.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::matrix::DenseMatrix;
use crate::nn::{join, sigmoid, Activation, Linear, Mlp, MlpCache, Params};
use crate::rng::Rng;
use crate::scene::{BevRange, BoxCorners, Centerline, ImageSize, Point3, TrafficElement, LANE_POINTS, NUM_ATTRIBUTES};

/// Output width of the lane regression head (11 points × xyz).
pub const LANE_OUTPUTS: usize = LANE_POINTS * 3;

/// Rows of the pair grid processed per work item. Fixed so that gradient
/// sums are reduced in the same order whatever the thread count.
const PAIR_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub lane_dim: usize,
    pub te_dim: usize,
    /// Hidden width of the 3-layer MLPs; `None` uses the input width.
    pub hidden: Option<usize>,
    pub topo_dim: usize,
    pub bev_range: BevRange,
    pub image_size: ImageSize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            lane_dim: 256,
            te_dim: 256,
            hidden: None,
            topo_dim: 128,
            bev_range: BevRange::default(),
            image_size: ImageSize::default(),
        }
    }
}

/// Pairwise confidence head: `sigmoid(top([a(q_a[x]), b(q_b[y])]))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TopoHead {
    pub mlp_a: Mlp,
    pub mlp_b: Mlp,
    pub mlp_top: Mlp,
}

impl TopoHead {
    pub fn new(rng: &mut Rng, dim_a: usize, dim_b: usize, hidden: usize, topo_dim: usize) -> Self {
        Self {
            mlp_a: Mlp::new(rng, &[dim_a, hidden, hidden, topo_dim], false),
            mlp_b: Mlp::new(rng, &[dim_b, hidden, hidden, topo_dim], false),
            mlp_top: Mlp::new(rng, &[2 * topo_dim, hidden, hidden, 1], false),
        }
    }
}

impl Params for TopoHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, (usize, usize), &[f64])) {
        self.mlp_a.visit(&join(prefix, "mlp_a"), f);
        self.mlp_b.visit(&join(prefix, "mlp_b"), f);
        self.mlp_top.visit(&join(prefix, "mlp_top"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, (usize, usize), &mut [f64])) {
        self.mlp_a.visit_mut(&join(prefix, "mlp_a"), f);
        self.mlp_b.visit_mut(&join(prefix, "mlp_b"), f);
        self.mlp_top.visit_mut(&join(prefix, "mlp_top"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub te_cls: Linear,
    pub te_reg: Mlp,
    pub lc_cls: Mlp,
    pub lc_reg: Mlp,
    pub topo_ll: TopoHead,
    pub topo_lt: TopoHead,
    pub bev_range: BevRange,
    pub image_size: ImageSize,
}

impl HeadParams {
    pub fn init(config: &HeadConfig, rng: &mut Rng) -> Self {
        let (fl, ft) = (config.lane_dim, config.te_dim);
        let hl = config.hidden.unwrap_or(fl);
        let ht = config.hidden.unwrap_or(ft);
        Self {
            te_cls: Linear::new(rng, ft, NUM_ATTRIBUTES, true),
            te_reg: Mlp::new(rng, &[ft, ht, ht, 4], false),
            lc_cls: Mlp::new(rng, &[fl, hl, hl, 1], true),
            lc_reg: Mlp::new(rng, &[fl, hl, hl, LANE_OUTPUTS], false),
            topo_ll: TopoHead::new(rng, fl, fl, hl, config.topo_dim),
            topo_lt: TopoHead::new(rng, fl, ft, hl, config.topo_dim),
            bev_range: config.bev_range,
            image_size: config.image_size,
        }
    }
}

impl Params for HeadParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, (usize, usize), &[f64])) {
        self.te_cls.visit(&join(prefix, "te_cls"), f);
        self.te_reg.visit(&join(prefix, "te_reg"), f);
        self.lc_cls.visit(&join(prefix, "lc_cls"), f);
        self.lc_reg.visit(&join(prefix, "lc_reg"), f);
        self.topo_ll.visit(&join(prefix, "topo_ll"), f);
        self.topo_lt.visit(&join(prefix, "topo_lt"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, (usize, usize), &mut [f64])) {
        self.te_cls.visit_mut(&join(prefix, "te_cls"), f);
        self.te_reg.visit_mut(&join(prefix, "te_reg"), f);
        self.lc_cls.visit_mut(&join(prefix, "lc_cls"), f);
        self.lc_reg.visit_mut(&join(prefix, "lc_reg"), f);
        self.topo_ll.visit_mut(&join(prefix, "topo_ll"), f);
        self.topo_lt.visit_mut(&join(prefix, "topo_lt"), f);
    }
}

// ---------------------------------------------------------------------------
// Topology head

#[derive(Debug, Clone)]
pub struct TopoCache {
    q_a: usize,
    ea: DenseMatrix,
    eb: DenseMatrix,
    cache_a: MlpCache,
    cache_b: MlpCache,
    /// `ea·W1_top`, `eb·W1_bottom`: the first layer of `mlp_top` splits over
    /// the concatenation, so each pair only needs `u[x] + v[y] + b1`.
    u: DenseMatrix,
    v: DenseMatrix,
    confidence: DenseMatrix,
    margin: f64,
}

impl TopoCache {
    pub fn confidence(&self) -> &DenseMatrix {
        &self.confidence
    }

    pub fn kink_margin(&self) -> f64 {
        self.margin.min(self.cache_a.kink_margin()).min(self.cache_b.kink_margin())
    }
}

struct PairRow {
    pre1: DenseMatrix,
    h1: DenseMatrix,
    pre2: DenseMatrix,
    h2: DenseMatrix,
    logits: Vec<f64>,
}

fn pair_row(top: &Mlp, u_row: &[f64], v: &DenseMatrix) -> Result<PairRow> {
    let l1 = &top.layers[0];
    let mut pre1 = v.clone();
    pre1.add_row_vector(u_row)?;
    if let Some(b) = &l1.bias {
        pre1.add_row_vector(b)?;
    }
    let h1 = Activation::Relu.forward(&pre1);
    let pre2 = top.layers[1].forward(&h1)?;
    let h2 = Activation::Relu.forward(&pre2);
    let logits = top.layers[2].forward(&h2)?.into_data();
    Ok(PairRow { pre1, h1, pre2, h2, logits })
}

fn check_topo(head: &TopoHead) -> Result<usize> {
    let d = head.mlp_a.output_dim();
    if head.mlp_b.output_dim() != d {
        return Err(shape_err("topology head", d, head.mlp_b.output_dim()));
    }
    if head.mlp_top.layers.len() != 3 || head.mlp_top.input_dim() != 2 * d || head.mlp_top.output_dim() != 1 {
        return Err(shape_err("mlp_top", format!("3 layers {}->1", 2 * d), format!("{} layers {}->{}", head.mlp_top.layers.len(), head.mlp_top.input_dim(), head.mlp_top.output_dim())));
    }
    Ok(d)
}

/// `N_a × N_b` pair confidences.
pub fn topology_head(q_a: &DenseMatrix, q_b: &DenseMatrix, head: &TopoHead) -> Result<DenseMatrix> {
    Ok(topology_head_cached(q_a, q_b, head)?.confidence)
}

pub fn topology_head_cached(q_a: &DenseMatrix, q_b: &DenseMatrix, head: &TopoHead) -> Result<TopoCache> {
    let d = check_topo(head)?;
    q_a.expect_shape("topology q_a", q_a.rows(), head.mlp_a.input_dim())?;
    q_b.expect_shape("topology q_b", q_b.rows(), head.mlp_b.input_dim())?;
    let (ea, cache_a) = head.mlp_a.forward_cached(q_a)?;
    let (eb, cache_b) = head.mlp_b.forward_cached(q_b)?;
    let w1 = &head.mlp_top.layers[0].weight;
    let (w_top, w_bottom) = split_rows(w1, d);
    let u = ea.matmul(&w_top)?;
    let v = eb.matmul(&w_bottom)?;
    let (n_a, n_b) = (q_a.rows(), q_b.rows());

    let chunks: Vec<Result<(Vec<f64>, f64)>> = (0..n_a)
        .collect::<Vec<_>>()
        .par_chunks(PAIR_CHUNK)
        .map(|rows| {
            let mut conf = Vec::with_capacity(rows.len() * n_b);
            let mut margin = f64::INFINITY;
            for &x in rows {
                let pr = pair_row(&head.mlp_top, u.row(x), &v)?;
                for m in [&pr.pre1, &pr.pre2] {
                    margin = m.data().iter().fold(margin, |a, b| a.min(b.abs()));
                }
                conf.extend(pr.logits.iter().map(|&l| sigmoid(l)));
            }
            Ok((conf, margin))
        })
        .collect();
    let mut data = Vec::with_capacity(n_a * n_b);
    let mut margin = f64::INFINITY;
    for c in chunks {
        let (conf, m) = c?;
        data.extend(conf);
        margin = margin.min(m);
    }
    Ok(TopoCache {
        q_a: n_a,
        ea,
        eb,
        cache_a,
        cache_b,
        u,
        v,
        confidence: DenseMatrix::from_vec(n_a, n_b, data)?,
        margin,
    })
}

fn split_rows(m: &DenseMatrix, at: usize) -> (DenseMatrix, DenseMatrix) {
    let top = DenseMatrix::from_fn(at, m.cols(), |r, c| m.get(r, c));
    let bottom = DenseMatrix::from_fn(m.rows() - at, m.cols(), |r, c| m.get(r + at, c));
    (top, bottom)
}

pub struct TopoGrads {
    pub q_a: DenseMatrix,
    pub q_b: DenseMatrix,
}

/// Backward through [`topology_head_cached`] given `dL/dlogit` per pair.
/// Pair activations are recomputed chunk by chunk instead of stored.
pub fn topology_head_backward(cache: &TopoCache, head: &TopoHead, d_logits: &DenseMatrix, grad: &mut TopoHead) -> Result<TopoGrads> {
    let d = check_topo(head)?;
    let (n_a, n_b) = (cache.q_a, cache.v.rows());
    d_logits.expect_shape("topology d_logits", n_a, n_b)?;
    let top = &head.mlp_top;
    let hidden = top.layers[0].output_dim();

    struct Partial {
        w2: DenseMatrix,
        b2: Vec<f64>,
        w3: DenseMatrix,
        b3: f64,
        b1: Vec<f64>,
        d_v: DenseMatrix,
        d_u_rows: Vec<Vec<f64>>,
    }

    let partials: Vec<Result<Partial>> = (0..n_a)
        .collect::<Vec<_>>()
        .par_chunks(PAIR_CHUNK)
        .map(|rows| {
            let mut p = Partial {
                w2: DenseMatrix::zeros(hidden, top.layers[1].output_dim()),
                b2: vec![0.0; top.layers[1].output_dim()],
                w3: DenseMatrix::zeros(top.layers[2].input_dim(), 1),
                b3: 0.0,
                b1: vec![0.0; hidden],
                d_v: DenseMatrix::zeros(n_b, hidden),
                d_u_rows: Vec::with_capacity(rows.len()),
            };
            for &x in rows {
                let pr = pair_row(top, cache.u.row(x), &cache.v)?;
                let dl = DenseMatrix::from_vec(n_b, 1, d_logits.row(x).to_vec())?;
                p.w3.add_assign(&pr.h2.t_matmul(&dl)?)?;
                p.b3 += dl.sum();
                let d_h2 = dl.matmul_t(&top.layers[2].weight)?;
                let d_pre2 = Activation::Relu.backward(&pr.pre2, &d_h2)?;
                p.w2.add_assign(&pr.h1.t_matmul(&d_pre2)?)?;
                for (g, s) in p.b2.iter_mut().zip(d_pre2.col_sums()) {
                    *g += s;
                }
                let d_h1 = d_pre2.matmul_t(&top.layers[1].weight)?;
                let d_pre1 = Activation::Relu.backward(&pr.pre1, &d_h1)?;
                let sums = d_pre1.col_sums();
                for (g, s) in p.b1.iter_mut().zip(&sums) {
                    *g += s;
                }
                p.d_v.add_assign(&d_pre1)?;
                p.d_u_rows.push(sums);
            }
            Ok(p)
        })
        .collect();

    let mut d_u = DenseMatrix::zeros(n_a, hidden);
    let mut d_v = DenseMatrix::zeros(n_b, hidden);
    let mut row = 0;
    for p in partials {
        let p = p?;
        grad.mlp_top.layers[1].weight.add_assign(&p.w2)?;
        grad.mlp_top.layers[2].weight.add_assign(&p.w3)?;
        if let Some(b) = grad.mlp_top.layers[1].bias.as_mut() {
            b.iter_mut().zip(&p.b2).for_each(|(g, s)| *g += s);
        }
        if let Some(b) = grad.mlp_top.layers[2].bias.as_mut() {
            b[0] += p.b3;
        }
        if let Some(b) = grad.mlp_top.layers[0].bias.as_mut() {
            b.iter_mut().zip(&p.b1).for_each(|(g, s)| *g += s);
        }
        d_v.add_assign(&p.d_v)?;
        for r in p.d_u_rows {
            d_u.row_mut(row).copy_from_slice(&r);
            row += 1;
        }
    }

    let (w_top, w_bottom) = split_rows(&top.layers[0].weight, d);
    let gw_top = cache.ea.t_matmul(&d_u)?;
    let gw_bottom = cache.eb.t_matmul(&d_v)?;
    let gw1 = grad.mlp_top.layers[0].weight.data_mut();
    let split = gw_top.data().len();
    for (g, s) in gw1[..split].iter_mut().zip(gw_top.data()) {
        *g += s;
    }
    for (g, s) in gw1[split..].iter_mut().zip(gw_bottom.data()) {
        *g += s;
    }
    let d_ea = d_u.matmul_t(&w_top)?;
    let d_eb = d_v.matmul_t(&w_bottom)?;
    let q_a = head.mlp_a.backward(&cache.cache_a, &d_ea, &mut grad.mlp_a)?;
    let q_b = head.mlp_b.backward(&cache.cache_b, &d_eb, &mut grad.mlp_b)?;
    Ok(TopoGrads { q_a, q_b })
}

// ---------------------------------------------------------------------------
// Detection heads

#[derive(Debug, Clone)]
pub struct DetectionOutput {
    /// `N_t × 13` attribute logits and their sigmoids.
    pub te_logits: DenseMatrix,
    pub te_scores: DenseMatrix,
    /// `N_t × 4` normalized `(cx, cy, w, h)`.
    pub te_boxes: DenseMatrix,
    pub lc_logits: Vec<f64>,
    pub lc_scores: Vec<f64>,
    /// `N_l × 33` lane points in meters, point-major `x, y, z`.
    pub lc_points: DenseMatrix,
}

impl DetectionOutput {
    pub fn lanes(&self) -> Vec<Centerline> {
        (0..self.lc_points.rows())
            .map(|i| {
                let r = self.lc_points.row(i);
                let pts = r.chunks(3).map(|c| Point3::new(c[0], c[1], c[2])).collect();
                Centerline::with_confidence(pts, self.lc_scores[i])
            })
            .collect()
    }

    pub fn traffic_elements(&self, image: ImageSize) -> Vec<TrafficElement> {
        (0..self.te_boxes.rows())
            .map(|i| {
                let b = self.te_boxes.row(i);
                let mut scores = [0.0; NUM_ATTRIBUTES];
                scores.copy_from_slice(self.te_scores.row(i));
                TrafficElement::with_scores(BoxCorners::from_cxcywh([b[0], b[1], b[2], b[3]], image), scores)
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct DetectionCache {
    q_t: DenseMatrix,
    te_reg: MlpCache,
    lc_cls: MlpCache,
    lc_reg: MlpCache,
}

impl DetectionCache {
    pub fn kink_margin(&self) -> f64 {
        self.te_reg.kink_margin().min(self.lc_cls.kink_margin()).min(self.lc_reg.kink_margin())
    }
}

/// Lane heads read the refined lane queries; TE heads read the un-embedded
/// TE queries.
pub fn detection_heads(q_l: &DenseMatrix, q_t: &DenseMatrix, params: &HeadParams) -> Result<(DetectionOutput, DetectionCache)> {
    q_l.expect_shape("detection q_l", q_l.rows(), params.lc_reg.input_dim())?;
    q_t.expect_shape("detection q_t", q_t.rows(), params.te_cls.input_dim())?;
    let te_logits = params.te_cls.forward(q_t)?;
    let te_scores = te_logits.map(sigmoid);
    let (te_raw, te_reg) = params.te_reg.forward_cached(q_t)?;
    let te_boxes = te_raw.map(sigmoid);
    let (lc_raw, lc_cls) = params.lc_cls.forward_cached(q_l)?;
    let lc_logits = lc_raw.into_data();
    let lc_scores = lc_logits.iter().map(|&l| sigmoid(l)).collect();
    let (lc_norm, lc_reg) = params.lc_reg.forward_cached(q_l)?;
    let range = params.bev_range;
    let lo = [range.x_min, range.y_min, range.z_min];
    let ext = range.extent();
    let lc_points = DenseMatrix::from_fn(lc_norm.rows(), lc_norm.cols(), |r, c| lo[c % 3] + lc_norm.get(r, c) * ext[c % 3]);
    Ok((
        DetectionOutput { te_logits, te_scores, te_boxes, lc_logits, lc_scores, lc_points },
        DetectionCache { q_t: q_t.clone(), te_reg, lc_cls, lc_reg },
    ))
}

/// Upstream gradients on the detection outputs.
#[derive(Debug, Clone)]
pub struct DetectionUpstream {
    pub te_logits: DenseMatrix,
    /// On the sigmoid (normalized cxcywh) outputs.
    pub te_boxes: DenseMatrix,
    pub lc_logits: Vec<f64>,
    /// On the lane points in meters.
    pub lc_points: DenseMatrix,
}

impl DetectionUpstream {
    pub fn zeros(n_l: usize, n_t: usize) -> Self {
        Self {
            te_logits: DenseMatrix::zeros(n_t, NUM_ATTRIBUTES),
            te_boxes: DenseMatrix::zeros(n_t, 4),
            lc_logits: vec![0.0; n_l],
            lc_points: DenseMatrix::zeros(n_l, LANE_OUTPUTS),
        }
    }
}

/// Returns `(dL/dq_l, dL/dq_t)` and accumulates parameter gradients.
pub fn detection_backward(
    cache: &DetectionCache,
    out: &DetectionOutput,
    params: &HeadParams,
    up: &DetectionUpstream,
    grad: &mut HeadParams,
) -> Result<(DenseMatrix, DenseMatrix)> {
    let mut d_q_t = params.te_cls.backward(&cache.q_t, &up.te_logits, &mut grad.te_cls)?;
    let d_te_raw = out.te_boxes.zip_map(&up.te_boxes, |s, g| g * s * (1.0 - s))?;
    d_q_t.add_assign(&params.te_reg.backward(&cache.te_reg, &d_te_raw, &mut grad.te_reg)?)?;

    let d_lc_raw = DenseMatrix::from_vec(up.lc_logits.len(), 1, up.lc_logits.clone())?;
    let mut d_q_l = params.lc_cls.backward(&cache.lc_cls, &d_lc_raw, &mut grad.lc_cls)?;
    let ext = params.bev_range.extent();
    let d_norm = DenseMatrix::from_fn(up.lc_points.rows(), up.lc_points.cols(), |r, c| up.lc_points.get(r, c) * ext[c % 3]);
    d_q_l.add_assign(&params.lc_reg.backward(&cache.lc_reg, &d_norm, &mut grad.lc_reg)?)?;
    Ok((d_q_l, d_q_t))
}
