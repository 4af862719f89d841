//! Central finite-difference verification of the analytic gradients of the
//! full single-layer chain (SGNN layer → heads → loss).
//!
//! Instances whose evaluation point lies too close to a non-differentiable
//! point (ReLU input, L1 residual, box-edge tie) are redrawn from a derived
//! seed; the number of draws is reported.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{HeadConfig, HeadParams};
use crate::loss::{compute_matching, FrameMatching, LayerPrediction, LossConfig};
use crate::matrix::DenseMatrix;
use crate::model::{chain_grad, chain_loss, ChainInput};
use crate::nn::{Activation, Params};
use crate::rng::Rng;
use crate::scene::{Attribute, BoxCorners, Centerline, FrameGraph, Point3, TrafficElement, LANE_POINTS, NUM_ATTRIBUTES};
use crate::sgnn::{sgnn_layer, LayerState, SgnnConfig, SgnnParams, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub eps: f64,
    pub tolerance: f64,
    /// Lower bound of the relative-error denominator. The effective floor
    /// also covers the round-off resolution of the central difference, see
    /// [`fd_resolution`].
    pub floor: f64,
    /// Minimum distance from any kink for an instance to be accepted.
    pub min_margin: f64,
    pub max_draws: usize,
    pub lane_dim: usize,
    pub te_dim: usize,
    pub hidden: usize,
    pub topo_dim: usize,
    pub num_lanes: usize,
    pub num_tes: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            min_margin: 1e-3,
            max_draws: 1000,
            lane_dim: 6,
            te_dim: 5,
            hidden: 7,
            topo_dim: 4,
            num_lanes: 4,
            num_tes: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub name: String,
    pub len: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub variant: Variant,
    pub draws: usize,
    pub kink_margin: f64,
    pub loss: f64,
    pub blocks: Vec<BlockReport>,
    pub max_rel_error: f64,
    /// Same comparison with no floor at all (`0/0` counts as 0).
    pub raw_max_rel_error: f64,
    /// Absolute discrepancy attributable to round-off alone.
    pub fd_resolution: f64,
    /// Gradients reported for the fed-back adjacencies and scores are all zero.
    pub state_grads_zero: bool,
    pub passed: bool,
}

struct Instance {
    sgnn: SgnnParams,
    heads: HeadParams,
    q_l: DenseMatrix,
    q_t: DenseMatrix,
    state: LayerState,
    gt: FrameGraph,
    matching: FrameMatching,
}

fn random_matrix(rng: &mut Rng, r: usize, c: usize, lo: f64, hi: f64) -> DenseMatrix {
    DenseMatrix::from_fn(r, c, |_, _| rng.uniform_in(lo, hi))
}

/// Small ground-truth frame: gently curving lanes and boxes in the upper
/// half of the image, with random edges.
fn random_frame(rng: &mut Rng, n_l: usize, n_t: usize) -> FrameGraph {
    let lanes = (0..n_l)
        .map(|_| {
            let y0 = rng.uniform_in(-20.0, 20.0);
            let x0 = rng.uniform_in(-45.0, 0.0);
            let curve = rng.uniform_in(-0.05, 0.05);
            Centerline::new(
                (0..LANE_POINTS)
                    .map(|i| {
                        let x = x0 + 4.0 * i as f64;
                        Point3::new(x, y0 + curve * (x - x0).powi(2) / 4.0, rng.uniform_in(-0.5, 0.5))
                    })
                    .collect(),
            )
        })
        .collect();
    let tes = (0..n_t)
        .map(|_| {
            let x1 = rng.uniform_in(100.0, 1300.0);
            let y1 = rng.uniform_in(100.0, 600.0);
            let attr = Attribute::ALL[rng.int_in(0, NUM_ATTRIBUTES - 1)];
            TrafficElement::new(BoxCorners::new(x1, y1, x1 + rng.uniform_in(30.0, 120.0), y1 + rng.uniform_in(30.0, 120.0)), attr)
        })
        .collect();
    let adj_ll = DenseMatrix::from_fn(n_l, n_l, |i, j| if i != j && rng.bernoulli(0.3) { 1.0 } else { 0.0 });
    let adj_lt = DenseMatrix::from_fn(n_l, n_t, |_, _| if rng.bernoulli(0.4) { 1.0 } else { 0.0 });
    FrameGraph::new("gradcheck", lanes, tes, adj_ll, adj_lt)
}

fn draw(seed: u64, draw: u64, variant: Variant, cfg: &GradcheckConfig, loss: &LossConfig) -> Result<(Instance, f64)> {
    let mut rng = Rng::stream(seed, draw);
    let sc = SgnnConfig {
        lane_dim: cfg.lane_dim,
        te_dim: cfg.te_dim,
        embed_hidden: cfg.hidden,
        variant,
        ..SgnnConfig::default()
    };
    let hc = HeadConfig {
        lane_dim: cfg.lane_dim,
        te_dim: cfg.te_dim,
        hidden: Some(cfg.hidden),
        topo_dim: cfg.topo_dim,
        ..HeadConfig::default()
    };
    let sgnn = SgnnParams::init(&sc, &mut rng);
    let heads = HeadParams::init(&hc, &mut rng);
    let (n_l, n_t) = (cfg.num_lanes, cfg.num_tes);
    let q_l = random_matrix(&mut rng, n_l, cfg.lane_dim, -1.0, 1.0);
    let q_t = random_matrix(&mut rng, n_t, cfg.te_dim, -1.0, 1.0);
    let state = LayerState {
        a_ll: random_matrix(&mut rng, n_l, n_l, 0.0, 1.0),
        a_lt: random_matrix(&mut rng, n_l, n_t, 0.0, 1.0),
        s_t: random_matrix(&mut rng, NUM_ATTRIBUTES, n_t, 0.0, 1.0),
        layer_index: 1,
    };
    let gt = random_frame(&mut rng, n_l.saturating_sub(1).max(1), n_t.saturating_sub(1).max(1));
    let (out, _) = sgnn_layer(&q_l, &q_t, &state, &sgnn, variant, Activation::Relu)?;
    let pred = crate::model::Model {
        layers: vec![sgnn.clone()],
        heads: heads.clone(),
        variant,
        activation: Activation::Relu,
    }
    .predict(&out)?;
    let matching = compute_matching(&pred.det, &gt, &loss.weights)?;
    let inst = Instance { sgnn, heads, q_l, q_t, state, gt, matching };
    let margin = chain_grad(&inst.sgnn, &inst.heads, variant, Activation::Relu, &inst.input(loss))?.kink_margin;
    let _: &LayerPrediction = &pred;
    Ok((inst, margin))
}

impl Instance {
    fn input<'a>(&'a self, loss: &'a LossConfig) -> ChainInput<'a> {
        ChainInput { q_l: &self.q_l, q_t: &self.q_t, state: &self.state, gt: &self.gt, matching: &self.matching, loss }
    }
}

/// Tensor names and lengths in visiting order.
fn layout<P: Params>(p: &P) -> Vec<(String, usize)> {
    let mut v = Vec::new();
    p.visit("", &mut |n, _, d| v.push((n, d.len())));
    v
}

fn flat<P: Params>(p: &P) -> Vec<f64> {
    let mut v = Vec::new();
    p.visit("", &mut |_, _, d| v.extend_from_slice(d));
    v
}

fn bump<P: Params>(p: &mut P, index: usize, delta: f64) {
    let mut offset = 0;
    p.visit_mut("", &mut |_, _, d| {
        if index >= offset && index < offset + d.len() {
            d[index - offset] += delta;
        }
        offset += d.len();
    });
}

/// Round-off resolution of a central difference of a loss of magnitude
/// `loss`: both evaluations carry a few ulps of rounding error, which the
/// division by `2ε` magnifies. 16 ulps of the loss is a generous bound
/// (observed: about one).
pub fn fd_resolution(loss: f64, eps: f64) -> f64 {
    16.0 * f64::EPSILON * loss.abs().max(1.0) / eps
}

struct Accumulator<'a> {
    cfg: &'a GradcheckConfig,
    floor: f64,
    raw_max: f64,
    blocks: BTreeMap<String, BlockReport>,
}

impl Accumulator<'_> {
    fn record(&mut self, block: &str, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        if abs > 0.0 {
            self.raw_max = self.raw_max.max(abs / scale);
        }
        let rel = abs / scale.max(self.floor);
        let e = self.blocks.entry(block.to_string()).or_insert_with(|| BlockReport {
            name: block.to_string(),
            len: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        });
        e.len += 1;
        e.max_rel_error = e.max_rel_error.max(rel);
        e.max_abs_error = e.max_abs_error.max(abs);
    }
}

fn check_params<P: Params>(acc: &mut Accumulator, prefix: &str, params: &P, analytic: &P, eval: impl Fn(&P) -> Result<f64>) -> Result<()> {
    let names = layout(params);
    let an = flat(analytic);
    let eps = acc.cfg.eps;
    let mut probe = params.clone();
    let mut k = 0;
    for (name, len) in names {
        for _ in 0..len {
            bump(&mut probe, k, eps);
            let fp = eval(&probe)?;
            bump(&mut probe, k, -2.0 * eps);
            let fm = eval(&probe)?;
            bump(&mut probe, k, eps);
            acc.record(&format!("{prefix}.{name}"), an[k], (fp - fm) / (2.0 * eps));
            k += 1;
        }
    }
    Ok(())
}

fn check_matrix(acc: &mut Accumulator, name: &str, m: &DenseMatrix, analytic: &DenseMatrix, eval: impl Fn(&DenseMatrix) -> Result<f64>) -> Result<()> {
    let eps = acc.cfg.eps;
    let mut probe = m.clone();
    for k in 0..m.data().len() {
        probe.data_mut()[k] += eps;
        let fp = eval(&probe)?;
        probe.data_mut()[k] -= 2.0 * eps;
        let fm = eval(&probe)?;
        probe.data_mut()[k] += eps;
        acc.record(name, analytic.data()[k], (fp - fm) / (2.0 * eps));
    }
    Ok(())
}

/// Checks every parameter block and both query inputs for one seed.
pub fn gradcheck(seed: u64, variant: Variant, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if !(cfg.eps > 0.0) || !(cfg.tolerance > 0.0) {
        return Err(Error::Config("eps and tolerance must be positive".into()));
    }
    let loss = LossConfig::default();
    let mut accepted = None;
    for d in 0..cfg.max_draws as u64 {
        let (inst, margin) = draw(seed, d, variant, cfg, &loss)?;
        if margin > cfg.min_margin {
            accepted = Some((inst, margin, d as usize + 1));
            break;
        }
    }
    let Some((inst, margin, draws)) = accepted else {
        return Err(Error::Generation(format!("no instance with kink margin above {} in {} draws", cfg.min_margin, cfg.max_draws)));
    };
    let act = Activation::Relu;
    let input = inst.input(&loss);
    let grads = chain_grad(&inst.sgnn, &inst.heads, variant, act, &input)?;
    let fd_res = fd_resolution(grads.loss.total, cfg.eps);
    // An entry whose discrepancy is within the round-off resolution cannot
    // be resolved by the difference quotient, so the denominator floor is
    // raised to resolution / tolerance.
    let mut acc = Accumulator { cfg, floor: cfg.floor.max(fd_res / cfg.tolerance), raw_max: 0.0, blocks: BTreeMap::new() };

    check_params(&mut acc, "sgnn", &inst.sgnn, &grads.sgnn, |p| chain_loss(p, &inst.heads, variant, act, &input))?;
    check_params(&mut acc, "heads", &inst.heads, &grads.heads, |h| chain_loss(&inst.sgnn, h, variant, act, &input))?;
    check_matrix(&mut acc, "input.q_l", &inst.q_l, &grads.q_l, |q| {
        chain_loss(&inst.sgnn, &inst.heads, variant, act, &ChainInput { q_l: q, ..inst.input(&loss) })
    })?;
    check_matrix(&mut acc, "input.q_t", &inst.q_t, &grads.q_t, |q| {
        chain_loss(&inst.sgnn, &inst.heads, variant, act, &ChainInput { q_t: q, ..inst.input(&loss) })
    })?;

    let state_grads_zero = grads.a_ll.max_abs() == 0.0 && grads.a_lt.max_abs() == 0.0 && grads.s_t.max_abs() == 0.0;
    let raw_max_rel_error = acc.raw_max;
    let blocks: Vec<BlockReport> = acc.blocks.into_values().collect();
    let max_rel_error = blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        seed,
        variant,
        draws,
        kink_margin: margin,
        loss: grads.loss.total,
        passed: max_rel_error < cfg.tolerance && state_grads_zero,
        blocks,
        max_rel_error,
        raw_max_rel_error,
        fd_resolution: fd_res,
        state_grads_zero,
    })
}
