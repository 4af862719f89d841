//! Seeded synthetic scenes and prediction perturbations.
//!
//! Ground truth comes in two layouts. Corridor frames hold parallel, gently
//! curved lanes in both travel directions with no connections. Intersection
//! frames hold a four-arm junction at the origin. Every incoming lane feeds
//! turning connectors (cubic Béziers) that lead into outgoing lanes. An
//! incoming lane has at most 7 successors. Traffic elements are the ones seen
//! from the west approach, which is the ego view.
//!
//! `perturb` draws each noise component from its own stream, with a fixed
//! number of draws per ground-truth instance. Raising one rate therefore
//! changes only that component, and the affected set grows monotonically.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::rng::Rng;
use crate::scene::{
    Attribute, BevRange, BoxCorners, Centerline, FrameGraph, ImageSize, Point3, TrafficElement, LANE_POINTS,
    NUM_ATTRIBUTES,
};

const LANE_WIDTH: f64 = 3.5;
const MARGIN: f64 = 1.0;
const MAX_SUCCESSORS: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    /// Parallel lanes on the main road, both directions together.
    pub lanes_per_frame: [usize; 2],
    /// Lanes on the crossing road of an intersection frame.
    pub cross_lanes: [usize; 2],
    pub intersection_probability: f64,
    pub te_count: [usize; 2],
    pub bev_range: BevRange,
    pub image_size: ImageSize,

    /// Per-point jitter σ in meters. Displacements are clipped to norm 2σ.
    pub point_sigma: f64,
    pub lane_drop_rate: f64,
    pub lane_add_rate: f64,
    pub te_drop_rate: f64,
    pub te_add_rate: f64,
    pub attribute_corruption_rate: f64,
    pub edge_flip_rate: f64,
    /// Confidence band for true positives and kept edges.
    pub tp_confidence: [f64; 2],
    /// Confidence band for false positives and removed edges.
    pub fp_confidence: [f64; 2],
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            lanes_per_frame: [2, 4],
            cross_lanes: [2, 4],
            intersection_probability: 0.5,
            te_count: [1, 4],
            bev_range: BevRange::default(),
            image_size: ImageSize::default(),
            point_sigma: 0.0,
            lane_drop_rate: 0.0,
            lane_add_rate: 0.0,
            te_drop_rate: 0.0,
            te_add_rate: 0.0,
            attribute_corruption_rate: 0.0,
            edge_flip_rate: 0.0,
            tp_confidence: [1.0, 1.0],
            fp_confidence: [0.05, 0.3],
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("intersection_probability", self.intersection_probability),
            ("lane_drop_rate", self.lane_drop_rate),
            ("lane_add_rate", self.lane_add_rate),
            ("te_drop_rate", self.te_drop_rate),
            ("te_add_rate", self.te_add_rate),
            ("attribute_corruption_rate", self.attribute_corruption_rate),
            ("edge_flip_rate", self.edge_flip_rate),
        ];
        for (name, v) in rates {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} must lie in [0, 1]")));
            }
        }
        if !(self.point_sigma >= 0.0 && self.point_sigma.is_finite()) {
            return Err(Error::Config(format!("point_sigma = {} must be finite and >= 0", self.point_sigma)));
        }
        for (name, [lo, hi]) in [("tp_confidence", self.tp_confidence), ("fp_confidence", self.fp_confidence)] {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(Error::Config(format!("{name} must be an ordered band inside [0, 1]")));
            }
        }
        for (name, [lo, hi]) in [
            ("lanes_per_frame", self.lanes_per_frame),
            ("cross_lanes", self.cross_lanes),
            ("te_count", self.te_count),
        ] {
            if lo > hi {
                return Err(Error::Config(format!("{name} range [{lo}, {hi}] is reversed")));
            }
        }
        Ok(())
    }

    /// The same scene layout with every noise rate at zero.
    pub fn noiseless(&self) -> Self {
        Self {
            point_sigma: 0.0,
            lane_drop_rate: 0.0,
            lane_add_rate: 0.0,
            te_drop_rate: 0.0,
            te_add_rate: 0.0,
            attribute_corruption_rate: 0.0,
            edge_flip_rate: 0.0,
            tp_confidence: [1.0, 1.0],
            ..self.clone()
        }
    }
}

// Independent random streams per component.
const TAG_LAYOUT: u64 = 1;
const TAG_DROP: u64 = 2;
const TAG_JITTER: u64 = 3;
const TAG_CONF: u64 = 4;
const TAG_ATTR: u64 = 5;
const TAG_EDGE: u64 = 6;
const TAG_ADD: u64 = 7;

fn component(seed: u64, frame_index: u64, tag: u64) -> Rng {
    Rng::stream(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15), frame_index)
}

pub fn frame_id(frame_index: u64) -> String {
    format!("{frame_index:06}")
}

fn polyline(f: impl Fn(f64) -> Point3) -> Centerline {
    Centerline::new((0..LANE_POINTS).map(|i| f(i as f64 / (LANE_POINTS - 1) as f64)).collect())
}

fn segment(a: Point3, b: Point3) -> Centerline {
    polyline(|t| a.lerp(&b, t))
}

/// Cubic Bézier from `a` heading `ha` to `b` heading `hb`.
fn connector(a: Point3, ha: [f64; 2], b: Point3, hb: [f64; 2]) -> Centerline {
    let d = a.distance(&b) / 2.0;
    let c1 = Point3::new(a.x + ha[0] * d, a.y + ha[1] * d, a.z);
    let c2 = Point3::new(b.x - hb[0] * d, b.y - hb[1] * d, b.z);
    polyline(|t| {
        let s = 1.0 - t;
        let (w0, w1, w2, w3) = (s * s * s, 3.0 * s * s * t, 3.0 * s * t * t, t * t * t);
        Point3::new(
            w0 * a.x + w1 * c1.x + w2 * c2.x + w3 * b.x,
            w0 * a.y + w1 * c1.y + w2 * c2.y + w3 * b.y,
            w0 * a.z + w1 * c1.z + w2 * c2.z + w3 * b.z,
        )
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Turn {
    Straight,
    Left,
    Right,
}

/// A directed lane end at the junction boundary.
#[derive(Debug, Clone, Copy)]
struct Port {
    lane: usize,
    point: Point3,
    heading: [f64; 2],
    /// 0 is the lane nearest the road's median.
    rank: usize,
}

struct Builder {
    lanes: Vec<Centerline>,
    edges: Vec<(usize, usize)>,
}

impl Builder {
    fn push(&mut self, line: Centerline) -> usize {
        self.lanes.push(line);
        self.lanes.len() - 1
    }
}

fn turn_of(ha: [f64; 2], hb: [f64; 2]) -> Turn {
    let cross = ha[0] * hb[1] - ha[1] * hb[0];
    if cross.abs() < 1e-9 {
        Turn::Straight
    } else if cross > 0.0 {
        Turn::Left
    } else {
        Turn::Right
    }
}

/// Governing links for traffic-element candidates.
#[derive(Debug, Default)]
struct Semantics {
    straight: Vec<usize>,
    slight_left: Vec<usize>,
    slight_right: Vec<usize>,
    left: Vec<usize>,
    right: Vec<usize>,
    approach: Vec<usize>,
    inner: Vec<usize>,
    outer: Vec<usize>,
    intersection: bool,
}

fn check_range(lanes: &[Centerline], range: &BevRange) -> Result<()> {
    for (i, l) in lanes.iter().enumerate() {
        if let Some(p) = l.points.iter().find(|p| !range.contains_xy(p)) {
            return Err(Error::Generation(format!("lane {i} leaves the BEV range at ({}, {})", p.x, p.y)));
        }
    }
    Ok(())
}

fn corridor_frame(n: usize, rng: &mut Rng, range: &BevRange) -> Result<(Builder, Semantics)> {
    let (x0, x1) = (range.x_min + MARGIN, range.x_max - MARGIN);
    let half_span = (x1 - x0) / 2.0;
    let x_mid = (x0 + x1) / 2.0;
    let n_fwd = n.div_ceil(2);
    let half_width = n_fwd as f64 * LANE_WIDTH;
    let room = (range.y_max - range.y_min) / 2.0 - MARGIN - half_width;
    if room < 0.0 {
        return Err(Error::Generation(format!("{n} lanes do not fit inside the BEV range")));
    }
    let y_mid = (range.y_min + range.y_max) / 2.0;
    let offset = rng.uniform_in(-0.25, 0.25) * room;
    let bend_room = room - offset.abs();
    let curvature = rng.uniform_in(-1.0, 1.0) * bend_room / (half_span * half_span);
    let slope = rng.uniform_in(-0.01, 0.01);
    let mut b = Builder { lanes: Vec::new(), edges: Vec::new() };
    let mut sem = Semantics::default();
    for k in 0..n {
        let forward = k < n_fwd;
        let rank = if forward { k } else { k - n_fwd };
        let lateral = (rank as f64 + 0.5) * LANE_WIDTH * if forward { -1.0 } else { 1.0 };
        let line = polyline(|t| {
            let u = if forward { t } else { 1.0 - t };
            let x = x0 + u * (x1 - x0);
            let dx = x - x_mid;
            Point3::new(x, y_mid + offset + lateral + curvature * dx * dx, slope * dx)
        });
        let id = b.push(line);
        if forward {
            sem.straight.push(id);
            sem.approach.push(id);
            if rank == 0 {
                sem.inner.push(id);
            }
            if rank + 1 == n_fwd {
                sem.outer.push(id);
            }
        }
    }
    Ok((b, sem))
}

fn intersection_frame(n_main: usize, n_cross: usize, range: &BevRange) -> Result<(Builder, Semantics)> {
    let main_fwd = n_main.div_ceil(2);
    let main_bwd = n_main / 2;
    let cross_north = n_cross.div_ceil(2).max(1);
    let cross_south = (n_cross / 2).max(1);
    let gap = main_fwd.max(main_bwd).max(cross_north).max(cross_south) as f64 * LANE_WIDTH + 3.0;
    let (xe, xw) = (range.x_max - MARGIN, range.x_min + MARGIN);
    let (yn, ys) = (range.y_max - MARGIN, range.y_min + MARGIN);
    if xe - gap < 5.0 || xw + gap > -5.0 || yn - gap < 5.0 || ys + gap > -5.0 {
        return Err(Error::Generation("BEV range too small for an intersection around the origin".into()));
    }
    let mut b = Builder { lanes: Vec::new(), edges: Vec::new() };
    let mut incoming: Vec<(Port, bool)> = Vec::new();
    let mut outgoing: Vec<Port> = Vec::new();
    let z = 0.0;
    // One arm: lanes travelling along `heading`, offset to the right of travel.
    let mut arm = |b: &mut Builder, count: usize, heading: [f64; 2], entry: f64, exit: f64, ego: bool| {
        let right = [heading[1], -heading[0]];
        for rank in 0..count {
            let lat = (rank as f64 + 0.5) * LANE_WIDTH;
            let at = |s: f64| Point3::new(heading[0] * s + right[0] * lat, heading[1] * s + right[1] * lat, z);
            let lane_in = b.push(segment(at(-entry), at(-gap)));
            incoming.push((Port { lane: lane_in, point: at(-gap), heading, rank }, ego));
            let lane_out = b.push(segment(at(gap), at(exit)));
            outgoing.push(Port { lane: lane_out, point: at(gap), heading, rank });
        }
    };
    arm(&mut b, main_fwd, [1.0, 0.0], -xw, xe, true);
    arm(&mut b, main_bwd, [-1.0, 0.0], xe, -xw, false);
    arm(&mut b, cross_north, [0.0, 1.0], -ys, yn, false);
    arm(&mut b, cross_south, [0.0, -1.0], yn, -ys, false);

    let mut sem = Semantics { intersection: true, ..Semantics::default() };
    for (port, ego) in incoming {
        let count = incoming_count(port.heading, main_fwd, main_bwd, cross_north, cross_south);
        let mut successors = 0;
        for out in &outgoing {
            if successors == MAX_SUCCESSORS {
                break;
            }
            let turn = turn_of(port.heading, out.heading);
            let reverse = port.heading[0] * out.heading[0] + port.heading[1] * out.heading[1] < -0.5;
            let allowed = match turn {
                Turn::Straight => !reverse && port.rank.abs_diff(out.rank) <= 1,
                Turn::Left => port.rank == 0,
                Turn::Right => port.rank + 1 == count,
            };
            if !allowed {
                continue;
            }
            let c = b.push(connector(port.point, port.heading, out.point, out.heading));
            b.edges.push((port.lane, c));
            b.edges.push((c, out.lane));
            successors += 1;
            if ego {
                match turn {
                    Turn::Straight if out.rank == port.rank => sem.straight.push(c),
                    Turn::Straight if out.rank < port.rank => sem.slight_left.push(c),
                    Turn::Straight => sem.slight_right.push(c),
                    Turn::Left => sem.left.push(c),
                    Turn::Right => sem.right.push(c),
                }
                sem.approach.push(c);
            }
        }
        if ego {
            if port.rank == 0 {
                sem.inner.push(port.lane);
            }
            if port.rank + 1 == count {
                sem.outer.push(port.lane);
            }
        }
    }
    Ok((b, sem))
}

fn incoming_count(heading: [f64; 2], fwd: usize, bwd: usize, north: usize, south: usize) -> usize {
    match heading {
        [h, _] if h > 0.5 => fwd,
        [h, _] if h < -0.5 => bwd,
        [_, v] if v > 0.5 => north,
        _ => south,
    }
}

fn te_candidates(sem: &Semantics, rng: &mut Rng) -> Vec<(Attribute, Vec<usize>)> {
    let mut out = vec![(Attribute::Unknown, Vec::new())];
    if !sem.straight.is_empty() {
        out.push((Attribute::GoStraight, sem.straight.clone()));
    }
    if !sem.inner.is_empty() {
        out.push((Attribute::NoUTurn, sem.inner.clone()));
    }
    if sem.intersection {
        let light = [Attribute::Red, Attribute::Green, Attribute::Yellow][rng.int_in(0, 2)];
        out.push((light, sem.approach.clone()));
        for (attr, lanes) in [
            (Attribute::TurnLeft, &sem.left),
            (Attribute::TurnRight, &sem.right),
            (Attribute::SlightLeft, &sem.slight_left),
            (Attribute::SlightRight, &sem.slight_right),
        ] {
            if !lanes.is_empty() {
                out.push((attr, lanes.clone()));
            }
        }
        if sem.left.is_empty() {
            out.push((Attribute::NoLeftTurn, sem.inner.clone()));
        }
        if sem.right.is_empty() {
            out.push((Attribute::NoRightTurn, sem.outer.clone()));
        }
    } else if !sem.inner.is_empty() {
        out.push((Attribute::NoLeftTurn, sem.inner.clone()));
    }
    out
}

/// Non-overlapping boxes, one horizontal slot each.
fn place_box(slot: usize, slots: usize, image: ImageSize, rng: &mut Rng) -> BoxCorners {
    let width = (image.width - 40.0) / slots.max(1) as f64;
    let w = rng.uniform_in(0.3, 0.8) * width.min(90.0);
    let h = rng.uniform_in(0.3, 0.8) * 90.0_f64.min(image.height / 4.0);
    let x1 = 20.0 + slot as f64 * width + rng.uniform() * (width - w);
    let y1 = rng.uniform_in(0.1, 0.5) * image.height;
    BoxCorners::new(x1, y1, x1 + w, y1 + h)
}

/// Ground-truth frame `frame_index`, deterministic in `(spec.seed, frame_index)`.
pub fn generate(spec: &SynthSpec, frame_index: u64) -> Result<FrameGraph> {
    spec.validate()?;
    if spec.lanes_per_frame[1] == 0 {
        return Err(Error::Generation("lanes_per_frame allows zero lanes".into()));
    }
    let mut rng = component(spec.seed, frame_index, TAG_LAYOUT);
    let n_main = rng.int_in(spec.lanes_per_frame[0].max(1), spec.lanes_per_frame[1]);
    let intersection = rng.bernoulli(spec.intersection_probability);
    let (builder, sem) = if intersection {
        if spec.cross_lanes[1] == 0 {
            return Err(Error::Generation("an intersection needs at least one crossing lane".into()));
        }
        let n_cross = rng.int_in(spec.cross_lanes[0].max(1), spec.cross_lanes[1]);
        intersection_frame(n_main, n_cross, &spec.bev_range)?
    } else {
        corridor_frame(n_main, &mut rng, &spec.bev_range)?
    };
    check_range(&builder.lanes, &spec.bev_range)?;

    let n_l = builder.lanes.len();
    let mut adj_ll = DenseMatrix::zeros(n_l, n_l);
    for &(i, j) in &builder.edges {
        adj_ll.set(i, j, 1.0);
    }

    let candidates = te_candidates(&sem, &mut rng);
    let n_t = rng.int_in(spec.te_count[0], spec.te_count[1]);
    let mut tes = Vec::with_capacity(n_t);
    let mut adj_lt = DenseMatrix::zeros(n_l, n_t);
    for slot in 0..n_t {
        let (attr, governed) = &candidates[rng.int_in(0, candidates.len() - 1)];
        tes.push(TrafficElement::new(place_box(slot, n_t, spec.image_size, &mut rng), *attr));
        for &l in governed {
            adj_lt.set(l, slot, 1.0);
        }
    }
    let mut frame = FrameGraph::new(frame_id(frame_index), builder.lanes, tes, adj_ll, adj_lt);
    frame.image_size = spec.image_size;
    Ok(frame)
}

fn band(rng: &mut Rng, [lo, hi]: [f64; 2]) -> f64 {
    let u = rng.uniform();
    if lo == hi {
        lo
    } else {
        lo + (hi - lo) * u
    }
}

fn jitter(rng: &mut Rng, sigma: f64) -> [f64; 3] {
    let d = [rng.normal(), rng.normal(), rng.normal()];
    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    // Clip the displacement to norm 2σ.
    let scale = if norm > 2.0 { 2.0 / norm } else { 1.0 };
    [d[0] * scale * sigma, d[1] * scale * sigma, d[2] * scale * sigma]
}

fn scored(bbox: BoxCorners, attribute: Attribute, confidence: f64) -> TrafficElement {
    let mut scores = [0.0; NUM_ATTRIBUTES];
    scores[attribute.index()] = confidence;
    TrafficElement { bbox, attribute, class_scores: scores }
}

fn random_lane(rng: &mut Rng, range: &BevRange) -> Centerline {
    let inset = |lo: f64, hi: f64, u: f64| lo + MARGIN + u * (hi - lo - 2.0 * MARGIN);
    let a = Point3::new(inset(range.x_min, range.x_max, rng.uniform()), inset(range.y_min, range.y_max, rng.uniform()), 0.0);
    let angle = rng.uniform_in(0.0, std::f64::consts::TAU);
    let len = rng.uniform_in(10.0, 30.0);
    let b = Point3::new(
        (a.x + angle.cos() * len).clamp(range.x_min + MARGIN, range.x_max - MARGIN),
        (a.y + angle.sin() * len).clamp(range.y_min + MARGIN, range.y_max - MARGIN),
        0.0,
    );
    segment(a, b)
}

/// Edge value after an optional flip. Kept and added edges take a
/// true-positive confidence. Removed edges take a low one. Untouched
/// non-edges stay at zero.
fn edge_value(truth: bool, u_flip: f64, conf_tp: f64, conf_fp: f64, rate: f64) -> f64 {
    let flipped = u_flip < rate;
    match (truth, flipped) {
        (true, false) | (false, true) => conf_tp,
        (true, true) => conf_fp,
        (false, false) => 0.0,
    }
}

/// Predicted frame derived from `gt`, deterministic in `(spec.seed, frame_index)`.
pub fn perturb(gt: &FrameGraph, spec: &SynthSpec, frame_index: u64) -> FrameGraph {
    let (n_l, n_t) = (gt.lanes.len(), gt.tes.len());
    let stream = |tag| component(spec.seed, frame_index, tag);

    let mut drop = stream(TAG_DROP);
    let keep_lane: Vec<bool> = (0..n_l).map(|_| drop.uniform() >= spec.lane_drop_rate).collect();
    let keep_te: Vec<bool> = (0..n_t).map(|_| drop.uniform() >= spec.te_drop_rate).collect();

    let mut jit = stream(TAG_JITTER);
    let mut conf = stream(TAG_CONF);
    let mut lanes = Vec::new();
    let mut lane_src = Vec::new();
    for (i, lane) in gt.lanes.iter().enumerate() {
        let points: Vec<Point3> = lane
            .points
            .iter()
            .map(|p| {
                let d = jitter(&mut jit, spec.point_sigma);
                Point3::new(p.x + d[0], p.y + d[1], p.z + d[2])
            })
            .collect();
        let c = band(&mut conf, spec.tp_confidence);
        if keep_lane[i] {
            lanes.push(Centerline::with_confidence(points, c));
            lane_src.push(Some(i));
        }
    }

    let mut attr = stream(TAG_ATTR);
    let mut tes = Vec::new();
    let mut te_src = Vec::new();
    for (j, te) in gt.tes.iter().enumerate() {
        let corrupt = attr.uniform() < spec.attribute_corruption_rate;
        let shift = attr.int_in(1, NUM_ATTRIBUTES - 1);
        let c = band(&mut conf, spec.tp_confidence);
        if keep_te[j] {
            let a = if corrupt {
                Attribute::ALL[(te.attribute.index() + shift) % NUM_ATTRIBUTES]
            } else {
                te.attribute
            };
            tes.push(scored(te.bbox, a, c));
            te_src.push(Some(j));
        }
    }

    let mut add = stream(TAG_ADD);
    for _ in 0..n_l {
        let spawn = add.uniform() < spec.lane_add_rate;
        let line = random_lane(&mut add, &spec.bev_range);
        let c = band(&mut add, spec.fp_confidence);
        if spawn {
            lanes.push(Centerline::with_confidence(line.points, c));
            lane_src.push(None);
        }
    }
    // Added elements take the right half of a doubled slot grid.
    for k in 0..n_t {
        let spawn = add.uniform() < spec.te_add_rate;
        let bbox = place_box(n_t + k, 2 * n_t, gt.image_size, &mut add);
        let a = Attribute::ALL[add.int_in(0, NUM_ATTRIBUTES - 1)];
        let c = band(&mut add, spec.fp_confidence);
        if spawn {
            tes.push(scored(bbox, a, c));
            te_src.push(None);
        }
    }

    // Edge draws cover every ground-truth pair in a fixed order.
    let mut edge = stream(TAG_EDGE);
    let mut ll = vec![0.0; n_l * n_l];
    for (i, j) in (0..n_l).flat_map(|i| (0..n_l).map(move |j| (i, j))) {
        let u = edge.uniform();
        let (tp, fp) = (band(&mut edge, spec.tp_confidence), band(&mut edge, spec.fp_confidence));
        ll[i * n_l + j] = edge_value(gt.adj_ll.get(i, j) > 0.5, u, tp, fp, spec.edge_flip_rate);
    }
    let mut lt = vec![0.0; n_l * n_t];
    for (i, j) in (0..n_l).flat_map(|i| (0..n_t).map(move |j| (i, j))) {
        let u = edge.uniform();
        let (tp, fp) = (band(&mut edge, spec.tp_confidence), band(&mut edge, spec.fp_confidence));
        lt[i * n_t + j] = edge_value(gt.adj_lt.get(i, j) > 0.5, u, tp, fp, spec.edge_flip_rate);
    }
    let adj_ll = DenseMatrix::from_fn(lanes.len(), lanes.len(), |p, q| match (lane_src[p], lane_src[q]) {
        (Some(i), Some(j)) => ll[i * n_l + j],
        _ => 0.0,
    });
    let adj_lt = DenseMatrix::from_fn(lanes.len(), tes.len(), |p, q| match (lane_src[p], te_src[q]) {
        (Some(i), Some(j)) => lt[i * n_t + j],
        _ => 0.0,
    });

    FrameGraph { frame_id: gt.frame_id.clone(), lanes, tes, adj_ll, adj_lt, image_size: gt.image_size }
}

/// Ground truth and perturbed prediction for frames `0..frames`.
pub fn generate_pair(spec: &SynthSpec, frames: u64) -> Result<(Vec<FrameGraph>, Vec<FrameGraph>)> {
    let gt = (0..frames).map(|k| generate(spec, k)).collect::<Result<Vec<_>>>()?;
    let pred = gt.iter().zip(0..frames).map(|(g, k)| perturb(g, spec, k)).collect();
    Ok((gt, pred))
}
