//! Scene data model: centerlines, traffic elements and the two topology graphs.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

pub const NUM_ATTRIBUTES: usize = 13;
pub const LANE_POINTS: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn distance(&self, other: &Point3) -> f64 {
        let (dx, dy, dz) = (self.x - other.x, self.y - other.y, self.z - other.z);
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    pub fn lerp(&self, other: &Point3, t: f64) -> Point3 {
        Point3::new(
            self.x + (other.x - self.x) * t,
            self.y + (other.y - self.y) * t,
            self.z + (other.z - self.z) * t,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl From<[f64; 3]> for Point3 {
    fn from([x, y, z]: [f64; 3]) -> Self {
        Point3::new(x, y, z)
    }
}

/// A directed lane centerline: the first point is where the lane starts.
#[derive(Debug, Clone, PartialEq)]
pub struct Centerline {
    pub points: Vec<Point3>,
    pub confidence: f64,
}

impl Centerline {
    pub fn new(points: Vec<Point3>) -> Self {
        Self {
            points,
            confidence: 1.0,
        }
    }

    pub fn with_confidence(points: Vec<Point3>, confidence: f64) -> Self {
        Self { points, confidence }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn start(&self) -> Option<&Point3> {
        self.points.first()
    }

    pub fn end(&self) -> Option<&Point3> {
        self.points.last()
    }

    pub fn reversed(&self) -> Self {
        let mut points = self.points.clone();
        points.reverse();
        Self {
            points,
            confidence: self.confidence,
        }
    }

    pub fn arc_length(&self) -> f64 {
        self.points.windows(2).map(|w| w[0].distance(&w[1])).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Attribute {
    Unknown = 0,
    Red,
    Green,
    Yellow,
    GoStraight,
    TurnLeft,
    TurnRight,
    NoLeftTurn,
    NoRightTurn,
    UTurn,
    NoUTurn,
    SlightLeft,
    SlightRight,
}

impl Attribute {
    pub const ALL: [Attribute; NUM_ATTRIBUTES] = [
        Attribute::Unknown,
        Attribute::Red,
        Attribute::Green,
        Attribute::Yellow,
        Attribute::GoStraight,
        Attribute::TurnLeft,
        Attribute::TurnRight,
        Attribute::NoLeftTurn,
        Attribute::NoRightTurn,
        Attribute::UTurn,
        Attribute::NoUTurn,
        Attribute::SlightLeft,
        Attribute::SlightRight,
    ];

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Unknown => "unknown",
            Attribute::Red => "red",
            Attribute::Green => "green",
            Attribute::Yellow => "yellow",
            Attribute::GoStraight => "go_straight",
            Attribute::TurnLeft => "turn_left",
            Attribute::TurnRight => "turn_right",
            Attribute::NoLeftTurn => "no_left_turn",
            Attribute::NoRightTurn => "no_right_turn",
            Attribute::UTurn => "u_turn",
            Attribute::NoUTurn => "no_u_turn",
            Attribute::SlightLeft => "slight_left",
            Attribute::SlightRight => "slight_right",
        }
    }

    /// Index of the largest score; the lowest index wins ties.
    pub fn argmax(scores: &[f64]) -> Option<Self> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &s) in scores.iter().enumerate() {
            if best.map_or(true, |(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        best.and_then(|(i, _)| Self::from_index(i))
    }

    pub fn one_hot(self) -> [f64; NUM_ATTRIBUTES] {
        let mut v = [0.0; NUM_ATTRIBUTES];
        v[self.index()] = 1.0;
        v
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Axis-aligned box in front-view image pixels, corner form.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxCorners {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxCorners {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn is_finite(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Normalized `(cx, cy, w, h)` relative to the image size.
    pub fn to_cxcywh(&self, image: ImageSize) -> [f64; 4] {
        [
            (self.x1 + self.x2) * 0.5 / image.width,
            (self.y1 + self.y2) * 0.5 / image.height,
            self.width() / image.width,
            self.height() / image.height,
        ]
    }

    pub fn from_cxcywh(c: [f64; 4], image: ImageSize) -> Self {
        let [cx, cy, w, h] = c;
        Self::new(
            (cx - 0.5 * w) * image.width,
            (cy - 0.5 * h) * image.height,
            (cx + 0.5 * w) * image.width,
            (cy + 0.5 * h) * image.height,
        )
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: f64,
    pub height: f64,
}

impl Default for ImageSize {
    fn default() -> Self {
        Self {
            width: 1550.0,
            height: 1550.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficElement {
    pub bbox: BoxCorners,
    pub attribute: Attribute,
    pub class_scores: [f64; NUM_ATTRIBUTES],
}

impl TrafficElement {
    /// Ground-truth element with one-hot scores.
    pub fn new(bbox: BoxCorners, attribute: Attribute) -> Self {
        Self {
            bbox,
            attribute,
            class_scores: attribute.one_hot(),
        }
    }

    /// Predicted element; the attribute is the argmax of `class_scores`.
    pub fn with_scores(bbox: BoxCorners, class_scores: [f64; NUM_ATTRIBUTES]) -> Self {
        let attribute = Attribute::argmax(&class_scores).unwrap_or(Attribute::Unknown);
        Self {
            bbox,
            attribute,
            class_scores,
        }
    }

    pub fn confidence(&self) -> f64 {
        self.class_scores[self.attribute.index()]
    }
}

/// One frame: lane and traffic-element vertices plus the lane→lane and
/// lane→element adjacencies. Entry `(i, j)` of `adj_ll` means the end of lane
/// `i` connects to the start of lane `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameGraph {
    pub frame_id: String,
    pub lanes: Vec<Centerline>,
    pub tes: Vec<TrafficElement>,
    pub adj_ll: DenseMatrix,
    pub adj_lt: DenseMatrix,
    pub image_size: ImageSize,
}

impl FrameGraph {
    pub fn new(
        frame_id: impl Into<String>,
        lanes: Vec<Centerline>,
        tes: Vec<TrafficElement>,
        adj_ll: DenseMatrix,
        adj_lt: DenseMatrix,
    ) -> Self {
        Self {
            frame_id: frame_id.into(),
            lanes,
            tes,
            adj_ll,
            adj_lt,
            image_size: ImageSize::default(),
        }
    }

    /// Frame with no edges.
    pub fn unconnected(
        frame_id: impl Into<String>,
        lanes: Vec<Centerline>,
        tes: Vec<TrafficElement>,
    ) -> Self {
        let (nl, nt) = (lanes.len(), tes.len());
        Self::new(
            frame_id,
            lanes,
            tes,
            DenseMatrix::zeros(nl, nl),
            DenseMatrix::zeros(nl, nt),
        )
    }

    pub fn successors(&self, lane: usize) -> Vec<usize> {
        (0..self.lanes.len())
            .filter(|&j| self.adj_ll.get(lane, j) > 0.5)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BevRange {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    /// Height span used only to normalize regression targets.
    #[serde(default = "default_z_min")]
    pub z_min: f64,
    #[serde(default = "default_z_max")]
    pub z_max: f64,
}

fn default_z_min() -> f64 {
    -5.0
}

fn default_z_max() -> f64 {
    5.0
}

impl Default for BevRange {
    fn default() -> Self {
        Self {
            x_min: -50.0,
            x_max: 50.0,
            y_min: -25.0,
            y_max: 25.0,
            z_min: default_z_min(),
            z_max: default_z_max(),
        }
    }
}

impl BevRange {
    pub fn contains_xy(&self, p: &Point3) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    pub fn normalize(&self, p: &Point3) -> [f64; 3] {
        [
            (p.x - self.x_min) / (self.x_max - self.x_min),
            (p.y - self.y_min) / (self.y_max - self.y_min),
            (p.z - self.z_min) / (self.z_max - self.z_min),
        ]
    }

    pub fn denormalize(&self, u: [f64; 3]) -> Point3 {
        Point3::new(
            self.x_min + u[0] * (self.x_max - self.x_min),
            self.y_min + u[1] * (self.y_max - self.y_min),
            self.z_min + u[2] * (self.z_max - self.z_min),
        )
    }

    pub fn extent(&self) -> [f64; 3] {
        [
            self.x_max - self.x_min,
            self.y_max - self.y_min,
            self.z_max - self.z_min,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApInterpolation {
    #[default]
    AllPoint,
    ElevenPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMethod {
    #[default]
    Hungarian,
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub frechet_thresholds: Vec<f64>,
    pub chamfer_thresholds: Vec<f64>,
    pub te_iou_threshold: f64,
    pub edge_confidence_threshold: f64,
    pub bev_range: BevRange,
    pub ap_interpolation: ApInterpolation,
    pub projection: ProjectionMethod,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            frechet_thresholds: vec![1.0, 2.0, 3.0],
            chamfer_thresholds: vec![0.5, 1.0, 1.5],
            te_iou_threshold: 0.75,
            edge_confidence_threshold: 0.5,
            bev_range: BevRange::default(),
            ap_interpolation: ApInterpolation::default(),
            projection: ProjectionMethod::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("frechet_thresholds", &self.frechet_thresholds),
            ("chamfer_thresholds", &self.chamfer_thresholds),
        ] {
            if t.is_empty() {
                return Err(Error::Config(format!("{name} must not be empty")));
            }
            if t.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::Config(format!("{name} must be strictly positive")));
            }
            if t.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(format!("{name} must be sorted ascending")));
            }
        }
        if !(self.te_iou_threshold > 0.0 && self.te_iou_threshold <= 1.0) {
            return Err(Error::Config("te_iou_threshold must be in (0, 1]".into()));
        }
        if !(self.edge_confidence_threshold > 0.0 && self.edge_confidence_threshold < 1.0) {
            return Err(Error::Config(
                "edge_confidence_threshold must be in (0, 1)".into(),
            ));
        }
        let r = &self.bev_range;
        if !(r.x_min < r.x_max && r.y_min < r.y_max && r.z_min < r.z_max) {
            return Err(Error::Config("bev_range bounds must be increasing".into()));
        }
        Ok(())
    }

    /// Scale applied to the lane match thresholds for a given ground-truth lane.
    /// Identity for now: no distance-based relaxation is defined.
    pub fn threshold_relaxation(&self, _lane: &Centerline) -> f64 {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Shape {
        field: String,
        expected: String,
        got: String,
    },
    NonFinite {
        field: String,
    },
    TooFewPoints {
        lane: usize,
        count: usize,
    },
    Confidence {
        field: String,
        value: f64,
    },
    BoxOrder {
        te: usize,
    },
    AttributeMismatch {
        te: usize,
    },
    AdjacencyValue {
        field: String,
        row: usize,
        col: usize,
        value: f64,
    },
    Range {
        lane: usize,
        point: usize,
        x: f64,
        y: f64,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Shape {
                field,
                expected,
                got,
            } => write!(f, "{field}: expected shape {expected}, got {got}"),
            Violation::NonFinite { field } => write!(f, "{field}: non-finite value"),
            Violation::TooFewPoints { lane, count } => {
                write!(f, "lanes[{lane}]: {count} points, need at least 2")
            }
            Violation::Confidence { field, value } => {
                write!(f, "{field}: confidence {value} outside [0, 1]")
            }
            Violation::BoxOrder { te } => write!(f, "traffic_elements[{te}]: box corners not ordered"),
            Violation::AttributeMismatch { te } => {
                write!(f, "traffic_elements[{te}]: attribute is not the argmax of scores")
            }
            Violation::AdjacencyValue {
                field,
                row,
                col,
                value,
            } => write!(f, "{field}[{row}][{col}] = {value} is not allowed"),
            Violation::Range { lane, point, x, y } => {
                write!(f, "lanes[{lane}][{point}] = ({x}, {y}) outside BEV range")
            }
        }
    }
}

/// Checks a ground-truth frame: structural invariants, {0,1} adjacencies and BEV range.
pub fn validate_frame(frame: &FrameGraph, config: &EvalConfig) -> Vec<Violation> {
    let mut out = structural_violations(frame);
    for (field, m) in [("adj_ll", &frame.adj_ll), ("adj_lt", &frame.adj_lt)] {
        for r in 0..m.rows() {
            for c in 0..m.cols() {
                let v = m.get(r, c);
                if v.is_finite() && v != 0.0 && v != 1.0 {
                    out.push(Violation::AdjacencyValue {
                        field: field.into(),
                        row: r,
                        col: c,
                        value: v,
                    });
                }
            }
        }
    }
    for (li, lane) in frame.lanes.iter().enumerate() {
        for (pi, p) in lane.points.iter().enumerate() {
            if p.is_finite() && !config.bev_range.contains_xy(p) {
                out.push(Violation::Range {
                    lane: li,
                    point: pi,
                    x: p.x,
                    y: p.y,
                });
            }
        }
    }
    out
}

/// Checks a predicted frame: structural invariants and confidences in [0, 1].
pub fn validate_prediction(frame: &FrameGraph) -> Vec<Violation> {
    let mut out = structural_violations(frame);
    for (field, m) in [("adj_ll", &frame.adj_ll), ("adj_lt", &frame.adj_lt)] {
        for r in 0..m.rows() {
            for c in 0..m.cols() {
                let v = m.get(r, c);
                if v.is_finite() && !(0.0..=1.0).contains(&v) {
                    out.push(Violation::AdjacencyValue {
                        field: field.into(),
                        row: r,
                        col: c,
                        value: v,
                    });
                }
            }
        }
    }
    out
}

fn structural_violations(frame: &FrameGraph) -> Vec<Violation> {
    let mut out = Vec::new();
    let (nl, nt) = (frame.lanes.len(), frame.tes.len());
    for (field, m, rows, cols) in [
        ("adj_ll", &frame.adj_ll, nl, nl),
        ("adj_lt", &frame.adj_lt, nl, nt),
    ] {
        if m.shape() != (rows, cols) {
            out.push(Violation::Shape {
                field: field.into(),
                expected: format!("{rows}x{cols}"),
                got: format!("{}x{}", m.rows(), m.cols()),
            });
        }
        if !m.is_finite() {
            out.push(Violation::NonFinite { field: field.into() });
        }
    }
    for (li, lane) in frame.lanes.iter().enumerate() {
        if lane.points.len() < 2 {
            out.push(Violation::TooFewPoints {
                lane: li,
                count: lane.points.len(),
            });
        }
        if lane.points.iter().any(|p| !p.is_finite()) {
            out.push(Violation::NonFinite {
                field: format!("lanes[{li}]"),
            });
        }
        if !(0.0..=1.0).contains(&lane.confidence) {
            out.push(Violation::Confidence {
                field: format!("lanes[{li}].confidence"),
                value: lane.confidence,
            });
        }
    }
    for (ti, te) in frame.tes.iter().enumerate() {
        if !te.bbox.is_finite() || te.class_scores.iter().any(|s| !s.is_finite()) {
            out.push(Violation::NonFinite {
                field: format!("traffic_elements[{ti}]"),
            });
            continue;
        }
        if !te.bbox.is_valid() {
            out.push(Violation::BoxOrder { te: ti });
        }
        if let Some(&bad) = te.class_scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            out.push(Violation::Confidence {
                field: format!("traffic_elements[{ti}].scores"),
                value: bad,
            });
        }
        if Attribute::argmax(&te.class_scores) != Some(te.attribute) {
            out.push(Violation::AttributeMismatch { te: ti });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight(y: f64) -> Centerline {
        Centerline::new((0..11).map(|i| Point3::new(i as f64, y, 0.0)).collect())
    }

    fn two_lane() -> FrameGraph {
        let mut f = FrameGraph::unconnected(
            "f0",
            vec![straight(0.0), straight(3.5)],
            vec![TrafficElement::new(
                BoxCorners::new(10.0, 10.0, 40.0, 60.0),
                Attribute::Green,
            )],
        );
        f.adj_ll.set(0, 1, 1.0);
        f.adj_lt.set(1, 0, 1.0);
        f
    }

    #[test]
    fn well_formed_frame_has_no_violations() {
        assert!(validate_frame(&two_lane(), &EvalConfig::default()).is_empty());
    }

    #[test]
    fn asymmetric_adjacency_is_kept() {
        let f = two_lane();
        assert_eq!(f.adj_ll.get(0, 1), 1.0);
        assert_eq!(f.adj_ll.get(1, 0), 0.0);
        assert_eq!(f.successors(0), vec![1]);
        assert!(f.successors(1).is_empty());
    }

    #[test]
    fn wrong_adjacency_shape_is_reported() {
        let mut f = two_lane();
        f.adj_ll = DenseMatrix::zeros(3, 2);
        let v = validate_frame(&f, &EvalConfig::default());
        assert_eq!(v.len(), 1);
        assert!(matches!(&v[0], Violation::Shape { field, .. } if field == "adj_ll"));
    }

    #[test]
    fn point_outside_range_is_reported() {
        let mut f = two_lane();
        f.lanes[0].points[3].x = 60.0;
        let v = validate_frame(&f, &EvalConfig::default());
        assert_eq!(
            v,
            vec![Violation::Range {
                lane: 0,
                point: 3,
                x: 60.0,
                y: 0.0
            }]
        );
    }

    #[test]
    fn gt_adjacency_must_be_binary() {
        let mut f = two_lane();
        f.adj_lt.set(0, 0, 0.7);
        assert!(matches!(
            validate_frame(&f, &EvalConfig::default())[..],
            [Violation::AdjacencyValue { .. }]
        ));
        assert!(validate_prediction(&f).is_empty());
    }

    #[test]
    fn bad_boxes_and_scores() {
        let mut f = two_lane();
        f.tes[0].bbox = BoxCorners::new(5.0, 5.0, 5.0, 9.0);
        f.tes[0].class_scores[0] = 2.0;
        let v = validate_prediction(&f);
        assert!(v.contains(&Violation::BoxOrder { te: 0 }));
        assert!(v.iter().any(|x| matches!(x, Violation::Confidence { .. })));
        assert!(v.contains(&Violation::AttributeMismatch { te: 0 }));
    }

    #[test]
    fn cxcywh_conversion() {
        let img = ImageSize::default();
        let b = BoxCorners::from_cxcywh([0.5, 0.5, 0.2, 0.1], img);
        for (a, e) in b.to_array().iter().zip([620.0, 697.5, 930.0, 852.5]) {
            assert!((a - e).abs() < 1e-9, "{a} vs {e}");
        }
        let c = b.to_cxcywh(img);
        for (a, e) in c.iter().zip([0.5, 0.5, 0.2, 0.1]) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn bev_midpoint_is_origin() {
        let p = BevRange::default().denormalize([0.5, 0.5, 0.5]);
        assert_eq!(p, Point3::new(0.0, 0.0, 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(EvalConfig::default().validate().is_ok());
        let mut c = EvalConfig::default();
        c.frechet_thresholds = vec![2.0, 1.0];
        assert!(c.validate().is_err());
        let mut c = EvalConfig::default();
        c.edge_confidence_threshold = 1.0;
        assert!(c.validate().is_err());
    }
}
