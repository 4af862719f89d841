//! Curve and box similarity kernels.

use crate::error::{Error, Result};
use crate::scene::{BoxCorners, Centerline, Point3, LANE_POINTS};

/// Monotone pairing of indices of two curves, from `(0, 0)` to `(n-1, k-1)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Coupling {
    pub pairs: Vec<(usize, usize)>,
}

impl Coupling {
    /// The distance of the most dissimilar coupled pair.
    pub fn norm(&self, a: &[Point3], b: &[Point3]) -> f64 {
        self.pairs
            .iter()
            .map(|&(i, j)| a[i].distance(&b[j]))
            .fold(0.0, f64::max)
    }

    pub fn is_valid(&self, n: usize, k: usize) -> bool {
        let (Some(&first), Some(&last)) = (self.pairs.first(), self.pairs.last()) else {
            return false;
        };
        first == (0, 0)
            && last == (n - 1, k - 1)
            && self.pairs.windows(2).all(|w| {
                let (da, db) = (w[1].0 as isize - w[0].0 as isize, w[1].1 as isize - w[0].1 as isize);
                (0..=1).contains(&da) && (0..=1).contains(&db) && da + db > 0
            })
    }
}

/// Resamples a polyline to `n` points at equal arc-length spacing.
/// Endpoints are copied exactly.
pub fn resample(line: &Centerline, n: usize) -> Result<Centerline> {
    if line.points.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "resample needs at least 2 points, got {}",
            line.points.len()
        )));
    }
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "resample target must be at least 2 points, got {n}"
        )));
    }
    let pts = &line.points;
    let mut cumulative = Vec::with_capacity(pts.len());
    cumulative.push(0.0);
    for w in pts.windows(2) {
        let last = *cumulative.last().unwrap();
        cumulative.push(last + w[0].distance(&w[1]));
    }
    let total = *cumulative.last().unwrap();

    let mut out = Vec::with_capacity(n);
    out.push(pts[0]);
    let mut seg = 0;
    for k in 1..n - 1 {
        let s = total * k as f64 / (n - 1) as f64;
        while seg + 2 < pts.len() && cumulative[seg + 1] < s {
            seg += 1;
        }
        let len = cumulative[seg + 1] - cumulative[seg];
        let t = if len > 0.0 {
            ((s - cumulative[seg]) / len).clamp(0.0, 1.0)
        } else {
            0.0
        };
        out.push(pts[seg].lerp(&pts[seg + 1], t));
    }
    out.push(*pts.last().unwrap());
    Ok(Centerline::with_confidence(out, line.confidence))
}

/// Resamples to the standard 11 points.
pub fn resample_standard(line: &Centerline) -> Result<Centerline> {
    resample(line, LANE_POINTS)
}

fn check_nonempty(a: &Centerline, b: &Centerline, op: &str) -> Result<()> {
    if a.points.is_empty() || b.points.is_empty() {
        return Err(Error::InvalidInput(format!("{op} needs non-empty curves")));
    }
    Ok(())
}

/// Discrete Fréchet distance (O(n·k) dynamic program).
pub fn frechet_distance(a: &Centerline, b: &Centerline) -> Result<f64> {
    check_nonempty(a, b, "frechet_distance")?;
    Ok(frechet_table(&a.points, &b.points)[a.len() * b.len() - 1])
}

fn frechet_table(a: &[Point3], b: &[Point3]) -> Vec<f64> {
    let (n, k) = (a.len(), b.len());
    let mut ca = vec![0.0f64; n * k];
    for i in 0..n {
        for j in 0..k {
            let d = a[i].distance(&b[j]);
            let prev = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => ca[j - 1],
                (_, 0) => ca[(i - 1) * k],
                _ => ca[(i - 1) * k + j]
                    .min(ca[(i - 1) * k + j - 1])
                    .min(ca[i * k + j - 1]),
            };
            ca[i * k + j] = d.max(prev);
        }
    }
    ca
}

/// Fréchet distance together with a coupling that attains it.
pub fn frechet_coupling(a: &Centerline, b: &Centerline) -> Result<(f64, Coupling)> {
    check_nonempty(a, b, "frechet_coupling")?;
    let (n, k) = (a.len(), b.len());
    let ca = frechet_table(&a.points, &b.points);
    let mut pairs = vec![(n - 1, k - 1)];
    let (mut i, mut j) = (n - 1, k - 1);
    while (i, j) != (0, 0) {
        let candidates = [
            (i > 0 && j > 0).then(|| (i - 1, j - 1)),
            (i > 0).then(|| (i - 1, j)),
            (j > 0).then(|| (i, j - 1)),
        ];
        let (ni, nj) = candidates
            .into_iter()
            .flatten()
            .min_by(|x, y| ca[x.0 * k + x.1].total_cmp(&ca[y.0 * k + y.1]))
            .unwrap();
        i = ni;
        j = nj;
        pairs.push((i, j));
    }
    pairs.reverse();
    Ok((ca[n * k - 1], Coupling { pairs }))
}

/// Symmetric Chamfer distance: the average of the two directed mean
/// nearest-neighbour distances. Insensitive to curve direction.
pub fn chamfer_distance(a: &Centerline, b: &Centerline) -> Result<f64> {
    check_nonempty(a, b, "chamfer_distance")?;
    let directed = |from: &[Point3], to: &[Point3]| {
        from.iter()
            .map(|p| to.iter().map(|q| p.distance(q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / from.len() as f64
    };
    Ok(0.5 * (directed(&a.points, &b.points) + directed(&b.points, &a.points)))
}

fn intersection(a: &BoxCorners, b: &BoxCorners) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    w * h
}

fn degenerate(a: &BoxCorners, b: &BoxCorners, op: &str) -> bool {
    if a.area() <= 0.0 || b.area() <= 0.0 {
        log::warn!("{op}: degenerate box ({a:?}, {b:?}), returning 0");
        return true;
    }
    false
}

pub fn iou_2d(a: &BoxCorners, b: &BoxCorners) -> f64 {
    if degenerate(a, b, "iou_2d") {
        return 0.0;
    }
    let inter = intersection(a, b);
    inter / (a.area() + b.area() - inter)
}

/// Generalized IoU: `IoU - (hull - union) / hull`.
pub fn giou_2d(a: &BoxCorners, b: &BoxCorners) -> f64 {
    if degenerate(a, b, "giou_2d") {
        return 0.0;
    }
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    let hull = (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1));
    inter / union - (hull - union) / hull
}

/// GIoU and its gradient with respect to the corners `(x1, y1, x2, y2)` of `a`.
/// Valid away from ties between corresponding edges.
pub fn giou_2d_grad(a: &BoxCorners, b: &BoxCorners) -> (f64, [f64; 4]) {
    if degenerate(a, b, "giou_2d_grad") {
        return (0.0, [0.0; 4]);
    }
    let aw = a.x2 - a.x1;
    let ah = a.y2 - a.y1;
    let d_area = [-ah, -aw, ah, aw];

    let iw_raw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih_raw = a.y2.min(b.y2) - a.y1.max(b.y1);
    let iw = iw_raw.max(0.0);
    let ih = ih_raw.max(0.0);
    let inter = iw * ih;
    // d(iw)/d(a.x1, a.x2), d(ih)/d(a.y1, a.y2)
    let diw = if iw_raw > 0.0 {
        [
            if a.x1 > b.x1 { -1.0 } else { 0.0 },
            if a.x2 < b.x2 { 1.0 } else { 0.0 },
        ]
    } else {
        [0.0, 0.0]
    };
    let dih = if ih_raw > 0.0 {
        [
            if a.y1 > b.y1 { -1.0 } else { 0.0 },
            if a.y2 < b.y2 { 1.0 } else { 0.0 },
        ]
    } else {
        [0.0, 0.0]
    };
    let d_inter = [diw[0] * ih, dih[0] * iw, diw[1] * ih, dih[1] * iw];

    let union = a.area() + b.area() - inter;
    let d_union: [f64; 4] = std::array::from_fn(|k| d_area[k] - d_inter[k]);

    let hw = a.x2.max(b.x2) - a.x1.min(b.x1);
    let hh = a.y2.max(b.y2) - a.y1.min(b.y1);
    let hull = hw * hh;
    let dhw = [
        if a.x1 < b.x1 { -1.0 } else { 0.0 },
        if a.x2 > b.x2 { 1.0 } else { 0.0 },
    ];
    let dhh = [
        if a.y1 < b.y1 { -1.0 } else { 0.0 },
        if a.y2 > b.y2 { 1.0 } else { 0.0 },
    ];
    let d_hull = [dhw[0] * hh, dhh[0] * hw, dhw[1] * hh, dhh[1] * hw];

    // giou = inter/union - 1 + union/hull
    let g = inter / union - 1.0 + union / hull;
    let grad = std::array::from_fn(|k| {
        (d_inter[k] * union - inter * d_union[k]) / (union * union)
            + (d_union[k] * hull - union * d_hull[k]) / (hull * hull)
    });
    (g, grad)
}
