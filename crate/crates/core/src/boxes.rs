//! Oriented 3D boxes, rotated BEV IoU and class-specific NMS.

use std::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3D {
    /// Center in meters.
    pub center: [f64; 3],
    /// `(length, width, height)` in meters; length runs along the heading.
    pub size: [f64; 3],
    /// Heading in `(-pi, pi]`.
    pub yaw: f64,
    pub class_id: usize,
    /// Detection confidence; 1 for ground truth.
    pub score: f64,
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    if yaw > -PI && yaw <= PI {
        return yaw;
    }
    let mut a = yaw.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64, class_id: usize) -> Result<Self> {
        let b = Box3D {
            center,
            size,
            yaw: normalize_yaw(yaw),
            class_id,
            score: 1.0,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.center.iter().chain(&self.size).any(|v| !v.is_finite()) || !self.yaw.is_finite() {
            return Err(Error::NonFinite {
                location: format!("box {self:?}"),
            });
        }
        if self.size.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidGrid(format!("box sizes must be positive: {:?}", self.size)));
        }
        Ok(())
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    /// BEV corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = self.size[0] / 2.0;
        let hw = self.size[1] / 2.0;
        [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]].map(|[u, v]| {
            [
                self.center[0] + u * c - v * s,
                self.center[1] + u * s + v * c,
            ]
        })
    }

    /// Whether the BEV point lies inside the footprint (boundary inclusive).
    pub fn contains_bev(&self, p: [f64; 2]) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        u.abs() <= self.size[0] / 2.0 && v.abs() <= self.size[1] / 2.0
    }

    pub fn bev_area(&self) -> f64 {
        self.size[0] * self.size[1]
    }

    pub fn bev_distance(&self, other: &Box3D) -> f64 {
        (self.center[0] - other.center[0]).hypot(self.center[1] - other.center[1])
    }
}

/// Shoelace area of a simple polygon (positive when counter-clockwise).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        s += a[0] * b[1] - a[1] * b[0];
    }
    s / 2.0
}

/// Sutherland-Hodgman clipping of `subject` by the convex counter-clockwise
/// polygon `clip`.
pub fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    let m = clip.len();
    for i in 0..m {
        if out.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % m];
        let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let input = std::mem::take(&mut out);
        let n = input.len();
        for j in 0..n {
            let p = input[j];
            let q = input[(j + 1) % n];
            let sp = side(p);
            let sq = side(q);
            if sp >= 0.0 {
                out.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                let t = sp / (sp - sq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

/// Area IoU of the rotated BEV footprints; 0 when either box is degenerate.
pub fn rotated_iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    let area_a = a.bev_area();
    let area_b = b.bev_area();
    if !(area_a > 0.0 && area_b > 0.0) {
        return 0.0;
    }
    let reach = (a.size[0].hypot(a.size[1]) + b.size[0].hypot(b.size[1])) / 2.0;
    if a.bev_distance(b) > reach {
        return 0.0;
    }
    let inter = polygon_area(&clip_polygon(&a.bev_corners(), &b.bev_corners())).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NmsConfig {
    /// IoU threshold per class id.
    pub iou_thresholds: Vec<f64>,
    pub score_threshold: f64,
    pub max_detections: usize,
}

impl NmsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::Config(format!(
                "NMS IoU thresholds must lie in (0, 1): {:?}",
                self.iou_thresholds
            )));
        }
        if !(0.0..1.0).contains(&self.score_threshold) || self.max_detections == 0 {
            return Err(Error::Config("invalid NMS score threshold or detection cap".into()));
        }
        Ok(())
    }

    pub fn threshold(&self, class_id: usize) -> Result<f64> {
        self.iou_thresholds
            .get(class_id)
            .copied()
            .ok_or(Error::UnknownClass(class_id))
    }
}

impl Default for NmsConfig {
    fn default() -> Self {
        NmsConfig {
            iou_thresholds: vec![0.75, 0.6, 0.55],
            score_threshold: 0.1,
            max_detections: 500,
        }
    }
}

/// Orders by descending score, ties by input position.
pub(crate) fn score_order(boxes: &[Box3D]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| boxes[j].score.total_cmp(&boxes[i].score).then(i.cmp(&j)));
    order
}

/// Greedy class-specific suppression. A box is dropped when its IoU with an
/// already kept box of the same class reaches that class's threshold.
pub fn nms(boxes: &[Box3D], cfg: &NmsConfig) -> Result<Vec<Box3D>> {
    let mut kept: Vec<Box3D> = Vec::new();
    for i in score_order(boxes) {
        let b = &boxes[i];
        let thr = cfg.threshold(b.class_id)?;
        if kept
            .iter()
            .all(|k| k.class_id != b.class_id || rotated_iou_bev(k, b) < thr)
        {
            kept.push(*b);
        }
    }
    Ok(kept)
}
