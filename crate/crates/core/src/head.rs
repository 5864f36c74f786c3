//! Sparse center-based detection head: targets, losses and box decoding.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::afd::{sigmoid, sigmoid_focal};
use crate::boxes::{nms, normalize_yaw, Box3D, NmsConfig};
use crate::error::{Error, Result};
use crate::nn::{add_into, ConvKind, ConvUnit, ConvUnitCache, Ctx, Tensor};
use crate::sparse::{ConvSpec, Coord, ParamView, Parameters, Rulebook};
use crate::voxel::{bev_center, VoxelGridSpec};

/// `(dx, dy, z, log l, log w, log h, sin yaw, cos yaw)`.
pub const REG_DIMS: usize = 8;
/// Log-size clamp applied when decoding.
const MAX_LOG_SIZE: f64 = 5.0;
pub const MIN_OVERLAP: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeatmapMode {
    /// Positive only at the voxel containing the center, if active.
    Center,
    /// Positive at the active voxel nearest the center.
    Nearest,
    /// As `Nearest`, with each object's values scaled so its peak is 1.
    Normalized,
}

impl FromStr for HeatmapMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "center" => Ok(HeatmapMode::Center),
            "nearest" => Ok(HeatmapMode::Nearest),
            "normalized" => Ok(HeatmapMode::Normalized),
            other => Err(Error::Config(format!("unknown heatmap mode `{other}`"))),
        }
    }
}

impl fmt::Display for HeatmapMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeatmapMode::Center => "center",
            HeatmapMode::Nearest => "nearest",
            HeatmapMode::Normalized => "normalized",
        })
    }
}

/// Smallest Gaussian radius keeping IoU >= `min_overlap` for a box of
/// `h x w` cells whose corners are perturbed within the radius.
pub fn gaussian_radius(h: f64, w: f64, min_overlap: f64) -> f64 {
    let b1 = h + w;
    let c1 = w * h * (1.0 - min_overlap) / (1.0 + min_overlap);
    let r1 = (b1 + (b1 * b1 - 4.0 * c1).max(0.0).sqrt()) / 2.0;
    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - min_overlap) * w * h;
    let r2 = (b2 + (b2 * b2 - 16.0 * c2).max(0.0).sqrt()) / 2.0;
    let a3 = 4.0 * min_overlap;
    let b3 = -2.0 * min_overlap * (h + w);
    let c3 = (min_overlap - 1.0) * w * h;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).max(0.0).sqrt()) / 2.0;
    r1.min(r2).min(r3)
}

/// Radius (clamped to at least one cell) and sigma in BEV cells.
pub fn object_radius_sigma(b: &Box3D, bev: &VoxelGridSpec) -> (f64, f64) {
    let r = gaussian_radius(b.size[0] / bev.voxel_size[0], b.size[1] / bev.voxel_size[1], MIN_OVERLAP).max(1.0);
    (r, r / 3.0)
}

/// Squared BEV distance in cells between a voxel center and a point.
fn cell_dist2(p: [f64; 2], q: [f64; 2], bev: &VoxelGridSpec) -> f64 {
    let dx = (p[0] - q[0]) / bev.voxel_size[0];
    let dy = (p[1] - q[1]) / bev.voxel_size[1];
    dx * dx + dy * dy
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapTarget {
    pub num_classes: usize,
    /// `N x C` values in `[0, 1]`.
    pub values: Vec<f64>,
    /// `N x C` positive flags (designated rows).
    pub positive: Vec<bool>,
    /// Designated row per object, `None` if it has none.
    pub designated: Vec<Option<usize>>,
    /// Per-object maximum over its own values before merging.
    pub object_peak: Vec<Option<f64>>,
    /// Objects without any active voxel in their support.
    pub dropped: usize,
}

impl HeatmapTarget {
    pub fn num_positive(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }
}

/// Active rows that may carry an object's Gaussian: inside its footprint or
/// within its radius of the center.
pub fn object_support(b: &Box3D, coords: &[Coord], bev: &VoxelGridSpec) -> Vec<(usize, f64)> {
    let (r, _) = object_radius_sigma(b, bev);
    let c = [b.center[0], b.center[1]];
    coords
        .iter()
        .enumerate()
        .filter_map(|(j, co)| {
            let p = bev_center(co, bev);
            let d2 = cell_dist2(p, c, bev);
            (d2 <= r * r || b.contains_bev(p)).then_some((j, d2))
        })
        .collect()
}

pub fn build_heatmap_targets(
    boxes: &[Box3D],
    coords: &[Coord],
    bev: &VoxelGridSpec,
    mode: HeatmapMode,
    num_classes: usize,
) -> Result<HeatmapTarget> {
    let n = coords.len();
    let mut values = vec![0.0f64; n * num_classes];
    let mut positive = vec![false; n * num_classes];
    let mut designated = Vec::with_capacity(boxes.len());
    let mut object_peak = Vec::with_capacity(boxes.len());
    let mut dropped = 0;
    for b in boxes {
        if b.class_id >= num_classes {
            return Err(Error::UnknownClass(b.class_id));
        }
        let support = object_support(b, coords, bev);
        let (_, sigma) = object_radius_sigma(b, bev);
        let denom = 2.0 * sigma * sigma;
        // nearest row; ties resolved by canonical order since rows are sorted
        let nearest = support
            .iter()
            .copied()
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let row = match mode {
            HeatmapMode::Center => {
                let center_cell = bev.locate([b.center[0], b.center[1], bev.origin[2]]);
                center_cell.and_then(|idx| {
                    support
                        .iter()
                        .find(|(j, _)| coords[*j].x() == idx[0] && coords[*j].y() == idx[1])
                        .map(|(j, _)| *j)
                })
            }
            HeatmapMode::Nearest | HeatmapMode::Normalized => nearest.map(|(j, _)| j),
        };
        if nearest.is_none() && mode != HeatmapMode::Center {
            dropped += 1;
            log::debug!("object {:?} has no active voxel in its support; dropped", b.center);
            designated.push(None);
            object_peak.push(None);
            continue;
        }
        let offset = match (mode, nearest) {
            (HeatmapMode::Normalized, Some((_, d2min))) => d2min,
            _ => 0.0,
        };
        let mut peak: Option<f64> = None;
        for &(j, d2) in &support {
            let mut v = (-(d2 - offset) / denom).exp();
            if Some(j) == row {
                v = 1.0;
            }
            peak = Some(peak.map_or(v, |p: f64| p.max(v)));
            let k = j * num_classes + b.class_id;
            values[k] = values[k].max(v);
        }
        if let Some(j) = row {
            let k = j * num_classes + b.class_id;
            positive[k] = true;
            values[k] = 1.0;
        }
        designated.push(row);
        object_peak.push(peak);
    }
    Ok(HeatmapTarget {
        num_classes,
        values,
        positive,
        designated,
        object_peak,
        dropped,
    })
}

/// Encodes a box relative to the BEV cell centered at `cell`.
pub fn encode_box(b: &Box3D, cell: [f64; 2], bev: &VoxelGridSpec) -> [f64; REG_DIMS] {
    [
        (b.center[0] - cell[0]) / bev.voxel_size[0],
        (b.center[1] - cell[1]) / bev.voxel_size[1],
        b.center[2],
        b.size[0].ln(),
        b.size[1].ln(),
        b.size[2].ln(),
        b.yaw.sin(),
        b.yaw.cos(),
    ]
}

pub fn decode_box(reg: &[f64], cell: [f64; 2], bev: &VoxelGridSpec, class_id: usize, score: f64) -> Box3D {
    let size = |v: f64| v.clamp(-MAX_LOG_SIZE, MAX_LOG_SIZE).exp();
    Box3D {
        center: [
            cell[0] + reg[0] * bev.voxel_size[0],
            cell[1] + reg[1] * bev.voxel_size[1],
            reg[2],
        ],
        size: [size(reg[3]), size(reg[4]), size(reg[5])],
        yaw: normalize_yaw(reg[6].atan2(reg[7])),
        class_id,
        score,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionTarget {
    /// Row of each regression term.
    pub rows: Vec<usize>,
    /// `rows.len() x REG_DIMS`.
    pub values: Vec<f64>,
}

pub fn build_regression_targets(
    boxes: &[Box3D],
    designated: &[Option<usize>],
    coords: &[Coord],
    bev: &VoxelGridSpec,
) -> Result<RegressionTarget> {
    if boxes.len() != designated.len() {
        return Err(Error::ShapeMismatch("one designated row per box".into()));
    }
    let mut rows = Vec::new();
    let mut values = Vec::new();
    for (b, d) in boxes.iter().zip(designated) {
        if let Some(j) = *d {
            let cell = bev_center(&coords[j], bev);
            rows.push(j);
            values.extend_from_slice(&encode_box(b, cell, bev));
        }
    }
    Ok(RegressionTarget { rows, values })
}

/// Penalty-reduced focal loss over `N x C` logits, normalized by the number
/// of positives (at least one).
pub fn heatmap_loss(logits: &[f64], target: &HeatmapTarget) -> Result<(f64, Vec<f64>)> {
    if logits.len() != target.values.len() {
        return Err(Error::ShapeMismatch(format!(
            "heatmap loss: {} logits vs {} targets",
            logits.len(),
            target.values.len()
        )));
    }
    let norm = target.num_positive().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (k, &x) in logits.iter().enumerate() {
        let (l, d) = if target.positive[k] {
            sigmoid_focal(x, true, 1.0, 2.0)
        } else {
            let w = (1.0 - target.values[k]).powi(4);
            let (l, d) = sigmoid_focal(x, false, 0.0, 2.0);
            (w * l, w * d)
        };
        loss += l;
        grad[k] = d / norm;
    }
    Ok((loss / norm, grad))
}

/// Mean over regression terms of the summed absolute error.
pub fn reg_loss(reg: &[f64], target: &RegressionTarget) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; reg.len()];
    let m = target.rows.len();
    if m == 0 {
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    for (t, &row) in target.rows.iter().enumerate() {
        if (row + 1) * REG_DIMS > reg.len() {
            return Err(Error::ShapeMismatch(format!("regression row {row} out of range")));
        }
        for k in 0..REG_DIMS {
            let e = reg[row * REG_DIMS + k] - target.values[t * REG_DIMS + k];
            loss += e.abs();
            let s = if e > 0.0 {
                1.0
            } else if e < 0.0 {
                -1.0
            } else {
                0.0
            };
            grad[row * REG_DIMS + k] += s / m as f64;
        }
    }
    Ok((loss / m as f64, grad))
}

/// Rows scoring at least the threshold, best first, capped; then NMS.
pub fn decode_boxes(
    heat_logits: &[f64],
    reg: &[f64],
    coords: &[Coord],
    bev: &VoxelGridSpec,
    nms_cfg: &NmsConfig,
) -> Result<Vec<Box3D>> {
    let n = coords.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let c = heat_logits.len() / n;
    if heat_logits.len() != n * c || reg.len() != n * REG_DIMS {
        return Err(Error::ShapeMismatch("decode: output sizes disagree with rows".into()));
    }
    let candidates = score_candidates(heat_logits, c, nms_cfg);
    let boxes: Vec<Box3D> = candidates
        .into_iter()
        .map(|(j, k, s)| decode_box(&reg[j * REG_DIMS..(j + 1) * REG_DIMS], bev_center(&coords[j], bev), bev, k, s))
        .collect();
    nms(&boxes, nms_cfg)
}

/// `(row, class, score)` with score at least the threshold, sorted by
/// descending score then `(row, class)`, truncated to the detection cap.
pub fn score_candidates(heat_logits: &[f64], c: usize, cfg: &NmsConfig) -> Vec<(usize, usize, f64)> {
    let mut out: Vec<(usize, usize, f64)> = heat_logits
        .iter()
        .enumerate()
        .map(|(i, &x)| (i / c, i % c, sigmoid(x)))
        .filter(|&(_, _, s)| s >= cfg.score_threshold)
        .collect();
    out.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    out.truncate(cfg.max_detections);
    out
}

/// Submanifold conv + norm + ReLU, then a submanifold conv to the outputs.
#[derive(Clone, Debug)]
pub struct HeadBranch {
    pub conv1: ConvUnit,
    pub conv2: ConvUnit,
}

impl HeadBranch {
    fn new<R: Rng + ?Sized>(name: &str, c: usize, out: usize, rng: &mut R) -> Self {
        let spec = ConvSpec::submanifold(2, 3);
        HeadBranch {
            conv1: ConvUnit::new(&format!("{name}.conv1"), ConvKind::Sparse, spec, c, c, true, true, rng),
            conv2: ConvUnit::new(&format!("{name}.conv2"), ConvKind::Sparse, spec, c, out, false, false, rng),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Head {
    pub heatmap: HeadBranch,
    pub regression: HeadBranch,
}

#[derive(Clone, Debug)]
pub struct HeadCache {
    hm: [ConvUnitCache; 2],
    reg: [ConvUnitCache; 2],
}

#[derive(Clone, Debug)]
pub struct HeadOutput {
    /// `N x num_classes` logits.
    pub heat: Vec<f64>,
    /// `N x REG_DIMS`.
    pub reg: Vec<f64>,
}

impl Head {
    pub fn new<R: Rng + ?Sized>(channels: usize, num_classes: usize, rng: &mut R) -> Self {
        let mut heatmap = HeadBranch::new("head.heatmap", channels, num_classes, rng);
        heatmap.conv2.conv.bias.iter_mut().for_each(|b| *b = -2.19);
        let regression = HeadBranch::new("head.reg", channels, REG_DIMS, rng);
        Head { heatmap, regression }
    }

    /// `rb` is the submanifold 3x3 rulebook of `t`.
    pub fn forward(&mut self, t: &Tensor, rb: &Rulebook, ctx: &mut Ctx) -> Result<(HeadOutput, HeadCache)> {
        let (h, h1) = self.heatmap.conv1.forward(t, rb, ctx)?;
        let (heat, h2) = self.heatmap.conv2.forward(&h, rb, ctx)?;
        let (r, r1) = self.regression.conv1.forward(t, rb, ctx)?;
        let (reg, r2) = self.regression.conv2.forward(&r, rb, ctx)?;
        Ok((
            HeadOutput {
                heat: heat.into_features(),
                reg: reg.into_features(),
            },
            HeadCache {
                hm: [h1, h2],
                reg: [r1, r2],
            },
        ))
    }

    pub fn backward(&mut self, cache: &HeadCache, rb: &Rulebook, g_heat: &[f64], g_reg: &[f64]) -> Result<Vec<f64>> {
        let g = self.heatmap.conv2.backward(&cache.hm[1], rb, g_heat)?;
        let mut gx = self.heatmap.conv1.backward(&cache.hm[0], rb, &g)?;
        let g = self.regression.conv2.backward(&cache.reg[1], rb, g_reg)?;
        add_into(&mut gx, &self.regression.conv1.backward(&cache.reg[0], rb, &g)?);
        Ok(gx)
    }
}

impl Parameters<f64> for Head {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<'_, f64>)) {
        for b in [&mut self.heatmap, &mut self.regression] {
            b.conv1.visit_params(f);
            b.conv2.visit_params(f);
        }
    }
}
