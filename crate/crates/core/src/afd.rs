//! Voxel classification and adaptive feature diffusion on the BEV map.
//!
//! Each category group gets a binary classifier over active BEV voxels.
//! Voxels predicted positive for a group are dilated by that group's kernel;
//! the union of all dilations is filled with zero features where nothing was
//! active before.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::boxes::Box3D;
use crate::error::{Error, Result};
use crate::nn::{ConvKind, ConvUnit, ConvUnitCache, Ctx, Tensor};
use crate::sparse::{
    conv_flops, pointwise_linear, pointwise_linear_backward, ConvSpec, Coord, Grid, ParamTensor,
    ParamView, Parameters, Rulebook, SparseTensor,
};
use crate::voxel::{bev_center, VoxelGridSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    pub name: String,
    pub classes: Vec<usize>,
    /// Average object size in BEV voxels; unused for the background group.
    pub size: f64,
    /// Configured odd diffusion kernel.
    pub kernel: usize,
    pub background: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryGroups {
    groups: Vec<Group>,
    class_to_group: Vec<usize>,
    background: usize,
}

impl CategoryGroups {
    /// Foreground groups must partition `0..num_classes`; exactly one group is
    /// background and owns no classes.
    pub fn new(groups: Vec<Group>, num_classes: usize) -> Result<Self> {
        let bg: Vec<usize> = (0..groups.len()).filter(|&i| groups[i].background).collect();
        if bg.len() != 1 {
            return Err(Error::Config(format!(
                "exactly one background group required, found {}",
                bg.len()
            )));
        }
        let mut class_to_group = vec![usize::MAX; num_classes];
        for (i, g) in groups.iter().enumerate() {
            if g.kernel % 2 == 0 || g.kernel == 0 {
                return Err(Error::Config(format!("group {}: kernel {} is not odd", g.name, g.kernel)));
            }
            if g.background {
                if !g.classes.is_empty() {
                    return Err(Error::Config("background group cannot own classes".into()));
                }
                continue;
            }
            if !(g.size > 0.0 && g.size.is_finite()) {
                return Err(Error::Config(format!("group {}: size must be positive", g.name)));
            }
            for &c in &g.classes {
                if c >= num_classes {
                    return Err(Error::UnknownClass(c));
                }
                if class_to_group[c] != usize::MAX {
                    return Err(Error::Config(format!("class {c} appears in two groups")));
                }
                class_to_group[c] = i;
            }
        }
        if let Some(c) = class_to_group.iter().position(|&g| g == usize::MAX) {
            return Err(Error::Config(format!("class {c} belongs to no group")));
        }
        Ok(CategoryGroups {
            groups,
            class_to_group,
            background: bg[0],
        })
    }

    /// Vehicle / pedestrian+cyclist / background with kernels 7, 3, 3.
    /// Sizes are in voxels of `bev_voxel` meters.
    pub fn three_class(bev_voxel: f64) -> Self {
        let g = |name: &str, classes: Vec<usize>, meters: f64, kernel: usize, background: bool| Group {
            name: name.into(),
            classes,
            size: meters / bev_voxel,
            kernel,
            background,
        };
        CategoryGroups::new(
            vec![
                g("vehicle", vec![0], 4.5, 7, false),
                g("small", vec![1, 2], 1.2, 3, false),
                g("background", vec![], 1.0, 3, true),
            ],
            3,
        )
        .expect("static groups are valid")
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_to_group.len()
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn background(&self) -> usize {
        self.background
    }

    pub fn group_of_class(&self, class_id: usize) -> Result<usize> {
        self.class_to_group
            .get(class_id)
            .copied()
            .ok_or(Error::UnknownClass(class_id))
    }

    /// Effective kernels: the configured ones, or `alpha * S_i` for
    /// foreground groups when `alpha` is given. `alpha = 0` disables all
    /// diffusion, background included.
    pub fn kernels(&self, alpha: Option<f64>) -> Vec<usize> {
        self.groups
            .iter()
            .map(|g| match alpha {
                None => g.kernel,
                Some(a) if a == 0.0 => 1,
                Some(_) if g.background => g.kernel,
                Some(a) => diffusion_kernel_size(g.size, a),
            })
            .collect()
    }
}

/// Nearest odd integer to `x`; ties between two odd integers round up.
pub fn round_to_nearest_odd(x: f64) -> usize {
    let k = 2.0 * ((x - 1.0) / 2.0).round() + 1.0;
    if k < 1.0 {
        1
    } else {
        k as usize
    }
}

/// Foreground kernel `alpha * S` rounded to the nearest odd size, at least 3;
/// `alpha = 0` gives 1.
pub fn diffusion_kernel_size(size: f64, alpha: f64) -> usize {
    if alpha == 0.0 {
        return 1;
    }
    round_to_nearest_odd(alpha * size).max(3)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AfdMode {
    Afd,
    UfdPb,
    UfdPf,
    None,
}

impl FromStr for AfdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "afd" => Ok(AfdMode::Afd),
            "ufd_pb" => Ok(AfdMode::UfdPb),
            "ufd_pf" => Ok(AfdMode::UfdPf),
            "none" => Ok(AfdMode::None),
            other => Err(Error::Config(format!("unknown diffusion mode `{other}`"))),
        }
    }
}

impl fmt::Display for AfdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AfdMode::Afd => "afd",
            AfdMode::UfdPb => "ufd_pb",
            AfdMode::UfdPf => "ufd_pf",
            AfdMode::None => "none",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AfdConfig {
    pub threshold: f64,
    /// When set, foreground kernels come from `alpha * S_i`.
    pub alpha: Option<f64>,
    pub mode: AfdMode,
    /// Kernel of the uniform diffusion baselines.
    pub ufd_kernel: usize,
}

impl Default for AfdConfig {
    fn default() -> Self {
        AfdConfig {
            threshold: 0.4,
            alpha: None,
            mode: AfdMode::Afd,
            ufd_kernel: 7,
        }
    }
}

impl AfdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} not in (0, 1)", self.threshold)));
        }
        if let Some(a) = self.alpha {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::Config(format!("alpha {a} must be non-negative")));
            }
        }
        if self.ufd_kernel % 2 == 0 {
            return Err(Error::Config("uniform diffusion kernel must be odd".into()));
        }
        Ok(())
    }
}

/// Dense bitmap over a 2D grid, one plane per batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridMask {
    grid: Grid,
    batches: usize,
    bits: Vec<bool>,
}

impl GridMask {
    pub fn new(grid: Grid, batches: usize) -> Self {
        let d = grid.dims();
        GridMask {
            grid,
            batches,
            bits: vec![false; batches * d[0] * d[1]],
        }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn batches(&self) -> usize {
        self.batches
    }

    fn index(&self, c: &Coord) -> Option<usize> {
        let d = self.grid.dims();
        if c.batch < 0 || c.batch as usize >= self.batches || !self.grid.contains(c) {
            return None;
        }
        Some((c.batch as usize * d[1] + c.y() as usize) * d[0] + c.x() as usize)
    }

    pub fn get(&self, c: &Coord) -> bool {
        self.index(c).is_some_and(|i| self.bits[i])
    }

    /// Sets an in-bounds site; out-of-bounds sites are ignored.
    pub fn set(&mut self, c: &Coord) {
        if let Some(i) = self.index(c) {
            self.bits[i] = true;
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Set sites in canonical order.
    pub fn coords(&self) -> Vec<Coord> {
        let d = self.grid.dims();
        let mut out = Vec::new();
        for b in 0..self.batches {
            for y in 0..d[1] {
                for x in 0..d[0] {
                    if self.bits[(b * d[1] + y) * d[0] + x] {
                        out.push(Coord::new2(b as i32, x as i32, y as i32));
                    }
                }
            }
        }
        out
    }

    pub fn is_subset_of(&self, other: &GridMask) -> bool {
        self.bits.len() == other.bits.len() && self.bits.iter().zip(&other.bits).all(|(a, b)| !a || *b)
    }
}

fn batch_count(coords: &[Coord]) -> usize {
    coords.iter().map(|c| c.batch as usize + 1).max().unwrap_or(1)
}

/// Dilation of the masked sites by a `k x k` square, clipped to the grid.
pub fn dilate_mask(coords: &[Coord], mask: &[bool], k: usize, grid: Grid) -> GridMask {
    let mut out = GridMask::new(grid, batch_count(coords));
    let r = (k / 2) as i32;
    for (c, _) in coords.iter().zip(mask).filter(|(_, &m)| m) {
        for dy in -r..=r {
            for dx in -r..=r {
                out.set(&Coord::new2(c.batch, c.x() + dx, c.y() + dy));
            }
        }
    }
    out
}

pub fn union_masks(masks: &[GridMask]) -> Result<GridMask> {
    let first = masks
        .first()
        .ok_or_else(|| Error::ShapeMismatch("union of zero masks".into()))?;
    let batches = masks.iter().map(|m| m.batches).max().unwrap_or(1);
    let mut out = GridMask::new(first.grid, batches);
    for m in masks {
        if m.grid != first.grid {
            return Err(Error::ShapeMismatch("masks over different grids".into()));
        }
        for (i, &b) in m.bits.iter().enumerate() {
            if b {
                out.bits[i] = true;
            }
        }
    }
    Ok(out)
}

/// Result of inserting zero rows at newly covered sites.
#[derive(Clone, Debug)]
pub struct Expansion {
    pub tensor: Tensor,
    pub is_original: Vec<bool>,
    /// Input row of each output row, if it had one.
    pub origin: Vec<Option<usize>>,
}

impl Expansion {
    /// Gradient w.r.t. the unexpanded input.
    pub fn backward(&self, grad: &[f64], n_in: usize) -> Vec<f64> {
        let c = self.tensor.channels();
        let mut g = vec![0.0; n_in * c];
        for (row, o) in self.origin.iter().enumerate() {
            if let Some(i) = o {
                g[i * c..(i + 1) * c].copy_from_slice(&grad[row * c..(row + 1) * c]);
            }
        }
        g
    }
}

/// Output sites are the input sites plus every site of `region`; original rows
/// keep their features, new rows are zero.
pub fn expand_features(t: &Tensor, region: &GridMask) -> Result<Expansion> {
    if t.ndim() != 2 || region.grid() != t.grid() {
        return Err(Error::ShapeMismatch("expansion needs a 2D tensor on the mask grid".into()));
    }
    let c = t.channels();
    let extra = region.coords();
    let (mut i, mut j) = (0, 0);
    let mut coords = Vec::with_capacity(t.len() + extra.len());
    let mut feats = Vec::with_capacity((t.len() + extra.len()) * c);
    let mut origin = Vec::new();
    let src = t.coords();
    while i < src.len() || j < extra.len() {
        let take_src = j >= extra.len() || (i < src.len() && src[i] <= extra[j]);
        if take_src {
            if j < extra.len() && src[i] == extra[j] {
                j += 1;
            }
            coords.push(src[i]);
            feats.extend_from_slice(t.row(i));
            origin.push(Some(i));
            i += 1;
        } else {
            coords.push(extra[j]);
            feats.extend(std::iter::repeat_n(0.0, c));
            origin.push(None);
            j += 1;
        }
    }
    let is_original = origin.iter().map(Option::is_some).collect();
    Ok(Expansion {
        tensor: SparseTensor::from_canonical(t.grid(), coords, feats, c),
        is_original,
        origin,
    })
}

/// `T[j][i] = 1` iff BEV voxel `j`'s center lies in a box of group `i`; the
/// background target is 1 iff the voxel lies in no foreground box.
pub fn build_group_targets(
    boxes: &[Box3D],
    coords: &[Coord],
    bev: &VoxelGridSpec,
    groups: &CategoryGroups,
) -> Result<Vec<bool>> {
    let g = groups.len();
    let owner: Vec<usize> = boxes
        .iter()
        .map(|b| groups.group_of_class(b.class_id))
        .collect::<Result<_>>()?;
    let mut t = vec![false; coords.len() * g];
    for (j, c) in coords.iter().enumerate() {
        let p = bev_center(c, bev);
        let row = &mut t[j * g..(j + 1) * g];
        for (b, &gi) in boxes.iter().zip(&owner) {
            if !row[gi] && b.contains_bev(p) {
                row[gi] = true;
            }
        }
        row[groups.background()] = !(0..g).any(|i| i != groups.background() && row[i]);
    }
    Ok(t)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `M[j] = sigmoid(logit_j) >= t`.
pub fn threshold_mask(logits: &[f64], t: f64) -> Vec<bool> {
    logits.iter().map(|&x| sigmoid(x) >= t).collect()
}

/// Per-group masks from `N x G` logits. Voxels positive for no foreground
/// group join the background mask.
pub fn group_masks(logits: &[f64], groups: &CategoryGroups, t: f64) -> Vec<Vec<bool>> {
    let g = groups.len();
    let n = logits.len() / g.max(1);
    let mut masks: Vec<Vec<bool>> = (0..g)
        .map(|i| threshold_mask(&(0..n).map(|j| logits[j * g + i]).collect::<Vec<_>>(), t))
        .collect();
    complete_background(&mut masks, groups);
    masks
}

/// Group masks taken from binary targets (`N x G`), for oracle diffusion.
pub fn target_masks(targets: &[bool], groups: &CategoryGroups) -> Vec<Vec<bool>> {
    let g = groups.len();
    let n = targets.len() / g.max(1);
    let mut masks: Vec<Vec<bool>> = (0..g).map(|i| (0..n).map(|j| targets[j * g + i]).collect()).collect();
    complete_background(&mut masks, groups);
    masks
}

fn complete_background(masks: &mut [Vec<bool>], groups: &CategoryGroups) {
    let bg = groups.background();
    let n = masks.first().map_or(0, Vec::len);
    for j in 0..n {
        let any_fg = (0..masks.len()).any(|i| i != bg && masks[i][j]);
        if !any_fg {
            masks[bg][j] = true;
        }
    }
}

/// Per-group dilations and their union.
#[derive(Clone, Debug)]
pub struct DiffusionRegion {
    pub kernels: Vec<usize>,
    pub masks: Vec<Vec<bool>>,
    pub regions: Vec<GridMask>,
    pub union: GridMask,
}

pub fn diffusion_region(t: &Tensor, masks: Vec<Vec<bool>>, kernels: &[usize]) -> Result<DiffusionRegion> {
    if masks.len() != kernels.len() {
        return Err(Error::ShapeMismatch("one kernel per group mask".into()));
    }
    let mut regions: Vec<GridMask> = masks
        .iter()
        .zip(kernels)
        .map(|(m, &k)| dilate_mask(t.coords(), m, k, t.grid()))
        .collect();
    if regions.is_empty() {
        regions.push(GridMask::new(t.grid(), batch_count(t.coords())));
    }
    let union = union_masks(&regions)?;
    Ok(DiffusionRegion {
        kernels: kernels.to_vec(),
        masks,
        regions,
        union,
    })
}

/// Focal loss of one sigmoid logit and its derivative.
pub fn sigmoid_focal(x: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(x);
    if positive {
        let log_p = -softplus(-x);
        let q = 1.0 - p;
        let l = -alpha * q.powf(gamma) * log_p;
        let d = alpha * q.powf(gamma) * (gamma * p * log_p - q);
        (l, d)
    } else {
        let log_q = -softplus(x);
        let l = -(1.0 - alpha) * p.powf(gamma) * log_q;
        let d = (1.0 - alpha) * p.powf(gamma) * (p - gamma * (1.0 - p) * log_q);
        (l, d)
    }
}

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

/// Sum over groups of the per-group mean focal loss; returns the gradient
/// w.r.t. the `N x G` logits.
pub fn afd_loss(logits: &[f64], targets: &[bool], g: usize) -> Result<(f64, Vec<f64>)> {
    if logits.len() != targets.len() || g == 0 || logits.len() % g != 0 {
        return Err(Error::ShapeMismatch(format!(
            "afd loss: {} logits vs {} targets over {g} groups",
            logits.len(),
            targets.len()
        )));
    }
    let n = logits.len() / g;
    let mut grad = vec![0.0; logits.len()];
    if n == 0 {
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    for i in 0..g {
        let mut s = 0.0;
        for j in 0..n {
            let k = j * g + i;
            let (l, d) = sigmoid_focal(logits[k], targets[k], FOCAL_ALPHA, FOCAL_GAMMA);
            s += l;
            grad[k] = d / n as f64;
        }
        loss += s / n as f64;
    }
    Ok((loss, grad))
}

/// Submanifold 3x3 conv, ReLU, then a pointwise projection to group logits.
#[derive(Clone, Debug)]
pub struct VoxelClassifier {
    pub conv: ConvUnit,
    pub linear: ParamTensor<f64>,
}

#[derive(Clone, Debug)]
pub struct ClassifierCache {
    conv: ConvUnitCache,
    hidden: Tensor,
}

impl VoxelClassifier {
    pub fn new<R: Rng + ?Sized>(channels: usize, groups: usize, rng: &mut R) -> Self {
        let conv = ConvUnit::new(
            "afd.cls.conv",
            ConvKind::Sparse,
            ConvSpec::submanifold(2, 3),
            channels,
            channels,
            false,
            true,
            rng,
        );
        let mut linear = ParamTensor::kaiming("afd.cls.linear", 1, channels, groups, rng);
        // prior probability 0.1 for every group
        linear.bias.iter_mut().for_each(|b| *b = -2.19);
        VoxelClassifier { conv, linear }
    }

    /// Returns `N x G` logits; `rb` is the submanifold 3x3 rulebook of `t`.
    pub fn forward(&mut self, t: &Tensor, rb: &Rulebook, ctx: &mut Ctx) -> Result<(Vec<f64>, ClassifierCache)> {
        let (hidden, conv) = self.conv.forward(t, rb, ctx)?;
        ctx.flops.record(
            "afd.cls.linear",
            conv_flops(hidden.len(), hidden.len(), self.linear.c_in, self.linear.c_out),
            hidden.len(),
        );
        let logits = pointwise_linear(&hidden, &self.linear)?.into_features();
        Ok((logits, ClassifierCache { conv, hidden }))
    }

    pub fn backward(&mut self, cache: &ClassifierCache, rb: &Rulebook, grad: &[f64]) -> Result<Vec<f64>> {
        let gh = pointwise_linear_backward(&cache.hidden, &mut self.linear, grad)?;
        self.conv.backward(&cache.conv, rb, &gh)
    }
}

impl Parameters<f64> for VoxelClassifier {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<'_, f64>)) {
        self.conv.visit_params(f);
        self.linear.visit_params(f);
    }
}
