use std::cmp::Ordering;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Largest accepted extent per grid axis (16 bits per packed key field).
pub const MAX_AXIS: usize = 65_535;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }
}

/// Floating point element type of sparse features.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + 'static
{
    const DTYPE: DType;

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;
}

/// Integer voxel coordinate: batch id plus spatial indices `[x, y, z]`.
/// For 2D tensors `z` is always 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Coord {
    pub batch: i32,
    pub idx: [i32; 3],
}

impl Coord {
    pub const fn new2(batch: i32, x: i32, y: i32) -> Self {
        Coord {
            batch,
            idx: [x, y, 0],
        }
    }

    pub const fn new3(batch: i32, x: i32, y: i32, z: i32) -> Self {
        Coord {
            batch,
            idx: [x, y, z],
        }
    }

    #[inline]
    pub fn x(&self) -> i32 {
        self.idx[0]
    }

    #[inline]
    pub fn y(&self) -> i32 {
        self.idx[1]
    }

    #[inline]
    pub fn z(&self) -> i32 {
        self.idx[2]
    }

    /// Packs batch and spatial indices into one key, 16 bits each.
    /// Key order equals canonical row order `(batch, z, y, x)`.
    #[inline]
    pub fn key(&self) -> u64 {
        ((self.batch as u64) << 48)
            | ((self.idx[2] as u64) << 32)
            | ((self.idx[1] as u64) << 16)
            | (self.idx[0] as u64)
    }

    #[inline]
    pub fn from_key(key: u64) -> Self {
        Coord {
            batch: ((key >> 48) & 0xffff) as i32,
            idx: [
                (key & 0xffff) as i32,
                ((key >> 16) & 0xffff) as i32,
                ((key >> 32) & 0xffff) as i32,
            ],
        }
    }

    pub(crate) fn to_vec(self, ndim: usize) -> Vec<i64> {
        let mut v = vec![self.batch as i64];
        v.extend(self.idx[..ndim].iter().map(|&i| i as i64));
        v
    }
}

impl PartialOrd for Coord {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Coord {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.batch, self.idx[2], self.idx[1], self.idx[0]).cmp(&(
            other.batch,
            other.idx[2],
            other.idx[1],
            other.idx[0],
        ))
    }
}

/// Spatial extent of a sparse tensor. 2D grids keep `dims[2] == 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Grid {
    ndim: usize,
    dims: [usize; 3],
}

impl Grid {
    pub fn new2(x: usize, y: usize) -> Result<Self> {
        Self::new(2, [x, y, 1])
    }

    pub fn new3(x: usize, y: usize, z: usize) -> Result<Self> {
        Self::new(3, [x, y, z])
    }

    pub fn new(ndim: usize, dims: [usize; 3]) -> Result<Self> {
        if ndim != 2 && ndim != 3 {
            return Err(Error::InvalidGrid(format!("ndim must be 2 or 3, got {ndim}")));
        }
        if ndim == 2 && dims[2] != 1 {
            return Err(Error::InvalidGrid("2D grid must have unit z extent".into()));
        }
        for &d in &dims {
            if d == 0 || d > MAX_AXIS {
                return Err(Error::InvalidGrid(format!(
                    "axis extent {d} outside [1, {MAX_AXIS}]"
                )));
            }
        }
        Ok(Grid { ndim, dims })
    }

    #[inline]
    pub fn ndim(&self) -> usize {
        self.ndim
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn volume(&self) -> usize {
        self.dims.iter().product()
    }

    #[inline]
    pub fn contains_idx(&self, idx: [i32; 3]) -> bool {
        (0..3).all(|a| idx[a] >= 0 && (idx[a] as usize) < self.dims[a])
    }

    #[inline]
    pub fn contains(&self, c: &Coord) -> bool {
        c.batch >= 0 && (c.batch as usize) <= MAX_AXIS && self.contains_idx(c.idx)
    }

    /// The 2D grid obtained by dropping the z axis.
    pub fn bev(&self) -> Grid {
        Grid {
            ndim: 2,
            dims: [self.dims[0], self.dims[1], 1],
        }
    }
}

/// Integer voxel coordinates plus a dense row-major feature matrix.
///
/// Rows are always stored in canonical coordinate order, so two tensors
/// over the same coordinate set have identical row layouts.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseTensor<T> {
    grid: Grid,
    coords: Vec<Coord>,
    features: Vec<T>,
    channels: usize,
}

impl<T: Real> SparseTensor<T> {
    /// Validates the rows and sorts them into canonical order.
    pub fn new(grid: Grid, coords: Vec<Coord>, features: Vec<T>, channels: usize) -> Result<Self> {
        if features.len() != coords.len() * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} coords with {} channels need {} features, got {}",
                coords.len(),
                channels,
                coords.len() * channels,
                features.len()
            )));
        }
        for c in &coords {
            if !grid.contains(c) || (grid.ndim == 2 && c.idx[2] != 0) {
                return Err(Error::OutOfBounds {
                    coord: c.to_vec(grid.ndim),
                    dims: grid.dims[..grid.ndim].to_vec(),
                });
            }
        }
        let mut order: Vec<usize> = (0..coords.len()).collect();
        order.sort_by_key(|&i| coords[i].key());
        for w in order.windows(2) {
            if coords[w[0]] == coords[w[1]] {
                return Err(Error::DuplicateCoord(coords[w[0]].to_vec(grid.ndim)));
            }
        }
        let sorted_coords: Vec<Coord> = order.iter().map(|&i| coords[i]).collect();
        let mut sorted_feats = Vec::with_capacity(features.len());
        for &i in &order {
            sorted_feats.extend_from_slice(&features[i * channels..(i + 1) * channels]);
        }
        Ok(SparseTensor {
            grid,
            coords: sorted_coords,
            features: sorted_feats,
            channels,
        })
    }

    /// Caller guarantees unique, in-bounds coordinates already in canonical order.
    pub(crate) fn from_canonical(
        grid: Grid,
        coords: Vec<Coord>,
        features: Vec<T>,
        channels: usize,
    ) -> Self {
        debug_assert_eq!(features.len(), coords.len() * channels);
        debug_assert!(coords.windows(2).all(|w| w[0] < w[1]));
        SparseTensor {
            grid,
            coords,
            features,
            channels,
        }
    }

    pub fn empty(grid: Grid, channels: usize) -> Self {
        SparseTensor {
            grid,
            coords: Vec::new(),
            features: Vec::new(),
            channels,
        }
    }

    pub fn zeros_like(&self) -> Self {
        self.with_features_unchecked(vec![T::zero(); self.features.len()], self.channels)
    }

    /// Same coordinates, new feature matrix.
    pub fn with_features(&self, features: Vec<T>, channels: usize) -> Result<Self> {
        if features.len() != self.coords.len() * channels {
            return Err(Error::ShapeMismatch(format!(
                "expected {}x{} features, got {}",
                self.coords.len(),
                channels,
                features.len()
            )));
        }
        Ok(self.with_features_unchecked(features, channels))
    }

    pub(crate) fn with_features_unchecked(&self, features: Vec<T>, channels: usize) -> Self {
        SparseTensor {
            grid: self.grid,
            coords: self.coords.clone(),
            features,
            channels,
        }
    }

    #[inline]
    pub fn ndim(&self) -> usize {
        self.grid.ndim
    }

    #[inline]
    pub fn grid(&self) -> Grid {
        self.grid
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    #[inline]
    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    #[inline]
    pub fn features(&self) -> &[T] {
        &self.features
    }

    #[inline]
    pub fn features_mut(&mut self) -> &mut [T] {
        &mut self.features
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    pub fn into_features(self) -> Vec<T> {
        self.features
    }

    pub fn same_coords(&self, other: &Self) -> bool {
        self.grid == other.grid && self.coords == other.coords
    }

    /// Converts element type (used to run the same geometry in f32 and f64).
    pub fn cast<U: Real>(&self) -> SparseTensor<U> {
        SparseTensor {
            grid: self.grid,
            coords: self.coords.clone(),
            features: self
                .features
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
            channels: self.channels,
        }
    }
}

/// Dense array with layout `[batch][z][y][x][channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub batches: usize,
    pub grid: Grid,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Real> Dense<T> {
    pub fn zeros(batches: usize, grid: Grid, channels: usize) -> Self {
        Dense {
            batches,
            grid,
            channels,
            data: vec![T::zero(); batches * grid.volume() * channels],
        }
    }

    #[inline]
    pub fn offset(&self, batch: usize, idx: [usize; 3]) -> usize {
        let [dx, dy, dz] = self.grid.dims();
        ((((batch * dz) + idx[2]) * dy + idx[1]) * dx + idx[0]) * self.channels
    }

    pub fn at(&self, batch: usize, idx: [usize; 3]) -> &[T] {
        let o = self.offset(batch, idx);
        &self.data[o..o + self.channels]
    }

    pub fn at_mut(&mut self, batch: usize, idx: [usize; 3]) -> &mut [T] {
        let o = self.offset(batch, idx);
        let c = self.channels;
        &mut self.data[o..o + c]
    }
}

/// Scatters active rows into a zero-filled dense array.
pub fn densify<T: Real>(t: &SparseTensor<T>) -> Dense<T> {
    let batches = t
        .coords
        .iter()
        .map(|c| c.batch as usize + 1)
        .max()
        .unwrap_or(1);
    let mut d = Dense::zeros(batches, t.grid, t.channels);
    for (i, c) in t.coords.iter().enumerate() {
        let idx = [c.idx[0] as usize, c.idx[1] as usize, c.idx[2] as usize];
        d.at_mut(c.batch as usize, idx).copy_from_slice(t.row(i));
    }
    d
}

/// Collects every site with at least one nonzero channel.
pub fn sparsify<T: Real>(d: &Dense<T>) -> SparseTensor<T> {
    let [dx, dy, dz] = d.grid.dims();
    let mut coords = Vec::new();
    let mut features = Vec::new();
    for b in 0..d.batches {
        for z in 0..dz {
            for y in 0..dy {
                for x in 0..dx {
                    let row = d.at(b, [x, y, z]);
                    if row.iter().any(|v| !v.is_zero()) {
                        coords.push(Coord::new3(b as i32, x as i32, y as i32, z as i32));
                        features.extend_from_slice(row);
                    }
                }
            }
        }
    }
    SparseTensor::from_canonical(d.grid, coords, features, d.channels)
}
