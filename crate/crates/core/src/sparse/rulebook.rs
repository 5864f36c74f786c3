//! Rulebook construction for submanifold and regular sparse convolutions.
//!
//! A rulebook lists, for each kernel offset, the `(input_row, output_row)`
//! pairs whose product contributes to the output. Kernel offsets are indexed
//! x-fastest: `o = (kz * KY + ky) * KX + kx`. Tap `k` on an axis links input
//! index `x` to output index `y` when `y * stride - padding + k == x`.

use super::coord_map::CoordinateMap;
use super::tensor::{Coord, Grid, Real, SparseTensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub ndim: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub transposed: bool,
}

impl ConvSpec {
    /// Stride 1, "same" padding. Output sites equal input sites.
    pub fn submanifold(ndim: usize, k: usize) -> Self {
        let mut kernel = [k; 3];
        let mut padding = [(k.saturating_sub(1)) / 2; 3];
        if ndim == 2 {
            kernel[2] = 1;
            padding[2] = 0;
        }
        ConvSpec {
            ndim,
            kernel,
            stride: [1; 3],
            padding,
            transposed: false,
        }
    }

    /// Cubic (or square) kernel with the same stride and padding on every axis.
    pub fn regular(ndim: usize, k: usize, stride: usize, padding: usize) -> Self {
        let mut spec = ConvSpec {
            ndim,
            kernel: [k; 3],
            stride: [stride; 3],
            padding: [padding; 3],
            transposed: false,
        };
        if ndim == 2 {
            spec.kernel[2] = 1;
            spec.stride[2] = 1;
            spec.padding[2] = 0;
        }
        spec
    }

    pub fn per_axis(ndim: usize, kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3]) -> Self {
        ConvSpec {
            ndim,
            kernel,
            stride,
            padding,
            transposed: false,
        }
    }

    pub fn volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ndim != 2 && self.ndim != 3 {
            return Err(Error::IllegalConv(format!("ndim {}", self.ndim)));
        }
        for a in 0..3 {
            if self.kernel[a] == 0 || self.kernel[a] % 2 == 0 {
                return Err(Error::IllegalConv(format!(
                    "kernel {:?} must be odd and positive",
                    self.kernel
                )));
            }
            if self.stride[a] == 0 {
                return Err(Error::IllegalConv("stride must be positive".into()));
            }
        }
        if self.ndim == 2 && (self.kernel[2] != 1 || self.stride[2] != 1 || self.padding[2] != 0) {
            return Err(Error::IllegalConv("2D spec must be trivial along z".into()));
        }
        Ok(())
    }

    pub fn is_submanifold_legal(&self) -> bool {
        self.validate().is_ok()
            && !self.transposed
            && (0..3).all(|a| self.stride[a] == 1 && self.padding[a] == (self.kernel[a] - 1) / 2)
    }

    #[inline]
    pub fn tap(&self, o: usize) -> [usize; 3] {
        let kx = o % self.kernel[0];
        let ky = (o / self.kernel[0]) % self.kernel[1];
        let kz = o / (self.kernel[0] * self.kernel[1]);
        [kx, ky, kz]
    }

    /// Output extent: `floor((dims + 2 * padding - kernel) / stride) + 1` per axis.
    pub fn output_grid(&self, input: Grid) -> Result<Grid> {
        let dims = input.dims();
        let mut out = [1usize; 3];
        for a in 0..3 {
            let padded = dims[a] + 2 * self.padding[a];
            if padded < self.kernel[a] {
                return Err(Error::IllegalConv(format!(
                    "kernel {} larger than padded extent {} on axis {a}",
                    self.kernel[a], padded
                )));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Grid::new(input.ndim(), out)
    }
}

/// Compressed rows: for each row, its `(offset, other_row)` entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Csr {
    start: Vec<usize>,
    entries: Vec<(u32, u32)>,
}

impl Csr {
    fn build(n_rows: usize, pairs: &[Vec<(u32, u32)>], key_is_out: bool) -> Self {
        let mut start = vec![0usize; n_rows + 1];
        for list in pairs {
            for &(i, j) in list {
                let r = if key_is_out { j } else { i } as usize;
                start[r + 1] += 1;
            }
        }
        for r in 0..n_rows {
            start[r + 1] += start[r];
        }
        let mut fill = start.clone();
        let mut entries = vec![(0u32, 0u32); start[n_rows]];
        for (o, list) in pairs.iter().enumerate() {
            for &(i, j) in list {
                let (r, other) = if key_is_out { (j, i) } else { (i, j) };
                entries[fill[r as usize]] = (o as u32, other);
                fill[r as usize] += 1;
            }
        }
        Csr { start, entries }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[(u32, u32)] {
        &self.entries[self.start[r]..self.start[r + 1]]
    }

    pub fn rows(&self) -> usize {
        self.start.len().saturating_sub(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rulebook {
    spec: ConvSpec,
    pairs: Vec<Vec<(u32, u32)>>,
    in_grid: Grid,
    in_coords: Vec<Coord>,
    out_grid: Grid,
    out_coords: Vec<Coord>,
    by_out: Csr,
    by_in: Csr,
}

impl Rulebook {
    fn assemble(
        spec: ConvSpec,
        pairs: Vec<Vec<(u32, u32)>>,
        in_grid: Grid,
        in_coords: Vec<Coord>,
        out_grid: Grid,
        out_coords: Vec<Coord>,
    ) -> Self {
        let by_out = Csr::build(out_coords.len(), &pairs, true);
        let by_in = Csr::build(in_coords.len(), &pairs, false);
        Rulebook {
            spec,
            pairs,
            in_grid,
            in_coords,
            out_grid,
            out_coords,
            by_out,
            by_in,
        }
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn kernel_volume(&self) -> usize {
        self.pairs.len()
    }

    /// `(input_row, output_row)` pairs for kernel offset `o`.
    pub fn pairs(&self, o: usize) -> &[(u32, u32)] {
        &self.pairs[o]
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.iter().map(Vec::len).sum()
    }

    pub fn in_grid(&self) -> Grid {
        self.in_grid
    }

    pub fn in_coords(&self) -> &[Coord] {
        &self.in_coords
    }

    pub fn out_grid(&self) -> Grid {
        self.out_grid
    }

    pub fn out_coords(&self) -> &[Coord] {
        &self.out_coords
    }

    pub fn n_in(&self) -> usize {
        self.in_coords.len()
    }

    pub fn n_out(&self) -> usize {
        self.out_coords.len()
    }

    pub(crate) fn by_out(&self) -> &Csr {
        &self.by_out
    }

    pub(crate) fn by_in(&self) -> &Csr {
        &self.by_in
    }

    pub fn is_submanifold(&self) -> bool {
        self.spec.is_submanifold_legal()
    }
}

pub fn build_rulebook_submanifold<T: Real>(t: &SparseTensor<T>, spec: &ConvSpec) -> Result<Rulebook> {
    submanifold_rulebook(t.grid(), t.coords(), spec)
}

pub fn build_rulebook_regular<T: Real>(t: &SparseTensor<T>, spec: &ConvSpec) -> Result<Rulebook> {
    regular_rulebook(t.grid(), t.coords(), spec)
}

/// Geometry-only submanifold rulebook over canonical-ordered coordinates.
pub fn submanifold_rulebook(grid: Grid, coords: &[Coord], spec: &ConvSpec) -> Result<Rulebook> {
    if !spec.is_submanifold_legal() || spec.ndim != grid.ndim() {
        return Err(Error::IllegalConv(format!(
            "not a submanifold spec for a {}D grid: {spec:?}",
            grid.ndim()
        )));
    }
    let map = CoordinateMap::from_coords(coords)?;
    let vol = spec.volume();
    let center = [
        (spec.kernel[0] / 2) as i32,
        (spec.kernel[1] / 2) as i32,
        (spec.kernel[2] / 2) as i32,
    ];
    let mut pairs: Vec<Vec<(u32, u32)>> = vec![Vec::new(); vol];
    for (j, c) in coords.iter().enumerate() {
        for (o, list) in pairs.iter_mut().enumerate() {
            let k = spec.tap(o);
            let idx = [
                c.idx[0] + k[0] as i32 - center[0],
                c.idx[1] + k[1] as i32 - center[1],
                c.idx[2] + k[2] as i32 - center[2],
            ];
            if !grid.contains_idx(idx) {
                continue;
            }
            if let Some(i) = map.get(&Coord { batch: c.batch, idx }) {
                list.push((i as u32, j as u32));
            }
        }
    }
    Ok(Rulebook::assemble(
        *spec,
        pairs,
        grid,
        coords.to_vec(),
        grid,
        coords.to_vec(),
    ))
}

/// Geometry-only regular (strided, dilating) rulebook.
pub fn regular_rulebook(grid: Grid, coords: &[Coord], spec: &ConvSpec) -> Result<Rulebook> {
    spec.validate()?;
    if spec.transposed {
        return Err(Error::IllegalConv(
            "transposed convolutions reuse their paired rulebook".into(),
        ));
    }
    if spec.ndim != grid.ndim() {
        return Err(Error::IllegalConv("spec/grid dimensionality differ".into()));
    }
    let out_grid = spec.output_grid(grid)?;
    let out_dims = out_grid.dims();
    let vol = spec.volume();

    // (offset, input row, output key)
    let mut raw: Vec<(u32, u32, u64)> = Vec::new();
    for (i, c) in coords.iter().enumerate() {
        'tap: for o in 0..vol {
            let k = spec.tap(o);
            let mut y = [0i32; 3];
            for a in 0..3 {
                let num = c.idx[a] as i64 + spec.padding[a] as i64 - k[a] as i64;
                if num < 0 || num % spec.stride[a] as i64 != 0 {
                    continue 'tap;
                }
                let v = num / spec.stride[a] as i64;
                if v as usize >= out_dims[a] {
                    continue 'tap;
                }
                y[a] = v as i32;
            }
            let out = Coord { batch: c.batch, idx: y };
            raw.push((o as u32, i as u32, out.key()));
        }
    }

    let mut keys: Vec<u64> = raw.iter().map(|r| r.2).collect();
    keys.sort_unstable();
    keys.dedup();
    let out_coords: Vec<Coord> = keys.iter().map(|&k| Coord::from_key(k)).collect();
    let out_map = CoordinateMap::from_coords(&out_coords)?;

    let mut pairs: Vec<Vec<(u32, u32)>> = vec![Vec::new(); vol];
    for (o, i, key) in raw {
        let j = out_map
            .get(&Coord::from_key(key))
            .expect("output coordinate registered above");
        pairs[o as usize].push((i, j as u32));
    }
    Ok(Rulebook::assemble(
        *spec,
        pairs,
        grid,
        coords.to_vec(),
        out_grid,
        out_coords,
    ))
}
