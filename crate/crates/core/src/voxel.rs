//! Point cloud I/O and mean-pooling voxelization.
//!
//! Binary point files: magic `PCBN`, u32 LE point count, u32 LE channel
//! count (>= 3), then `count * channels` f32 LE values. Text point files hold
//! one point per line with at least three whitespace-separated fields.

use std::fs;
use std::io::Write;
use std::path::Path;

use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::sparse::{Coord, Grid, SparseTensor};

pub const POINT_MAGIC: &[u8; 4] = b"PCBN";

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    channels: usize,
    points: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointFormat {
    Binary,
    Text,
}

impl PointCloud {
    pub fn new(channels: usize, points: Vec<f32>) -> Result<Self> {
        if channels < 3 {
            return Err(Error::ShapeMismatch(format!(
                "point clouds need at least 3 channels, got {channels}"
            )));
        }
        if points.len() % channels != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} values is not a multiple of {channels} channels",
                points.len()
            )));
        }
        if let Some(i) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                location: format!("point {} channel {}", i / channels, i % channels),
            });
        }
        Ok(PointCloud { channels, points })
    }

    pub fn empty(channels: usize) -> Self {
        PointCloud {
            channels: channels.max(3),
            points: Vec::new(),
        }
    }

    pub fn count(&self) -> usize {
        self.points.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn point(&self, i: usize) -> &[f32] {
        &self.points[i * self.channels..(i + 1) * self.channels]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f32]> {
        self.points.chunks(self.channels)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.points
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.points.len() * 4);
        out.extend_from_slice(POINT_MAGIC);
        out.extend_from_slice(&(self.count() as u32).to_le_bytes());
        out.extend_from_slice(&(self.channels as u32).to_le_bytes());
        for v in &self.points {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::BadHeader {
                offset: bytes.len(),
                msg: format!("need 12 header bytes, found {}", bytes.len()),
            });
        }
        if &bytes[0..4] != POINT_MAGIC {
            return Err(Error::BadHeader {
                offset: 0,
                msg: format!("bad magic {:?}", &bytes[0..4]),
            });
        }
        let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let channels = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if channels < 3 {
            return Err(Error::BadHeader {
                offset: 8,
                msg: format!("channel count {channels} < 3"),
            });
        }
        let expected = count
            .checked_mul(channels)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::BadHeader {
                offset: 4,
                msg: "point count overflows".into(),
            })?;
        let payload = &bytes[12..];
        if payload.len() < expected {
            return Err(Error::Truncated {
                offset: 12 + payload.len(),
                expected,
                found: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(Error::BadHeader {
                offset: 12 + expected,
                msg: format!("{} trailing bytes after payload", payload.len() - expected),
            });
        }
        let mut points = Vec::with_capacity(count * channels);
        for (k, chunk) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    location: format!("byte offset {}", 12 + 4 * k),
                });
            }
            points.push(v);
        }
        Ok(PointCloud { channels, points })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for p in self.iter() {
            let fields: Vec<String> = p.iter().map(|v| format!("{v:?}")).collect();
            s.push_str(&fields.join(" "));
            s.push('\n');
        }
        s
    }

    /// Blank lines and lines starting with `#` are skipped. Every point must
    /// carry the same number of fields as the first one.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut channels = None;
        let mut points = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut n = 0;
            for field in line.split_whitespace() {
                let v: f32 = field.parse().map_err(|_| Error::Parse {
                    line: lineno + 1,
                    msg: format!("not a number: {field:?}"),
                })?;
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        location: format!("line {}", lineno + 1),
                    });
                }
                points.push(v);
                n += 1;
            }
            if n < 3 {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!("need at least 3 fields, found {n}"),
                });
            }
            match channels {
                None => channels = Some(n),
                Some(c) if c != n => {
                    return Err(Error::Parse {
                        line: lineno + 1,
                        msg: format!("expected {c} fields, found {n}"),
                    })
                }
                _ => {}
            }
        }
        Ok(PointCloud {
            channels: channels.unwrap_or(3),
            points,
        })
    }
}

pub fn load_point_cloud(path: impl AsRef<Path>, format: PointFormat) -> Result<PointCloud> {
    let path = path.as_ref();
    match format {
        PointFormat::Binary => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            PointCloud::from_bytes(&bytes)
        }
        PointFormat::Text => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            PointCloud::from_text(&text)
        }
    }
}

pub fn save_point_cloud(pc: &PointCloud, path: impl AsRef<Path>, format: PointFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format {
        PointFormat::Binary => pc.to_bytes(),
        PointFormat::Text => pc.to_text().into_bytes(),
    };
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Voxel grid placement in meters. Axis order is `[x, y, z]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelGridSpec {
    pub origin: [f64; 3],
    pub voxel_size: [f64; 3],
    pub dims: [usize; 3],
}

impl VoxelGridSpec {
    pub fn new(origin: [f64; 3], voxel_size: [f64; 3], dims: [usize; 3]) -> Result<Self> {
        let spec = VoxelGridSpec {
            origin,
            voxel_size,
            dims,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.voxel_size.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "voxel size must be positive, got {:?}",
                self.voxel_size
            )));
        }
        if self.origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid("origin must be finite".into()));
        }
        Grid::new3(self.dims[0], self.dims[1], self.dims[2])?;
        Ok(())
    }

    pub fn grid3(&self) -> Grid {
        Grid::new3(self.dims[0], self.dims[1], self.dims[2]).expect("validated grid")
    }

    pub fn grid2(&self) -> Grid {
        self.grid3().bev()
    }

    /// Far corner of the detection range.
    pub fn extent_max(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.origin[a] + self.dims[a] as f64 * self.voxel_size[a])
    }

    /// Grid seen after `levels` stride-2 (kernel 3, padding 1) down-samplings
    /// on every axis. Output voxel `y` is centered on input voxel `2^levels * y`,
    /// so the origin moves back by `(2^levels - 1) / 2` input voxels.
    pub fn strided(&self, levels: u32) -> Self {
        let f = 1usize << levels;
        let shift = (f as f64 - 1.0) / 2.0;
        VoxelGridSpec {
            origin: [0, 1, 2].map(|a| self.origin[a] - shift * self.voxel_size[a]),
            voxel_size: self.voxel_size.map(|v| v * f as f64),
            dims: self.dims.map(|d| {
                let mut d = d;
                for _ in 0..levels {
                    d = d.div_ceil(2);
                }
                d
            }),
        }
    }

    /// Index of the voxel containing `p`, or `None` outside the grid.
    pub fn locate(&self, p: [f64; 3]) -> Option<[i32; 3]> {
        let mut idx = [0i32; 3];
        for a in 0..3 {
            let v = ((p[a] - self.origin[a]) / self.voxel_size[a]).floor();
            if !(v >= 0.0 && v < self.dims[a] as f64) {
                return None;
            }
            idx[a] = v as i32;
        }
        Some(idx)
    }
}

/// One row per non-empty voxel, features are the per-channel mean of its
/// member points. Points outside the grid are dropped.
pub fn voxelize(pc: &PointCloud, spec: &VoxelGridSpec) -> Result<SparseTensor<f64>> {
    spec.validate()?;
    let c = pc.channels();
    let mut members: Vec<(u64, usize)> = pc
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let idx = spec.locate([p[0] as f64, p[1] as f64, p[2] as f64])?;
            Some((Coord { batch: 0, idx }.key(), i))
        })
        .collect();
    // Member order inside a voxel is fixed by point values, so the mean is
    // bitwise independent of input order.
    members.sort_unstable_by(|a, b| {
        a.0.cmp(&b.0).then_with(|| {
            let pa = pc.point(a.1).iter().map(|v| v.to_bits());
            let pb = pc.point(b.1).iter().map(|v| v.to_bits());
            pa.cmp(pb)
        })
    });
    let mut coords = Vec::new();
    let mut features = Vec::new();
    let mut start = 0;
    while start < members.len() {
        let key = members[start].0;
        let mut end = start;
        let mut sum = vec![0.0f64; c];
        while end < members.len() && members[end].0 == key {
            for (s, v) in sum.iter_mut().zip(pc.point(members[end].1)) {
                *s += *v as f64;
            }
            end += 1;
        }
        let n = (end - start) as f64;
        coords.push(Coord::from_key(key));
        features.extend(sum.iter().map(|s| s / n));
        start = end;
    }
    Ok(SparseTensor::from_canonical(spec.grid3(), coords, features, c))
}

/// Counts points per non-empty voxel, aligned with `voxelize`'s rows.
pub fn voxel_counts(pc: &PointCloud, spec: &VoxelGridSpec) -> Vec<usize> {
    let mut counts: FxHashMap<u64, usize> = FxHashMap::default();
    for p in pc.iter() {
        if let Some(idx) = spec.locate([p[0] as f64, p[1] as f64, p[2] as f64]) {
            *counts.entry(Coord { batch: 0, idx }.key()).or_default() += 1;
        }
    }
    let mut keys: Vec<(u64, usize)> = counts.into_iter().collect();
    keys.sort_unstable();
    keys.into_iter().map(|(_, n)| n).collect()
}

/// Metric center `origin + (coord + 0.5) * voxel_size` on the given axes
/// (2 or 3 of them).
pub fn voxel_center(coord: &[i32], spec: &VoxelGridSpec) -> Result<Vec<f64>> {
    if coord.len() != 2 && coord.len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "voxel coordinates have 2 or 3 axes, got {}",
            coord.len()
        )));
    }
    for (a, &v) in coord.iter().enumerate() {
        if v < 0 || v as usize >= spec.dims[a] {
            return Err(Error::OutOfBounds {
                coord: coord.iter().map(|&v| v as i64).collect(),
                dims: spec.dims[..coord.len()].to_vec(),
            });
        }
    }
    Ok(coord
        .iter()
        .enumerate()
        .map(|(a, &v)| spec.origin[a] + (v as f64 + 0.5) * spec.voxel_size[a])
        .collect())
}

/// BEV center of a 2D (or the x/y part of a 3D) coordinate, unchecked.
#[inline]
pub fn bev_center(c: &Coord, spec: &VoxelGridSpec) -> [f64; 2] {
    [
        spec.origin[0] + (c.idx[0] as f64 + 0.5) * spec.voxel_size[0],
        spec.origin[1] + (c.idx[1] as f64 + 0.5) * spec.voxel_size[1],
    ]
}
