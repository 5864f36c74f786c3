use rustc_hash::FxHashMap;

use super::tensor::{Coord, Real, SparseTensor};
use crate::error::{Error, Result};

/// Hash map from packed coordinate key to row index.
#[derive(Clone, Debug, Default)]
pub struct CoordinateMap {
    map: FxHashMap<u64, u32>,
}

impl CoordinateMap {
    pub fn from_coords(coords: &[Coord]) -> Result<Self> {
        let mut map = FxHashMap::default();
        map.reserve(coords.len());
        for (row, c) in coords.iter().enumerate() {
            if map.insert(c.key(), row as u32).is_some() {
                return Err(Error::DuplicateCoord(c.to_vec(3)));
            }
        }
        Ok(CoordinateMap { map })
    }

    #[inline]
    pub fn get(&self, c: &Coord) -> Option<usize> {
        self.map.get(&c.key()).map(|&r| r as usize)
    }

    #[inline]
    pub fn contains(&self, c: &Coord) -> bool {
        self.map.contains_key(&c.key())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

pub fn build_coord_map<T: Real>(t: &SparseTensor<T>) -> Result<CoordinateMap> {
    CoordinateMap::from_coords(t.coords())
}
