//! Fully sparse LiDAR 3D object detection on CPU.
//!
//! Pipeline: voxelize points, run a sparse 3D backbone, compress to BEV,
//! classify voxels and diffuse features toward object centers, then predict
//! boxes with a sparse center-based head.

pub mod afd;
pub mod backbone;
pub mod boxes;
pub mod error;
pub mod harness;
pub mod head;
pub mod model;
pub mod nn;
pub mod sparse;
pub mod voxel;

pub use error::{Error, Result};
