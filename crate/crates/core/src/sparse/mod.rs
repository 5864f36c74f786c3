//! Sparse tensors, coordinate hashing, rulebooks and sparse convolutions.

pub mod conv;
pub mod coord_map;
pub mod flops;
pub mod layers;
pub mod param;
pub mod rulebook;
pub mod tensor;

pub use conv::{conv_backward, conv_forward, inverse_conv_backward, inverse_conv_forward};
pub use coord_map::{build_coord_map, CoordinateMap};
pub use flops::{conv_flops, flops_of, FlopsReport, LayerFlops};
pub use layers::{
    pointwise_linear, pointwise_linear_backward, relu, relu_backward, sparse_add, FeatureNorm,
    Mode, NormCache,
};
pub use param::{ParamTensor, ParamView, Parameters};
pub use rulebook::{
    build_rulebook_regular, build_rulebook_submanifold, regular_rulebook, submanifold_rulebook,
    ConvSpec, Rulebook,
};
pub use tensor::{densify, sparsify, Coord, DType, Dense, Grid, Real, SparseTensor};
