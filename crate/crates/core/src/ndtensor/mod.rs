//! Dense tensor substrate: storage, seeded randomness, statistics and the
//! handful of kernels the networks and losses are built from.

mod conv;
mod frechet;
mod io;
mod rng;
mod stats;
mod tensor;

pub use conv::{conv2d_3x3, conv2d_3x3_backward};
pub use frechet::{frechet_between_samples, gaussian_frechet_distance, mean_covariance};
pub use io::{load_tensor, read_tensor, save_tensor, write_tensor};
pub use rng::Rng;
pub use stats::{mean_std, percentile_abs, pixel_shuffle, pixel_unshuffle};
pub use tensor::{broadcast_shape, Tensor};

pub(crate) use stats::dims4;
pub(crate) use tensor::{axis_blocks, gemm_nt, gemm_tn, matmul_dims};
