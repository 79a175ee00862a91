//! Poolers into `k > 1` vectors: entropic optimal transport (OTK), k-means
//! and slot attention.

mod kmeans;
mod sinkhorn;
mod slot;

pub use kmeans::{assign, distortion, kmeans_from, kmeans_init, kmeans_pool, lloyd_step, KmeansTrace};
pub use sinkhorn::{
    gaussian_kernel, marginal_residual, otk_pool, sinkhorn, sinkhorn_solve, sq_dist_matrix,
    NystromMap, Psi, SinkhornParams, SinkhornSolution, EIGEN_FLOOR, KERNEL_FLOOR,
};
pub use slot::{slot_init, slot_pool, SlotConfig, SlotWeights};
