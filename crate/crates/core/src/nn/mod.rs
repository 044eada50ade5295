//! Minimal CPU neural-network engine: dense matrices, NHWC convolutions,
//! batch normalization and AdamW, each with an explicit backward pass.

mod layers;
mod matrix;
mod optim;
mod param;

pub use layers::{
    global_avg_pool, global_avg_pool_backward, relu_backward_inplace, relu_inplace, BatchNorm,
    Conv2d, FeatureMap, Linear,
};
pub use matrix::{gemm, matmul, Matrix};
pub use optim::{AdamW, AdamWConfig};
pub use param::{Module, Param};
