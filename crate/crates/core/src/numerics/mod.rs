//! Dense tensors, deterministic random streams, and forward kernels.

mod ops;
mod rng;
mod tensor;

pub use ops::{
    cosine_sim, l2_normalize_rows, layer_norm, layer_norm_cached, log_softmax, matmul, matmul_nt, matmul_tn, sigmoid,
    sigmoid_scalar, softmax, tanh, transpose, LayerNormCache, LAYER_NORM_EPS,
};
pub use rng::{RngStream, Sampler};
pub use tensor::Tensor;
