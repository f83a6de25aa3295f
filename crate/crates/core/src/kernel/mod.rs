//! Dense tensors, reverse-mode gradients, seeded sampling, and gradient
//! verification.

mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod rng;
mod tensor;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, restore_into, save_checkpoint, write_checkpoint,
    CHECKPOINT_HEADER,
};
pub use gradcheck::{forward_backward, grad_check, LossFn};
pub use graph::{binary_cross_entropy, logistic, softplus, Graph, Var, BCE_CLAMP};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{Grads, ParamId, ParamStore, Params};
pub use rng::{derive_seed, sample_gaussian, Rng};
pub use tensor::Tensor;

/// Glorot-style uniform-ish initialization drawn from a normal distribution.
pub(crate) fn init_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    rng.normal_tensor(&[rows, cols], std)
}
