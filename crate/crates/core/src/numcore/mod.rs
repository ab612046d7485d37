//! Dense tensors, tape autodiff, AdamW and seeded random streams.

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use optim::{adamw_step, AdamW, ParamStore};
pub use rng::RngStream;
pub use tape::{Tape, Var};
pub use tensor::{cosine, Tensor};

/// Gaussian-initialized `[rows, cols]` tensor with the given std.
pub fn randn(rng: &mut RngStream, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.normal() * std).collect();
    Tensor::new(shape.to_vec(), data).expect("finite gaussian draws")
}
