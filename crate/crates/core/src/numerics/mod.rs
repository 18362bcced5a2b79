//! Dense tensors, a reverse-mode tape and a seeded random source.

mod gradcheck;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{evaluate_with_gradients, finite_difference_check, FiniteDifferenceReport, RELATIVE_ERROR_FLOOR};
pub use rng::{standard_normal, SeededRng, RNG_ALGORITHM};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{Precision, Tensor};

pub(crate) use tensor::softmax_in_place;
