//! Dense tensors with a reverse-mode tape.
//!
//! A [`Graph`] records every operation in insertion order together with the
//! activations its backward rule needs. [`Graph::backward`] walks the tape
//! once in reverse and *adds* into leaf gradients, so two backward calls on
//! the same loss double them until [`Graph::zero_grad`].
//!
//! Graphs are generic over the element type: models run in `f32`, and the
//! same model code instantiated on `Graph<f64>` serves as the high-precision
//! recheck used by [`check_gradients`].

mod backward;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{check_gradients, GradCheck, REL_FLOOR};
pub use graph::{ChamferKind, Graph, Var};
pub use optim::{cosine_lr, AdamW, Moments};
pub use params::{wildcard_match, Param, ParamStore};
pub use tensor::{Real, Tensor};

#[cfg(test)]
mod tests;
