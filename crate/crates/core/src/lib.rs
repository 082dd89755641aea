//! Point-cloud self-supervised pretraining on a small CPU autograd tape.
//!
//! Stage I wraps a frozen transformer in a discrete variational autoencoder
//! for point clouds and tunes it with prompts ([`dvae`]). Stage II trains a
//! point-cloud transformer student by masked modeling of that teacher's
//! latent features ([`distill`]). [`pipeline`] holds configuration,
//! checkpoints, datasets and the evaluation protocols used by the `act`
//! command-line tool.

pub mod autograd;
pub mod backbone;
pub mod data;
pub mod distill;
pub mod dvae;
pub mod error;
pub mod geometry;
pub mod pipeline;

pub use error::{CheckpointError, Error, Result};
