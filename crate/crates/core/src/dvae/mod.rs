//! Stage I: a discrete variational autoencoder for point clouds built
//! around a frozen transformer stack.
//!
//! Patches are embedded and refined over the centroid graph, passed through
//! the (optionally prompted) stack, refined again, and projected to logits
//! over a learned codebook. Training relaxes the categorical posterior with
//! Gumbel-softmax and reconstructs the cloud twice: one coarse point per
//! patch and a folded grid of points per patch. The loss is
//!
//! ```text
//! CD-ℓ1(coarse, cloud) + CD-ℓ1(fine, cloud) + β · mean_i KL(q_i ‖ uniform)
//! ```
//!
//! The refined per-token features before the tokenizer are what stage II
//! distills.

mod model;
mod schedule;
mod train;

pub use model::{DvaeConfig, DvaeLoss, DvaeModel, Encoded, FoldDecoder, Reconstruction, TuningMode, PREFIX};
pub use schedule::{
    argmax, gumbel_softmax, kl_to_uniform, kl_to_uniform_f64, one_hot_argmax, rescale, BetaSchedule,
    GumbelSchedule, BETA_MAX, HARD_FROM_TAU, REFERENCE_BETA_RAMP, REFERENCE_BETA_ZERO, REFERENCE_TAU_DECAY,
    REFERENCE_TOTAL, REFERENCE_WARMUP, TAU_END, TAU_START,
};
pub use train::{evaluate_recon, train_dvae, DvaeMetrics, DvaeRun, DvaeTrainConfig, ReconMetrics, DVAE_CSV_HEADER};
