//! Stage II: masked point modeling as distillation from a frozen stage-I
//! teacher.
//!
//! The student embeds and encodes only the visible patches. A short decoder
//! sees every slot, with encoder rows scattered back in place and a learned
//! mask token elsewhere, and a head maps its output to the target. The
//! default target is the teacher's per-token feature under
//!
//! ```text
//! L = 1 - (1 / |M|) Σ_{i ∈ M} cos(s_i, t_i)
//! ```
//!
//! over the masked set `M` (all tokens when nothing is masked). Discrete
//! teacher tokens with cross-entropy and patch coordinates with CD-ℓ1 are
//! the other targets, and [`aux_kd_loss`] adds feature distillation into the
//! encoder on top of coordinate reconstruction.

mod loss;
mod mask;
mod student;
mod train;

pub use loss::{
    aux_kd_loss, cosine_distance, loss_rows, mpm_loss, mpm_loss_generic, objective_loss, patch_chamfer,
    teacher_targets, MpmLoss, TeacherTargets,
};
pub use mask::{gen_mask, mask_count, nearest_to, MaskConfig, MaskSpec, MaskStrategy};
pub use student::{corrupt, Metric, Objective, Student, StudentConfig, Target, Visible, PREFIX};
pub use train::{train_mpm, MpmMetrics, MpmRun, MpmTrainConfig, MPM_CSV_HEADER};

#[cfg(test)]
mod tests;
