//! Point-cloud kernels: sampling, grouping, reconstruction metrics and the
//! synthetic shape generator.
//!
//! Everything here is a pure function over coordinates. Nearest-neighbour
//! queries are exhaustive O(N·M) scans; at the cloud sizes used for
//! pretraining that is fast enough and trivially exact.

mod augment;
mod cloud;
pub mod io;
pub(crate) mod metrics;
mod sampling;
mod shapes;

pub use augment::{augment, Augmentation, Rotation};
pub use cloud::PointCloud;
pub use metrics::{chamfer_l1, chamfer_l2, default_tau, f_score, nearest_indices};
pub use sampling::{fps, group, knn_group, FpsStart, PatchSet};
pub use shapes::{gen_shape, sample_surface, ShapeKind};

pub type Point = [f32; 3];

#[cfg(test)]
mod props;
