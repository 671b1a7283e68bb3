//! Chained-Gaussian strand refinement through differentiable splatting.

pub mod control;
pub mod loss;
pub mod optimize;
pub mod primitive;
pub mod splat;
pub mod strand;

pub use control::{child_counts, linear_rgb_to_lab, prune_strands, split_scores, split_strands, subsample_for_render, PruneStats};
pub use optimize::{
    background_color, hair_color, paint_body, write_loss_csv, ControlEvent, LossRecord, RefineConfig, RefineResult, RefineView,
    Refiner,
};
pub use primitive::{orthonormal_frame, segment_covariance, BodyGaussians, GaussianPrimitive};
pub use splat::{render, render_loss_grad, PrimitiveGrad};
pub use strand::{AppearanceInit, AppearanceMode, ChainedGaussianStrand, ANCHORS, TAIL_SEGMENTS};
