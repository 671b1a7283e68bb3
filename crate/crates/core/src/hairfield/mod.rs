//! Volumetric hair field with orientation, occupancy and radiance, its
//! differentiable renderer and the two-phase optimizer.

pub mod export;
pub mod field;
pub mod kernel;
pub mod lift;
pub mod loss;
pub mod optimize;
pub mod projection;
pub mod render;

pub use field::{FieldQuery, FieldSample, HairField, Stencil};
pub use kernel::{expand_kernel, KernelMass, KernelParams, OrientationKernel};
pub use loss::{occupancy_loss, orientation_loss};
pub use projection::{project_distribution, ProjectionTable};
pub use render::{composite, render_occupancy, render_ray_distribution, Compositing, Occupancy, RaySample, RaySampleSet};
pub use optimize::{fit_field, optimize_field, render_pixel, FieldConfig, TrainingView};
