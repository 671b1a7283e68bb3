//! Multi-view strand-level hair capture.

pub mod bundle;
pub mod error;
pub mod geom;
pub mod gsplat;
pub mod hairfield;
pub mod latent;
pub mod optim;
pub mod orient2d;
pub mod parallel;
pub mod pipeline;
pub mod raster;
pub mod synthgen;
pub mod tracer;

pub use error::{Error, Result};
