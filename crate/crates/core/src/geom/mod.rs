//! Cameras, meshes, strands, orientation histograms and other shared
//! geometric types.

pub mod angles;
pub mod bbox;
pub mod camera;
pub mod histogram;
pub mod mesh;
pub mod pointgrid;
pub mod strand;

pub use angles::{direction, to_angles, ORIENTATION_BINS};
pub use bbox::{ray_box_clip, HairBBox};
pub use camera::Camera;
pub use histogram::{OrientationHistogram2D, OrientationHistogram3D};
pub use mesh::{MeshDistance, TriMesh};
pub use strand::{resample_strand, Strand, STRAND_VERTICES};
