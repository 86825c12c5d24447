//! Sparse-view 3D reconstruction that couples classical plane-sweep
//! stereo with a differentiable voxel signed-distance renderer.
//!
//! The coarse stereo stage produces per-pixel depth probability volumes
//! that supervise volume-rendering weights through a noise-tolerant
//! generalized cross-entropy loss; depths rendered from the optimized
//! grid then guide the finer stereo stages with a narrowed search
//! range. The crate also provides image-based novel-view synthesis,
//! evaluation metrics, synthetic ground-truth scenes, and bit-exact
//! file formats, all driven by the `recon` command-line binary.

pub mod bounds;
pub mod camera;
pub mod error;
pub mod eval;
pub mod ibr;
pub mod img;
pub mod io;
pub mod losses;
pub mod mvs;
pub mod pipeline;
pub mod scene;
pub mod sdf;

pub use error::{Error, Result};
