//! Statistical shape modeling of multi-organ anatomies with shared boundaries.
//!
//! The crate covers the whole pipeline:
//!
//! - [`mesh`]: triangle meshes, I/O, remeshing, smoothing, closest-point
//!   queries, boundary loops and rigid alignment;
//! - [`shared_boundary`]: splitting two adjoining organ meshes into two
//!   remainders, the shared surface between them and its contour;
//! - [`particles`]: the entropy-based particle correspondence optimizer with
//!   contour repulsion;
//! - [`stats`]: mean shapes, PCA modes, group differences, shape scores and
//!   the subsampling imbalance test;
//! - [`synth`]: synthetic two-organ cohorts;
//! - [`project`]: the batch `groom` / `optimize` / `analyze` / `synth` commands.

pub mod error;
pub mod mesh;
pub mod particles;
pub mod primitives;
pub mod project;
pub mod shared_boundary;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
