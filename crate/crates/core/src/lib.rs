//! Label-free semantic Gaussian splatting.
//!
//! Each Gaussian carries an identity-coupled semantic field entry: a learned
//! feature vector plus a view-consistent instance label. Labels come from
//! density clustering in a joint position/color/semantic space; features are
//! distilled from a 2D teacher at pixel and instance level and regularized
//! with a 2D-3D contrastive loss, the two steps alternating during training.

pub mod cluster;
pub mod distill;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod pipeline;
pub mod raster;
pub mod rng;
pub mod scene;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
