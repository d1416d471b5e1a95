//! Depth completion by conditional denoising diffusion, guided by image and
//! sparse-depth features, followed by deformable spatial propagation.

pub mod checkpoint;
pub mod data;
pub mod denoiser;
pub mod depth;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod guidance;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod refiner;
pub mod rng;
pub mod train;

pub use depth::{densify_nearest, DepthMap, DepthNormalizer};
pub use error::{Error, ErrorKind, Result};
pub use model::{DepthModel, ModelConfig};
