//! Stereo video retargeting: saliency-driven column warping, a toy
//! stereo-transformer training loop, and retargeting quality metrics.

pub mod adam;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod pam;
pub mod recon;
pub mod saliency;
pub mod svt;
pub mod tensor;
pub mod warp;
pub mod weights;

pub use error::{Error, Result};
