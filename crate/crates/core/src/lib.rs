//! Relative monocular depth at desk scale.
//!
//! The crate bundles everything needed to train and evaluate a toy depth
//! regressor with the teacher / pseudo-label / student recipe:
//!
//! * [`tensor`]: dense 64-bit tensors, masks, depth and disparity maps.
//! * [`autodiff`]: a small reverse-mode tape used by every loss and the model.
//! * [`losses`]: affine-invariant, CutMix and feature-alignment losses.
//! * [`perturb`]: color jitter, Gaussian blur and CutMix for unlabeled inputs.
//! * [`model`]: the patch-MLP depth model, frozen encoder and AdamW.
//! * [`synth`]: a seeded synthetic scene generator with a shifted test domain.
//! * [`engine`]: teacher training, pseudo-labeling, student training, ablations.
//! * [`eval`]: scale/shift alignment and the relative-depth metric suite.
//! * [`io`]: PFM, checkpoints, configs and on-disk datasets.

pub mod autodiff;
pub mod engine;
pub mod error;
pub mod eval;
pub mod exec;
pub mod gradcheck_suite;
pub mod io;
pub mod losses;
pub mod model;
pub mod perturb;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use exec::Exec;
pub use tensor::{DepthMap, DepthSample, DisparityMap, Mask, PseudoSample, Tensor};
