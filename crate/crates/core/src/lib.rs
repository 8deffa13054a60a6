//! Identity-conditional denoising diffusion with multi-scale cross-attention.
//!
//! Identity, facial-parsing and gaze embeddings of a source face are turned
//! into condition tokens and injected into a U-Net noise predictor through
//! cross-attention at selectable resolutions. Training adds expert-guided
//! refinement losses on the one-step clean-image estimate.
//!
//! The crate is `no_std` + `alloc`; file formats, image IO and the command
//! line live in the companion `caidd` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod attention;
pub mod ablation;
pub mod autograd;
pub mod denoiser;
pub mod error;
pub mod experts;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod synthfaces;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{ImageTensor, Tensor};
