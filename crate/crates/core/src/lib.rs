//! Normalizing-flow patch priors for MAP denoising and speckle suppression.
//!
//! The crate covers the whole pipeline: patch corpus construction
//! ([`patches`]), a Glow-style flow with exact likelihoods and hand-written
//! gradients ([`flow`]), maximum-likelihood training ([`trainer`]), latent
//! space MAP inference ([`map`]), noise simulation ([`speckle`]) and the
//! non-local means baseline with PSNR/SSIM ([`baselines`]).

pub mod baselines;
pub mod error;
pub mod flow;
pub mod image_io;
pub mod map;
pub mod patches;
pub mod speckle;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use flow::{FlowModel, FlowTopology, LatentState};
pub use image_io::Image;
pub use patches::PatchBatch;
pub use tensor::{Real, Tensor};
