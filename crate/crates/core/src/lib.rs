//! Non-contrastive unsupervised learning of bandlimited quasi-periodic signals
//! (pulse and respiration analogs) from video-like tensors.
//!
//! The crate is organized bottom-up:
//!
//! * [`spectral`]: power spectra, band bins, sliding-window rates, SNR
//! * [`losses`]: bandwidth, sparsity and variance losses with analytic gradients
//! * [`model`]: a small spatial + temporal-convolution regressor and Adam
//! * [`augment`]: spatial, intensity, temporal and frequency augmentations
//! * [`synth`]: synthetic positive, poisoned and motion data
//! * [`train`]: unsupervised training, personalization, test-time adaptation,
//!   poisoning sweeps
//! * [`eval`]: rate metrics, ZCA baseline, forgetting report
//! * [`config`]: the run configuration consumed by the `sinc` binary

pub mod augment;
pub mod clip;
pub mod config;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod seed;
pub mod spectral;
pub mod synth;
pub mod train;
pub mod util;

pub use clip::{Clip, ClipDims, ClipLabel};
pub use error::{Result, SincError};
pub use losses::{LossBreakdown, LossWeights};
pub use model::{AdamConfig, ModelConfig, ModelParams};
pub use spectral::{Bandlimits, RateSeries, SpectralConfig, Spectrum};
