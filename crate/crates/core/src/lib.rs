//! Frequency-aware segmentation toolkit.
//!
//! The crate bundles everything needed to train and evaluate a small
//! differentiable segmenter whose objective mixes a spatial loss
//! (binary cross entropy plus soft Dice) with a spectral correlation
//! term computed on the 2D Fourier transforms of the predicted and
//! ground-truth masks:
//!
//! - [`grid`]: dense 2D real/complex fields and label masks.
//! - [`fft`]: exact 2D DFT for arbitrary sizes, shift, and spectrum rendering.
//! - [`losses`]: differentiable losses with analytic gradients.
//! - [`metrics`]: Dice/IoU/HD95/calibration evaluation.
//! - [`synth`]: deterministic synthetic scene generator and noise models.
//! - [`trainer`]: a toy encoder-decoder network with hand-written backprop.
//! - [`rng`]: the fully specified PRNG every stochastic component draws from.

pub mod fft;
pub mod grid;
pub mod losses;
pub mod metrics;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use fft::FftPlan;
pub use grid::{Grid, LabelMask, SpectrumGrid};
pub use losses::{LossConfig, LossResult};
pub use synth::{SceneConfig, SceneSample};
pub use trainer::{NetParams, NetSpec, TrainConfig};
