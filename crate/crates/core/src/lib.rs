//! Patch-wise conditional denoising diffusion for segmentation-mask-guided
//! image synthesis, plus the machinery to measure whether the synthetic
//! images are useful for training a segmenter.
//!
//! The crate is organized bottom-up:
//!
//! - [`nn`]: tensors, a reverse-mode tape, Adam, and a small U-Net.
//! - [`schedule`]: the linear variance schedule and its running products.
//! - [`diffusion`]: forward noising, the noise-prediction loss, the reverse
//!   transition, whole-image sampling and the patch-wise training loop.
//! - [`patching`]: coordinate grids, random patch crops and condition
//!   channel assembly.
//! - [`phantom`]: procedural lung-slice phantoms with exact nodule masks and
//!   the volume file format.
//! - [`segeval`]: Dice scoring, Welch p-values, the mini segmenter and the
//!   three-arm utility experiment.
//! - [`cli`]: experiment config, checkpoints and the command implementations
//!   behind the `patchdiff` binary.
//!
//! Runnable walkthroughs of each capability live in `examples/`.

pub mod cli;
pub mod diffusion;
pub mod error;
pub mod nn;
pub mod patching;
pub mod phantom;
pub mod rng;
pub mod schedule;
pub mod segeval;
pub mod volume;

pub use error::{Error, Result};
pub use volume::Volume;
