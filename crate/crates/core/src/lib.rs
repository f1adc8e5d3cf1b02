//! Reward-free trajectory augmentation for offline goal-conditioned data.
//!
//! The crate is organised bottom-up:
//!
//! - [`maze`]: deterministic grid-maze dynamics, the BFS temporal-distance
//!   oracle, dataset generators and the NDJSON dataset format.
//! - [`nn`]: dense MLPs with hand-written reverse-mode gradients, Adam, and
//!   parameter files.
//! - [`embedding`]: the temporal-distance-preserving state embedding trained
//!   with expectile TD regression.
//! - [`diffusion`]: noise schedules, epsilon-prediction training and
//!   DDPM/DDIM samplers with inpainting-style clamping.
//! - [`index`]: trajectory segments and flat/IVF nearest-neighbour search in
//!   latent space.
//! - [`augment`]: the stitching loop (direction sampling, progress and novelty
//!   scoring, diffusion bridges, inverse-dynamics action labels).
//! - [`planner`]: hierarchical diffusion planning, the value-based controller,
//!   closed-loop evaluation and metrics.
//! - [`plot`]: standalone SVG rendering of mazes and trajectories.

pub mod augment;
pub mod diffusion;
pub mod embedding;
pub mod error;
pub mod index;
pub mod maze;
pub mod nn;
pub mod norm;
pub mod planner;
pub mod plot;
pub mod seed;

pub use error::{Error, Result};
