//! Score augmentation for diffusion models at desk scale.
//!
//! Linear augmentation operators on noisy data, closed-form optimal denoisers
//! and scores in augmented spaces, numerical checks of the score
//! transformation rule under smooth maps, a small trainable denoiser with
//! analytic gradients, and a deterministic Heun PF-ODE sampler.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod par;
pub mod sampler;
pub mod schedule;
pub mod theorem;
pub mod train;
pub mod transforms;
pub mod verify;

pub use error::{Error, Result};
