//! Prior-guided multimodal trajectory forecasting.
//!
//! The crate is organised bottom-up:
//!
//! * [`traj`] - trajectory types, displacement metrics, dataset ingestion and
//!   a synthetic junction-scene generator.
//! * [`tensor`] and [`tape`] - dense matrices and a reverse-mode autodiff tape.
//! * [`nets`] - encoders, projection heads, cross-attention, decoder and the
//!   parameter store.
//! * [`batch_prior`] - graph clustering of a batch into a Gaussian mixture.
//! * [`global_prior`] - the trainable global mixture, conditioning and sampling.
//! * [`ot`] - Wasserstein costs and log-domain Sinkhorn.
//! * [`train`] - losses, AdamW, the training loop, inference and ablations.
//! * [`theory`] - exact discrete checks of the prior-quality bounds.

pub mod batch_prior;
pub mod error;
pub mod global_prior;
pub mod nets;
pub mod ot;
pub mod simplex;
pub mod tape;
pub mod tensor;
pub mod theory;
pub mod train;
pub mod traj;

pub use error::{Error, Result};
