//! Two-phase cross-view / cross-modal domain adaptation for small
//! spatiotemporal transformers.
//!
//! Phase 1 trains an encoder with cross-entropy plus a supervised
//! contrastive term over synchronized camera views. Phase 2 freezes the
//! lower encoder layers and aligns an unlabeled target modality with the
//! labeled source through a cross-correlation objective over
//! pseudo-label-matched pairs.

pub mod checkpoint;
pub mod config;
pub mod domain;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod objectives;
pub mod optim;
pub mod oracle;
pub mod pairing;
pub mod pipeline;
pub mod reference;
pub mod rng;
pub mod sync;
pub mod synth;
pub mod trainer;

pub use config::{validate_config, TrainConfig};
pub use error::{Error, Result};
