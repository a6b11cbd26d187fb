//! Parameter-transmission-free federated sequential recommendation.
//!
//! Clients train small sequential recommenders on their private
//! interaction logs and upload sequences perturbed with the exponential
//! mechanism; the server trains a larger model on those sequences with two
//! contrastive denoising terms and sends back soft-labeled sequences drawn
//! from similar users. A FedAvg parameter-transmission baseline and a
//! local-only control are included for comparison.

pub mod autodiff;
pub mod client;
pub mod data;
pub mod error;
pub mod eval;
pub mod protocol;
pub mod rng;
pub mod seqmodels;
pub mod server;
pub mod tensor;
pub mod wire;

pub use error::{Error, Result};

/// Dense item id; 0 is reserved for padding.
pub type ItemId = u32;
/// Dense user id.
pub type UserId = u32;
