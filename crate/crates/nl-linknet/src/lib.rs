//! Desk-scale implementation of the NL-LinkNet road-extraction
//! architecture: a small tensor/autodiff engine, non-local attention
//! blocks with three pairwise similarity functions, the LinkNet-style
//! encoder/decoder network, the training and test-time-augmentation
//! protocols, and a seeded synthetic occluded-road dataset for
//! experiments that fit on a laptop.

pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod network;
pub mod nonlocal;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
