//! Activation-free multilinear image classifier built from stacked
//! second-order interaction blocks, together with the algebraic verification
//! suite and a small-scale trainer.

pub mod aim;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{DttnError, Result};
