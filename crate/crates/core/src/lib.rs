//! Unified multi-modal remote-sensing encoder with self-supervised
//! teacher-student pre-training, sized for a desk.

pub mod backbone;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod modality;
pub mod nn;
pub mod objectives;
pub mod trainer;

pub use error::{Error, Result};
pub use modality::Modality;
