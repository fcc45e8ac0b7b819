//! Continual few-shot relation classification.
//!
//! The crate trains a compact entity-marker encoder over a sequence of
//! relation classification tasks, where only the first task is data rich.
//! Forgetting is countered with a small exemplar memory, prototype-based
//! pseudo samples, entity-swap data augmentation and a chain of
//! distillation losses against the previous task's model.

pub mod artifacts;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod memory;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
