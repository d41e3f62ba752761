//! Dual-encoder video quality assessment with a prefix-LM decoder: context
//! and pixel vision pathways, a regression head, multi-task training on a
//! synthetic severity-ladder corpus, and SRCC/PLCC/flip-rate evaluation.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod media;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod quality_head;
pub mod training;

pub use error::{Error, Result};
