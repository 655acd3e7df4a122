//! Decomposing CNN classifiers into per-class binary modules and
//! recomposing them.
//!
//! A [`graph::ModelGraph`] is a trained classifier. [`concern`] finds the
//! positions it leaves inactive for one class; [`modularizer`] turns that
//! into a [`modularizer::Module`]; [`composer`] runs sets of modules as a
//! multi-class classifier.

pub mod composer;
pub mod concern;
pub mod container;
pub mod error;
pub mod graph;
pub mod inference;
pub mod manifest;
pub mod metrics;
pub mod modularizer;
pub mod scenario;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
