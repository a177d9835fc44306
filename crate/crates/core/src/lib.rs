//! Confidence-gated multi-model question answering.
//!
//! A primary model first judges whether it is sure of a question. Sure
//! questions are answered by the primary alone; the rest go to two helper
//! models whose choices the primary then weighs in a chain-of-thought
//! synthesis step. The crate also ships dataset loaders and an evaluation
//! harness for ablations and report tables.

pub mod client;
pub mod datasets;
pub mod domain;
pub mod engine;
pub mod evalharness;
pub mod prompts;
