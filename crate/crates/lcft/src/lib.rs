//! Desk-scale simulator for label-corrected on-device fine-tuning of CTR
//! prediction models.
//!
//! A cloud model is trained over the pooled impressions of many users, then
//! fine-tuned per user on that user's local samples. When a user's local
//! click-through rate drifts away from the global one, plain fine-tuning
//! skews the sparsely updated parameters and can make item ranking worse.
//! This crate reproduces the effect and the repair: rewriting each user's
//! labels so the local loss minimizer aligns with the global CTR before
//! fine-tuning.
//!
//! Start with the runnable examples (`cargo run --example <name>`), or the
//! `lcft` binary for the file-driven pipeline.

pub mod correction;
pub mod data;
pub mod eval;
pub mod example_one;
pub mod experiment;
pub mod kernel;
pub mod models;
pub mod training;
