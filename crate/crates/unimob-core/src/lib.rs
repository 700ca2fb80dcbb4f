//! Core algorithms for unified human-mobility prediction.
//!
//! One model covers both sides of mobility data: individual trajectories
//! (per-user visit sequences) and crowd flows (per-region inflow/outflow
//! series). Both are windowed into fixed-width tokens, trained jointly with
//! a diffusion denoiser over paired token sequences plus bidirectional
//! individual/collective alignment losses, and decoded back to locations or
//! flow values.
//!
//! This crate is `no_std`-compatible (requires `alloc`); all IO, file
//! formats, and the CLI live in the companion `unimob` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod alignment;
pub mod baselines;
pub mod denoiser;
pub mod diffusion;
pub mod domain;
pub mod eval;
pub mod graph;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod predict;
pub mod rng;
pub mod synth;
pub mod tokenizer;
pub mod train;
