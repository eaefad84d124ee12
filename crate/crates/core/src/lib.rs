//! Poly-visual-expert vision-language laboratory.
//!
//! Frozen synthetic experts encode an image into patch grids; a fusion
//! network (MLP with m-patches-one-token, or a Q-Former) turns them into one
//! vision token sequence; a position scheme decides how many learnable PE
//! vectors those tokens consume; a small causal decoder reads interleaved
//! text and image segments. Training runs in two phases and the analysis
//! module measures how much attention answers pay to each expert.

pub mod analysis;
pub mod error;
pub mod expert;
pub mod fusion;
pub mod harness;
pub mod layers;
pub mod lm;
pub mod model;
pub mod numerics;
pub mod positional;
pub mod training;

pub use error::{Error, Result};
