//! Quantized surrogate modeling and optimal control.
//!
//! The pipeline: quantize a box control set `U` into finitely many values
//! `V`, simulate each resulting autonomous system, fit one surrogate per
//! control value, and solve the relaxed control problem over convex
//! combinations of the surrogates inside a receding-horizon loop. Controls
//! are recovered either by interpolation or by sum-up rounding. The
//! `bounds` module evaluates the a-priori error estimates for these routes.

pub mod dynamics;
pub mod quantization;
pub mod datagen;
pub mod surrogates;
pub mod optimize;
pub mod mpc;
pub mod bounds;
pub mod config;
pub mod experiments;
pub mod manifest;
