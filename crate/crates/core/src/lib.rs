//! Functa toolkit: fits array data (images, voxel grids, posed scenes,
//! sphere-mapped grids) as latent-modulated sinusoidal networks via
//! double-loop meta-learning, persists the resulting modulation vectors as
//! functasets, and trains downstream models (neural spline flow, DDPM,
//! classifier) directly on them, including MAP-inference imputation and
//! novel view synthesis.

pub mod classify;
pub mod codec;
pub mod data;
pub mod ddpm;
pub mod error;
pub mod flow;
pub mod functaset;
pub mod infer;
pub mod inr;
pub mod meta;
pub mod opt;
pub mod render;
pub mod rng;
pub mod tape;

pub use error::{FunctaError, Result};
pub use tape::{grad, Tape, Var};
