//! Latent graph inference on products of constant-curvature model spaces.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod dgm;
pub mod error;
pub mod gnn;
pub mod manifold;
pub mod product;
pub mod reduction;
pub mod run;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
