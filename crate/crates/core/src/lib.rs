//! Latent-space subdomain surrogate solver for 2D PDEs.
//!
//! The crate trains small dense autoencoders on subdomain-level PDE solutions
//! and conditions, then solves unseen steady and transient problems by an
//! unsupervised fixed-point iteration in latent space. A built-in second-order
//! finite-difference solver generates training data and serves as ground truth.

pub mod config;
pub mod encoders;
pub mod error;
pub mod fdm;
pub mod grid;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod sampling;
pub mod solver;
pub mod svg;

pub use error::{Error, Result};
