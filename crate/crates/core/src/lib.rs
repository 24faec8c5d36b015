//! Dissipative implicit residual layers.
//!
//! A residual block `y = x + F(γ, (1 − θ)x + θy)` whose vector field is
//! spectrally normalized and shifted so every Jacobian eigenvalue sits in a
//! disk chosen through the θ-scheme stability function. Trained with the
//! regularizers in [`regularize`], the data manifold becomes a locally
//! attractive set of fixed points of the block.
//!
//! Module map:
//! - [`numerics`]: dense linear algebra, power iteration, Hutchinson
//!   estimation and a reverse-mode tape.
//! - [`stability`]: the stability function, its inverse, regions and disks.
//! - [`field`]: the normalized MLP and its localization `F = c·x + r·F̃`.
//! - [`layer`]: implicit forward solves, adjoint steps and trajectories.
//! - [`regularize`]: the four manifold regularizers.
//! - [`train`]: datasets, configs, the Adam loop and checkpoints.

pub mod activation;
pub mod field;
pub mod layer;
pub mod numerics;
pub mod par;
pub mod regularize;
pub mod stability;
pub mod train;

pub use activation::Activation;
