//! Disentangled identity/expression face modelling.
//!
//! The crate covers the whole modelling chain: cross-topology barycentric
//! mapping ([`correspondence`]), spectral action-unit detection
//! ([`spectral`]), blendshape deformation transfer ([`transfer`]), bilinear
//! HOSVD factorization ([`bilinear`]), affine-coupling normalizing flows
//! ([`flow`]), latent-space utilities ([`latent`]) and 3D-3D model fitting
//! ([`fitting`]). [`synth`] generates a deterministic synthetic face family
//! for end-to-end runs.

pub mod bilinear;
mod binio;
pub mod correspondence;
mod error;
pub mod fitting;
pub mod flow;
pub mod fsutil;
pub mod geometry;
pub mod latent;
pub mod linalg;
pub mod spectral;
pub mod stats;
pub mod synth;
pub mod transfer;

pub use error::{Error, Result};
pub use geometry::{Mesh, Vec3};
