//! Data-driven reduced order models from invariant foliations.
//!
//! The crate fits invariant foliations, locally defined foliations around
//! invariant manifolds and orthogonal autoencoders to trajectory data, and
//! extracts amplitude dependent frequencies and damping ratios from the
//! resulting two dimensional models.

pub mod autoencoder;
pub mod check;
pub mod data;
pub mod embed;
pub mod error;
pub mod foliation;
pub mod httensor;
pub mod linalg;
pub mod localfoliation;
pub mod matmanifold;
pub mod model;
pub mod pipeline;
pub mod polynomial;
pub mod riemopt;
pub mod romanalysis;
pub mod synth;

pub use data::{AmplitudeMap, Layout, TrajectoryDataset};
pub use error::{Error, Result};
pub use httensor::HtTensor;
pub use matmanifold::{Goae, Manifold};
pub use polynomial::{MonomialBasis, PolyMap};
