//! Gaussian radio fields: learn a continuous MIMO channel map from sparse
//! channel measurements and render `N_t × N_r` channel matrices at new receiver
//! positions.
//!
//! The crate also ships the synthetic ray tracer used to produce training data,
//! two reference baselines and two splatting-based comparison models, all
//! trainable with the same loop.

pub mod antenna;
pub mod baselines;
pub mod channel;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod gaussian;
pub mod math;
pub mod model;
pub mod networks;
pub mod raysim;
pub mod renderer;
pub mod splat;
pub mod trainer;

pub use channel::ChannelMatrix;
pub use error::{Error, Result};
pub use math::{Complex, Quaternion, Vec3};
pub use model::{FieldModel, Query, RendererKind};
