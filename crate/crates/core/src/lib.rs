//! HiFIRec: multi-behavior recommendation with hierarchical fine-grained
//! propagation and an intensity-aware non-sampling loss.
//!
//! Numeric code is generic over [`Scalar`]; training runs in `f32`
//! ([`Real`]) and gradient verification in `f64` ([`Exact`]).

pub mod behavior;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod graph;
pub mod loss;
pub mod matrix;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod synthetic;
pub mod train;

pub use behavior::{Behavior, NUM_BEHAVIORS};
pub use config::{AcgMode, Activation, Neighborhood, Sampling, TrainConfig, VariantSpec};
pub use error::{Error, Result};
pub use graph::BehaviorGraph;
pub use matrix::Matrix;
pub use scalar::Scalar;

/// Training precision.
pub type Real = f32;
/// Verification precision.
pub type Exact = f64;

pub type Params = model::ParameterSet<Real>;
pub type ExactParams = model::ParameterSet<Exact>;
pub type Trace = model::ForwardTrace<Real>;
pub type ExactTrace = model::ForwardTrace<Exact>;
pub type WeightTable = loss::NegativeWeightTable<Real>;
