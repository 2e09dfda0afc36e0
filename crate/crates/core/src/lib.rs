//! Matrix factorization under missing-not-at-random feedback, with the
//! domain adversarial trainer (DAMF) and the usual debiasing baselines.

pub mod error;
pub mod estimators;
pub mod experiment;
pub mod io;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod propensity;
pub mod synth;
pub mod trainers;

pub use error::{Error, Result};
pub use model::{BoundConfig, FactorModel, InteractionSet, PropensityMap, Rating, RatingScale, TrainConfig};
