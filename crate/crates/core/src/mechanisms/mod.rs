//! Sensitivity analysis, Gaussian noise calibration and sampling, and the
//! estimators that turn noisy moments into released statistics.

mod calibration;
mod estimator;
mod sampler;
mod sensitivity;
mod weights;

use thiserror::Error;

pub use calibration::{calibrate_sigma, gaussian_delta, normal_cdf, upper_normal_quantile};
pub use estimator::{estimate, plug_in, AggregateKind, Estimate, MomentSet};
pub use sampler::{granularity_for, pow2_floor, DiscreteGaussian, NoiseSpec};
pub use sensitivity::{
    clamp, max_corner_product, sensitivity_for, ClampBounds, ContributionCaps, Quantity, SensitivityProfile,
};
pub use weights::{optimize_weights, objective, pilot_from_bounds, EstimatorWeights};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MechanismError {
    #[error("{0}")]
    InvalidBounds(String),
    #[error("clamp bounds required for quantity '{0}'")]
    MissingBounds(&'static str),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("{kind} needs the '{what}' moment")]
    MissingMoment { kind: &'static str, what: &'static str },
    #[error("{kind} expects {expected} noise specifications, got {got}")]
    NoiseArity {
        kind: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("weights are only defined for quadratic aggregates, not {0}")]
    NotQuadratic(&'static str),
}
