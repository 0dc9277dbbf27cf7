//! Parameter estimation: the exponential recovery fit for the singlet
//! lifetime and joint multi-trace fits of the rate models.

mod lm;
mod problem;
mod recovery;
mod stats;

pub use lm::{minimize, normal_covariance, LeastSquares, LmOptions, LmOutcome, StopReason};
pub use problem::{
    amplitude_groups, fit_model, free_parameters, internal_start, predict, propagate_lifetime, residual_jacobian,
    weighted_residuals,
    Dataset, DatasetResidual, FitProblem, FitResult, FitStrategy, FreeParameter, JacobianMode, LifetimeEstimate,
    ParameterEstimate, StartDiagnostics,
};
pub use recovery::{fit_recovery, RecoveryFitResult};
pub use stats::{format_uncertainty, lifetime_with_uncertainty, runs_test, summarize, EnsembleSummary, RunsTest};
