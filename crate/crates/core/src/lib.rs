//! Marginal regression for balanced longitudinal data by estimating equations:
//! working independence, fixed-structure GEE, pseudo-likelihood (pilot-estimated
//! correlation) and the asymptotic quasi-score with a prefix-averaged, β-dependent
//! correlation estimate.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod correlation;
pub mod diagnostics;
pub mod error;
pub mod estimator;
pub mod linalg;
pub mod model;
pub mod simulation;

pub use correlation::{
    aqs_correlation, aqs_correlation_derivative, default_burn_in, structured_correlation, validate_correlation,
    working_correlation, working_correlation_inverse, CorrelationModel, CorrelationPath, CorrelationSpec, RidgePolicy,
    Structure,
};
pub use diagnostics::{
    eta_slope, h_indep, hypothesis_check, information_matrix, optimality_matrices_mc, regularity_constants,
    BallSampling, HypothesisOptions, HypothesisReport, OptimalityMatrices, RegularityConstants,
};
pub use error::{GeeError, Result};
pub use estimator::{
    estimating_function, estimating_jacobian, fit, fit_method, newton_solve, EstimatingContext, FitResult,
    JacobianDecomposition, MethodSpec, SolverSettings,
};
pub use model::{
    marginal_mean, mean_jacobian, read_dataset, read_dataset_file, standardized_residual, variance_matrix,
    write_dataset, Individual, Link, LinkValues, LongitudinalDataset,
};
pub use simulation::{
    consistency_trace, efficiency_comparison, quasi_score_identity_check, residual_trace_check, GeneratorConfig,
    MethodSummary, QFamily, Simulator,
};
