//! Causal fused lasso estimators for heterogeneous treatment effects.
//!
//! Units are ordered by an estimated prognostic or propensity score, matched
//! across arms to impute their missing potential outcomes, and the imputed
//! effects are denoised with an exact 1-D fused lasso whose penalty is picked
//! by BIC. The blocks of the fit are data-driven subgroups.

pub mod error;
pub mod estimator;
pub mod score_models;
pub mod simbench;
pub mod tuning;
pub mod tv_solver;

pub use error::{CflError, Result};
pub use estimator::{
    estimate, estimate_treated_only, predecessor_estimate, predict_new, Dataset, EstimateConfig,
    EstimateReport, LambdaPolicy,
};
pub use score_models::{ScoreFit, ScoreKind};
pub use tuning::{BicForm, GridSpec, LambdaPath};
pub use tv_solver::{fused_lasso_solve, lambda_max, total_variation, FusedSolution, Signal};
