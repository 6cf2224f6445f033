//! Similarity scores: a linear prognostic score fitted by least squares on
//! control rows, and a logistic propensity score fitted by IRLS.

use nalgebra::{DMatrix, DVector};

use crate::error::{CflError, Result};

/// Relative singular-value cutoff for the least-squares rank decision.
pub const RANK_TOLERANCE: f64 = 1e-10;
/// Gradient ∞-norm at which IRLS stops.
pub const IRLS_TOLERANCE: f64 = 1e-8;
pub const IRLS_MAX_ITER: usize = 100;
/// Coefficient norm beyond which a non-converged logistic fit is declared separated.
pub const SEPARATION_NORM: f64 = 1e4;
const RIDGE_JITTER: f64 = 1e-10;
const MAX_HALVINGS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScoreKind {
    Prognostic,
    Propensity,
}

impl ScoreKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScoreKind::Prognostic => "prognostic",
            ScoreKind::Propensity => "propensity",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreFit {
    pub kind: ScoreKind,
    pub theta: Vec<f64>,
    pub n_fit: usize,
    pub converged: bool,
    pub gradient_norm: f64,
    pub iterations: usize,
    /// Numerical rank of the design (prognostic) or of the final weighted Gram matrix.
    pub rank: usize,
    pub warnings: Vec<String>,
}

impl ScoreFit {
    pub fn dim(&self) -> usize {
        self.theta.len()
    }
}

fn check_design(covariates: &DMatrix<f64>, response: &[f64]) -> Result<()> {
    if covariates.ncols() == 0 {
        return Err(CflError::invalid("design matrix has no columns"));
    }
    if covariates.nrows() != response.len() {
        return Err(CflError::invalid(format!(
            "design has {} rows but response has {}",
            covariates.nrows(),
            response.len()
        )));
    }
    if covariates.iter().chain(response).any(|v| !v.is_finite()) {
        return Err(CflError::invalid("non-finite value in score-model input"));
    }
    Ok(())
}

/// Least-squares fit of `outcomes` on `covariates` (control rows only).
///
/// Rank-deficient designs get the minimum-norm solution and a warning.
pub fn fit_prognostic(covariates: &DMatrix<f64>, outcomes: &[f64]) -> Result<ScoreFit> {
    if covariates.nrows() == 0 {
        return Err(CflError::EmptyControlGroup);
    }
    check_design(covariates, outcomes)?;
    let m = covariates.nrows();
    let d = covariates.ncols();
    let y = DVector::from_column_slice(outcomes);

    let svd = covariates.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    let cutoff = RANK_TOLERANCE * sigma_max;
    let rank = svd.singular_values.iter().filter(|&&s| s > cutoff).count();
    let theta = if sigma_max == 0.0 {
        DVector::zeros(d)
    } else {
        svd.solve(&y, cutoff)
            .map_err(|e| CflError::invalid(format!("least-squares solve failed: {e}")))?
    };

    let residual = &y - covariates * &theta;
    let gradient = covariates.transpose() * &residual * (-2.0 / m as f64);
    let mut warnings = Vec::new();
    if rank < d {
        warnings.push(format!(
            "design is rank deficient (rank {rank} < {d}); using the minimum-norm solution"
        ));
    }
    Ok(ScoreFit {
        kind: ScoreKind::Prognostic,
        theta: theta.iter().copied().collect(),
        n_fit: m,
        converged: true,
        gradient_norm: gradient.amax(),
        iterations: 1,
        rank,
        warnings,
    })
}

/// Logistic function `exp(t)/(1+exp(t))`, evaluated without overflow.
pub fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn log_likelihood(eta: &DVector<f64>, z: &[f64]) -> f64 {
    eta.iter()
        .zip(z)
        .map(|(&e, &zi)| zi * e - softplus(e))
        .sum()
}

/// Maximum-likelihood logistic regression of `treatments` on `covariates`.
pub fn fit_propensity(covariates: &DMatrix<f64>, treatments: &[u8]) -> Result<ScoreFit> {
    let m = covariates.nrows();
    if m < 2 {
        return Err(CflError::invalid(format!(
            "propensity fit needs at least 2 rows, got {m}"
        )));
    }
    if let Some(&bad) = treatments.iter().find(|&&t| t > 1) {
        return Err(CflError::invalid(format!(
            "treatment value {bad} is not binary"
        )));
    }
    let z: Vec<f64> = treatments.iter().map(|&t| f64::from(t)).collect();
    check_design(covariates, &z)?;
    let treated = treatments.iter().filter(|&&t| t == 1).count();
    if treated == 0 || treated == m {
        return Err(CflError::DegenerateArm(
            "propensity fit rows contain a single treatment arm".into(),
        ));
    }

    let d = covariates.ncols();
    let xt = covariates.transpose();
    let mut theta = DVector::<f64>::zeros(d);
    let mut eta = covariates * &theta;
    let mut ll = log_likelihood(&eta, &z);
    let mut warnings = Vec::new();
    let mut converged = false;
    let mut gradient_norm = f64::INFINITY;
    let mut rank = d;
    let mut iterations = 0;

    for iter in 0..=IRLS_MAX_ITER {
        iterations = iter;
        let p: Vec<f64> = eta.iter().map(|&e| logistic(e)).collect();
        // Every row on the correct side of 1/2 means the arms are linearly separable.
        if p.iter().zip(&z).all(|(pi, zi)| (zi - pi).abs() < 0.5) {
            return Err(CflError::Separation(
                "fitted probabilities classify every row correctly, so the likelihood has no maximizer"
                    .into(),
            ));
        }
        let resid = DVector::from_iterator(m, p.iter().zip(&z).map(|(pi, zi)| zi - pi));
        let gradient = &xt * &resid;
        gradient_norm = gradient.amax();
        if gradient_norm < IRLS_TOLERANCE {
            converged = true;
            break;
        }
        if theta.norm() > SEPARATION_NORM {
            return Err(CflError::Separation(format!(
                "coefficient norm exceeded {SEPARATION_NORM:e} before the gradient converged"
            )));
        }
        if iter == IRLS_MAX_ITER {
            break;
        }

        let mut weighted = covariates.clone();
        for (mut row, pi) in weighted.row_iter_mut().zip(&p) {
            row *= pi * (1.0 - pi);
        }
        let gram = &xt * weighted;
        let (step, gram_rank) = newton_step(gram, &gradient, &mut warnings);
        rank = gram_rank;

        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let candidate = &theta + &step * scale;
            let cand_eta = covariates * &candidate;
            let cand_ll = log_likelihood(&cand_eta, &z);
            if cand_ll >= ll {
                theta = candidate;
                eta = cand_eta;
                ll = cand_ll;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            warnings.push("line search stalled; returning the last accepted iterate".into());
            break;
        }
    }

    if !converged {
        warnings.push(format!(
            "IRLS stopped after {iterations} iterations with gradient norm {gradient_norm:e}"
        ));
    }
    Ok(ScoreFit {
        kind: ScoreKind::Propensity,
        theta: theta.iter().copied().collect(),
        n_fit: m,
        converged,
        gradient_norm,
        iterations,
        rank,
        warnings,
    })
}

fn newton_step(
    gram: DMatrix<f64>,
    gradient: &DVector<f64>,
    warnings: &mut Vec<String>,
) -> (DVector<f64>, usize) {
    let d = gram.nrows();
    if let Some(chol) = gram.clone().cholesky() {
        return (chol.solve(gradient), d);
    }
    let diag_scale = gram.diagonal().amax().max(1.0);
    let mut jittered = gram.clone();
    for i in 0..d {
        jittered[(i, i)] += RIDGE_JITTER * diag_scale;
    }
    if !warnings.iter().any(|w| w.starts_with("weighted Gram")) {
        warnings.push("weighted Gram matrix numerically singular; ridge jitter applied".into());
    }
    if let Some(chol) = jittered.cholesky() {
        return (chol.solve(gradient), d);
    }
    let svd = gram.svd(true, true);
    let cutoff = RANK_TOLERANCE * svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&s| s > cutoff).count();
    let step = svd
        .solve(gradient, cutoff)
        .unwrap_or_else(|_| DVector::zeros(d));
    (step, rank)
}

/// Evaluates a fitted score at covariate vector `x`.
pub fn score(fit: &ScoreFit, x: &[f64]) -> Result<f64> {
    if x.len() != fit.dim() {
        return Err(CflError::invalid(format!(
            "covariate vector has length {} but the score expects {}",
            x.len(),
            fit.dim()
        )));
    }
    let index: f64 = x.iter().zip(&fit.theta).map(|(a, b)| a * b).sum();
    Ok(match fit.kind {
        ScoreKind::Prognostic => index,
        ScoreKind::Propensity => clamp_open_unit(logistic(index)),
    })
}

/// Keeps a probability strictly inside (0, 1).
fn clamp_open_unit(p: f64) -> f64 {
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Scores every row of `covariates`.
pub fn score_rows(fit: &ScoreFit, covariates: &DMatrix<f64>) -> Result<Vec<f64>> {
    if covariates.ncols() != fit.dim() {
        return Err(CflError::invalid(format!(
            "design has {} columns but the score expects {}",
            covariates.ncols(),
            fit.dim()
        )));
    }
    covariates
        .row_iter()
        .map(|row| {
            let x: Vec<f64> = row.iter().copied().collect();
            score(fit, &x)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> DMatrix<f64> {
        let d = rows[0].len();
        DMatrix::from_row_iterator(rows.len(), d, rows.iter().flat_map(|r| r.iter().copied()))
    }

    #[test]
    fn prognostic_exact_fits() {
        let fit = fit_prognostic(&mat(&[&[1.0], &[2.0]]), &[2.0, 4.0]).unwrap();
        assert!((fit.theta[0] - 2.0).abs() < 1e-12);

        let fit = fit_prognostic(
            &mat(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]),
            &[1.0, 2.0, 3.0],
        )
        .unwrap();
        assert!((fit.theta[0] - 1.0).abs() < 1e-12);
        assert!((fit.theta[1] - 2.0).abs() < 1e-12);
        assert!(fit.converged);
        assert!(fit.warnings.is_empty());
    }

    #[test]
    fn prognostic_normal_equations() {
        // θ = Σxy / Σx² = (1 + 4 + 12) / 14.
        let fit = fit_prognostic(&mat(&[&[1.0], &[2.0], &[3.0]]), &[1.0, 2.0, 4.0]).unwrap();
        assert!((fit.theta[0] - 17.0 / 14.0).abs() < 1e-14);
        assert!(fit.gradient_norm < 1e-12);
    }

    #[test]
    fn prognostic_rank_deficient_uses_min_norm() {
        // Duplicate columns: min-norm splits the coefficient equally.
        let fit = fit_prognostic(&mat(&[&[1.0, 1.0], &[2.0, 2.0]]), &[2.0, 4.0]).unwrap();
        assert_eq!(fit.rank, 1);
        assert!((fit.theta[0] - 1.0).abs() < 1e-12);
        assert!((fit.theta[1] - 1.0).abs() < 1e-12);
        assert!(!fit.warnings.is_empty());
    }

    #[test]
    fn prognostic_errors() {
        let empty = DMatrix::<f64>::zeros(0, 2);
        assert_eq!(
            fit_prognostic(&empty, &[]),
            Err(CflError::EmptyControlGroup)
        );
        assert!(matches!(
            fit_prognostic(&mat(&[&[f64::NAN]]), &[1.0]),
            Err(CflError::InvalidInput(_))
        ));
    }

    #[test]
    fn propensity_symmetric_gives_zero() {
        let x = mat(&[&[-1.0], &[1.0], &[-1.0], &[1.0]]);
        let fit = fit_propensity(&x, &[0, 1, 1, 0]).unwrap();
        assert_eq!(fit.theta, vec![0.0]);
        assert!(fit.converged);
    }

    #[test]
    fn propensity_separation_detected() {
        let x = mat(&[&[-1.0], &[1.0]]);
        assert!(matches!(
            fit_propensity(&x, &[0, 1]),
            Err(CflError::Separation(_))
        ));
    }

    #[test]
    fn propensity_single_arm() {
        let x = mat(&[&[-1.0], &[1.0]]);
        assert!(matches!(
            fit_propensity(&x, &[1, 1]),
            Err(CflError::DegenerateArm(_))
        ));
        assert!(matches!(
            fit_propensity(&x, &[0, 2]),
            Err(CflError::InvalidInput(_))
        ));
    }

    #[test]
    fn score_examples() {
        let prog = ScoreFit {
            kind: ScoreKind::Prognostic,
            theta: vec![2.0],
            n_fit: 1,
            converged: true,
            gradient_norm: 0.0,
            iterations: 1,
            rank: 1,
            warnings: vec![],
        };
        assert_eq!(score(&prog, &[3.0]).unwrap(), 6.0);
        assert!(score(&prog, &[3.0, 1.0]).is_err());

        let prop = ScoreFit {
            kind: ScoreKind::Propensity,
            theta: vec![0.0, 0.0],
            ..prog.clone()
        };
        assert_eq!(score(&prop, &[5.0, -7.0]).unwrap(), 0.5);

        let prop = ScoreFit {
            kind: ScoreKind::Propensity,
            theta: vec![1.0],
            ..prog
        };
        assert!((score(&prop, &[3f64.ln()]).unwrap() - 0.75).abs() < 1e-15);
        let extreme = score(&prop, &[1e4]).unwrap();
        assert!(extreme > 0.0 && extreme < 1.0);
        let extreme = score(&prop, &[-1e4]).unwrap();
        assert!(extreme > 0.0 && extreme < 1.0);
    }
}
