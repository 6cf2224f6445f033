//! λ grids, BIC scoring and selection for the fused lasso stage.

use rayon::prelude::*;

use crate::error::{CflError, Result};
use crate::tv_solver::{fused_lasso_solve, lambda_max, Signal};

pub const DEFAULT_GRID_COUNT: usize = 50;
pub const DEFAULT_GRID_SPAN: f64 = 1e-4;

/// Floor on the residual sum of squares inside the BIC logarithm.
pub const RSS_FLOOR: f64 = 1e-12;

/// Grid shape: `count` log-spaced points covering `span` of λ_max.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub count: usize,
    pub span: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            count: DEFAULT_GRID_COUNT,
            span: DEFAULT_GRID_SPAN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathEntry {
    pub lambda: f64,
    pub df: usize,
    pub rss: f64,
    pub bic: f64,
}

/// Evaluated λ path; `selected` indexes the BIC minimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaPath {
    pub entries: Vec<PathEntry>,
    pub selected: usize,
}

impl LambdaPath {
    pub fn grid(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.lambda).collect()
    }

    pub fn selected_entry(&self) -> &PathEntry {
        &self.entries[self.selected]
    }
}

/// Descending log-spaced grid from λ_max down to `span·λ_max`.
///
/// A constant signal has λ_max = 0 and yields the single point `[0]`.
pub fn build_grid(signal: &Signal, spec: GridSpec) -> Result<Vec<f64>> {
    if spec.count < 2 {
        return Err(CflError::invalid(format!(
            "grid needs at least 2 points, got {}",
            spec.count
        )));
    }
    if !(spec.span > 0.0 && spec.span < 1.0) {
        return Err(CflError::invalid(format!(
            "grid span must lie in (0, 1), got {}",
            spec.span
        )));
    }
    let top = lambda_max(signal);
    if top == 0.0 {
        return Ok(vec![0.0]);
    }
    let log_top = top.ln();
    let step = spec.span.ln() / (spec.count - 1) as f64;
    let mut grid: Vec<f64> = (0..spec.count)
        .map(|i| (log_top + step * i as f64).exp())
        .collect();
    grid[0] = top;
    grid[spec.count - 1] = top * spec.span;
    Ok(grid)
}

/// Gaussian profile BIC: `n·ln(max(rss, ε)/n) + df·ln n`.
pub fn bic(n: usize, rss: f64, df: usize) -> f64 {
    let n = n as f64;
    n * (rss.max(RSS_FLOOR) / n).ln() + df as f64 * n.ln()
}

/// BIC with a plug-in noise variance: `rss/σ² + df·ln n`.
pub fn bic_known_variance(n: usize, rss: f64, df: usize, sigma2: f64) -> f64 {
    rss / sigma2.max(RSS_FLOOR) + df as f64 * (n as f64).ln()
}

/// Robust long-run noise variance of a piecewise-constant signal.
///
/// Neighbouring entries of a matched signal share imputed outcomes, so their
/// noise is positively correlated and plain adjacent differences understate
/// the variance that matters for block means. The signal is cut into
/// consecutive batches of `⌈n^{1/3}⌉` values; the MAD of adjacent batch-mean
/// differences, rescaled by the batch length, estimates the long-run variance
/// and tolerates the few differences that straddle a jump. With independent
/// noise it reduces to the usual difference-based estimate.
pub fn noise_variance(signal: &Signal) -> f64 {
    let y = signal.values();
    let n = y.len();
    if n < 2 {
        return 0.0;
    }
    let mut batch = (n as f64).cbrt().ceil() as usize;
    if n / batch < 2 {
        batch = 1;
    }
    let means: Vec<f64> = y
        .chunks_exact(batch)
        .map(|c| c.iter().sum::<f64>() / batch as f64)
        .collect();
    let mut diffs: Vec<f64> = means.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    diffs.sort_by(f64::total_cmp);
    let m = diffs.len();
    let median = if m % 2 == 1 {
        diffs[m / 2]
    } else {
        0.5 * (diffs[m / 2 - 1] + diffs[m / 2])
    };
    let per_batch = if median > 0.0 {
        let sigma = median / (MAD_CONSISTENCY * std::f64::consts::SQRT_2);
        sigma * sigma
    } else {
        // More than half the differences vanish: fall back to their mean square.
        diffs.iter().map(|d| d * d).sum::<f64>() / (2.0 * m as f64)
    };
    batch as f64 * per_batch
}

/// Φ⁻¹(3/4), the MAD consistency constant for Gaussian noise.
const MAD_CONSISTENCY: f64 = 0.674_489_750_196_081_7;

/// Which BIC the selection minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BicForm {
    /// `rss/σ̂² + df·ln n` with σ̂² from [`noise_variance`].
    ///
    /// The profile form diverges as the fit approaches interpolation, so on
    /// a grid reaching far below λ_max it selects near-saturated fits.
    #[default]
    KnownVariance,
    /// `n·ln(rss/n) + df·ln n`.
    Profile,
}

impl BicForm {
    fn score(&self, n: usize, rss: f64, df: usize, sigma2: f64) -> f64 {
        match self {
            BicForm::KnownVariance => bic_known_variance(n, rss, df, sigma2),
            BicForm::Profile => bic(n, rss, df),
        }
    }
}

/// Solves along `grid` and returns the BIC-minimizing λ with the full path.
/// Ties go to the larger λ.
pub fn select_lambda(signal: &Signal, grid: &[f64]) -> Result<(f64, LambdaPath)> {
    select_lambda_with(signal, grid, BicForm::default())
}

/// [`select_lambda`] with an explicit criterion.
pub fn select_lambda_with(
    signal: &Signal,
    grid: &[f64],
    form: BicForm,
) -> Result<(f64, LambdaPath)> {
    if grid.is_empty() {
        return Err(CflError::invalid("lambda grid is empty"));
    }
    let n = signal.len();
    let sigma2 = noise_variance(signal);
    let entries = grid
        .par_iter()
        .map(|&lambda| {
            let sol = fused_lasso_solve(signal, lambda)?;
            let rss = sol.rss(signal);
            Ok(PathEntry {
                lambda,
                df: sol.df,
                rss,
                bic: form.score(n, rss, sol.df, sigma2),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut selected = 0;
    for (i, e) in entries.iter().enumerate().skip(1) {
        let best = &entries[selected];
        let better = e.bic < best.bic || (e.bic == best.bic && e.lambda > best.lambda);
        if better {
            selected = i;
        }
    }
    let lambda = entries[selected].lambda;
    Ok((lambda, LambdaPath { entries, selected }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_log_spacing() {
        // λ_max([0, 2]) = 1.
        let s = Signal::new(vec![0.0, 2.0]).unwrap();
        let g = build_grid(
            &s,
            GridSpec {
                count: 3,
                span: 1e-2,
            },
        )
        .unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g[0], 1.0);
        assert!((g[1] - 0.1).abs() < 1e-15);
        assert!((g[2] - 0.01).abs() < 1e-17);
    }

    #[test]
    fn grid_endpoints_and_constant_signal() {
        let s = Signal::new(vec![1.0, 4.0, 2.0]).unwrap();
        let top = lambda_max(&s);
        let g = build_grid(
            &s,
            GridSpec {
                count: 2,
                span: 0.25,
            },
        )
        .unwrap();
        assert_eq!(g, vec![top, 0.25 * top]);

        let c = Signal::new(vec![3.0; 5]).unwrap();
        assert_eq!(build_grid(&c, GridSpec::default()).unwrap(), vec![0.0]);
    }

    #[test]
    fn grid_is_strictly_descending() {
        let s = Signal::new(vec![0.5, -1.0, 3.0, 2.0, 0.0]).unwrap();
        let g = build_grid(&s, GridSpec::default()).unwrap();
        assert_eq!(g.len(), DEFAULT_GRID_COUNT);
        assert!(g.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn grid_rejects_bad_settings() {
        let s = Signal::new(vec![0.0, 1.0]).unwrap();
        assert!(build_grid(
            &s,
            GridSpec {
                count: 1,
                span: 0.1
            }
        )
        .is_err());
        assert!(build_grid(
            &s,
            GridSpec {
                count: 5,
                span: 1.0
            }
        )
        .is_err());
        assert!(build_grid(
            &s,
            GridSpec {
                count: 5,
                span: 0.0
            }
        )
        .is_err());
    }

    #[test]
    fn bic_examples() {
        assert!((bic(1, std::f64::consts::E, 1) - 1.0).abs() < 1e-15);
        assert!(bic(10, 0.0, 2).is_finite());
        let n = 40;
        let diff = bic(n, 6.0, 3) - bic(n, 3.0, 3);
        assert!((diff - n as f64 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn known_variance_bic() {
        let ln10 = 10f64.ln();
        assert!((bic_known_variance(10, 8.0, 2, 4.0) - (2.0 + 2.0 * ln10)).abs() < 1e-14);
    }

    #[test]
    fn noise_variance_cases() {
        assert_eq!(noise_variance(&Signal::new(vec![3.0]).unwrap()), 0.0);
        assert_eq!(noise_variance(&Signal::new(vec![2.0; 30]).unwrap()), 0.0);
        // n = 8: batches of 2 with means 0, 1, 0, 1; every |difference| is 1.
        let s = Signal::new(vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        let sigma = 1.0 / (MAD_CONSISTENCY * std::f64::consts::SQRT_2);
        assert!((noise_variance(&s) - 2.0 * sigma * sigma).abs() < 1e-12);
    }

    #[test]
    fn zero_grid_returns_zero() {
        let s = Signal::new(vec![1.0, 2.0, 0.5]).unwrap();
        let (lambda, path) = select_lambda(&s, &[0.0]).unwrap();
        assert_eq!(lambda, 0.0);
        assert_eq!(path.selected, 0);
        assert!(select_lambda(&s, &[]).is_err());
    }

    #[test]
    fn ties_prefer_larger_lambda() {
        // Both grid points exceed λ_max, so they give identical fits.
        let s = Signal::new(vec![1.0, 2.0, 3.0]).unwrap();
        let (lambda, path) = select_lambda(&s, &[20.0, 10.0]).unwrap();
        assert_eq!(path.entries[0].bic, path.entries[1].bic);
        assert_eq!(lambda, 20.0);
        let (lambda, _) = select_lambda(&s, &[10.0, 20.0]).unwrap();
        assert_eq!(lambda, 20.0);
    }
}
