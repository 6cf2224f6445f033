//! Exact solver for the one-dimensional fused lasso (total-variation denoising).
//!
//! Minimizes `½ Σ (y_i − b_i)² + λ Σ |b_i − b_{i+1}|` by dynamic programming
//! over the derivative of the forward message, which is piecewise linear and
//! stored as a deque of knots. Each step pushes at most two knots and pops the
//! ones it passes, so the whole solve is linear in `n`.

use std::ops::Range;

use crate::error::{CflError, Result};

/// Relative tolerance used to decide that two fitted values belong to one block.
pub const BLOCK_TOLERANCE: f64 = 1e-12;

/// A finite, non-empty sequence of observations in solver order.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal(Vec<f64>);

impl Signal {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(CflError::invalid("signal must contain at least one value"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(CflError::invalid(format!(
                "signal value at position {i} is not finite"
            )));
        }
        Ok(Signal(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().sum::<f64>() / self.0.len() as f64
    }

    /// Largest absolute value, floored at one; sets the scale for block tolerance.
    fn scale(&self) -> f64 {
        self.0.iter().fold(1.0_f64, |m, v| m.max(v.abs()))
    }
}

impl TryFrom<Vec<f64>> for Signal {
    type Error = CflError;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Signal::new(values)
    }
}

impl TryFrom<&[f64]> for Signal {
    type Error = CflError;

    fn try_from(values: &[f64]) -> Result<Self> {
        Signal::new(values.to_vec())
    }
}

/// Piecewise-constant fit returned by [`fused_lasso_solve`].
#[derive(Debug, Clone, PartialEq)]
pub struct FusedSolution {
    pub fitted: Vec<f64>,
    pub lambda: f64,
    /// Half-open index ranges, in order, on which `fitted` is constant.
    pub blocks: Vec<Range<usize>>,
    /// Degrees of freedom: the number of blocks.
    pub df: usize,
}

impl FusedSolution {
    pub fn rss(&self, signal: &Signal) -> f64 {
        signal
            .values()
            .iter()
            .zip(&self.fitted)
            .map(|(y, b)| (y - b) * (y - b))
            .sum()
    }

    /// Block label of every position, numbered from zero.
    pub fn block_ids(&self) -> Vec<usize> {
        let mut ids = vec![0; self.fitted.len()];
        for (id, block) in self.blocks.iter().enumerate() {
            for slot in &mut ids[block.clone()] {
                *slot = id;
            }
        }
        ids
    }
}

/// Solves the 1-D fused lasso exactly.
pub fn fused_lasso_solve(signal: &Signal, lambda: f64) -> Result<FusedSolution> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(CflError::invalid(format!(
            "lambda must be finite and nonnegative, got {lambda}"
        )));
    }
    let y = signal.values();
    let fitted = if lambda >= lambda_max(signal) {
        vec![signal.mean(); y.len()]
    } else {
        dp_solve(y, lambda)
    };
    let blocks = extract_blocks(&fitted, BLOCK_TOLERANCE * signal.scale());
    let df = blocks.len();
    Ok(FusedSolution {
        fitted,
        lambda,
        blocks,
        df,
    })
}

fn dp_solve(y: &[f64], lam: f64) -> Vec<f64> {
    let n = y.len();
    if n == 1 || lam == 0.0 {
        return y.to_vec();
    }

    // Knot storage grows outward from the middle: `l` moves left, `r` moves right.
    let mut x = vec![0.0; 2 * n];
    let mut a = vec![0.0; 2 * n];
    let mut b = vec![0.0; 2 * n];
    // Back-pointer thresholds: b_k = clamp(b_{k+1}, lower[k], upper[k]).
    let mut lower = vec![0.0; n - 1];
    let mut upper = vec![0.0; n - 1];

    lower[0] = y[0] - lam;
    upper[0] = y[0] + lam;
    let mut l = n - 1;
    let mut r = n;
    x[l] = lower[0];
    x[r] = upper[0];
    a[l] = 1.0;
    b[l] = lam - y[0];
    a[r] = -1.0;
    b[r] = lam + y[0];

    // Derivative left of every knot is a_first·t + b_first; right of every
    // knot it is −(a_last·t + b_last).
    let mut a_first = 1.0;
    let mut b_first = -lam - y[1];
    let mut a_last = -1.0;
    let mut b_last = y[1] - lam;

    for k in 1..n - 1 {
        let (mut a_lo, mut b_lo) = (a_first, b_first);
        let mut lo = l;
        while lo <= r {
            if a_lo * x[lo] + b_lo > -lam {
                break;
            }
            a_lo += a[lo];
            b_lo += b[lo];
            lo += 1;
        }
        lower[k] = (-lam - b_lo) / a_lo;
        l = lo - 1;
        x[l] = lower[k];

        let (mut a_hi, mut b_hi) = (a_last, b_last);
        let mut hi = r;
        while hi >= l {
            if -a_hi * x[hi] - b_hi < lam {
                break;
            }
            a_hi += a[hi];
            b_hi += b[hi];
            hi -= 1;
        }
        upper[k] = (lam + b_hi) / (-a_hi);
        r = hi + 1;
        x[r] = upper[k];

        a[l] = a_lo;
        b[l] = b_lo + lam;
        a[r] = a_hi;
        b[r] = b_hi + lam;
        a_first = 1.0;
        b_first = -lam - y[k + 1];
        a_last = -1.0;
        b_last = y[k + 1] - lam;
    }

    // Last coefficient: zero of the final derivative.
    let (mut a_lo, mut b_lo) = (a_first, b_first);
    let mut lo = l;
    while lo <= r {
        if a_lo * x[lo] + b_lo > 0.0 {
            break;
        }
        a_lo += a[lo];
        b_lo += b[lo];
        lo += 1;
    }
    let mut beta = vec![0.0; n];
    beta[n - 1] = -b_lo / a_lo;
    for k in (0..n - 1).rev() {
        beta[k] = beta[k + 1].clamp(lower[k], upper[k]);
    }
    beta
}

fn extract_blocks(fitted: &[f64], tol: f64) -> Vec<Range<usize>> {
    let mut blocks = Vec::new();
    let mut start = 0;
    for i in 1..fitted.len() {
        if (fitted[i] - fitted[i - 1]).abs() > tol {
            blocks.push(start..i);
            start = i;
        }
    }
    blocks.push(start..fitted.len());
    blocks
}

/// Smallest λ at which the solution is a single constant block.
///
/// From the optimality conditions, the constant fit is optimal iff every
/// partial sum of the centered signal is bounded by λ in absolute value.
pub fn lambda_max(signal: &Signal) -> f64 {
    let y = signal.values();
    let mean = signal.mean();
    let mut cumulative = 0.0;
    let mut best = 0.0_f64;
    for v in &y[..y.len() - 1] {
        cumulative += v - mean;
        best = best.max(cumulative.abs());
    }
    best
}

/// Discrete total variation `Σ |v_i − v_{i+1}|` over the given order.
pub fn total_variation(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(CflError::invalid("total variation of an empty sequence"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CflError::invalid("total variation of non-finite values"));
    }
    Ok(values.windows(2).map(|w| (w[0] - w[1]).abs()).sum())
}
