//! Synthetic scenarios, the MSE metric and a seeded Monte Carlo harness.
//!
//! Every replication owns a ChaCha8 generator seeded with `base_seed + rep`.
//! Stream [`DATA_STREAM`] draws the data; the estimator's split uses
//! [`crate::estimator::SPLIT_STREAM`] of the same seed. Results therefore do
//! not depend on how replications are scheduled across threads.

use std::fmt;
use std::str::FromStr;

use libm::erfc;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{CflError, Result};
use crate::estimator::{estimate, split_sample, Dataset, EstimateConfig, SplitNeeds};
use crate::score_models::ScoreKind;

pub const DATA_STREAM: u64 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScenarioId {
    D1,
    D2,
    D3,
    D4,
    E3,
    E4,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 6] = [
        ScenarioId::D1,
        ScenarioId::D2,
        ScenarioId::D3,
        ScenarioId::D4,
        ScenarioId::E3,
        ScenarioId::E4,
    ];

    /// True when treatment assignment ignores the covariates, which leaves
    /// nothing for a propensity ordering to work with.
    pub fn has_constant_propensity(&self) -> bool {
        !matches!(self, ScenarioId::D1 | ScenarioId::D3)
    }

    fn min_dim(&self) -> usize {
        match self {
            ScenarioId::D1 | ScenarioId::D2 => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ScenarioId::D1 => "D1",
            ScenarioId::D2 => "D2",
            ScenarioId::D3 => "D3",
            ScenarioId::D4 => "D4",
            ScenarioId::E3 => "E3",
            ScenarioId::E4 => "E4",
        };
        f.write_str(s)
    }
}

impl FromStr for ScenarioId {
    type Err = CflError;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioId::ALL
            .into_iter()
            .find(|id| id.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| CflError::invalid(format!("unknown scenario '{s}'")))
    }
}

/// Which quantity D2 reports as the true effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum D2Truth {
    /// `E[Y|X,Z=1] − E[Y|X,Z=0]` of the generating model, `ς(x₁)ς(x₂)`.
    #[default]
    Contrast,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScenarioSpec {
    pub id: ScenarioId,
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub d2_truth: D2Truth,
}

impl ScenarioSpec {
    pub fn new(id: ScenarioId, n: usize, d: usize, seed: u64) -> Self {
        ScenarioSpec {
            id,
            n,
            d,
            seed,
            d2_truth: D2Truth::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n < 4 {
            return Err(CflError::invalid(format!(
                "scenario needs n >= 4, got {}",
                self.n
            )));
        }
        if self.d < self.id.min_dim() {
            return Err(CflError::invalid(format!(
                "scenario {} needs d >= {}, got {}",
                self.id,
                self.id.min_dim(),
                self.d
            )));
        }
        if self.id == ScenarioId::E3 && self.d >= 100 {
            return Err(CflError::invalid(
                "scenario E3 needs d < 100 for a positive noise variance",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioDraw {
    pub data: Dataset,
    pub tau_true: Vec<f64>,
}

/// Standard normal CDF.
pub fn std_normal_cdf(t: f64) -> f64 {
    0.5 * erfc(-t / std::f64::consts::SQRT_2)
}

/// Beta(2, 4) density on [0, 1].
pub fn beta_2_4_density(u: f64) -> f64 {
    if (0.0..=1.0).contains(&u) {
        20.0 * u * (1.0 - u).powi(3)
    } else {
        0.0
    }
}

/// `ς(u) = 1 + 1/(1 + exp(−20(u − 1/3)))`.
pub fn varsigma(u: f64) -> f64 {
    1.0 + 1.0 / (1.0 + (-20.0 * (u - 1.0 / 3.0)).exp())
}

/// Coefficients `+1` for the first `⌊d/2⌋` coordinates, `−1` after.
pub fn split_sign_beta(d: usize) -> Vec<f64> {
    (0..d).map(|j| if j < d / 2 { 1.0 } else { -1.0 }).collect()
}

/// Baseline control mean of D4, a function of the first coordinate.
pub fn d4_baseline(x1: f64) -> f64 {
    let u = 4.0 * std::f64::consts::PI * x1 - 2.0;
    (2.0 * u).sin() + 2.5 * u + 1.0
}

/// Squared-step effect of D4 as a function of the baseline mean.
pub fn d4_effect(f0: f64) -> f64 {
    let inner = 10.0 / (1.0 + (f0 / 15.0 - 1.0 / 30.0).exp()) - 5.0;
    inner.floor().powi(2)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Control mean and treatment effect at `x`.
fn components(id: ScenarioId, x: &[f64]) -> (f64, f64) {
    match id {
        ScenarioId::D1 => (2.0 * x[0] - 1.0, 0.0),
        ScenarioId::D2 => {
            // m(x) = e·τ(x) and Y = m + (Z − e)τ + ε, so the control mean m − e·τ vanishes.
            (0.0, varsigma(x[0]) * varsigma(x[1]))
        }
        ScenarioId::D3 => {
            let e = std_normal_cdf(dot(&split_sign_beta(x.len()), x));
            (e * e, if e > 0.6 { 1.0 } else { 0.0 })
        }
        ScenarioId::D4 => {
            let f0 = d4_baseline(x[0]);
            (f0, d4_effect(f0))
        }
        ScenarioId::E3 => (1.0 + x.iter().sum::<f64>(), 0.0),
        ScenarioId::E4 => {
            let index = dot(&split_sign_beta(x.len()), x);
            let jump = f64::from(u8::from(index > 1.0)) + f64::from(u8::from(index < 0.2));
            (index, jump)
        }
    }
}

/// Mean outcome under each arm at `x`.
pub fn arm_means(id: ScenarioId, x: &[f64]) -> (f64, f64) {
    let (m0, tau) = components(id, x);
    (m0, m0 + tau)
}

/// Closed-form treatment effect `E[Y|X=x,Z=1] − E[Y|X=x,Z=0]`.
pub fn true_effect(id: ScenarioId, x: &[f64]) -> f64 {
    components(id, x).1
}

fn propensity(id: ScenarioId, x: &[f64]) -> f64 {
    match id {
        ScenarioId::D1 => 0.25 * (1.0 + beta_2_4_density(x[0])),
        ScenarioId::D3 => std_normal_cdf(dot(&split_sign_beta(x.len()), x)),
        _ => 0.5,
    }
}

/// Draws one dataset and its true effects.
pub fn generate(spec: &ScenarioSpec) -> Result<ScenarioDraw> {
    spec.validate()?;
    let ScenarioSpec { id, n, d, .. } = *spec;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(DATA_STREAM);

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = if id == ScenarioId::E3 {
            (0..d).map(|_| rng.sample(StandardNormal)).collect()
        } else {
            (0..d).map(|_| rng.random::<f64>()).collect()
        };
        rows.push(row);
    }

    let z: Vec<u8> = if id == ScenarioId::E3 {
        let mut z = vec![0u8; n];
        z[..n.div_ceil(2)].fill(1);
        z.shuffle(&mut rng);
        z
    } else {
        rows.iter()
            .map(|x| u8::from(rng.random::<f64>() < propensity(id, x)))
            .collect()
    };

    let noise_sd = if id == ScenarioId::E3 {
        ((100 - d) as f64).sqrt()
    } else {
        1.0
    };
    let mut y = Vec::with_capacity(n);
    let mut tau_true = Vec::with_capacity(n);
    for (x, &t) in rows.iter().zip(&z) {
        let (m0, tau) = components(id, x);
        let eps: f64 = rng.sample(StandardNormal);
        y.push(if t == 1 { m0 + tau } else { m0 } + noise_sd * eps);
        tau_true.push(match (id, spec.d2_truth) {
            (ScenarioId::D2, D2Truth::Zero) => 0.0,
            _ => tau,
        });
    }

    let x = DMatrix::from_row_iterator(n, d, rows.iter().flatten().copied());
    Ok(ScenarioDraw {
        data: Dataset::new(x, z, y)?,
        tau_true,
    })
}

/// Mean squared error `(1/n) Σ (τ*_i − τ̂_i)²`.
pub fn mse(tau_hat: &[f64], tau_true: &[f64]) -> Result<f64> {
    if tau_hat.len() != tau_true.len() {
        return Err(CflError::invalid(format!(
            "length mismatch: {} estimates vs {} truths",
            tau_hat.len(),
            tau_true.len()
        )));
    }
    if tau_hat.is_empty() {
        return Err(CflError::invalid("mse of empty vectors"));
    }
    let sum: f64 = tau_hat
        .iter()
        .zip(tau_true)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / tau_hat.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EstimatorKind {
    /// Prognostic-score ordering.
    Cfl1,
    /// Propensity-score ordering.
    Cfl2,
    /// Constant difference in arm means over the estimation rows.
    Naive,
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorKind::Cfl1 => "cfl1",
            EstimatorKind::Cfl2 => "cfl2",
            EstimatorKind::Naive => "naive",
        })
    }
}

impl FromStr for EstimatorKind {
    type Err = CflError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cfl1" => Ok(EstimatorKind::Cfl1),
            "cfl2" => Ok(EstimatorKind::Cfl2),
            "naive" => Ok(EstimatorKind::Naive),
            _ => Err(CflError::invalid(format!("unknown estimator '{s}'"))),
        }
    }
}

/// Effect estimates on the units they cover, for metric evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitEstimates {
    pub units: Vec<usize>,
    pub tau_hat: Vec<f64>,
    pub lambda: Option<f64>,
    pub df: usize,
}

/// Difference in arm means on the estimation rows, split as for CFL2.
pub fn naive_estimate(data: &Dataset, config: &EstimateConfig) -> Result<UnitEstimates> {
    let needs = SplitNeeds::for_kind(ScoreKind::Propensity, data.d());
    let split = split_sample(data, config.fraction, config.seed, needs)?;
    let mut sums = [0.0; 2];
    let mut counts = [0usize; 2];
    for &i in &split.estimation_rows {
        let arm = usize::from(data.z[i]);
        sums[arm] += data.y[i];
        counts[arm] += 1;
    }
    let diff = sums[1] / counts[1] as f64 - sums[0] / counts[0] as f64;
    Ok(UnitEstimates {
        tau_hat: vec![diff; split.estimation_rows.len()],
        units: split.estimation_rows,
        lambda: None,
        df: 1,
    })
}

/// Runs one estimator on one dataset.
pub fn run_estimator(
    kind: EstimatorKind,
    data: &Dataset,
    config: &EstimateConfig,
) -> Result<UnitEstimates> {
    let score_kind = match kind {
        EstimatorKind::Naive => return naive_estimate(data, config),
        EstimatorKind::Cfl1 => ScoreKind::Prognostic,
        EstimatorKind::Cfl2 => ScoreKind::Propensity,
    };
    let report = estimate(data, score_kind, config)?;
    Ok(UnitEstimates {
        units: report.units,
        tau_hat: report.tau_hat,
        lambda: Some(report.lambda),
        df: report.df,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepRecord {
    pub rep: usize,
    pub seed: u64,
    pub mse: Option<f64>,
    pub lambda: Option<f64>,
    pub df: Option<usize>,
    /// `"ok"` or the error message.
    pub status: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McSummary {
    pub scenario: ScenarioSpec,
    pub estimator: EstimatorKind,
    pub records: Vec<RepRecord>,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub failures: usize,
}

impl McSummary {
    /// MSEs of the successful replications, in replication order.
    pub fn mses(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.mse).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct McOptions {
    /// Fraction, λ policy and intercept; the seed is replaced per replication.
    pub config: EstimateConfig,
    /// Worker threads for replications; 0 means all available cores.
    pub threads: usize,
}

/// Thread cap from the `CFL_THREADS` environment variable, 0 when unset.
pub fn threads_from_env() -> usize {
    std::env::var("CFL_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn run_rep(
    spec: &ScenarioSpec,
    kind: EstimatorKind,
    config: &EstimateConfig,
    rep: usize,
    seed: u64,
) -> RepRecord {
    let outcome = (|| {
        let draw = generate(&ScenarioSpec { seed, ..*spec })?;
        let cfg = EstimateConfig { seed, ..*config };
        let est = run_estimator(kind, &draw.data, &cfg)?;
        let truth: Vec<f64> = est.units.iter().map(|&u| draw.tau_true[u]).collect();
        let err = mse(&est.tau_hat, &truth)?;
        Ok::<_, CflError>((err, est))
    })();
    match outcome {
        Ok((err, est)) => RepRecord {
            rep,
            seed,
            mse: Some(err),
            lambda: est.lambda,
            df: Some(est.df),
            status: "ok".into(),
        },
        Err(e) => RepRecord {
            rep,
            seed,
            mse: None,
            lambda: None,
            df: None,
            status: e.to_string(),
        },
    }
}

/// Replication `r` uses seed `base_seed + r` for both data and split.
pub fn run_monte_carlo(
    spec: &ScenarioSpec,
    kind: EstimatorKind,
    reps: usize,
    base_seed: u64,
    options: &McOptions,
) -> Result<McSummary> {
    if reps == 0 {
        return Err(CflError::invalid("need at least one replication"));
    }
    spec.validate()?;
    if kind == EstimatorKind::Cfl2 && spec.id.has_constant_propensity() {
        return Err(CflError::invalid(format!(
            "cfl2 is not suitable for scenario {}: its propensity score is constant",
            spec.id
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.threads)
        .build()
        .map_err(|e| CflError::invalid(format!("cannot build thread pool: {e}")))?;
    let records: Vec<RepRecord> = pool.install(|| {
        (0..reps)
            .into_par_iter()
            .map(|rep| {
                run_rep(
                    spec,
                    kind,
                    &options.config,
                    rep,
                    base_seed.wrapping_add(rep as u64),
                )
            })
            .collect()
    });

    let mut ok: Vec<f64> = records.iter().filter_map(|r| r.mse).collect();
    let failures = reps - ok.len();
    if ok.is_empty() {
        return Err(CflError::AllReplicationsFailed {
            reps,
            first: records[0].status.clone(),
        });
    }
    ok.sort_by(f64::total_cmp);
    Ok(McSummary {
        scenario: *spec,
        estimator: kind,
        median: quantile_sorted(&ok, 0.5),
        q1: quantile_sorted(&ok, 0.25),
        q3: quantile_sorted(&ok, 0.75),
        records,
        failures,
    })
}
