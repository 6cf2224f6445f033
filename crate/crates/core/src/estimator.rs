//! The causal fused lasso pipeline.
//!
//! Split the sample, fit a similarity score on one part, sort the other part
//! by that score, impute each unit's missing potential outcome from its
//! nearest opposite-arm neighbour in score, and fuse the resulting signed
//! differences along the score order.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CflError, Result};
use crate::score_models::{fit_prognostic, fit_propensity, score_rows, ScoreFit, ScoreKind};
use crate::tuning::{build_grid, select_lambda_with, BicForm, GridSpec, LambdaPath};
use crate::tv_solver::{fused_lasso_solve, FusedSolution, Signal};

/// ChaCha stream reserved for sample splitting.
pub const SPLIT_STREAM: u64 = 1;
pub const MAX_SPLIT_ATTEMPTS: usize = 100;
pub const DEFAULT_FRACTION: f64 = 0.5;
/// Propensity scores spanning less than this trigger a design warning.
pub const FLAT_PROPENSITY_RANGE: f64 = 1e-3;
/// Relative tolerance under which two match distances count as tied.
pub const MATCH_TIE_TOLERANCE: f64 = 1e-12;

/// Observed triples: covariates `x` (n × d), binary treatment `z`, outcome `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub z: Vec<u8>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, z: Vec<u8>, y: Vec<f64>) -> Result<Self> {
        let n = x.nrows();
        if z.len() != n || y.len() != n {
            return Err(CflError::invalid(format!(
                "row counts differ: x has {n}, z has {}, y has {}",
                z.len(),
                y.len()
            )));
        }
        if let Some(i) = z.iter().position(|&t| t > 1) {
            return Err(CflError::invalid(format!(
                "treatment at row {i} is {}, expected 0 or 1",
                z[i]
            )));
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(CflError::invalid("dataset contains non-finite values"));
        }
        Ok(Dataset { x, z, y })
    }

    /// Builds a dataset from row-major covariate rows.
    pub fn from_rows(rows: &[Vec<f64>], z: Vec<u8>, y: Vec<f64>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(CflError::invalid("covariate rows have unequal lengths"));
        }
        let x = DMatrix::from_row_iterator(rows.len(), d, rows.iter().flatten().copied());
        Dataset::new(x, z, y)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn treated_count(&self) -> usize {
        self.z.iter().filter(|&&t| t == 1).count()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(rows),
            z: rows.iter().map(|&i| self.z[i]).collect(),
            y: rows.iter().map(|&i| self.y[i]).collect(),
        }
    }

    /// Same data with a leading column of ones.
    pub fn with_intercept(&self) -> Dataset {
        let x = self.x.clone().insert_column(0, 1.0);
        Dataset {
            x,
            z: self.z.clone(),
            y: self.y.clone(),
        }
    }
}

/// Disjoint partition of the rows into score-fitting and estimation parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub estimation_rows: Vec<usize>,
    pub score_rows: Vec<usize>,
    pub seed: u64,
}

/// What each side of a split must contain for the downstream fits to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitNeeds {
    pub score_controls: usize,
    pub score_treated: usize,
}

impl SplitNeeds {
    pub fn for_kind(kind: ScoreKind, design_dim: usize) -> Self {
        match kind {
            ScoreKind::Prognostic => SplitNeeds {
                score_controls: design_dim.max(1),
                score_treated: 0,
            },
            ScoreKind::Propensity => SplitNeeds {
                score_controls: 1,
                score_treated: 1,
            },
        }
    }
}

/// Seeded uniform split; `⌊fraction·n⌋` rows go to score fitting.
///
/// The estimation part must contain both arms. Invalid draws are repeated
/// from the same generator, up to [`MAX_SPLIT_ATTEMPTS`] times.
pub fn split_sample(
    data: &Dataset,
    fraction: f64,
    seed: u64,
    needs: SplitNeeds,
) -> Result<SplitPlan> {
    let n = data.n();
    if n < 4 {
        return Err(CflError::invalid(format!(
            "need at least 4 units to split, got {n}"
        )));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CflError::invalid(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let treated = data.treated_count();
    if treated == 0 || treated == n {
        return Err(CflError::DegenerateArm(
            "the data contain a single treatment arm".into(),
        ));
    }
    let n_score = (fraction * n as f64).floor() as usize;
    if n_score == 0 || n_score == n {
        return Err(CflError::DegenerateSplit {
            attempts: 0,
            reason: format!("fraction {fraction} leaves an empty side with n = {n}"),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    let mut order: Vec<usize> = (0..n).collect();
    let mut reason = String::new();
    for _ in 0..MAX_SPLIT_ATTEMPTS {
        order.shuffle(&mut rng);
        let mut score_rows = order[..n_score].to_vec();
        let mut estimation_rows = order[n_score..].to_vec();
        score_rows.sort_unstable();
        estimation_rows.sort_unstable();

        let arm_counts = |rows: &[usize]| {
            let t = rows.iter().filter(|&&i| data.z[i] == 1).count();
            (rows.len() - t, t)
        };
        let (est_c, est_t) = arm_counts(&estimation_rows);
        let (sc_c, sc_t) = arm_counts(&score_rows);
        if est_c == 0 || est_t == 0 {
            reason = "estimation rows lack a treatment arm".into();
            continue;
        }
        if sc_c < needs.score_controls || sc_t < needs.score_treated {
            reason = format!(
                "score rows have {sc_c} controls and {sc_t} treated, need {} and {}",
                needs.score_controls, needs.score_treated
            );
            continue;
        }
        return Ok(SplitPlan {
            estimation_rows,
            score_rows,
            seed,
        });
    }
    Err(CflError::DegenerateSplit {
        attempts: MAX_SPLIT_ATTEMPTS,
        reason,
    })
}

/// Stable ascending sort of unit indices by score; ties keep index order.
pub fn order_by_score(scores: &[f64]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..scores.len()).collect();
    perm.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    perm
}

/// Nearest opposite-arm unit in score for every unit, with replacement.
///
/// Distances equal up to [`MATCH_TIE_TOLERANCE`] (relative) are ties and go
/// to the smallest index.
pub fn match_opposite_arm(scores: &[f64], z: &[u8]) -> Result<Vec<usize>> {
    if scores.len() != z.len() {
        return Err(CflError::invalid("scores and treatments differ in length"));
    }
    // Each arm sorted by (score, index); `run_start[k]` is the first entry
    // sharing entry k's score, which carries the smallest index of that run.
    let mut arms: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &t) in z.iter().enumerate() {
        arms[usize::from(t.min(1))].push(i);
    }
    if arms[0].is_empty() || arms[1].is_empty() {
        return Err(CflError::DegenerateArm(
            "matching needs both treatment arms".into(),
        ));
    }
    let arms = arms.map(|mut units| {
        units.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        let mut run_start = vec![0; units.len()];
        for k in 1..units.len() {
            run_start[k] = if scores[units[k]] == scores[units[k - 1]] {
                run_start[k - 1]
            } else {
                k
            };
        }
        (units, run_start)
    });

    let matches = (0..scores.len())
        .map(|i| {
            let (units, run_start) = &arms[usize::from(1 - z[i].min(1))];
            let s = scores[i];
            let pos = units.partition_point(|&j| scores[j] < s);
            let right = units.get(pos).copied();
            let left = pos.checked_sub(1).map(|k| units[run_start[k]]);
            match (left, right) {
                (Some(a), Some(b)) => {
                    let (da, db) = ((s - scores[a]).abs(), (scores[b] - s).abs());
                    let tol =
                        MATCH_TIE_TOLERANCE * s.abs().max(scores[a].abs()).max(scores[b].abs());
                    if (da - db).abs() <= tol {
                        a.min(b)
                    } else if da < db {
                        a
                    } else {
                        b
                    }
                }
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => unreachable!("opposite arm is non-empty"),
            }
        })
        .collect();
    Ok(matches)
}

/// Units in score order, their matches, and the signed imputed differences.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedSignal {
    /// `signal[k]` is the imputed effect of unit `permutation[k]`.
    pub signal: Vec<f64>,
    /// Match of each unit, in unit order.
    pub match_index: Vec<usize>,
    pub permutation: Vec<usize>,
    /// Score of each unit, in unit order.
    pub scores: Vec<f64>,
}

/// Treated units contribute `Y_i − Y_N(i)`, controls `Y_N(i) − Y_i`.
pub fn build_signal(
    data: &Dataset,
    scores: &[f64],
    permutation: &[usize],
    match_index: &[usize],
) -> Result<MatchedSignal> {
    let n = data.n();
    if scores.len() != n || permutation.len() != n || match_index.len() != n {
        return Err(CflError::invalid(
            "signal inputs differ in length from the data",
        ));
    }
    let signal = permutation
        .iter()
        .map(|&i| {
            let diff = data.y[i] - data.y[match_index[i]];
            if data.z[i] == 1 {
                diff
            } else {
                -diff
            }
        })
        .collect();
    Ok(MatchedSignal {
        signal,
        match_index: match_index.to_vec(),
        permutation: permutation.to_vec(),
        scores: scores.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaPolicy {
    /// BIC selection over a log-spaced grid.
    Auto(GridSpec, BicForm),
    Fixed(f64),
}

impl Default for LambdaPolicy {
    fn default() -> Self {
        LambdaPolicy::Auto(GridSpec::default(), BicForm::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateConfig {
    pub fraction: f64,
    pub seed: u64,
    pub lambda: LambdaPolicy,
    /// Prepend a column of ones before fitting the score model.
    pub intercept: bool,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig {
            fraction: DEFAULT_FRACTION,
            seed: 0,
            lambda: LambdaPolicy::default(),
            intercept: false,
        }
    }
}

/// Fused fit over a set of units, given their scores.
///
/// Indices in `units` and `matched` refer to rows of the dataset the fit
/// was computed on.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedEstimate {
    pub matched: MatchedSignal,
    /// Units covered by `tau_hat`, ascending.
    pub units: Vec<usize>,
    pub tau_hat: Vec<f64>,
    /// Units in the order the fused lasso saw them.
    pub fused_order: Vec<usize>,
    pub solution: FusedSolution,
    pub path: Option<LambdaPath>,
    pub subgroup_boundaries: Vec<f64>,
}

fn fit_signal(
    values: Vec<f64>,
    policy: LambdaPolicy,
) -> Result<(FusedSolution, Option<LambdaPath>)> {
    let signal = Signal::new(values)?;
    match policy {
        LambdaPolicy::Fixed(lambda) => {
            if !lambda.is_finite() || lambda < 0.0 {
                return Err(CflError::invalid(format!(
                    "fixed lambda must be finite and nonnegative, got {lambda}"
                )));
            }
            Ok((fused_lasso_solve(&signal, lambda)?, None))
        }
        LambdaPolicy::Auto(spec, form) => {
            let grid = build_grid(&signal, spec)?;
            let (lambda, path) = select_lambda_with(&signal, &grid, form)?;
            Ok((fused_lasso_solve(&signal, lambda)?, Some(path)))
        }
    }
}

fn boundaries(solution: &FusedSolution, ordered_scores: &[f64]) -> Vec<f64> {
    solution
        .blocks
        .iter()
        .skip(1)
        .map(|b| 0.5 * (ordered_scores[b.start - 1] + ordered_scores[b.start]))
        .collect()
}

/// Match, build the signal and fuse it over every unit of `data`.
pub fn estimate_with_scores(
    data: &Dataset,
    scores: &[f64],
    policy: LambdaPolicy,
) -> Result<FusedEstimate> {
    if scores.len() != data.n() {
        return Err(CflError::invalid("one score per unit is required"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(CflError::invalid("scores must be finite"));
    }
    let permutation = order_by_score(scores);
    let match_index = match_opposite_arm(scores, &data.z)?;
    let matched = build_signal(data, scores, &permutation, &match_index)?;
    let (solution, path) = fit_signal(matched.signal.clone(), policy)?;

    let mut tau_hat = vec![0.0; data.n()];
    for (k, &unit) in permutation.iter().enumerate() {
        tau_hat[unit] = solution.fitted[k];
    }
    let ordered_scores: Vec<f64> = permutation.iter().map(|&i| scores[i]).collect();
    let subgroup_boundaries = boundaries(&solution, &ordered_scores);
    Ok(FusedEstimate {
        units: (0..data.n()).collect(),
        tau_hat,
        fused_order: permutation,
        matched,
        solution,
        path,
        subgroup_boundaries,
    })
}

/// Like [`estimate_with_scores`], but fuses only the treated subsequence.
pub fn estimate_treated_with_scores(
    data: &Dataset,
    scores: &[f64],
    policy: LambdaPolicy,
) -> Result<FusedEstimate> {
    if scores.len() != data.n() {
        return Err(CflError::invalid("one score per unit is required"));
    }
    if data.treated_count() == 0 {
        return Err(CflError::DegenerateArm(
            "no treated units to estimate".into(),
        ));
    }
    let permutation = order_by_score(scores);
    let match_index = match_opposite_arm(scores, &data.z)?;
    let matched = build_signal(data, scores, &permutation, &match_index)?;

    let treated_positions: Vec<usize> = (0..permutation.len())
        .filter(|&k| data.z[permutation[k]] == 1)
        .collect();
    let values = treated_positions
        .iter()
        .map(|&k| matched.signal[k])
        .collect();
    let (solution, path) = fit_signal(values, policy)?;

    let fused_order: Vec<usize> = treated_positions.iter().map(|&k| permutation[k]).collect();
    let mut units = fused_order.clone();
    units.sort_unstable();
    let mut tau_by_unit = vec![f64::NAN; data.n()];
    for (k, &unit) in fused_order.iter().enumerate() {
        tau_by_unit[unit] = solution.fitted[k];
    }
    let tau_hat = units.iter().map(|&u| tau_by_unit[u]).collect();
    let ordered_scores: Vec<f64> = fused_order.iter().map(|&i| scores[i]).collect();
    let subgroup_boundaries = boundaries(&solution, &ordered_scores);
    Ok(FusedEstimate {
        matched,
        units,
        tau_hat,
        fused_order,
        solution,
        path,
        subgroup_boundaries,
    })
}

/// Output of the full pipeline. Unit indices refer to rows of the input data.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport {
    pub kind: ScoreKind,
    pub split: SplitPlan,
    /// Units that `tau_hat` and `scores` describe, ascending.
    pub units: Vec<usize>,
    pub tau_hat: Vec<f64>,
    pub scores: Vec<f64>,
    /// Block label of each unit, numbered along the score order.
    pub block_ids: Vec<usize>,
    pub lambda: f64,
    pub df: usize,
    pub subgroup_boundaries: Vec<f64>,
    pub bic_path: Option<LambdaPath>,
    pub score_fit: ScoreFit,
    /// The fused stage, indexed relative to the estimation rows.
    pub fused: FusedEstimate,
    pub intercept: bool,
    pub warnings: Vec<String>,
}

struct ScoreStage {
    split: SplitPlan,
    estimation: Dataset,
    scores: Vec<f64>,
    fit: ScoreFit,
    warnings: Vec<String>,
}

fn score_stage(data: &Dataset, kind: ScoreKind, config: &EstimateConfig) -> Result<ScoreStage> {
    if let LambdaPolicy::Fixed(l) = config.lambda {
        if !l.is_finite() || l < 0.0 {
            return Err(CflError::invalid(format!(
                "fixed lambda must be finite and nonnegative, got {l}"
            )));
        }
    }
    let design = if config.intercept {
        data.with_intercept()
    } else {
        data.clone()
    };
    let needs = SplitNeeds::for_kind(kind, design.d());
    let split = split_sample(data, config.fraction, config.seed, needs)?;
    let score_part = design.subset(&split.score_rows);
    let fit = match kind {
        ScoreKind::Prognostic => {
            let controls: Vec<usize> = (0..score_part.n())
                .filter(|&i| score_part.z[i] == 0)
                .collect();
            let part = score_part.subset(&controls);
            fit_prognostic(&part.x, &part.y)?
        }
        ScoreKind::Propensity => fit_propensity(&score_part.x, &score_part.z)?,
    };
    let estimation_design = design.subset(&split.estimation_rows);
    let scores = score_rows(&fit, &estimation_design.x)?;

    let mut warnings = fit.warnings.clone();
    if kind == ScoreKind::Propensity {
        let (lo, hi) = scores
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| {
                (lo.min(s), hi.max(s))
            });
        if hi - lo < FLAT_PROPENSITY_RANGE {
            warnings.push(format!(
                "fitted propensity scores span only {:e}; the propensity ordering carries little information in a randomized design",
                hi - lo
            ));
        }
    }
    Ok(ScoreStage {
        estimation: data.subset(&split.estimation_rows),
        split,
        scores,
        fit,
        warnings,
    })
}

fn into_report(
    stage: ScoreStage,
    kind: ScoreKind,
    config: &EstimateConfig,
    fused: FusedEstimate,
) -> EstimateReport {
    let rows = &stage.split.estimation_rows;
    let ids = fused.solution.block_ids();
    let mut block_of = vec![usize::MAX; stage.estimation.n()];
    for (k, &u) in fused.fused_order.iter().enumerate() {
        block_of[u] = ids[k];
    }
    EstimateReport {
        kind,
        units: fused.units.iter().map(|&u| rows[u]).collect(),
        tau_hat: fused.tau_hat.clone(),
        scores: fused.units.iter().map(|&u| stage.scores[u]).collect(),
        block_ids: fused.units.iter().map(|&u| block_of[u]).collect(),
        lambda: fused.solution.lambda,
        df: fused.solution.df,
        subgroup_boundaries: fused.subgroup_boundaries.clone(),
        bic_path: fused.path.clone(),
        score_fit: stage.fit,
        split: stage.split,
        fused,
        intercept: config.intercept,
        warnings: stage.warnings,
    }
}

/// Runs the full estimator with the chosen score kind.
pub fn estimate(
    data: &Dataset,
    kind: ScoreKind,
    config: &EstimateConfig,
) -> Result<EstimateReport> {
    let stage = score_stage(data, kind, config)?;
    let fused = estimate_with_scores(&stage.estimation, &stage.scores, config.lambda)?;
    Ok(into_report(stage, kind, config, fused))
}

/// Effects of the treated: propensity ordering, fused over treated units only.
pub fn estimate_treated_only(data: &Dataset, config: &EstimateConfig) -> Result<EstimateReport> {
    let kind = ScoreKind::Propensity;
    let stage = score_stage(data, kind, config)?;
    let fused = estimate_treated_with_scores(&stage.estimation, &stage.scores, config.lambda)?;
    Ok(into_report(stage, kind, config, fused))
}

/// Effect estimate at a new covariate point: the `tau_hat` of the nearest
/// covered unit in Euclidean distance, ties to the smallest index.
pub fn predict_new(report: &EstimateReport, data: &Dataset, x: &[f64]) -> Result<f64> {
    if x.len() != data.d() {
        return Err(CflError::invalid(format!(
            "point has dimension {} but the data have {}",
            x.len(),
            data.d()
        )));
    }
    let mut best: Option<(f64, usize)> = None;
    for (k, &unit) in report.units.iter().enumerate() {
        if unit >= data.n() {
            return Err(CflError::invalid("report does not belong to this dataset"));
        }
        let dist: f64 = data
            .x
            .row(unit)
            .iter()
            .zip(x)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if best.is_none_or(|(bd, _)| dist < bd) {
            best = Some((dist, k));
        }
    }
    best.map(|(_, k)| report.tau_hat[k])
        .ok_or_else(|| CflError::invalid("report covers no units"))
}

/// Discrete-covariate estimator: per-level differences in arm means, fused
/// along the natural level order. Levels are numbered `1..=K`.
pub fn predecessor_estimate(
    z: &[u8],
    levels: &[usize],
    y: &[f64],
    lambda: f64,
) -> Result<Vec<f64>> {
    if z.len() != levels.len() || y.len() != levels.len() {
        return Err(CflError::invalid("z, levels and y must have equal length"));
    }
    if levels.is_empty() {
        return Err(CflError::invalid("no observations"));
    }
    if levels.contains(&0) {
        return Err(CflError::invalid("levels are numbered from 1"));
    }
    let k_max = *levels.iter().max().expect("non-empty");
    let mut sums = vec![[0.0_f64; 2]; k_max];
    let mut counts = vec![[0_usize; 2]; k_max];
    for ((&t, &k), &v) in z.iter().zip(levels).zip(y) {
        if t > 1 {
            return Err(CflError::invalid(format!(
                "treatment value {t} is not binary"
            )));
        }
        sums[k - 1][usize::from(t)] += v;
        counts[k - 1][usize::from(t)] += 1;
    }
    let mut raw = Vec::with_capacity(k_max);
    for k in 0..k_max {
        for (arm, name) in [(1, "treated"), (0, "control")] {
            if counts[k][arm] == 0 {
                return Err(CflError::EmptyCell {
                    level: k + 1,
                    arm: name,
                });
            }
        }
        raw.push(sums[k][1] / counts[k][1] as f64 - sums[k][0] / counts[k][0] as f64);
    }
    Ok(fused_lasso_solve(&Signal::new(raw)?, lambda)?.fitted)
}
