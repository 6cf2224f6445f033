use cfl_core::simbench::{
    arm_means, d4_baseline, d4_effect, generate, run_monte_carlo, std_normal_cdf, true_effect,
    D2Truth, EstimatorKind, McOptions, ScenarioId, ScenarioSpec,
};
use cfl_core::EstimateConfig;

#[test]
fn d2_contrast_matches_closed_form() {
    let sig = |u: f64| 1.0 + 1.0 / (1.0 + (-20.0 * (u - 1.0 / 3.0)).exp());
    let points = [
        ([1.0 / 3.0, 1.0 / 3.0], 2.25),
        ([0.0, 0.0], sig(0.0) * sig(0.0)),
        ([1.0, 1.0 / 3.0], sig(1.0) * 1.5),
        ([0.25, 0.75], sig(0.25) * sig(0.75)),
        ([0.9, 0.1], sig(0.9) * sig(0.1)),
    ];
    for (x, tau) in points {
        let (m0, m1) = arm_means(ScenarioId::D2, &[x[0], x[1], 0.5]);
        assert!((m1 - m0 - tau).abs() < 1e-12, "{x:?}");
        assert!((true_effect(ScenarioId::D2, &[x[0], x[1]]) - tau).abs() < 1e-12);
        // Control mean m(x) − e·τ(x) vanishes because m = e·τ.
        assert!(m0.abs() < 1e-12);
    }
}

#[test]
fn d4_components() {
    // 4πx − 2 = 0 at x = 1/(2π), where sin vanishes too.
    assert!((d4_baseline(0.5 / std::f64::consts::PI) - 1.0).abs() < 1e-12);
    // f₀ = 1/2 puts the logistic at exactly 1/2, so the inner term is 0.
    assert_eq!(d4_effect(0.5), 0.0);
    assert_eq!(d4_effect(-100.0), 16.0);
    assert_eq!(d4_effect(100.0), 25.0);
    assert!((std_normal_cdf(0.0) - 0.5).abs() < 1e-16);
    assert!((std_normal_cdf(1.959963984540054) - 0.975).abs() < 1e-12);
}

#[test]
fn ground_truths() {
    let d1 = generate(&ScenarioSpec::new(ScenarioId::D1, 300, 2, 1)).unwrap();
    assert!(d1.tau_true.iter().all(|&t| t == 0.0));

    let d3 = generate(&ScenarioSpec::new(ScenarioId::D3, 300, 4, 1)).unwrap();
    for i in 0..300 {
        let x = d3.data.row(i);
        let e = std_normal_cdf(x[0] + x[1] - x[2] - x[3]);
        assert_eq!(d3.tau_true[i], if e > 0.6 { 1.0 } else { 0.0 });
    }

    let e4 = generate(&ScenarioSpec::new(ScenarioId::E4, 300, 4, 1)).unwrap();
    for i in 0..300 {
        let x = e4.data.row(i);
        let s = x[0] + x[1] - x[2] - x[3];
        let expected = f64::from(u8::from(s > 1.0)) + f64::from(u8::from(s < 0.2));
        assert_eq!(e4.tau_true[i], expected);
    }

    let mut spec = ScenarioSpec::new(ScenarioId::D2, 50, 2, 3);
    assert!(generate(&spec).unwrap().tau_true.iter().all(|&t| t > 1.0));
    spec.d2_truth = D2Truth::Zero;
    assert!(generate(&spec).unwrap().tau_true.iter().all(|&t| t == 0.0));
}

#[test]
fn e3_design() {
    let draw = generate(&ScenarioSpec::new(ScenarioId::E3, 20_001, 10, 5)).unwrap();
    assert_eq!(draw.data.treated_count(), 10_001);
    assert!(draw.tau_true.iter().all(|&t| t == 0.0));
    let resid: Vec<f64> = (0..draw.data.n())
        .map(|i| draw.data.y[i] - 1.0 - draw.data.row(i).iter().sum::<f64>())
        .collect();
    let mean = resid.iter().sum::<f64>() / resid.len() as f64;
    let var = resid.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (resid.len() - 1) as f64;
    // Standard error of the sample variance is about 90·√(2/n) ≈ 0.9.
    assert!((var - 90.0).abs() < 4.0, "{var}");
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(generate(&ScenarioSpec::new(ScenarioId::D1, 3, 2, 0)).is_err());
    assert!(generate(&ScenarioSpec::new(ScenarioId::D2, 10, 1, 0)).is_err());
    assert!(generate(&ScenarioSpec::new(ScenarioId::E3, 10, 100, 0)).is_err());
    let spec = ScenarioSpec::new(ScenarioId::D4, 100, 2, 0);
    assert!(run_monte_carlo(&spec, EstimatorKind::Cfl2, 2, 0, &McOptions::default()).is_err());
    assert!(run_monte_carlo(&spec, EstimatorKind::Cfl1, 0, 0, &McOptions::default()).is_err());
}

#[test]
fn monte_carlo_is_deterministic_across_thread_counts() {
    let spec = ScenarioSpec::new(ScenarioId::D3, 300, 2, 0);
    let run = |threads| {
        let options = McOptions {
            threads,
            ..Default::default()
        };
        run_monte_carlo(&spec, EstimatorKind::Cfl2, 8, 40, &options).unwrap()
    };
    let serial = run(1);
    assert_eq!(serial, run(4));
    assert_eq!(serial, run(1));
    for (r, rec) in serial.records.iter().enumerate() {
        assert_eq!(rec.rep, r);
        assert_eq!(rec.seed, 40 + r as u64);
    }
}

#[test]
fn single_replication_median_is_its_mse() {
    let spec = ScenarioSpec::new(ScenarioId::D1, 200, 2, 0);
    let s = run_monte_carlo(&spec, EstimatorKind::Cfl1, 1, 9, &McOptions::default()).unwrap();
    assert_eq!(s.median, s.records[0].mse.unwrap());
    assert_eq!(s.q1, s.median);
    assert_eq!(s.failures, 0);
}

#[test]
fn d4_error_shrinks_with_n() {
    let options = McOptions {
        config: EstimateConfig {
            intercept: true,
            ..Default::default()
        },
        threads: 0,
    };
    let medians: Vec<f64> = [400, 800, 1600]
        .iter()
        .map(|&n| {
            let spec = ScenarioSpec::new(ScenarioId::D4, n, 2, 0);
            run_monte_carlo(&spec, EstimatorKind::Cfl1, 50, 1, &options)
                .unwrap()
                .median
        })
        .collect();
    assert!(medians.windows(2).all(|w| w[1] <= w[0]), "{medians:?}");
}

#[test]
fn naive_baseline_uses_the_estimation_rows() {
    let spec = ScenarioSpec::new(ScenarioId::D3, 400, 2, 0);
    let naive = run_monte_carlo(&spec, EstimatorKind::Naive, 3, 2, &McOptions::default()).unwrap();
    let cfl2 = run_monte_carlo(&spec, EstimatorKind::Cfl2, 3, 2, &McOptions::default()).unwrap();
    assert_eq!(naive.failures, 0);
    assert!(naive
        .records
        .iter()
        .all(|r| r.df == Some(1) && r.lambda.is_none()));
    assert!(cfl2.records.iter().all(|r| r.lambda.is_some()));
}
