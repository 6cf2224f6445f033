//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

/// Fused lasso by coordinate descent on the box-constrained dual
/// `min_u ½‖y − Dᵀu‖²` with `|u_k| ≤ λ`, where `(Db)_k = b_k − b_{k+1}`.
/// The primal solution is `b = y − Dᵀu`.
pub fn qp_oracle(y: &[f64], lambda: f64) -> Vec<f64> {
    let n = y.len();
    if n < 2 {
        return y.to_vec();
    }
    let m = n - 1;
    let dy: Vec<f64> = (0..m).map(|k| y[k] - y[k + 1]).collect();
    let mut u = vec![0.0; m];
    for _ in 0..2_000_000 {
        let mut change = 0.0_f64;
        for k in 0..m {
            let left = if k > 0 { u[k - 1] } else { 0.0 };
            let right = if k + 1 < m { u[k + 1] } else { 0.0 };
            let next = (0.5 * (dy[k] + left + right)).clamp(-lambda, lambda);
            change = change.max((next - u[k]).abs());
            u[k] = next;
        }
        if change < 1e-15 {
            break;
        }
    }
    (0..n)
        .map(|i| {
            let here = if i < m { u[i] } else { 0.0 };
            let before = if i > 0 { u[i - 1] } else { 0.0 };
            y[i] - (here - before)
        })
        .collect()
}

/// Largest violation of the optimality certificate
/// `s_k = (1/λ)Σ_{i≤k}(y_i − b_i)`: `|s_k| ≤ 1`, `s_n = 0`, and
/// `s_k = sign(b_k − b_{k+1})` wherever the fit jumps by more than `jump_tol`.
pub fn kkt_violation(y: &[f64], b: &[f64], lambda: f64, jump_tol: f64) -> f64 {
    let n = y.len();
    let mut partial = 0.0;
    let mut worst = 0.0_f64;
    if lambda == 0.0 {
        return y.iter().zip(b).fold(0.0, |w, (a, c)| w.max((a - c).abs()));
    }
    for k in 0..n {
        partial += y[k] - b[k];
        let s = partial / lambda;
        if k == n - 1 {
            worst = worst.max(s.abs());
            break;
        }
        worst = worst.max(s.abs() - 1.0);
        let jump = b[k] - b[k + 1];
        if jump.abs() > jump_tol {
            worst = worst.max((s - jump.signum()).abs());
        }
    }
    worst
}

/// Largest centered partial sum, the smallest λ giving a constant fit.
pub fn lambda_max_ref(y: &[f64]) -> f64 {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let mut acc = 0.0;
    let mut best = 0.0_f64;
    for v in &y[..y.len() - 1] {
        acc += v - mean;
        best = best.max(acc.abs());
    }
    best
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |w, (x, y)| w.max((x - y).abs()))
}

/// Newton's method for unpenalized two-parameter logistic regression, with
/// the 2×2 Hessian inverted in closed form.
pub fn logistic_mle_2d(x: &[[f64; 2]], z: &[u8]) -> [f64; 2] {
    let mut t = [0.0, 0.0];
    for _ in 0..200 {
        let mut g = [0.0; 2];
        let mut h = [[0.0; 2]; 2];
        for (xi, &zi) in x.iter().zip(z) {
            let eta = t[0] * xi[0] + t[1] * xi[1];
            let p = 1.0 / (1.0 + (-eta).exp());
            let w = p * (1.0 - p);
            for a in 0..2 {
                g[a] += (f64::from(zi) - p) * xi[a];
                for c in 0..2 {
                    h[a][c] += w * xi[a] * xi[c];
                }
            }
        }
        let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
        let step = [
            (h[1][1] * g[0] - h[0][1] * g[1]) / det,
            (h[0][0] * g[1] - h[1][0] * g[0]) / det,
        ];
        t[0] += step[0];
        t[1] += step[1];
        if step[0].abs().max(step[1].abs()) < 1e-15 {
            break;
        }
    }
    t
}
