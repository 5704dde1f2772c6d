//! Closed-form and independently computed reference values.

use uldp_core::action::{gradient_check, min_action_endpoint, OptimizerOptions};
use uldp_core::dynamics::simulate_sde;
use uldp_core::exec::Exec;
use uldp_core::model::{
    double_well_gradient, double_well_hamiltonian, double_well_symplectic, make_brownian_system,
    make_hamiltonian_system, make_ou_system, Control, HamiltonianNoise,
};
use uldp_core::verify::{condition_ii_study, mc_rare_event_with, EventSpec};

fn gaussian_tail(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

/// Minimal `½Δt|h|²` subject to the Euler endpoint constraint for
/// `dZ = −aZ dt + σ0 h dt`, by direct normal equations.
fn lq_oracle(a: f64, sigma0: f64, x0: f64, y: f64, n: usize) -> f64 {
    let dt = 1.0 / n as f64;
    let q = 1.0 - a * dt;
    let g: Vec<f64> = (0..n).map(|k| dt * sigma0 * q.powi((n - 1 - k) as i32)).collect();
    let r = y - q.powi(n as i32) * x0;
    let gg: f64 = g.iter().map(|v| v * v).sum();
    0.5 * dt * g.iter().map(|v| (v * r / gg).powi(2)).sum::<f64>()
}

#[test]
fn brownian_endpoint_refinement_is_monotone() {
    let (field, _) = make_brownian_system(1, 1, 1.0).unwrap();
    let y = 1.3;
    let mut prev = f64::INFINITY;
    for n in [16, 32, 64, 128, 256, 512, 1024] {
        let r = min_action_endpoint(&field, &[0.0], &[y], n, &OptimizerOptions::default()).unwrap();
        let err = (r.rate - y * y / 2.0).abs();
        assert!(err <= prev + 1e-12, "n={n}: {err} > {prev}");
        prev = err;
    }
}

#[test]
fn ou_endpoint_normal_equations() {
    let (field, _) = make_ou_system(1.0, 1.0, 1).unwrap();
    for (x0, y) in [(0.0, 1.0), (0.5, -0.7)] {
        let r = min_action_endpoint(&field, &[x0], &[y], 128, &OptimizerOptions::default()).unwrap();
        let oracle = lq_oracle(1.0, 1.0, x0, y, 128);
        assert!((r.rate - oracle).abs() <= 1e-6 * oracle, "{} vs {oracle}", r.rate);
    }
}

#[test]
fn symplectic_part_conserves_energy() {
    for i in 0..50 {
        let x = [-5.0 + 0.2 * i as f64, 3.0 - 0.13 * i as f64];
        let g = double_well_gradient(&x);
        let j = double_well_symplectic(&x);
        assert!((g[0] * j[0] + g[1] * j[1]).abs() <= 1e-12);
        // ∇H by central differences
        let h = 1e-6;
        let fd0 = (double_well_hamiltonian(&[x[0] + h, x[1]]) - double_well_hamiltonian(&[x[0] - h, x[1]])) / (2.0 * h);
        assert!((fd0 - g[0]).abs() <= 1e-6 * (1.0 + g[0].abs()));
    }
}

#[test]
fn ou_weak_mean() {
    let (field, _) = make_ou_system(0.7, 1.0, 1).unwrap();
    let n = 100_000;
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    for i in 0..n {
        let t = simulate_sde(&field, 0.2, &[1.5], 200, 11, i).unwrap();
        let v = t.terminal()[0];
        sum += v;
        sum2 += v * v;
    }
    let mean = sum / n as f64;
    let se = ((sum2 / n as f64 - mean * mean) / n as f64).sqrt();
    // Euler mean is x0(1 − aΔt)^n; the continuous value differs by O(Δt)
    let exact = 1.5 * (-0.7f64).exp();
    assert!((mean - exact).abs() <= 3.0 * se + 1.5 * 0.7 * 0.7 / 400.0, "{mean} vs {exact}");
}

#[test]
fn terminal_probability_within_four_se_in_most_seeds() {
    let (field, _) = make_brownian_system(1, 1, 1.0).unwrap();
    let eps: f64 = 0.25;
    let delta = 0.6;
    let trials = 20_000;
    let p = gaussian_tail(delta / eps.sqrt());
    let se = (p * (1.0 - p) / trials as f64).sqrt();
    let event = EventSpec::terminal_at_least(delta);
    let ok = (0..100)
        .filter(|&seed| {
            let r = mc_rare_event_with(&field, eps, &[0.0], &event, trials, 4, seed, Exec::Parallel).unwrap();
            (r.p_hat - p).abs() <= 4.0 * se
        })
        .count();
    assert!(ok >= 95, "{ok}/100 within 4 SE");
}

/// Exact terminal law of the Euler OU chain from 0: Gaussian with variance
/// `εΔt Σ_k (1 − aΔt)^{2k}`.
fn ou_euler_tail(eps: f64, n: usize, y: f64) -> f64 {
    let dt = 1.0 / n as f64;
    let q = 1.0 - dt;
    let var: f64 = (0..n).map(|k| dt * q.powi(2 * k as i32)).sum::<f64>() * eps;
    gaussian_tail(y / var.sqrt())
}

#[test]
fn ou_endpoint_exact_law_close_to_lq_reference() {
    let n = 200;
    let i_ref = lq_oracle(1.0, 1.0, 0.0, 1.0, n);
    let var = (1.0 - (-2.0f64).exp()) / 2.0;
    assert!((i_ref - 1.0 / (2.0 * var)).abs() < 1e-2);
    let exact = -0.05 * ou_euler_tail(0.05, n, 1.0).ln();
    assert!((exact - i_ref).abs() <= 0.3 * i_ref, "{exact} vs {i_ref}");
}

#[test]
fn ou_endpoint_monte_carlo_within_thirty_percent() {
    // P(X(T) ≥ 1) ≈ 5e-12 at ε = 0.05: a million plain trials see no hits.
    let (field, _) = make_ou_system(1.0, 1.0, 1).unwrap();
    let n = 200;
    let r = mc_rare_event_with(&field, 0.05, &[0.0], &EventSpec::terminal_at_least(1.0), 1_000_000, n, 3, Exec::Parallel)
        .unwrap();
    let i_ref = lq_oracle(1.0, 1.0, 0.0, 1.0, n);
    assert!((r.neg_eps_log_p - i_ref).abs() <= 0.3 * i_ref, "{} vs {i_ref}", r.neg_eps_log_p);
}

#[test]
fn hamiltonian_gradient_check_away_from_axis() {
    let (field, _) = make_hamiltonian_system(2.0, HamiltonianNoise::default()).unwrap();
    let err = gradient_check(&field, &[0.6, 0.4], &[0.2, -0.3], 40, 20, 17).unwrap();
    assert!(err <= 1e-5, "{err}");
}

#[test]
fn hamiltonian_condition_ii_shrinks_with_epsilon() {
    let (field, _) = make_hamiltonian_system(2.0, HamiltonianNoise::default()).unwrap();
    let grid: Vec<Vec<f64>> = [-2.0, 0.0, 2.0]
        .iter()
        .flat_map(|&a| [-2.0, 0.0, 2.0].map(|b| vec![a, b]))
        .collect();
    let h = Control::zero(1.0, 1, 2).unwrap();
    let t = condition_ii_study(&field, &[1e-2, 1e-4], &grid, &h, 400, 30, 8).unwrap();
    let u = t.uniformity();
    assert!(u[1].1 < u[0].1, "{u:?}");
}
