//! The rate functional `I = ½∫|h|²`, minimal controls along given paths,
//! and minimum action to a target endpoint.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{euler_stream, grid_time, Trajectory};
use crate::error::{Error, Result};
use crate::model::{CoefficientField, Control};

pub const DEFAULT_PINV_TOL: f64 = 1e-10;
pub const DEFAULT_FEAS_TOL: f64 = 1e-7;

/// Optimizer state attached to results and to [`Error::OptimizerFailure`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub iterations: usize,
    #[serde(with = "crate::numfmt")]
    pub grad_norm: f64,
    /// Penalty weights visited, in order.
    pub mu_schedule: Vec<f64>,
    #[serde(with = "crate::numfmt")]
    pub objective: f64,
    #[serde(with = "crate::numfmt")]
    pub mismatch: f64,
    pub converged: bool,
}

/// A rate value with its minimizing control.
///
/// `residual` is the largest defect `|ẋ − b − σh|` for [`path_rate`] and the
/// terminal mismatch `|Z^h(T) − target|` for [`min_action_endpoint`]. The
/// rate is `+∞` exactly when it exceeds the feasibility tolerance.
#[derive(Debug, Clone)]
pub struct ActionResult {
    pub rate: f64,
    pub control: Option<Control>,
    pub residual: f64,
    pub telemetry: Telemetry,
    /// Cells whose defect is outside the range of `σ`.
    pub infeasible_cells: Vec<usize>,
}

#[derive(Serialize)]
struct ActionSummary {
    #[serde(with = "crate::numfmt")]
    rate: f64,
    #[serde(with = "crate::numfmt")]
    residual: f64,
    iterations: usize,
    #[serde(with = "crate::numfmt")]
    grad_norm: f64,
    #[serde(with = "crate::numfmt")]
    mu_final: f64,
}

impl ActionResult {
    pub fn is_finite(&self) -> bool {
        self.rate.is_finite()
    }

    /// `{rate, residual, iterations, grad_norm, mu_final}`.
    pub fn to_json(&self) -> String {
        let s = ActionSummary {
            rate: self.rate,
            residual: self.residual,
            iterations: self.telemetry.iterations,
            grad_norm: self.telemetry.grad_norm,
            mu_final: self.telemetry.mu_schedule.last().copied().unwrap_or(0.0),
        };
        serde_json::to_string_pretty(&s).expect("summary serializes")
    }
}

/// `½∫₀ᵀ|h|²`, exact for piecewise-constant controls.
pub fn action_of_control(h: &Control) -> f64 {
    0.5 * h.squared_norm()
}

/// CSV with header `t,h1,…,hm`, one row per cell start time.
pub fn control_csv(h: &Control) -> String {
    let mut out = String::from("t");
    for l in 1..=h.dim() {
        write!(out, ",h{l}").unwrap();
    }
    out.push('\n');
    for k in 0..h.cells() {
        write!(out, "{}", k as f64 * h.dt()).unwrap();
        for v in h.cell(k) {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Path rate

/// Tolerances for [`path_rate_with`].
#[derive(Debug, Clone, Copy)]
pub struct PathRateOptions {
    /// Singular values below `pinv_tol·σ_max` count as zero.
    pub pinv_tol: f64,
    /// A cell is infeasible when `‖σh − r‖ > feas_tol·(1 + |r|)`.
    pub feas_tol: f64,
}

impl Default for PathRateOptions {
    fn default() -> Self {
        Self {
            pinv_tol: DEFAULT_PINV_TOL,
            feas_tol: DEFAULT_FEAS_TOL,
        }
    }
}

/// Least-norm solution of `σh = r` by thresholded SVD.
pub fn least_norm_solve(sigma: &DMatrix<f64>, r: &DVector<f64>, pinv_tol: f64) -> DVector<f64> {
    let svd = sigma.clone().svd(true, true);
    let (u, vt) = (svd.u.as_ref().unwrap(), svd.v_t.as_ref().unwrap());
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cut = pinv_tol * smax;
    let mut h = DVector::zeros(sigma.ncols());
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cut && s > 0.0 {
            let coef = u.column(i).dot(r) / s;
            h += vt.row(i).transpose() * coef;
        }
    }
    h
}

pub fn path_rate(field: &CoefficientField, path: &Trajectory, pinv_tol: f64) -> Result<ActionResult> {
    path_rate_with(
        field,
        path,
        &PathRateOptions {
            pinv_tol,
            ..PathRateOptions::default()
        },
    )
}

/// Recovers the least-norm control along `path` from forward-difference
/// velocities, the stencil of the Euler skeleton. The defect is formed as
/// `(x_{k+1} − (x_k + bΔt))/Δt` so an uncontrolled Euler path gives exactly 0.
pub fn path_rate_with(field: &CoefficientField, path: &Trajectory, opts: &PathRateOptions) -> Result<ActionResult> {
    let d = field.dim_state();
    if path.dim() != d {
        return Err(Error::config(format!(
            "path dimension {} does not match field dimension {d}",
            path.dim()
        )));
    }
    if (path.horizon() - field.horizon()).abs() > 1e-12 * field.horizon() {
        return Err(Error::config("path horizon differs from field horizon"));
    }
    let n = path.n_steps();
    let dt = path.dt();
    let mut values = Vec::with_capacity(n * field.dim_noise());
    let mut residual = 0.0f64;
    let mut infeasible = Vec::new();
    for k in 0..n {
        let t = path.time(k);
        let (x, xn) = (path.state(k), path.state(k + 1));
        let (b, s) = field.eval(t, x)?;
        let r = DVector::from_iterator(d, (0..d).map(|i| (xn[i] - (x[i] + b[i] * dt)) / dt));
        let h = least_norm_solve(&s, &r, opts.pinv_tol);
        let defect = (&s * &h - &r).norm();
        residual = residual.max(defect);
        if defect > opts.feas_tol * (1.0 + r.norm()) {
            infeasible.push(k);
        }
        values.extend(h.iter());
    }
    let telemetry = Telemetry {
        converged: true,
        ..Telemetry::default()
    };
    if !infeasible.is_empty() {
        return Ok(ActionResult {
            rate: f64::INFINITY,
            control: None,
            residual,
            telemetry,
            infeasible_cells: infeasible,
        });
    }
    let control = Control::from_flat(path.horizon(), field.dim_noise(), values)?;
    Ok(ActionResult {
        rate: action_of_control(&control),
        control: Some(control),
        residual,
        telemetry,
        infeasible_cells: infeasible,
    })
}

// ---------------------------------------------------------------------------
// Penalized endpoint objective and its adjoint

/// Settings for [`min_action_endpoint`].
#[derive(Debug, Clone)]
pub struct OptimizerOptions {
    pub mu_initial: f64,
    pub mu_factor: f64,
    pub mu_max: f64,
    pub grad_tol: f64,
    /// Terminal mismatch accepted as feasible; `None` means `1e-6·(1 + |target|)`.
    pub endpoint_tol: Option<f64>,
    /// Inner iteration cap per penalty weight.
    pub max_iter: usize,
    /// Control cells; must divide `n_steps`. `None` means one per step.
    pub cells: Option<usize>,
    /// Starting control; zero by default.
    pub initial: Option<Control>,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self {
            mu_initial: 10.0,
            mu_factor: 10.0,
            mu_max: 1e8,
            grad_tol: 1e-8,
            endpoint_tol: None,
            max_iter: 2000,
            cells: None,
            initial: None,
        }
    }
}

/// `J_μ(h) = ½∫|h|² + (μ/2)|Z^h(T) − target|²` on the Euler skeleton.
pub struct PenaltyProblem<'a> {
    field: &'a CoefficientField,
    x0: Vec<f64>,
    target: Vec<f64>,
    n_steps: usize,
    cells: usize,
}

struct Eval {
    objective: f64,
    mismatch: f64,
    /// Gradient with respect to the cell values of `h`.
    grad: Vec<f64>,
}

impl<'a> PenaltyProblem<'a> {
    pub fn new(field: &'a CoefficientField, x0: &[f64], target: &[f64], n_steps: usize, cells: usize) -> Result<Self> {
        let d = field.dim_state();
        if x0.len() != d || target.len() != d {
            return Err(Error::config(format!("x0 and target must have dimension {d}")));
        }
        if n_steps < 2 {
            return Err(Error::config("n_steps must be at least 2"));
        }
        if cells == 0 || !n_steps.is_multiple_of(cells) {
            return Err(Error::config(format!("{cells} control cells do not divide {n_steps} steps")));
        }
        if x0.iter().chain(target).any(|v| !v.is_finite()) {
            return Err(Error::invalid("x0 and target must be finite"));
        }
        Ok(Self {
            field,
            x0: x0.to_vec(),
            target: target.to_vec(),
            n_steps,
            cells,
        })
    }

    fn control(&self, values: &[f64]) -> Result<Control> {
        Control::from_flat(self.field.horizon(), self.field.dim_noise(), values.to_vec())
    }

    fn states(&self, h: &Control) -> Result<Vec<f64>> {
        let mut states = Vec::with_capacity((self.n_steps + 1) * self.x0.len());
        euler_stream(self.field, &self.x0, self.n_steps, Some(h), None, |_, y| {
            states.extend_from_slice(y);
            true
        })?;
        Ok(states)
    }

    fn value(&self, values: &[f64], mu: f64) -> Result<(f64, f64)> {
        let h = self.control(values)?;
        let states = self.states(&h)?;
        let d = self.x0.len();
        let zn = &states[self.n_steps * d..];
        let mis2: f64 = zn.iter().zip(&self.target).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok((action_of_control(&h) + 0.5 * mu * mis2, mis2.sqrt()))
    }

    /// Objective and exact gradient of the discrete objective:
    /// `λ_N = μ(Z_N − y)`,
    /// `λ_k = λ_{k+1} + Δt(∂_z b + ∂_z(σh))ᵀλ_{k+1}`,
    /// `∂J/∂h_c = Σ_{k∈c} Δt(h_c + σ_kᵀλ_{k+1})`.
    fn eval(&self, values: &[f64], mu: f64) -> Result<Eval> {
        let field = self.field;
        let (d, m) = (field.dim_state(), field.dim_noise());
        let h = self.control(values)?;
        let states = self.states(&h)?;
        let n = self.n_steps;
        let dt = field.horizon() / n as f64;
        let zn = &states[n * d..];
        let diff: Vec<f64> = zn.iter().zip(&self.target).map(|(a, b)| a - b).collect();
        let mis2: f64 = diff.iter().map(|v| v * v).sum();
        let objective = action_of_control(&h) + 0.5 * mu * mis2;

        let per_cell = n / self.cells;
        let mut grad = vec![0.0; values.len()];
        let mut lambda: Vec<f64> = diff.iter().map(|v| mu * v).collect();
        let mut next = vec![0.0; d];
        let mut s = vec![0.0; d * m];
        let mut jb = vec![0.0; d * d];
        let mut js = vec![0.0; d * m * d];
        for k in (0..n).rev() {
            let t = grid_time(field.horizon(), n, k);
            let z = &states[k * d..(k + 1) * d];
            let c = k / per_cell;
            let hk = h.cell(c);
            field.diffusion_into(t, z, &mut s);
            field.drift_jacobian_into(t, z, &mut jb);
            let g = &mut grad[c * m..(c + 1) * m];
            for l in 0..m {
                let st_l: f64 = (0..d).map(|i| s[i * m + l] * lambda[i]).sum();
                g[l] += dt * (hk[l] + st_l);
            }
            next.copy_from_slice(&lambda);
            for j in 0..d {
                let mut acc = 0.0;
                for i in 0..d {
                    acc += jb[i * d + j] * lambda[i];
                }
                next[j] += dt * acc;
            }
            if hk.iter().any(|&v| v != 0.0) {
                field.diffusion_jacobian_into(t, z, &mut js);
                for j in 0..d {
                    let mut acc = 0.0;
                    for i in 0..d {
                        for (l, hl) in hk.iter().enumerate() {
                            acc += lambda[i] * hl * js[(i * m + l) * d + j];
                        }
                    }
                    next[j] += dt * acc;
                }
            }
            std::mem::swap(&mut lambda, &mut next);
        }
        Ok(Eval {
            objective,
            mismatch: mis2.sqrt(),
            grad,
        })
    }

    /// `(J_μ(h), ∇J_μ(h))`, the gradient laid out like `h.values()`.
    pub fn objective_and_gradient(&self, h: &Control, mu: f64) -> Result<(f64, Vec<f64>)> {
        h.check_compatible(self.field, self.n_steps)?;
        let e = self.eval(h.values(), mu)?;
        Ok((e.objective, e.grad))
    }

    pub fn objective(&self, h: &Control, mu: f64) -> Result<f64> {
        h.check_compatible(self.field, self.n_steps)?;
        Ok(self.value(h.values(), mu)?.0)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn is_blow_up(e: &Error) -> bool {
    matches!(e, Error::BlowUp { .. } | Error::Evaluation { .. })
}

/// Minimizes `J_μ` over the cell values with Polak–Ribière+ conjugate
/// gradients, working in `u = h·√Δt_cell` so the regularizer is `½|u|²`.
/// The penalty weight grows geometrically until the terminal mismatch meets
/// the tolerance; each stage is warm-started from the previous one.
pub fn min_action_endpoint(
    field: &CoefficientField,
    x0: &[f64],
    target: &[f64],
    n_steps: usize,
    opts: &OptimizerOptions,
) -> Result<ActionResult> {
    let cells = opts.cells.unwrap_or(n_steps);
    let prob = PenaltyProblem::new(field, x0, target, n_steps, cells)?;
    let m = field.dim_noise();
    let endpoint_tol = opts
        .endpoint_tol
        .unwrap_or_else(|| 1e-6 * (1.0 + target.iter().map(|v| v * v).sum::<f64>().sqrt()));
    if !(opts.mu_initial > 0.0 && opts.mu_factor > 1.0 && opts.mu_max >= opts.mu_initial) {
        return Err(Error::invalid("penalty schedule must start positive and grow"));
    }
    let scale = (field.horizon() / cells as f64).sqrt();
    let mut u: Vec<f64> = match &opts.initial {
        Some(h) => {
            if h.cells() != cells || h.dim() != m {
                return Err(Error::config("initial control does not match the optimization grid"));
            }
            h.values().iter().map(|v| v * scale).collect()
        }
        None => vec![0.0; cells * m],
    };
    let to_h = |u: &[f64]| -> Vec<f64> { u.iter().map(|v| v / scale).collect() };
    let eval_u = |u: &[f64], mu: f64| -> Result<(f64, f64, Vec<f64>)> {
        let e = prob.eval(&to_h(u), mu)?;
        let g = e.grad.iter().map(|v| v / scale).collect();
        Ok((e.objective, e.mismatch, g))
    };

    let mut tel = Telemetry::default();
    let mut feasible: Option<(Vec<f64>, f64)> = None;
    let mut mu = opts.mu_initial;
    let mut alpha_prev = 1.0;
    loop {
        tel.mu_schedule.push(mu);
        let (mut f, mut mis, mut g) = match eval_u(&u, mu) {
            Ok(v) => v,
            Err(e) if is_blow_up(&e) => {
                tel.converged = false;
                return Err(Error::OptimizerFailure {
                    message: format!("starting control blows up: {e}"),
                    telemetry: Box::new(tel),
                });
            }
            Err(e) => return Err(e),
        };
        let mut dir: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut stalls = 0;
        for _ in 0..opts.max_iter {
            let gnorm = dot(&g, &g).sqrt();
            if gnorm <= opts.grad_tol {
                break;
            }
            let mut slope = dot(&g, &dir);
            if slope >= 0.0 {
                dir = g.iter().map(|v| -v).collect();
                slope = -gnorm * gnorm;
            }
            // secant estimate of the minimizer along dir from one probe
            let mut probe = alpha_prev;
            let mut blowups = 0;
            let probe_slope = loop {
                let trial: Vec<f64> = u.iter().zip(&dir).map(|(a, b)| a + probe * b).collect();
                match eval_u(&trial, mu) {
                    Ok((_, _, gt)) => break dot(&gt, &dir),
                    Err(e) if is_blow_up(&e) => {
                        blowups += 1;
                        probe *= 0.5;
                        if blowups > 60 {
                            tel.converged = false;
                            return Err(Error::OptimizerFailure {
                                message: "persistent blow-up in line search".into(),
                                telemetry: Box::new(tel),
                            });
                        }
                    }
                    Err(e) => return Err(e),
                }
            };
            let curvature = (probe_slope - slope) / probe;
            let mut alpha = if curvature > 0.0 { -slope / curvature } else { 2.0 * probe };
            let mut accepted = None;
            for _ in 0..80 {
                let trial: Vec<f64> = u.iter().zip(&dir).map(|(a, b)| a + alpha * b).collect();
                match eval_u(&trial, mu) {
                    Ok((ft, mt, gt)) if ft <= f + 1e-4 * alpha * slope => {
                        accepted = Some((trial, ft, mt, gt));
                        break;
                    }
                    Ok(_) => {}
                    Err(e) if is_blow_up(&e) => {}
                    Err(e) => return Err(e),
                }
                alpha *= 0.5;
            }
            tel.iterations += 1;
            let Some((un, fn_, mn, gn)) = accepted else {
                // no decrease representable along dir
                break;
            };
            alpha_prev = alpha;
            let beta = (dot(&gn, &gn) - dot(&gn, &g)) / dot(&g, &g);
            let beta = beta.max(0.0);
            dir = gn.iter().zip(&dir).map(|(a, b)| -a + beta * b).collect();
            let decrease = f - fn_;
            u = un;
            g = gn;
            mis = mn;
            if decrease <= 1e-16 * f.abs().max(1e-300) {
                stalls += 1;
                if stalls >= 3 {
                    f = fn_;
                    break;
                }
            } else {
                stalls = 0;
            }
            f = fn_;
        }
        tel.grad_norm = dot(&g, &g).sqrt();
        tel.objective = f;
        tel.mismatch = mis;
        if mis <= endpoint_tol {
            feasible = Some((u.clone(), mis));
            break;
        }
        if mu * opts.mu_factor > opts.mu_max * (1.0 + 1e-12) {
            break;
        }
        mu *= opts.mu_factor;
    }
    match feasible {
        Some((u, mis)) => {
            tel.converged = true;
            let control = prob.control(&to_h(&u))?;
            Ok(ActionResult {
                rate: action_of_control(&control),
                control: Some(control),
                residual: mis,
                telemetry: tel,
                infeasible_cells: Vec::new(),
            })
        }
        None => {
            tel.converged = false;
            Ok(ActionResult {
                rate: f64::INFINITY,
                control: None,
                residual: tel.mismatch,
                telemetry: tel,
                infeasible_cells: Vec::new(),
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Gradient check

/// Per-probe comparison of adjoint and finite-difference directional derivatives.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradientCheckReport {
    pub mu: f64,
    pub probes: Vec<GradientProbe>,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradientProbe {
    pub adjoint: f64,
    pub finite_difference: f64,
    pub rel_error: f64,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = 1.0 - (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    let u2 = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Max relative error between adjoint and central-difference directional
/// derivatives of `J_μ` (μ = 10) at a seeded random control, over `probes`
/// random unit directions.
pub fn gradient_check(
    field: &CoefficientField,
    x0: &[f64],
    target: &[f64],
    n_steps: usize,
    probes: usize,
    seed: u64,
) -> Result<f64> {
    Ok(gradient_check_report(field, x0, target, n_steps, probes, seed)?.max_rel_error)
}

pub fn gradient_check_report(
    field: &CoefficientField,
    x0: &[f64],
    target: &[f64],
    n_steps: usize,
    probes: usize,
    seed: u64,
) -> Result<GradientCheckReport> {
    let mu = 10.0;
    let prob = PenaltyProblem::new(field, x0, target, n_steps, n_steps)?;
    let m = field.dim_noise();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<f64> = (0..n_steps * m).map(|_| 0.5 * gaussian(&mut rng)).collect();
    let e = prob.eval(&base, mu)?;
    let hnorm = dot(&base, &base).sqrt();
    let step = 1e-6 * hnorm.max(1.0);
    let mut out = Vec::with_capacity(probes);
    for _ in 0..probes {
        let mut v: Vec<f64> = (0..base.len()).map(|_| gaussian(&mut rng)).collect();
        let n = dot(&v, &v).sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        let plus: Vec<f64> = base.iter().zip(&v).map(|(a, b)| a + step * b).collect();
        let minus: Vec<f64> = base.iter().zip(&v).map(|(a, b)| a - step * b).collect();
        let fd = (prob.value(&plus, mu)?.0 - prob.value(&minus, mu)?.0) / (2.0 * step);
        let adj = dot(&e.grad, &v);
        let rel = (adj - fd).abs() / adj.abs().max(fd.abs()).max(1e-12);
        out.push(GradientProbe {
            adjoint: adj,
            finite_difference: fd,
            rel_error: rel,
        });
    }
    let max_rel_error = out.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradientCheckReport {
        mu,
        probes: out,
        max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{solve_skeleton, Scheme};
    use crate::model::{make_brownian_system, make_hamiltonian_system, make_ou_system, HamiltonianNoise};
    use approx::assert_relative_eq;

    #[test]
    fn action_of_control_oracles() {
        assert_eq!(action_of_control(&Control::zero(1.0, 8, 2).unwrap()), 0.0);
        let c = Control::constant(3.0, 10, &[1.5]).unwrap();
        assert_relative_eq!(action_of_control(&c), 1.5 * 1.5 * 3.0 / 2.0, max_relative = 1e-14);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vals: Vec<f64> = (0..32).map(|_| gaussian(&mut rng)).collect();
        let c = Control::from_flat(2.0, 2, vals.clone()).unwrap();
        let mut direct = 0.0;
        for k in 0..16 {
            direct += (vals[2 * k].powi(2) + vals[2 * k + 1].powi(2)) * (2.0 / 16.0);
        }
        assert_relative_eq!(action_of_control(&c), direct / 2.0, max_relative = 1e-14);
    }

    #[test]
    fn control_csv_layout() {
        let c = Control::from_flat(1.0, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(control_csv(&c), "t,h1,h2\n0,1,2\n0.5,3,4\n");
    }

    #[test]
    fn straight_line_rate() {
        let (field, _) = make_brownian_system(2, 2, 1.0).unwrap();
        let field = field.with_horizon(2.0).unwrap();
        let n = 50;
        let (x, y) = ([0.5, -1.0], [2.0, 1.0]);
        let states: Vec<f64> = (0..=n)
            .flat_map(|k| {
                let s = k as f64 / n as f64;
                [x[0] + s * (y[0] - x[0]), x[1] + s * (y[1] - x[1])]
            })
            .collect();
        let path = Trajectory::from_states(2.0, 2, states).unwrap();
        let r = path_rate(&field, &path, DEFAULT_PINV_TOL).unwrap();
        let exact = ((y[0] - x[0]).powi(2) + (y[1] - x[1]).powi(2)) / (2.0 * 2.0);
        assert_relative_eq!(r.rate, exact, max_relative = 1e-12);
    }

    #[test]
    fn zero_control_round_trip() {
        let (field, _) = make_hamiltonian_system(2.0, HamiltonianNoise::default()).unwrap();
        let z = solve_skeleton(&field, &[0.3, -0.7], &Control::zero(1.0, 40, 2).unwrap(), 40, Scheme::Euler).unwrap();
        let r = path_rate(&field, &z, DEFAULT_PINV_TOL).unwrap();
        assert_eq!(r.rate, 0.0);
        assert_eq!(r.residual, 0.0);
    }

    #[test]
    fn known_control_round_trip() {
        let (field, _) = make_ou_system(1.0, 1.0, 2).unwrap();
        let h = Control::from_fn(1.0, 32, 2, |t| vec![(3.0 * t).sin(), 1.0 - t]).unwrap();
        let z = solve_skeleton(&field, &[0.2, 0.1], &h, 32, Scheme::Euler).unwrap();
        let r = path_rate(&field, &z, DEFAULT_PINV_TOL).unwrap();
        assert_relative_eq!(r.rate, action_of_control(&h), max_relative = 1e-10);
        assert!(r.residual < 1e-12);
    }

    #[test]
    fn degenerate_sigma_path_is_infeasible() {
        // σ(x) = diag(x₁², …) vanishes in the first row at x₁ = 0; a path
        // crossing the origin horizontally needs a defect outside range σ.
        let (field, _) = make_hamiltonian_system(2.0, HamiltonianNoise::default()).unwrap();
        let n = 20;
        let states: Vec<f64> = (0..=n).flat_map(|k| [-1.0 + 2.0 * k as f64 / n as f64, 0.0]).collect();
        let path = Trajectory::from_states(1.0, 2, states).unwrap();
        let r = path_rate(&field, &path, DEFAULT_PINV_TOL).unwrap();
        assert!(r.rate.is_infinite());
        assert!(r.control.is_none());
        assert!(r.infeasible_cells.contains(&(n / 2)), "{:?}", r.infeasible_cells);
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let (field, _) = make_ou_system(1.0, 1.0, 2).unwrap();
        let path = Trajectory::from_states(1.0, 1, vec![0.0, 1.0]).unwrap();
        assert!(matches!(path_rate(&field, &path, 1e-10), Err(Error::Config(_))));
    }

    #[test]
    fn brownian_endpoint_closed_form() {
        let (field, _) = make_brownian_system(1, 1, 1.0).unwrap();
        for y in [0.5, 1.0, 2.0] {
            let r = min_action_endpoint(&field, &[0.0], &[y], 200, &OptimizerOptions::default()).unwrap();
            assert_relative_eq!(r.rate, y * y / 2.0, max_relative = 1e-3);
            let c = r.control.unwrap();
            for k in 0..c.cells() {
                assert!((c.cell(k)[0] - y).abs() < 1e-3 * y);
            }
        }
    }

    #[test]
    fn reachable_flow_endpoint_has_zero_rate() {
        let (field, _) = make_ou_system(1.0, 1.0, 1).unwrap();
        let z = solve_skeleton(&field, &[1.0], &Control::zero(1.0, 50, 1).unwrap(), 50, Scheme::Euler).unwrap();
        let r = min_action_endpoint(&field, &[1.0], z.terminal(), 50, &OptimizerOptions::default()).unwrap();
        assert!(r.rate <= 1e-10);
    }

    /// Constrained normal equations: Z_N = (1−aΔt)^N x0 + Σ G_k h_k with
    /// G_k = Δt σ0 (1−aΔt)^{N−1−k}; least-norm h = Gᵀ r / (G·G).
    fn lq_oracle(a: f64, sigma0: f64, x0: f64, y: f64, n: usize) -> f64 {
        let dt = 1.0 / n as f64;
        let q = 1.0 - a * dt;
        let g: Vec<f64> = (0..n).map(|k| dt * sigma0 * q.powi((n - 1 - k) as i32)).collect();
        let r = y - q.powi(n as i32) * x0;
        let gg: f64 = g.iter().map(|v| v * v).sum();
        let h: Vec<f64> = g.iter().map(|v| v * r / gg).collect();
        0.5 * dt * h.iter().map(|v| v * v).sum::<f64>()
    }

    #[test]
    fn ou_matches_lq_oracle() {
        let (field, _) = make_ou_system(1.0, 1.0, 1).unwrap();
        for n in [64, 256] {
            let r = min_action_endpoint(&field, &[0.0], &[1.0], n, &OptimizerOptions::default()).unwrap();
            assert_relative_eq!(r.rate, lq_oracle(1.0, 1.0, 0.0, 1.0, n), max_relative = 1e-6);
        }
    }

    #[test]
    fn unreachable_target_is_infinite() {
        // σ = [1; 0]: the second coordinate can never move
        let (field, _) = make_brownian_system(2, 1, 1.0).unwrap();
        let r = min_action_endpoint(&field, &[0.0, 0.0], &[1.0, 1.0], 20, &OptimizerOptions::default()).unwrap();
        assert!(r.rate.is_infinite());
        assert!(r.control.is_none());
        assert!(!r.telemetry.converged);
        assert!(r.residual > 0.9);
    }

    #[test]
    fn gradient_checks() {
        let (b, _) = make_brownian_system(2, 2, 1.0).unwrap();
        assert!(gradient_check(&b, &[0.0, 0.0], &[1.0, -1.0], 50, 20, 1).unwrap() <= 1e-7);
        let (ou, _) = make_ou_system(1.0, 1.0, 2).unwrap();
        assert!(gradient_check(&ou, &[0.5, 0.0], &[1.0, 1.0], 50, 20, 2).unwrap() <= 1e-6);
        let (ham, _) = make_hamiltonian_system(2.0, HamiltonianNoise::default()).unwrap();
        assert!(gradient_check(&ham, &[0.4, 0.3], &[0.5, 0.5], 20, 20, 3).unwrap() <= 1e-5);
    }

    #[test]
    fn blow_up_in_start_is_optimizer_failure() {
        let field = CoefficientField::new("cubic", 1, 1, 1.0, |_, x, o| o[0] = x[0].powi(3), |_, _, o| o[0] = 1.0).unwrap();
        let err = min_action_endpoint(&field, &[10.0], &[0.0], 10, &OptimizerOptions::default()).unwrap_err();
        assert!(matches!(err, Error::OptimizerFailure { .. }), "{err}");
    }

    #[test]
    fn result_json_fields() {
        let (field, _) = make_brownian_system(1, 1, 1.0).unwrap();
        let r = min_action_endpoint(&field, &[0.0], &[1.0], 20, &OptimizerOptions::default()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["grad_norm", "iterations", "mu_final", "rate", "residual"]);
    }
}
