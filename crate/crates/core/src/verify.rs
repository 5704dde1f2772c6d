//! Monte Carlo estimates of rare-event probabilities next to minimized
//! action, and numerical studies of the two conditions behind the uniform
//! Laplace principle: continuity of the skeleton map and convergence of the
//! controlled SDE to the skeleton.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::action::{min_action_endpoint, path_rate, OptimizerOptions, DEFAULT_PINV_TOL};
use crate::dynamics::{
    euler_stream, simulate_controlled, solve_skeleton, sup_distance, NoiseSpec, Scheme, Trajectory,
};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{CoefficientField, Control};

/// Radius of the ball whose complement encodes a half-line event in `d = 1`.
pub const HALF_LINE_RADIUS: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    /// `|X(T) − center| ≤ radius`
    TerminalBall { center: Vec<f64>, radius: f64 },
    /// `max_k |X(t_k) − ref(t_k)| ≤ radius`
    Tube { reference: Trajectory, radius: f64 },
    /// `max_k |X(t_k) − center| ≥ radius`
    ExitBall { center: Vec<f64>, radius: f64 },
}

/// A path event, optionally complemented.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSpec {
    pub kind: EventKind,
    pub complement: bool,
}

fn check_radius(radius: f64) -> Result<()> {
    if radius > 0.0 && radius.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("event radius must be positive, got {radius}")))
    }
}

impl EventSpec {
    pub fn terminal_ball(center: Vec<f64>, radius: f64) -> Result<Self> {
        check_radius(radius)?;
        Ok(Self {
            kind: EventKind::TerminalBall { center, radius },
            complement: false,
        })
    }

    pub fn tube(reference: Trajectory, radius: f64) -> Result<Self> {
        check_radius(radius)?;
        Ok(Self {
            kind: EventKind::Tube { reference, radius },
            complement: false,
        })
    }

    pub fn exit_ball(center: Vec<f64>, radius: f64) -> Result<Self> {
        check_radius(radius)?;
        Ok(Self {
            kind: EventKind::ExitBall { center, radius },
            complement: false,
        })
    }

    /// `X(T) ≥ threshold` in `d = 1`, as the complement of the ball
    /// `[threshold − 2R, threshold]` with `R` = [`HALF_LINE_RADIUS`].
    pub fn terminal_at_least(threshold: f64) -> Self {
        Self {
            kind: EventKind::TerminalBall {
                center: vec![threshold - HALF_LINE_RADIUS],
                radius: HALF_LINE_RADIUS,
            },
            complement: true,
        }
    }

    pub fn complemented(mut self) -> Self {
        self.complement = !self.complement;
        self
    }

    fn radius(&self) -> f64 {
        match &self.kind {
            EventKind::TerminalBall { radius, .. }
            | EventKind::Tube { radius, .. }
            | EventKind::ExitBall { radius, .. } => *radius,
        }
    }

    fn validate(&self, field: &CoefficientField, n_steps: usize) -> Result<()> {
        check_radius(self.radius())?;
        let d = field.dim_state();
        match &self.kind {
            EventKind::TerminalBall { center, .. } | EventKind::ExitBall { center, .. } => {
                if center.len() != d {
                    return Err(Error::config(format!("event center must have dimension {d}")));
                }
            }
            EventKind::Tube { reference, .. } => {
                if reference.dim() != d
                    || reference.n_steps() != n_steps
                    || (reference.horizon() - field.horizon()).abs() > 1e-12 * field.horizon()
                {
                    return Err(Error::config("tube reference must live on the simulation grid"));
                }
            }
        }
        Ok(())
    }

    fn echo(&self) -> EventEcho {
        let (kind, center, radius) = match &self.kind {
            EventKind::TerminalBall { center, radius } => ("terminal_ball", Some(center.clone()), *radius),
            EventKind::Tube { radius, .. } => ("tube", None, *radius),
            EventKind::ExitBall { center, radius } => ("exit_ball", Some(center.clone()), *radius),
        };
        EventEcho {
            kind: kind.into(),
            center,
            radius,
            complement: self.complement,
        }
    }
}

/// Serializable summary of an [`EventSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventEcho {
    pub kind: String,
    pub center: Option<Vec<f64>>,
    pub radius: f64,
    pub complement: bool,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Streams one trajectory and decides the (uncomplemented) event, stopping
/// as soon as the answer is known.
fn event_hit(
    field: &CoefficientField,
    x0: &[f64],
    event: &EventSpec,
    n_steps: usize,
    noise: NoiseSpec,
) -> Result<bool> {
    let mut inside = true;
    match &event.kind {
        EventKind::TerminalBall { center, radius } => {
            euler_stream(field, x0, n_steps, None, Some(noise), |k, y| {
                if k == n_steps {
                    inside = dist(y, center) <= *radius;
                }
                true
            })?;
        }
        EventKind::Tube { reference, radius } => {
            euler_stream(field, x0, n_steps, None, Some(noise), |k, y| {
                inside = dist(y, reference.state(k)) <= *radius;
                inside
            })?;
        }
        EventKind::ExitBall { center, radius } => {
            inside = false;
            euler_stream(field, x0, n_steps, None, Some(noise), |_, y| {
                inside = dist(y, center) >= *radius;
                !inside
            })?;
        }
    }
    Ok(inside != event.complement)
}

/// Plain Monte Carlo estimate with a 95% normal-approximation interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub epsilon: f64,
    pub trials: u64,
    pub hits: u64,
    /// Trajectories that crossed the overflow guard; excluded from `hits`.
    pub blow_ups: u64,
    pub p_hat: f64,
    pub ci95: (f64, f64),
    #[serde(with = "crate::numfmt")]
    pub neg_eps_log_p: f64,
    pub event: EventEcho,
}

impl McReport {
    /// Binomial standard error `√(p̂(1−p̂)/n)`.
    pub fn std_error(&self) -> f64 {
        (self.p_hat * (1.0 - self.p_hat) / self.trials as f64).sqrt()
    }

    /// At most 0.1% of trials blew up.
    pub fn is_valid(&self) -> bool {
        self.blow_ups * 1000 <= self.trials
    }
}

pub fn mc_rare_event(
    field: &CoefficientField,
    epsilon: f64,
    x0: &[f64],
    event: &EventSpec,
    trials: u64,
    n_steps: usize,
    seed: u64,
) -> Result<McReport> {
    mc_rare_event_with(field, epsilon, x0, event, trials, n_steps, seed, Exec::default())
}

/// Trajectory `i` uses noise stream `i` of `seed`, so `hits` is identical
/// for every execution policy and worker count.
#[allow(clippy::too_many_arguments)]
pub fn mc_rare_event_with(
    field: &CoefficientField,
    epsilon: f64,
    x0: &[f64],
    event: &EventSpec,
    trials: u64,
    n_steps: usize,
    seed: u64,
    exec: Exec,
) -> Result<McReport> {
    if trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid(format!("epsilon must be nonnegative, got {epsilon}")));
    }
    if n_steps == 0 || x0.len() != field.dim_state() {
        return Err(Error::config("need n_steps ≥ 1 and x0 of the field dimension"));
    }
    event.validate(field, n_steps)?;
    let (hits, blow_ups, first_err) = exec.map_reduce(
        trials as usize,
        (0u64, 0u64, None::<(usize, String)>),
        |i| {
            let noise = NoiseSpec {
                epsilon,
                seed,
                trajectory: i as u64,
            };
            match event_hit(field, x0, event, n_steps, noise) {
                Ok(hit) => (hit as u64, 0, None),
                Err(Error::BlowUp { .. }) => (0, 1, None),
                Err(e) => (0, 0, Some((i, e.to_string()))),
            }
        },
        |a, b| {
            let err = match (a.2, b.2) {
                (Some(x), Some(y)) => Some(if x.0 <= y.0 { x } else { y }),
                (x, y) => x.or(y),
            };
            (a.0 + b.0, a.1 + b.1, err)
        },
    );
    if let Some((i, msg)) = first_err {
        return Err(Error::invalid(format!("trajectory {i} failed: {msg}")));
    }
    let n = trials as f64;
    let p_hat = hits as f64 / n;
    let half = 1.96 * (p_hat * (1.0 - p_hat) / n).sqrt();
    let neg_eps_log_p = if hits == 0 {
        f64::INFINITY
    } else {
        -epsilon * p_hat.ln()
    };
    Ok(McReport {
        epsilon,
        trials,
        hits,
        blow_ups,
        p_hat,
        ci95: ((p_hat - half).max(0.0), (p_hat + half).min(1.0)),
        neg_eps_log_p,
        event: event.echo(),
    })
}

// ---------------------------------------------------------------------------
// LDP comparison

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdpRow {
    pub epsilon: f64,
    pub p_hat: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    #[serde(with = "crate::numfmt")]
    pub neg_eps_log_p: f64,
    #[serde(with = "crate::numfmt")]
    pub i_ref: f64,
}

#[derive(Debug, Clone)]
pub struct LdpTable {
    pub rows: Vec<LdpRow>,
    pub reports: Vec<McReport>,
}

impl LdpTable {
    pub const HEADER: &'static str = "epsilon,p_hat,ci_lo,ci_hi,neg_eps_log_p,i_ref";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epsilon, r.p_hat, r.ci_lo, r.ci_hi, r.neg_eps_log_p, r.i_ref
            )
            .unwrap();
        }
        out
    }

    /// `−ε log p̂` is nonincreasing as `ε` decreases, in row order sorted by
    /// decreasing `ε`.
    pub fn is_decreasing(&self) -> bool {
        let mut rows: Vec<&LdpRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| b.epsilon.total_cmp(&a.epsilon));
        rows.windows(2).all(|w| w[1].neg_eps_log_p <= w[0].neg_eps_log_p)
    }
}

#[derive(Debug, Clone, Default)]
pub struct LdpOptions {
    /// Reference action; computed from the event when absent.
    pub i_ref: Option<f64>,
    pub optimizer: OptimizerOptions,
    pub exec: Exec,
}

/// Inf of the endpoint action over the boundary of a terminal ball, started
/// at the boundary point nearest the noiseless endpoint and improved by a
/// tangential pattern search. Zero when the noiseless endpoint already lies
/// in the event.
fn terminal_reference(
    field: &CoefficientField,
    x0: &[f64],
    center: &[f64],
    radius: f64,
    complement: bool,
    n_steps: usize,
    opts: &OptimizerOptions,
) -> Result<f64> {
    let d = field.dim_state();
    let zero = Control::zero(field.horizon(), n_steps, field.dim_noise())?;
    let z0 = solve_skeleton(field, x0, &zero, n_steps, Scheme::Euler)?;
    let zt = z0.terminal();
    let r0 = dist(zt, center);
    if (r0 <= radius) != complement {
        return Ok(0.0);
    }
    let rate = |p: &[f64]| -> Result<f64> { Ok(min_action_endpoint(field, x0, p, n_steps, opts)?.rate) };
    let on_sphere = |v: &[f64]| -> Vec<f64> {
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        center.iter().zip(v).map(|(c, a)| c + radius * a / n).collect()
    };
    let mut dir: Vec<f64> = if r0 > 0.0 {
        zt.iter().zip(center).map(|(a, c)| a - c).collect()
    } else {
        let mut e = vec![0.0; d];
        e[0] = 1.0;
        e
    };
    if d == 1 {
        let a = rate(&on_sphere(&[1.0]))?;
        let b = rate(&on_sphere(&[-1.0]))?;
        return Ok(a.min(b));
    }
    let mut best = rate(&on_sphere(&dir))?;
    let mut step = 0.25;
    while step > 1e-3 {
        let mut improved = false;
        for j in 0..d {
            for sgn in [1.0, -1.0] {
                let n = dir.iter().map(|a| a * a).sum::<f64>().sqrt();
                let mut trial: Vec<f64> = dir.iter().map(|a| a / n).collect();
                trial[j] += sgn * step;
                if trial.iter().all(|a| *a == 0.0) {
                    continue;
                }
                let v = rate(&on_sphere(&trial))?;
                if v < best {
                    best = v;
                    dir = trial;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    Ok(best)
}

/// Reference action for an event: explicit when given, the path rate of the
/// reference for tubes, the endpoint search for terminal balls.
pub fn reference_action(
    field: &CoefficientField,
    x0: &[f64],
    event: &EventSpec,
    n_steps: usize,
    opts: &LdpOptions,
) -> Result<f64> {
    if let Some(v) = opts.i_ref {
        return Ok(v);
    }
    match (&event.kind, event.complement) {
        (EventKind::TerminalBall { center, radius }, c) => {
            terminal_reference(field, x0, center, *radius, c, n_steps, &opts.optimizer)
        }
        (EventKind::Tube { reference, .. }, false) => Ok(path_rate(field, reference, DEFAULT_PINV_TOL)?.rate),
        _ => Err(Error::config("this event needs an explicit i_ref")),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn ldp_comparison(
    field: &CoefficientField,
    x0: &[f64],
    event: &EventSpec,
    epsilons: &[f64],
    trials: u64,
    n_steps: usize,
    seed: u64,
    opts: &LdpOptions,
) -> Result<LdpTable> {
    if epsilons.is_empty() {
        return Err(Error::config("ldp comparison needs at least one epsilon"));
    }
    let i_ref = reference_action(field, x0, event, n_steps, opts)?;
    let mut rows = Vec::with_capacity(epsilons.len());
    let mut reports = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let r = mc_rare_event_with(field, eps, x0, event, trials, n_steps, seed, opts.exec)?;
        rows.push(LdpRow {
            epsilon: eps,
            p_hat: r.p_hat,
            ci_lo: r.ci95.0,
            ci_hi: r.ci95.1,
            neg_eps_log_p: r.neg_eps_log_p,
            i_ref,
        });
        reports.push(r);
    }
    Ok(LdpTable { rows, reports })
}

// ---------------------------------------------------------------------------
// Condition studies

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let w = pos - lo as f64;
    if w == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + w * (sorted[hi] - sorted[lo])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionIiRow {
    pub epsilon: f64,
    pub x_id: usize,
    pub median: f64,
    pub q90: f64,
}

#[derive(Debug, Clone)]
pub struct ConditionIiTable {
    pub rows: Vec<ConditionIiRow>,
}

impl ConditionIiTable {
    pub const HEADER: &'static str = "epsilon,x_id,median,q90";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.epsilon, r.x_id, r.median, r.q90).unwrap();
        }
        out
    }

    /// `(ε, max over x of the median distance)`, in input order of `ε`.
    pub fn uniformity(&self) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = Vec::new();
        for r in &self.rows {
            match out.iter_mut().find(|(e, _)| *e == r.epsilon) {
                Some(entry) => entry.1 = entry.1.max(r.median),
                None => out.push((r.epsilon, r.median)),
            }
        }
        out
    }
}

#[allow(clippy::too_many_arguments)]
pub fn condition_ii_study(
    field: &CoefficientField,
    epsilons: &[f64],
    x_grid: &[Vec<f64>],
    h: &Control,
    n_steps: usize,
    repeats: usize,
    seed: u64,
) -> Result<ConditionIiTable> {
    condition_ii_study_with(field, epsilons, x_grid, h, n_steps, repeats, seed, Exec::default())
}

/// Sup distance between the controlled SDE and the skeleton from each grid
/// point. Repeat `r` at point `x_id` uses noise stream `x_id·repeats + r` for
/// every `ε`, so the rows share their randomness across `ε`.
#[allow(clippy::too_many_arguments)]
pub fn condition_ii_study_with(
    field: &CoefficientField,
    epsilons: &[f64],
    x_grid: &[Vec<f64>],
    h: &Control,
    n_steps: usize,
    repeats: usize,
    seed: u64,
    exec: Exec,
) -> Result<ConditionIiTable> {
    if repeats < 30 {
        return Err(Error::invalid(format!("condition (ii) needs at least 30 repeats, got {repeats}")));
    }
    if epsilons.is_empty() || x_grid.is_empty() {
        return Err(Error::config("condition (ii) needs epsilons and an x grid"));
    }
    h.check_compatible(field, n_steps)?;
    let skeletons: Vec<Trajectory> = x_grid
        .iter()
        .map(|x| solve_skeleton(field, x, h, n_steps, Scheme::Euler))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(epsilons.len() * x_grid.len());
    for &eps in epsilons {
        for (x_id, x) in x_grid.iter().enumerate() {
            let z = &skeletons[x_id];
            let mut d: Vec<f64> = exec
                .map(repeats, |r| {
                    let traj = (x_id * repeats + r) as u64;
                    let y = simulate_controlled(field, eps, x, h, n_steps, seed, traj)?;
                    sup_distance(&y, z)
                })
                .into_iter()
                .collect::<Result<_>>()?;
            d.sort_by(f64::total_cmp);
            rows.push(ConditionIiRow {
                epsilon: eps,
                x_id,
                median: quantile(&d, 0.5),
                q90: quantile(&d, 0.9),
            });
        }
    }
    Ok(ConditionIiTable { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionIRow {
    pub n: usize,
    pub freq: f64,
    pub x_offset: f64,
    pub sup_distance: f64,
}

#[derive(Debug, Clone)]
pub struct ConditionITable {
    pub rows: Vec<ConditionIRow>,
}

impl ConditionITable {
    pub const HEADER: &'static str = "n,freq,x_offset,sup_distance";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.n, r.freq, r.x_offset, r.sup_distance).unwrap();
        }
        out
    }

    /// Least-squares slope of `log distance` against `log freq`, over rows
    /// with positive distance.
    pub fn freq_slope(&self) -> f64 {
        fit_slope(self.rows.iter().filter(|r| r.sup_distance > 0.0).map(|r| (r.freq, r.sup_distance)))
    }

    /// Least-squares slope of `log distance` against `log |x_n − x|`.
    pub fn offset_slope(&self) -> f64 {
        fit_slope(
            self.rows
                .iter()
                .filter(|r| r.sup_distance > 0.0 && r.x_offset > 0.0)
                .map(|r| (r.x_offset, r.sup_distance)),
        )
    }
}

fn fit_slope(points: impl Iterator<Item = (f64, f64)>) -> f64 {
    let pts: Vec<(f64, f64)> = points.map(|(a, b)| (a.ln(), b.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// The weakly-null perturbation `A·sin(2π·f·t/T)·e`.
#[derive(Debug, Clone)]
pub struct Oscillation {
    pub amplitude: f64,
    pub direction: Vec<f64>,
}

/// Skeletons from `x_n` driven by `h + A sin(2π f_n t/T) e`, compared with
/// the skeleton from `x` driven by `h`. `x_seq` and `freqs` pair up
/// elementwise; a single entry in either list is reused for every row. A
/// frequency of 0 means no perturbation.
pub fn condition_i_study(
    field: &CoefficientField,
    x: &[f64],
    x_seq: &[Vec<f64>],
    h: &Control,
    freqs: &[f64],
    osc: &Oscillation,
    n_steps: usize,
) -> Result<ConditionITable> {
    let rows = x_seq.len().max(freqs.len());
    let broadcast = |len: usize| len == rows || len == 1;
    if rows == 0 || !broadcast(x_seq.len()) || !broadcast(freqs.len()) {
        return Err(Error::config("x_seq and freqs must have equal lengths or length one"));
    }
    if osc.direction.len() != field.dim_noise() {
        return Err(Error::config("oscillation direction must have the noise dimension"));
    }
    if freqs.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
        return Err(Error::invalid("frequencies must be finite and nonnegative"));
    }
    h.check_compatible(field, n_steps)?;
    let norm = osc.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(Error::invalid("oscillation direction must be nonzero"));
    }
    let e: Vec<f64> = osc.direction.iter().map(|v| v / norm).collect();
    let base = solve_skeleton(field, x, h, n_steps, Scheme::Euler)?;
    let fine = h.refine(n_steps / h.cells())?;
    let horizon = field.horizon();
    let mut out = Vec::with_capacity(rows);
    for n in 0..rows {
        let xn = &x_seq[if x_seq.len() == 1 { 0 } else { n }];
        let f = freqs[if freqs.len() == 1 { 0 } else { n }];
        let hn = if f == 0.0 || osc.amplitude == 0.0 {
            fine.clone()
        } else {
            let pert = Control::from_fn(horizon, n_steps, e.len(), |t| {
                let s = osc.amplitude * (std::f64::consts::TAU * f * t / horizon).sin();
                e.iter().map(|v| s * v).collect()
            })?;
            let values = fine.values().iter().zip(pert.values()).map(|(a, b)| a + b).collect();
            Control::from_flat(horizon, e.len(), values)?
        };
        let zn = solve_skeleton(field, xn, &hn, n_steps, Scheme::Euler)?;
        out.push(ConditionIRow {
            n,
            freq: f,
            x_offset: dist(xn, x),
            sup_distance: sup_distance(&zn, &base)?,
        });
    }
    Ok(ConditionITable { rows: out })
}
