//! Integrators for the noisy SDE, the controlled SDE and the skeleton ODE.
//!
//! All three Euler variants share one step kernel, which is what makes the
//! `ε = 0` degeneration and the zero-control coupling bit-exact.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CoefficientField, Control};
use crate::noise::NoiseStream;

/// States beyond this magnitude abort integration with [`Error::BlowUp`].
pub const OVERFLOW_GUARD: f64 = 1e12;

/// Integration scheme for the skeleton equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Euler,
    Rk4,
}

/// Where a trajectory came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub epsilon: f64,
    pub seed: Option<u64>,
    pub trajectory: Option<u64>,
    pub scheme: String,
    pub horizon: f64,
    pub n_steps: usize,
}

/// States on the uniform grid `t_k = k·T/n`, `k = 0..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    dim: usize,
    states: Vec<f64>,
    meta: TrajectoryMeta,
}

impl Trajectory {
    /// Builds a trajectory from explicit states, e.g. a reference path.
    pub fn from_states(horizon: f64, dim: usize, states: Vec<f64>) -> Result<Self> {
        if dim == 0 || states.len() < 2 * dim || !states.len().is_multiple_of(dim) {
            return Err(Error::config("a trajectory needs at least two states of equal dimension"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid("trajectory horizon must be positive"));
        }
        if states.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("trajectory states must be finite"));
        }
        let n_steps = states.len() / dim - 1;
        Ok(Self {
            dim,
            states,
            meta: TrajectoryMeta {
                epsilon: 0.0,
                seed: None,
                trajectory: None,
                scheme: "given".into(),
                horizon,
                n_steps,
            },
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_steps(&self) -> usize {
        self.meta.n_steps
    }

    pub fn horizon(&self) -> f64 {
        self.meta.horizon
    }

    pub fn dt(&self) -> f64 {
        self.meta.horizon / self.meta.n_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        grid_time(self.meta.horizon, self.meta.n_steps, k)
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn terminal(&self) -> &[f64] {
        self.state(self.meta.n_steps)
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn meta(&self) -> &TrajectoryMeta {
        &self.meta
    }

    /// `t,x1,...,xd` with one row per grid node.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for i in 1..=self.dim {
            let _ = write!(out, ",x{i}");
        }
        out.push('\n');
        for k in 0..=self.n_steps() {
            let _ = write!(out, "{}", self.time(k));
            for v in self.state(k) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn meta_json(&self) -> String {
        serde_json::to_string_pretty(&self.meta).expect("meta serializes")
    }
}

#[inline]
pub(crate) fn grid_time(horizon: f64, n_steps: usize, k: usize) -> f64 {
    horizon * k as f64 / n_steps as f64
}

/// Noise source for the Euler kernel.
#[derive(Debug, Clone, Copy)]
pub(crate) struct NoiseSpec {
    pub epsilon: f64,
    pub seed: u64,
    pub trajectory: u64,
}

fn validate_common(field: &CoefficientField, x0: &[f64], n_steps: usize) -> Result<()> {
    if n_steps == 0 {
        return Err(Error::config("n_steps must be at least 1"));
    }
    if x0.len() != field.dim_state() {
        return Err(Error::config(format!(
            "initial value has length {}, field dimension is {}",
            x0.len(),
            field.dim_state()
        )));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("initial value must be finite"));
    }
    Ok(())
}

fn validate_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid(format!("epsilon must be nonnegative, got {epsilon}")));
    }
    Ok(())
}

#[inline]
fn guard(y: &[f64], step: usize, t: f64) -> Result<()> {
    if y.iter().all(|v| v.abs() <= OVERFLOW_GUARD) {
        Ok(())
    } else {
        Err(Error::BlowUp { step, t })
    }
}

/// Streams the Euler(-Maruyama) recursion
/// `Y_{k+1} = Y_k + b Δt + σ h_k Δt + √ε σ ΔB_k`, calling `visit(k, Y_k)` for
/// every node. Returns early with `Ok(())` when `visit` returns `false`.
/// Inputs are assumed validated.
pub(crate) fn euler_stream<F>(
    field: &CoefficientField,
    x0: &[f64],
    n_steps: usize,
    control: Option<&Control>,
    noise: Option<NoiseSpec>,
    mut visit: F,
) -> Result<()>
where
    F: FnMut(usize, &[f64]) -> bool,
{
    let (d, m) = (field.dim_state(), field.dim_noise());
    let horizon = field.horizon();
    let dt = horizon / n_steps as f64;
    let mut y = x0.to_vec();
    let mut b = vec![0.0; d];
    let mut s = vec![0.0; d * m];
    let mut db = vec![0.0; m];
    let noise = noise.filter(|n| n.epsilon > 0.0);
    let mut stream = noise.map(|n| NoiseStream::new(n.seed, n.trajectory, m, dt));
    let sqrt_eps = noise.map_or(0.0, |n| n.epsilon.sqrt());

    if !visit(0, &y) {
        return Ok(());
    }
    for k in 0..n_steps {
        let t = grid_time(horizon, n_steps, k);
        field.drift_into(t, &y, &mut b);
        // all-zero cells are skipped so h ≡ 0 reproduces the uncontrolled path bit for bit
        let h = control
            .map(|c| c.cell_for_step(k, n_steps))
            .filter(|h| h.iter().any(|&v| v != 0.0));
        if h.is_some() || stream.is_some() {
            field.diffusion_into(t, &y, &mut s);
        }
        for i in 0..d {
            y[i] += b[i] * dt;
        }
        if let Some(h) = h {
            for i in 0..d {
                let row = &s[i * m..(i + 1) * m];
                let sh: f64 = row.iter().zip(h).map(|(a, c)| a * c).sum();
                y[i] += sh * dt;
            }
        }
        if let Some(st) = stream.as_mut() {
            st.next_increment(&mut db);
            for i in 0..d {
                let row = &s[i * m..(i + 1) * m];
                let sn: f64 = row.iter().zip(&db).map(|(a, c)| a * c).sum();
                y[i] += sqrt_eps * sn;
            }
        }
        guard(&y, k + 1, grid_time(horizon, n_steps, k + 1))?;
        if !visit(k + 1, &y) {
            return Ok(());
        }
    }
    Ok(())
}

fn collect(
    field: &CoefficientField,
    x0: &[f64],
    n_steps: usize,
    control: Option<&Control>,
    noise: Option<NoiseSpec>,
) -> Result<Vec<f64>> {
    let mut states = Vec::with_capacity((n_steps + 1) * x0.len());
    euler_stream(field, x0, n_steps, control, noise, |_, y| {
        states.extend_from_slice(y);
        true
    })?;
    Ok(states)
}

/// Euler–Maruyama for `dX = b dt + √ε σ dB`. `ε = 0` gives the Euler flow.
pub fn simulate_sde(
    field: &CoefficientField,
    epsilon: f64,
    x0: &[f64],
    n_steps: usize,
    seed: u64,
    trajectory: u64,
) -> Result<Trajectory> {
    validate_common(field, x0, n_steps)?;
    validate_epsilon(epsilon)?;
    let noise = NoiseSpec {
        epsilon,
        seed,
        trajectory,
    };
    let states = collect(field, x0, n_steps, None, Some(noise))?;
    Ok(Trajectory {
        dim: field.dim_state(),
        states,
        meta: TrajectoryMeta {
            epsilon,
            seed: Some(seed),
            trajectory: Some(trajectory),
            scheme: "euler-maruyama".into(),
            horizon: field.horizon(),
            n_steps,
        },
    })
}

/// Euler–Maruyama for the controlled equation
/// `dY = b dt + σ h dt + √ε σ dB`, sharing noise with [`simulate_sde`] for
/// the same `(seed, trajectory)`.
pub fn simulate_controlled(
    field: &CoefficientField,
    epsilon: f64,
    x0: &[f64],
    control: &Control,
    n_steps: usize,
    seed: u64,
    trajectory: u64,
) -> Result<Trajectory> {
    validate_common(field, x0, n_steps)?;
    validate_epsilon(epsilon)?;
    control.check_compatible(field, n_steps)?;
    let noise = NoiseSpec {
        epsilon,
        seed,
        trajectory,
    };
    let states = collect(field, x0, n_steps, Some(control), Some(noise))?;
    Ok(Trajectory {
        dim: field.dim_state(),
        states,
        meta: TrajectoryMeta {
            epsilon,
            seed: Some(seed),
            trajectory: Some(trajectory),
            scheme: "euler-maruyama".into(),
            horizon: field.horizon(),
            n_steps,
        },
    })
}

/// Solves the skeleton equation `dZ = b dt + σ h dt`.
pub fn solve_skeleton(
    field: &CoefficientField,
    x0: &[f64],
    control: &Control,
    n_steps: usize,
    scheme: Scheme,
) -> Result<Trajectory> {
    validate_common(field, x0, n_steps)?;
    control.check_compatible(field, n_steps)?;
    let states = match scheme {
        Scheme::Euler => collect(field, x0, n_steps, Some(control), None)?,
        Scheme::Rk4 => rk4(field, x0, control, n_steps)?,
    };
    Ok(Trajectory {
        dim: field.dim_state(),
        states,
        meta: TrajectoryMeta {
            epsilon: 0.0,
            seed: None,
            trajectory: None,
            scheme: match scheme {
                Scheme::Euler => "euler".into(),
                Scheme::Rk4 => "rk4".into(),
            },
            horizon: field.horizon(),
            n_steps,
        },
    })
}

/// Classical RK4 with the control frozen at the value of the current cell.
fn rk4(field: &CoefficientField, x0: &[f64], control: &Control, n_steps: usize) -> Result<Vec<f64>> {
    let (d, m) = (field.dim_state(), field.dim_noise());
    let horizon = field.horizon();
    let dt = horizon / n_steps as f64;
    let mut b = vec![0.0; d];
    let mut s = vec![0.0; d * m];
    let mut rhs = |t: f64, z: &[f64], h: &[f64], out: &mut [f64]| {
        field.drift_into(t, z, &mut b);
        field.diffusion_into(t, z, &mut s);
        for i in 0..d {
            let row = &s[i * m..(i + 1) * m];
            out[i] = b[i] + row.iter().zip(h).map(|(a, c)| a * c).sum::<f64>();
        }
    };
    let mut states = Vec::with_capacity((n_steps + 1) * d);
    states.extend_from_slice(x0);
    let mut z = x0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut tmp = vec![0.0; d];
    for k in 0..n_steps {
        let t = grid_time(horizon, n_steps, k);
        let h = control.cell_for_step(k, n_steps);
        rhs(t, &z, h, &mut k1);
        for i in 0..d {
            tmp[i] = z[i] + 0.5 * dt * k1[i];
        }
        rhs(t + 0.5 * dt, &tmp, h, &mut k2);
        for i in 0..d {
            tmp[i] = z[i] + 0.5 * dt * k2[i];
        }
        rhs(t + 0.5 * dt, &tmp, h, &mut k3);
        for i in 0..d {
            tmp[i] = z[i] + dt * k3[i];
        }
        rhs(t + dt, &tmp, h, &mut k4);
        for i in 0..d {
            z[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        guard(&z, k + 1, grid_time(horizon, n_steps, k + 1))?;
        states.extend_from_slice(&z);
    }
    Ok(states)
}

/// Uniform distance `max_k |a_k − b_k|` on a shared grid.
pub fn sup_distance(a: &Trajectory, b: &Trajectory) -> Result<f64> {
    if a.dim != b.dim || a.n_steps() != b.n_steps() || a.horizon() != b.horizon() {
        return Err(Error::config("sup_distance needs trajectories on identical grids"));
    }
    let d = a.dim;
    Ok(a.states
        .chunks_exact(d)
        .zip(b.states.chunks_exact(d))
        .map(|(p, q)| p.iter().zip(q).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt())
        .fold(0.0, f64::max))
}
