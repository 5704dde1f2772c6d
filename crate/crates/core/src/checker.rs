//! Numerical audits of the integrability, monotonicity, Lyapunov, ratio and
//! divergence conditions on sampled grids.
//!
//! These are falsification tools: a passing report means no violation was
//! found among the samples, nothing more. Every report carries the worst
//! sample so a failure can be reproduced by hand.

use nalgebra::DMatrix;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{CoefficientField, LyapunovSpec, ModulusFunction};

pub const DEFAULT_TOLERANCE: f64 = 1e-9;
pub const DEFAULT_V_FLOOR: f64 = 1e-10;
/// Integrand values above this count as blow-up in the integrability audit.
pub const INTEGRABILITY_CAP: f64 = 1e12;

/// Sample point achieving the worst margin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub t: Option<f64>,
    pub x: Vec<f64>,
    pub y: Option<Vec<f64>>,
}

/// Outcome of one audit. Serializes to
/// `{assumption, passed, worst_margin, witness, samples, notes}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub assumption: String,
    pub passed: bool,
    #[serde(with = "crate::numfmt")]
    pub worst_margin: f64,
    pub witness: Option<Witness>,
    pub samples: usize,
    pub notes: String,
}

impl CheckReport {
    fn from_margin(
        assumption: &str,
        worst: Option<(f64, Witness)>,
        samples: usize,
        tolerance: f64,
        notes: String,
    ) -> Self {
        let (worst_margin, witness) = match worst {
            Some((m, w)) => (m, Some(w)),
            None => (f64::INFINITY, None),
        };
        Self {
            assumption: assumption.into(),
            passed: worst_margin >= -tolerance,
            worst_margin,
            witness,
            samples,
            notes,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Knobs shared by the sampled audits.
#[derive(Debug, Clone, Copy)]
pub struct AuditOptions {
    pub tolerance: f64,
    /// Number of equally spaced time nodes on `[0, T]`.
    pub t_nodes: usize,
    pub v_floor: f64,
    pub exec: Exec,
}

impl Default for AuditOptions {
    fn default() -> Self {
        Self {
            tolerance: DEFAULT_TOLERANCE,
            t_nodes: 5,
            v_floor: DEFAULT_V_FLOOR,
            exec: Exec::default(),
        }
    }
}

impl AuditOptions {
    fn times(&self, horizon: f64) -> Vec<f64> {
        match self.t_nodes {
            0 | 1 => vec![0.0],
            n => (0..n).map(|j| horizon * j as f64 / (n - 1) as f64).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Quasi-random sampling

fn primes(count: usize) -> Vec<u64> {
    let mut ps = Vec::with_capacity(count);
    let mut c = 2u64;
    while ps.len() < count {
        if ps.iter().take_while(|&&p| p * p <= c).all(|&p| !c.is_multiple_of(p)) {
            ps.push(c);
        }
        c += 1;
    }
    ps
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += (i % base) as f64 * f;
        i /= base;
        f *= inv;
    }
    r
}

/// Randomly shifted Halton sequence; prefixes are nested, so doubling the
/// sample count only adds points.
struct Halton {
    bases: Vec<u64>,
    shift: Vec<f64>,
}

impl Halton {
    fn new(dims: usize, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let shift = (0..dims)
            .map(|_| (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64)
            .collect();
        Self {
            bases: primes(dims),
            shift,
        }
    }

    fn point(&self, i: usize) -> Vec<f64> {
        self.bases
            .iter()
            .zip(&self.shift)
            .map(|(&b, &s)| (radical_inverse(i as u64 + 1, b) + s).fract())
            .collect()
    }
}

/// Unit direction in `ℝ^d` from `2⌈d/2⌉` uniforms (Box–Muller then normalize).
fn direction(u: &[f64], d: usize) -> Vec<f64> {
    if d == 1 {
        return vec![if u[0] < 0.5 { -1.0 } else { 1.0 }];
    }
    let mut g = Vec::with_capacity(d + 1);
    for pair in u.chunks(2) {
        let r = (-2.0 * (1.0 - pair[0]).ln()).sqrt();
        let a = std::f64::consts::TAU * pair[1];
        g.push(r * a.cos());
        g.push(r * a.sin());
    }
    g.truncate(d);
    let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 {
        let mut e = vec![0.0; d];
        e[0] = 1.0;
        return e;
    }
    g.iter().map(|v| v / n).collect()
}

fn dir_dims(d: usize) -> usize {
    if d == 1 {
        1
    } else {
        2 * d.div_ceil(2)
    }
}

/// Points in the closed ball of radius `r`: the first `n − n/8` fill the
/// interior quasi-uniformly, the last `n/8` sit on the boundary sphere.
fn ball_points(d: usize, radius: f64, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let shell = n / 8;
    let interior = n - shell;
    let dd = dir_dims(d);
    let hal = Halton::new(dd + 1, seed, 0);
    let shell_hal = Halton::new(dd, seed, 1);
    let mut pts = Vec::with_capacity(n);
    for i in 0..interior {
        let u = hal.point(i);
        let dir = direction(&u[..dd], d);
        let r = radius * u[dd].powf(1.0 / d as f64);
        pts.push(dir.into_iter().map(|v| v * r).collect());
    }
    for i in 0..shell {
        let dir = direction(&shell_hal.point(i), d);
        pts.push(dir.into_iter().map(|v| v * radius).collect());
    }
    pts
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Index of the smallest margin, ties to the lowest index; NaN counts as −∞.
fn argmin(margins: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, m) in margins.iter().enumerate() {
        if let Some(m) = *m {
            let m = if m.is_nan() { f64::NEG_INFINITY } else { m };
            if best.is_none_or(|(_, b)| m < b) {
                best = Some((i, m));
            }
        }
    }
    best.map(|(i, _)| i)
}

// ---------------------------------------------------------------------------
// Integrability

fn integrand(field: &CoefficientField, t: f64, x: &[f64]) -> f64 {
    let (d, m) = (field.dim_state(), field.dim_noise());
    let mut b = vec![0.0; d];
    let mut s = vec![0.0; d * m];
    field.drift_into(t, x, &mut b);
    field.diffusion_into(t, x, &mut s);
    let v = norm(&b) + s.iter().map(|v| v * v).sum::<f64>();
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// Compass-search ascent of the integrand inside the ball, starting at the
/// best sample. Stops once the value leaves the cap or the step underflows.
fn ascend(field: &CoefficientField, t: f64, start: &[f64], radius: f64) -> (Vec<f64>, f64) {
    let d = start.len();
    let mut x = start.to_vec();
    let mut best = integrand(field, t, &x);
    let mut step = radius / 10.0;
    let mut iters = 0;
    while step > radius * 1e-15 && best <= INTEGRABILITY_CAP && iters < 5000 {
        iters += 1;
        let mut improved = false;
        for j in 0..d {
            for sgn in [1.0, -1.0] {
                let mut y = x.clone();
                y[j] += sgn * step;
                let n = norm(&y);
                if n > radius {
                    y.iter_mut().for_each(|v| *v *= radius / n);
                }
                let v = integrand(field, t, &y);
                if v > best {
                    best = v;
                    x = y;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    (x, best)
}

/// Estimates `∫₀ᵀ sup_{|x|≤R} (|b| + ‖σ‖²) ds` by sampling each time node,
/// refining the best sample by local ascent, and applying the trapezoid rule.
pub fn check_integrability(
    field: &CoefficientField,
    radius: f64,
    x_samples: usize,
    seed: u64,
    opts: &AuditOptions,
) -> Result<CheckReport> {
    if !(radius > 0.0) {
        return Err(Error::invalid("radius must be positive"));
    }
    let d = field.dim_state();
    let pts = ball_points(d, radius, x_samples.max(1), seed);
    let times = opts.times(field.horizon());
    let per_node: Vec<(f64, Vec<f64>)> = times
        .iter()
        .map(|&t| {
            let vals = opts.exec.map(pts.len(), |i| integrand(field, t, &pts[i]));
            let mut bi = 0;
            for (i, v) in vals.iter().enumerate() {
                if *v > vals[bi] {
                    bi = i;
                }
            }
            let (x, v) = ascend(field, t, &pts[bi], radius);
            (v, x)
        })
        .collect();
    let estimate = if times.len() == 1 {
        per_node[0].0 * field.horizon()
    } else {
        let dt = field.horizon() / (times.len() - 1) as f64;
        per_node
            .windows(2)
            .map(|w| 0.5 * (w[0].0 + w[1].0) * dt)
            .sum::<f64>()
    };
    let (wi, _) = per_node
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, (v, _))| if *v > acc.1 { (i, *v) } else { acc });
    let blown = per_node.iter().any(|(v, _)| !(*v <= INTEGRABILITY_CAP));
    let margin = if blown || !estimate.is_finite() {
        f64::NEG_INFINITY
    } else {
        INTEGRABILITY_CAP - estimate
    };
    let witness = Witness {
        t: Some(times[wi]),
        x: per_node[wi].1.clone(),
        y: None,
    };
    let notes = if blown {
        format!(
            "integrand exceeds {INTEGRABILITY_CAP:e} near the witness (value {:e}); sup over the ball appears unbounded",
            per_node[wi].0
        )
    } else {
        format!("estimate={estimate}; radius={radius}; time nodes={}", times.len())
    };
    Ok(CheckReport::from_margin(
        "integrability",
        Some((margin, witness)),
        pts.len() * times.len(),
        opts.tolerance,
        notes,
    ))
}

// ---------------------------------------------------------------------------
// Local weak monotonicity

/// `((RHS − LHS)/|x−y|², LHS, g·η)` of the monotonicity inequality at
/// `(t, x, y)`; `None` when `|x−y|²` is outside the domain of `η_R`. The
/// margin is scaled by `|x−y|²` so violations at tiny separations are not
/// swamped by the absolute tolerance.
pub fn monotonicity_terms(
    field: &CoefficientField,
    spec: &LyapunovSpec,
    eta: &ModulusFunction,
    t: f64,
    x: &[f64],
    y: &[f64],
) -> Result<Option<(f64, f64, f64)>> {
    let (bx, sx) = field.eval(t, x)?;
    let (by, sy) = field.eval(t, y)?;
    let diff: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let s2: f64 = diff.iter().map(|v| v * v).sum();
    if s2 == 0.0 || !eta.contains(s2) {
        return Ok(None);
    }
    let drift_term: f64 = 2.0 * diff.iter().zip((bx - by).iter()).map(|(a, b)| a * b).sum::<f64>();
    let lhs = drift_term + (sx - sy).norm_squared();
    let rhs = (spec.g_weight)(t) * eta.eval(s2);
    Ok(Some(((rhs - lhs) / s2, lhs, rhs)))
}

/// Samples pairs with `|x| ∨ |y| ≤ R`, `0 < |x − y| ≤ ε₀` and checks
/// `2⟨x−y, b(x)−b(y)⟩ + ‖σ(x)−σ(y)‖² ≤ g(s)·η_R(|x−y|²)`.
///
/// Separations are log-uniform in `[ε₀·10⁻⁸, ε₀]`; one pair in eight
/// straddles a coordinate hyperplane, where `|x_i|`-type coefficients lose
/// regularity.
pub fn check_monotonicity(
    field: &CoefficientField,
    spec: &LyapunovSpec,
    radius: f64,
    pair_samples: usize,
    seed: u64,
    opts: &AuditOptions,
) -> Result<CheckReport> {
    if !(radius > 0.0) {
        return Err(Error::invalid("radius must be positive"));
    }
    let d = field.dim_state();
    let eta = spec.eta_at(radius);
    let eps0 = spec.eps0;
    let n = pair_samples.max(1);
    let xs = ball_points(d, radius, n, seed);
    let dd = dir_dims(d);
    let off = Halton::new(dd + 1, seed, 2);
    let times = opts.times(field.horizon());
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .map(|i| {
            let u = off.point(i);
            let sep = eps0 * 10f64.powf(-8.0 * u[dd]);
            let mut x = xs[i].clone();
            let mut y;
            if i % 8 == 7 {
                // straddle x_j = 0, split unevenly so even profiles still differ
                let j = (i / 8) % d;
                x[j] = u[0] * sep;
                y = x.clone();
                y[j] = (u[0] - 1.0) * sep;
                let nx = norm(&x);
                if nx > radius {
                    let scale = (radius / nx).min(1.0);
                    for (k, (a, b)) in x.iter_mut().zip(y.iter_mut()).enumerate() {
                        if k != j {
                            *a *= scale;
                            *b *= scale;
                        }
                    }
                }
            } else {
                let dir = direction(&u[..dd], d);
                y = x.iter().zip(&dir).map(|(a, e)| a + sep * e).collect();
                let ny = norm(&y);
                if ny > radius {
                    y.iter_mut().for_each(|v| *v *= radius / ny);
                }
            }
            (x, y)
        })
        .collect();
    let total = pairs.len() * times.len();
    let evals = opts.exec.map(total, |idx| {
        let t = times[idx / pairs.len()];
        let (x, y) = &pairs[idx % pairs.len()];
        let sep = norm(&x.iter().zip(y).map(|(a, b)| a - b).collect::<Vec<_>>());
        if sep == 0.0 || sep > eps0 || norm(x) > radius * (1.0 + 1e-12) || norm(y) > radius * (1.0 + 1e-12) {
            return Ok(None);
        }
        monotonicity_terms(field, spec, &eta, t, x, y)
    });
    let evals: Vec<Option<(f64, f64, f64)>> = evals.into_iter().collect::<Result<_>>()?;
    let margins: Vec<Option<f64>> = evals.iter().map(|e| e.map(|(m, _, _)| m)).collect();
    let used = margins.iter().filter(|m| m.is_some()).count();
    let skipped = total - used;
    let c_star = evals
        .iter()
        .flatten()
        .filter(|(_, _, den)| *den > 0.0)
        .map(|(_, lhs, den)| lhs / den)
        .fold(f64::NEG_INFINITY, f64::max);
    let worst = argmin(&margins).map(|i| {
        let (x, y) = &pairs[i % pairs.len()];
        (
            margins[i].unwrap(),
            Witness {
                t: Some(times[i / pairs.len()]),
                x: x.clone(),
                y: Some(y.clone()),
            },
        )
    });
    let notes = format!(
        "c*={c_star}; eta_R={}; skipped={skipped} (outside ball, separation or eta domain)",
        eta.label()
    );
    Ok(CheckReport::from_margin("monotonicity", worst, used, opts.tolerance, notes))
}

// ---------------------------------------------------------------------------
// Lyapunov drift and trace bound

struct LyapunovTerms {
    v: f64,
    inner: f64,
    trace: f64,
    quotient_num: f64,
}

fn lyapunov_terms(field: &CoefficientField, spec: &LyapunovSpec, t: f64, x: &[f64]) -> Result<LyapunovTerms> {
    let d = field.dim_state();
    let (b, s) = field.eval(t, x)?;
    let v = (spec.value)(x);
    let mut g = vec![0.0; d];
    let mut h = vec![0.0; d * d];
    (spec.gradient)(x, &mut g);
    (spec.hessian)(x, &mut h);
    let hm = DMatrix::from_row_slice(d, d, &h);
    let gv = nalgebra::DVector::from_vec(g);
    let trace = (s.transpose() * hm * &s).trace();
    let quotient_num = (s.transpose() * &gv).norm_squared();
    Ok(LyapunovTerms {
        v,
        inner: b.dot(&gv),
        trace,
        quotient_num,
    })
}

/// `RHS − LHS` of the Lyapunov drift inequality at `(t, x)`. Below `v_floor`
/// the quotient is cleared by multiplying through by `V`.
pub fn lyapunov_margin(
    field: &CoefficientField,
    spec: &LyapunovSpec,
    v_floor: f64,
    t: f64,
    x: &[f64],
) -> Result<f64> {
    let lt = lyapunov_terms(field, spec, t, x)?;
    let rest = lt.inner + 0.5 * spec.theta * lt.trace;
    let rhs = (spec.f_weight)(t) * (1.0 + spec.gamma.eval(lt.v));
    Ok(if lt.v >= v_floor {
        rhs - (rest + lt.quotient_num / (spec.eta * lt.v))
    } else {
        lt.v * rhs - (lt.v * rest + lt.quotient_num / spec.eta)
    })
}

/// `Tr(σᵀ∇²Vσ) + l(s)[M + Kγ(V)]` at `(t, x)`.
pub fn trace_margin(field: &CoefficientField, spec: &LyapunovSpec, t: f64, x: &[f64]) -> Result<f64> {
    let lt = lyapunov_terms(field, spec, t, x)?;
    Ok(lt.trace + (spec.l_weight)(t) * (spec.big_m + spec.big_k * spec.gamma.eval(lt.v)))
}

#[allow(clippy::too_many_arguments)]
fn pointwise_audit<F>(
    name: &str,
    field: &CoefficientField,
    radius: f64,
    samples: usize,
    seed: u64,
    opts: &AuditOptions,
    notes: String,
    margin: F,
) -> Result<CheckReport>
where
    F: Fn(f64, &[f64]) -> Result<f64> + Sync + Send,
{
    if !(radius > 0.0) {
        return Err(Error::invalid("radius must be positive"));
    }
    let pts = ball_points(field.dim_state(), radius, samples.max(1), seed);
    let times = opts.times(field.horizon());
    let total = pts.len() * times.len();
    let margins: Vec<f64> = opts
        .exec
        .map(total, |idx| margin(times[idx / pts.len()], &pts[idx % pts.len()]))
        .into_iter()
        .collect::<Result<_>>()?;
    let wrapped: Vec<Option<f64>> = margins.iter().copied().map(Some).collect();
    let worst = argmin(&wrapped).map(|i| {
        (
            margins[i],
            Witness {
                t: Some(times[i / pts.len()]),
                x: pts[i % pts.len()].clone(),
                y: None,
            },
        )
    });
    Ok(CheckReport::from_margin(name, worst, total, opts.tolerance, notes))
}

/// `⟨b,∇V⟩ + (θ/2)Tr(σᵀ∇²Vσ) + |σᵀ∇V|²/(ηV) ≤ f(s)(1 + γ(V))` on the ball.
pub fn check_lyapunov_drift(
    field: &CoefficientField,
    spec: &LyapunovSpec,
    radius: f64,
    samples: usize,
    seed: u64,
    opts: &AuditOptions,
) -> Result<CheckReport> {
    let notes = format!(
        "theta={}; eta={}; gamma={}; v_floor={}",
        spec.theta,
        spec.eta,
        spec.gamma.label(),
        opts.v_floor
    );
    pointwise_audit("lyapunov_drift", field, radius, samples, seed, opts, notes, |t, x| {
        lyapunov_margin(field, spec, opts.v_floor, t, x)
    })
}

/// `Tr(σᵀ∇²Vσ) ≥ −l(s)[M + Kγ(V)]` on the ball.
pub fn check_trace_lower(
    field: &CoefficientField,
    spec: &LyapunovSpec,
    radius: f64,
    samples: usize,
    seed: u64,
    opts: &AuditOptions,
) -> Result<CheckReport> {
    let notes = format!("M={}; K={}; gamma={}", spec.big_m, spec.big_k, spec.gamma.label());
    pointwise_audit("trace_lower", field, radius, samples, seed, opts, notes, |t, x| {
        trace_margin(field, spec, t, x)
    })
}

// ---------------------------------------------------------------------------
// Ratio bounds

/// Sample grids for [`check_ratio_bounds`].
#[derive(Debug, Clone)]
pub struct RatioGrids {
    pub c: Vec<f64>,
    pub s_eta: Vec<f64>,
    pub s_gamma: Vec<f64>,
    pub threshold: f64,
}

fn geometric(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![hi];
    }
    let mut v: Vec<f64> = (0..n).map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64)).collect();
    v[n - 1] = hi;
    v
}

impl RatioGrids {
    /// `c ∈ [10⁻⁸, 1]`, `s_η ∈ [10⁻¹², min(ε₀, domain end)]`,
    /// `s_γ ∈ [10⁻⁸, 10⁸]`, threshold `10⁶`.
    pub fn default_for(spec: &LyapunovSpec, radius: f64) -> Self {
        let eta = spec.eta_at(radius);
        let s_hi = spec.eps0.min(eta.domain().1);
        Self {
            c: geometric(1e-8, 1.0, 33),
            s_eta: geometric(1e-12, s_hi, 61),
            s_gamma: geometric(1e-8, 1e8, 65),
            threshold: 1e6,
        }
    }
}

/// Sup over the grids of `c·η_R(s)/η_R(c·s)` and `c·γ(s)/γ(c·s)`.
pub fn check_ratio_bounds(
    spec: &LyapunovSpec,
    radius: f64,
    grids: &RatioGrids,
    tolerance: f64,
) -> Result<CheckReport> {
    if grids.c.is_empty() || grids.s_eta.is_empty() || grids.s_gamma.is_empty() {
        return Err(Error::invalid("ratio grids must be nonempty"));
    }
    let eta = spec.eta_at(radius);
    let mut skipped = 0usize;
    let mut used = 0usize;
    let mut sup = |f: &dyn Fn(f64) -> f64, ss: &[f64]| {
        let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
        for &c in &grids.c {
            for &s in ss {
                let den = f(c * s);
                if den.abs() < 1e-300 {
                    skipped += 1;
                    continue;
                }
                used += 1;
                let r = c * f(s) / den;
                let r = if r.is_nan() { f64::INFINITY } else { r };
                if r > best.0 {
                    best = (r, c, s);
                }
            }
        }
        best
    };
    let se = sup(&|s| eta.eval(s), &grids.s_eta);
    let sg = sup(&|s| spec.gamma.eval(s), &grids.s_gamma);
    let (which, worst) = if se.0 >= sg.0 { ("eta_R", se) } else { ("gamma", sg) };
    let margin = grids.threshold - worst.0;
    let notes = format!(
        "sup_eta={} at (c={}, s={}); sup_gamma={} at (c={}, s={}); worst={which}; threshold={}; skipped={skipped}",
        se.0, se.1, se.2, sg.0, sg.1, sg.2, grids.threshold
    );
    Ok(CheckReport::from_margin(
        "ratio_bounds",
        Some((
            margin,
            Witness {
                t: None,
                x: vec![worst.1, worst.2],
                y: None,
            },
        )),
        used,
        tolerance,
        notes,
    ))
}

// ---------------------------------------------------------------------------
// Divergence heuristics

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceMode {
    /// `∫_{0+} ds / η(s)`
    AtZero,
    /// `∫_0^∞ ds / (γ(s) + 1)`
    AtInfinity,
}

#[derive(Debug, Clone, Copy)]
pub struct DivergenceOptions {
    /// Number of dyadic windows, at least 20.
    pub windows: usize,
    pub rho: f64,
    /// `δ₀` for [`DivergenceMode::AtZero`] (capped by the modulus domain) or
    /// `S₀` for [`DivergenceMode::AtInfinity`].
    pub base: f64,
}

impl Default for DivergenceOptions {
    fn default() -> Self {
        Self {
            windows: 40,
            rho: 0.5,
            base: 0.5,
        }
    }
}

/// Composite Simpson in `u = ln s` over `[a, b]`, `a > 0`.
fn log_simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let (ua, ub) = (a.ln(), b.ln());
    let h = (ub - ua) / n as f64;
    let g = |u: f64| {
        let s = u.exp();
        f(s) * s
    };
    let mut acc = g(ua) + g(ub);
    for i in 1..n {
        acc += g(ua + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

/// Partial integrals over dyadic windows. The increment of window `k` is
/// `Δ_k`; a log-type divergence decays no faster than `1/k`, a convergent
/// power law decays geometrically. Reports "consistent with divergence" when
/// `K·Δ_K ≥ ρ·(K/2)·Δ_{K/2}`. This is a heuristic, never a proof.
pub fn check_divergence(
    modulus: &ModulusFunction,
    mode: DivergenceMode,
    opts: &DivergenceOptions,
    tolerance: f64,
) -> Result<CheckReport> {
    if opts.windows < 20 {
        return Err(Error::invalid("divergence heuristic needs at least 20 windows"));
    }
    let k_max = opts.windows;
    let (label, base) = match mode {
        DivergenceMode::AtZero => ("divergence_at_zero", opts.base.min(modulus.domain().1)),
        DivergenceMode::AtInfinity => ("divergence_at_infinity", opts.base),
    };
    if !(base > 0.0) {
        return Err(Error::invalid("divergence base must be positive"));
    }
    let window = |k: usize| -> (f64, f64) {
        match mode {
            DivergenceMode::AtZero => (base * 0.5f64.powi(k as i32), base * 0.5f64.powi(k as i32 - 1)),
            DivergenceMode::AtInfinity => (base * 2f64.powi(k as i32 - 1), base * 2f64.powi(k as i32)),
        }
    };
    let integrand = |s: f64| match mode {
        DivergenceMode::AtZero => {
            let v = modulus.eval(s);
            if v > 0.0 {
                1.0 / v
            } else {
                f64::INFINITY
            }
        }
        DivergenceMode::AtInfinity => 1.0 / (modulus.eval(s) + 1.0),
    };
    let increments: Vec<f64> = (1..=k_max)
        .map(|k| {
            let (a, b) = window(k);
            log_simpson(integrand, a, b, 64)
        })
        .collect();
    let mut partial = match mode {
        DivergenceMode::AtZero => 0.0,
        DivergenceMode::AtInfinity => {
            // [0, S₀] by plain Simpson
            let n = 64;
            let h = base / n as f64;
            let mut acc = integrand(0.0) + integrand(base);
            for i in 1..n {
                acc += integrand(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            acc * h / 3.0
        }
    };
    partial += increments.iter().sum::<f64>();
    let last = increments[k_max - 1];
    let mid = increments[k_max / 2 - 1];
    let ratio = if last.is_infinite() {
        f64::INFINITY
    } else if mid > 0.0 {
        (k_max as f64 * last) / ((k_max / 2) as f64 * mid)
    } else {
        0.0
    };
    let margin = ratio - opts.rho;
    let verdict = if margin >= -tolerance {
        "consistent with divergence"
    } else {
        "inconsistent with divergence (partial integrals appear to saturate)"
    };
    let notes = format!(
        "{verdict}; heuristic, not a proof; modulus={}; windows={k_max}; partial integral={partial}; \
         last increment={last}; mid increment={mid}",
        modulus.label()
    );
    let (a, _) = window(k_max);
    let edge = match mode {
        DivergenceMode::AtZero => a,
        DivergenceMode::AtInfinity => window(k_max).1,
    };
    Ok(CheckReport::from_margin(
        label,
        Some((
            margin,
            Witness {
                t: None,
                x: vec![edge],
                y: None,
            },
        )),
        k_max,
        tolerance,
        notes,
    ))
}

// ---------------------------------------------------------------------------
// Grid estimates and the full battery

/// Grid maxima on `[−w, w]²` of `Tr(σᵀ∇²Vσ)/(|∇V|² + 1)` and
/// `|σᵀ∇V|²/(V(|∇V|² + 1))`, for a system whose Lyapunov function differs
/// from its Hamiltonian by a constant (so `∇H = ∇V`).
pub fn estimate_hamiltonian_ratios(
    field: &CoefficientField,
    spec: &LyapunovSpec,
    half_width: f64,
    n: usize,
) -> (f64, f64) {
    let n = n.max(2);
    let mut d1 = f64::NEG_INFINITY;
    let mut d2 = f64::NEG_INFINITY;
    for i in 0..n {
        for j in 0..n {
            let x = [
                -half_width + 2.0 * half_width * i as f64 / (n - 1) as f64,
                -half_width + 2.0 * half_width * j as f64 / (n - 1) as f64,
            ];
            let Ok(lt) = lyapunov_terms(field, spec, 0.0, &x) else {
                continue;
            };
            let mut g = [0.0; 2];
            (spec.gradient)(&x, &mut g);
            let gh2 = g[0] * g[0] + g[1] * g[1] + 1.0;
            d1 = d1.max(lt.trace / gh2);
            if lt.v >= DEFAULT_V_FLOOR {
                d2 = d2.max(lt.quotient_num / (lt.v * gh2));
            }
        }
    }
    (d1.max(1e-12), d2.max(1e-12))
}

/// Parameters for [`audit_all`].
#[derive(Debug, Clone)]
pub struct AuditPlan {
    pub radius: f64,
    pub samples: usize,
    pub pair_samples: usize,
    pub seed: u64,
    pub options: AuditOptions,
    pub ratio_grids: Option<RatioGrids>,
    pub divergence: DivergenceOptions,
}

impl Default for AuditPlan {
    fn default() -> Self {
        Self {
            radius: 5.0,
            samples: 4000,
            pair_samples: 8000,
            seed: 0,
            options: AuditOptions::default(),
            ratio_grids: None,
            divergence: DivergenceOptions::default(),
        }
    }
}

/// Runs every audit: integrability, monotonicity, Lyapunov drift, trace
/// bound, ratio bounds, and the two divergence heuristics.
pub fn audit_all(field: &CoefficientField, spec: &LyapunovSpec, plan: &AuditPlan) -> Result<Vec<CheckReport>> {
    spec.validate()?;
    let o = &plan.options;
    let grids = plan
        .ratio_grids
        .clone()
        .unwrap_or_else(|| RatioGrids::default_for(spec, plan.radius));
    let mut eta_div = check_divergence(&spec.eta_at(plan.radius), DivergenceMode::AtZero, &plan.divergence, o.tolerance)?;
    eta_div.assumption = "divergence_eta".into();
    let mut gamma_opts = plan.divergence;
    gamma_opts.base = 1.0;
    let mut gamma_div = check_divergence(&spec.gamma, DivergenceMode::AtInfinity, &gamma_opts, o.tolerance)?;
    gamma_div.assumption = "divergence_gamma".into();
    Ok(vec![
        check_integrability(field, plan.radius, plan.samples, plan.seed, o)?,
        check_monotonicity(field, spec, plan.radius, plan.pair_samples, plan.seed, o)?,
        check_lyapunov_drift(field, spec, plan.radius, plan.samples, plan.seed, o)?,
        check_trace_lower(field, spec, plan.radius, plan.samples, plan.seed, o)?,
        check_ratio_bounds(spec, plan.radius, &grids, o.tolerance)?,
        eta_div,
        gamma_div,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_hamiltonian_system, make_ou_system, HamiltonianNoise};
    use std::sync::Arc;

    fn opts() -> AuditOptions {
        AuditOptions::default()
    }

    #[test]
    fn ball_points_stay_in_ball_and_nest() {
        for d in [1, 2, 3] {
            let a = ball_points(d, 2.0, 800, 5);
            assert!(a.iter().all(|p| norm(p) <= 2.0 + 1e-12));
            let b = ball_points(d, 2.0, 1600, 5);
            let interior_a = 800 - 100;
            assert_eq!(&a[..interior_a], &b[..interior_a]);
            assert_eq!(&a[interior_a..], &b[1400..1500]);
        }
    }

    #[test]
    fn integrability_ou_passes() {
        let (field, _) = make_ou_system(1.0, 1.0, 2).unwrap();
        let r = check_integrability(&field, 10.0, 500, 1, &opts()).unwrap();
        assert!(r.passed, "{r:?}");
        // sup |b| + ‖σ‖² = a·R + d·σ0² = 12 on every node
        assert!(r.notes.starts_with("estimate=12"), "{}", r.notes);
    }

    #[test]
    fn integrability_hamiltonian_passes() {
        let (field, _) = make_hamiltonian_system(2.0, HamiltonianNoise::default()).unwrap();
        let r = check_integrability(&field, 5.0, 2000, 3, &opts()).unwrap();
        assert!(r.passed);
        // dense-grid oracle of the integrand on the ball
        let mut dense = 0.0f64;
        for i in 0..=400 {
            for j in 0..=400 {
                let x = [-5.0 + 0.025 * i as f64, -5.0 + 0.025 * j as f64];
                if norm(&x) <= 5.0 {
                    dense = dense.max(integrand(&field, 0.0, &x));
                }
            }
        }
        let est: f64 = r.notes["estimate=".len()..].split(';').next().unwrap().parse().unwrap();
        assert!((est - dense).abs() / dense < 1e-3, "{est} vs {dense}");
    }

    #[test]
    fn integrability_detects_singular_drift() {
        let field = CoefficientField::new(
            "singular",
            2,
            1,
            1.0,
            |_, x, o| {
                let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
                o[0] = 1.0 / (1.0 - r);
                o[1] = 0.0;
            },
            |_, _, o| o[0..2].fill(0.0),
        )
        .unwrap();
        let r = check_integrability(&field, 2.0, 500, 1, &opts()).unwrap();
        assert!(!r.passed);
        let w = r.witness.unwrap();
        // dense scan: the integrand is largest at |x| = 1
        assert!((norm(&w.x) - 1.0).abs() < 1e-6, "{:?}", w.x);
    }

    #[test]
    fn monotonicity_ou_passes() {
        let (field, spec) = make_ou_system(1.5, 0.8, 2).unwrap();
        let r = check_monotonicity(&field, &spec, 4.0, 2000, 2, &opts()).unwrap();
        assert!(r.passed);
        assert!(r.worst_margin >= 0.0);
    }

    fn scalar_field(b: impl Fn(f64) -> f64 + Send + Sync + 'static) -> CoefficientField {
        CoefficientField::new("scalar", 1, 1, 1.0, move |_, x, o| o[0] = b(x[0]), |_, _, o| o[0] = 0.0).unwrap()
    }

    fn scalar_spec(eta: ModulusFunction, g: f64) -> LyapunovSpec {
        let (_, mut spec) = make_ou_system(1.0, 1.0, 1).unwrap();
        let eta = Arc::new(eta);
        spec.eta_r = Arc::new(move |_| (*eta).clone());
        spec.g_weight = Arc::new(move |_| g);
        spec
    }

    #[test]
    fn monotonicity_log_modulus_field_passes() {
        // b(x) = x·log(1/|x|): b' = log(1/|x|) − 1, so 2(x−y)(b(x)−b(y))
        // ≤ 2|x−y|²·log(1/|x−y|)·(1 + o(1)); a dense scan confirms c* < 2.
        let b = |x: f64| if x == 0.0 { 0.0 } else { -x * x.abs().ln() };
        let mut cmax = 0.0f64;
        for i in 0..2000 {
            for j in 1..200 {
                let x = -1.0 + i as f64 * 1e-3;
                let sep = 0.36 * (j as f64 / 200.0).powi(3);
                let y = x + sep;
                if y.abs() > 1.0 {
                    continue;
                }
                let s = sep * sep;
                let lhs = 2.0 * (x - y) * (b(x) - b(y));
                cmax = cmax.max(lhs / (-s * s.ln()));
            }
        }
        assert!(cmax < 2.0, "{cmax}");
        let field = scalar_field(b);
        let spec = scalar_spec(ModulusFunction::log_modulus(1.0, 0.6), 2.0);
        let r = check_monotonicity(&field, &spec, 1.0, 4000, 4, &opts()).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn monotonicity_quarter_power_fails() {
        let field = scalar_field(|x| x.signum() * x.abs().powf(0.25));
        let spec = scalar_spec(ModulusFunction::log_modulus(1.0, 0.6), 1.0);
        let r = check_monotonicity(&field, &spec, 1.0, 2000, 4, &opts()).unwrap();
        assert!(!r.passed);
        let w = r.witness.unwrap();
        let (x, y) = (w.x[0], w.y.unwrap()[0]);
        // the violation straddles the cusp at 0
        assert!(x * y <= 0.0 || x.abs().min(y.abs()) < 0.05, "{x} {y}");
    }

    #[test]
    fn power_sigma_breaks_monotonicity() {
        let (field, spec) = make_hamiltonian_system(2.0, HamiltonianNoise::Power { s1: 1.0, s2: 1.0 }).unwrap();
        let r = check_monotonicity(&field, &spec, 3.0, 4000, 0, &opts()).unwrap();
        assert!(!r.passed);
        let (field, spec) = make_hamiltonian_system(2.0, HamiltonianNoise::default()).unwrap();
        let r = check_monotonicity(&field, &spec, 3.0, 4000, 0, &opts()).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn lyapunov_drift_cases() {
        let (field, spec) = make_ou_system(1.0, 1.0, 2).unwrap();
        let r = check_lyapunov_drift(&field, &spec, 6.0, 1000, 3, &opts()).unwrap();
        assert!(r.passed);
        let (field, spec) = make_hamiltonian_system(2.0, HamiltonianNoise::default()).unwrap();
        // critical point: V = 0 and ∇V = 0 make the multiplied form vanish
        let m = lyapunov_margin(&field, &spec, DEFAULT_V_FLOOR, 0.0, &[1.0, 0.0]).unwrap();
        assert_eq!(m, 0.0);
        let r = check_lyapunov_drift(&field, &spec, 6.0, 4000, 3, &opts()).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn trace_bound_cases() {
        let (field, spec) = make_hamiltonian_system(2.0, HamiltonianNoise::default()).unwrap();
        let spec_lin = spec.clone().with_gamma(ModulusFunction::linear());
        let r = check_trace_lower(&field, &spec_lin, 6.0, 3000, 1, &opts()).unwrap();
        assert!(r.passed);
        let zero_sigma = CoefficientField::new("z", 2, 2, 1.0, |_, _, o| o.fill(0.0), |_, _, o| o.fill(0.0)).unwrap();
        let r = check_trace_lower(&zero_sigma, &spec, 3.0, 200, 1, &opts()).unwrap();
        assert!(r.passed);
        let (ou, mut id_spec) = make_ou_system(1.0, 2.0, 2).unwrap();
        id_spec.hessian = Arc::new(|_, o| {
            o.fill(0.0);
            o[0] = 1.0;
            o[3] = 1.0;
        });
        id_spec.big_m = 1e-9;
        id_spec.big_k = 1e-9;
        let r = check_trace_lower(&ou, &id_spec, 3.0, 200, 1, &opts()).unwrap();
        assert!(r.passed);
    }

    #[test]
    fn witness_reproduces_margin() {
        let (field, spec) = make_hamiltonian_system(2.0, HamiltonianNoise::default()).unwrap();
        let r = check_lyapunov_drift(&field, &spec, 4.0, 500, 9, &opts()).unwrap();
        let w = r.witness.clone().unwrap();
        let m = lyapunov_margin(&field, &spec, DEFAULT_V_FLOOR, w.t.unwrap(), &w.x).unwrap();
        assert!((m - r.worst_margin).abs() <= 1e-12);
        let r = check_monotonicity(&field, &spec, 3.0, 500, 9, &opts()).unwrap();
        let w = r.witness.clone().unwrap();
        let eta = spec.eta_at(3.0);
        let (m, _, _) = monotonicity_terms(&field, &spec, &eta, w.t.unwrap(), &w.x, w.y.as_ref().unwrap())
            .unwrap()
            .unwrap();
        assert!((m - r.worst_margin).abs() <= 1e-12);
    }

    #[test]
    fn reports_are_deterministic_and_refinement_monotone() {
        let (field, spec) = make_hamiltonian_system(2.0, HamiltonianNoise::default()).unwrap();
        let seq = AuditOptions {
            exec: Exec::Sequential,
            ..opts()
        };
        let a = check_lyapunov_drift(&field, &spec, 4.0, 800, 2, &opts()).unwrap();
        let b = check_lyapunov_drift(&field, &spec, 4.0, 800, 2, &seq).unwrap();
        assert_eq!(a, b);
        let c = check_lyapunov_drift(&field, &spec, 4.0, 1600, 2, &opts()).unwrap();
        assert!(c.worst_margin <= a.worst_margin);
        let a = check_monotonicity(&field, &spec, 3.0, 800, 2, &opts()).unwrap();
        let c = check_monotonicity(&field, &spec, 3.0, 1600, 2, &opts()).unwrap();
        assert!(c.worst_margin <= a.worst_margin);
    }

    fn spec_with(gamma: ModulusFunction, eta: ModulusFunction) -> LyapunovSpec {
        let (_, mut spec) = make_ou_system(1.0, 1.0, 1).unwrap();
        spec.gamma = gamma;
        let eta = Arc::new(eta);
        spec.eta_r = Arc::new(move |_| (*eta).clone());
        spec
    }

    #[test]
    fn ratio_bounds_cases() {
        let spec = spec_with(ModulusFunction::linear(), ModulusFunction::linear());
        let g = RatioGrids::default_for(&spec, 1.0);
        let r = check_ratio_bounds(&spec, 1.0, &g, DEFAULT_TOLERANCE).unwrap();
        assert!(r.passed);
        assert!(r.notes.starts_with("sup_eta=1 "), "{}", r.notes);

        let spec = spec_with(ModulusFunction::linear(), ModulusFunction::log_modulus(2.0, 0.5));
        // dense oracle: log(1/s)/(log(1/c) + log(1/s)) ≤ 1
        let mut dense = 0.0f64;
        for i in 1..=400 {
            for j in 1..=400 {
                let c = i as f64 / 400.0;
                let s = 0.25 * j as f64 / 400.0;
                let f = |s: f64| -2.0 * s * s.ln();
                dense = dense.max(c * f(s) / f(c * s));
            }
        }
        assert!(dense <= 1.0 + 1e-12);
        let g = RatioGrids::default_for(&spec, 1.0);
        let r = check_ratio_bounds(&spec, 1.0, &g, DEFAULT_TOLERANCE).unwrap();
        assert!(r.passed);
        let sup_eta: f64 = r.notes["sup_eta=".len()..].split(' ').next().unwrap().parse().unwrap();
        assert!(sup_eta <= 1.0 + 1e-12);

        let spec = spec_with(ModulusFunction::square(), ModulusFunction::linear());
        let g = RatioGrids::default_for(&spec, 1.0);
        let r = check_ratio_bounds(&spec, 1.0, &g, DEFAULT_TOLERANCE).unwrap();
        assert!(!r.passed);
        // growth ∝ 1/c: the worst c is the smallest on the grid
        assert_eq!(r.witness.unwrap().x[0], 1e-8);
    }

    #[test]
    fn divergence_cases() {
        let o = DivergenceOptions::default();
        let lin_zero = check_divergence(&ModulusFunction::linear(), DivergenceMode::AtZero, &o, 1e-9).unwrap();
        assert!(lin_zero.passed);
        assert!(lin_zero.notes.starts_with("consistent with divergence"));
        // ∫_δ^{0.5} ds/s = log(0.5/δ): partial integral after 40 halvings
        let partial: f64 = lin_zero.notes.split("partial integral=").nth(1).unwrap().split(';').next().unwrap().parse().unwrap();
        assert!((partial - 40.0 * 2f64.ln()).abs() < 1e-6);

        let lin_inf = check_divergence(&ModulusFunction::linear(), DivergenceMode::AtInfinity, &DivergenceOptions { base: 1.0, ..o }, 1e-9).unwrap();
        assert!(lin_inf.passed);
        let partial: f64 = lin_inf.notes.split("partial integral=").nth(1).unwrap().split(';').next().unwrap().parse().unwrap();
        assert!((partial - (2f64.powi(40) + 1.0).ln()).abs() < 1e-6);

        let sqrt = ModulusFunction::custom("sqrt", (0.0, f64::INFINITY), f64::sqrt);
        let r = check_divergence(&sqrt, DivergenceMode::AtZero, &o, 1e-9).unwrap();
        assert!(!r.passed);
        let partial: f64 = r.notes.split("partial integral=").nth(1).unwrap().split(';').next().unwrap().parse().unwrap();
        // saturates at 2√0.5
        assert!((partial - 2.0 * 0.5f64.sqrt()).abs() < 1e-5);

        assert!(check_divergence(&ModulusFunction::log_modulus(26.0, 0.5), DivergenceMode::AtZero, &o, 1e-9).unwrap().passed);
        assert!(check_divergence(&ModulusFunction::slog1p(), DivergenceMode::AtInfinity, &o, 1e-9).unwrap().passed);
        assert!(check_divergence(&ModulusFunction::slog_literal(), DivergenceMode::AtInfinity, &o, 1e-9).unwrap().passed);
        assert!(!check_divergence(&ModulusFunction::square(), DivergenceMode::AtInfinity, &o, 1e-9).unwrap().passed);
        assert!(check_divergence(&ModulusFunction::linear(), DivergenceMode::AtZero, &DivergenceOptions { windows: 10, ..o }, 1e-9).is_err());
    }

    #[test]
    fn report_json_fields() {
        let spec = spec_with(ModulusFunction::linear(), ModulusFunction::linear());
        let r = check_ratio_bounds(&spec, 1.0, &RatioGrids::default_for(&spec, 1.0), 1e-9).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["assumption", "notes", "passed", "samples", "witness", "worst_margin"]);
        let inf = CheckReport {
            worst_margin: f64::NEG_INFINITY,
            ..r
        };
        let back: CheckReport = serde_json::from_str(&inf.to_json()).unwrap();
        assert_eq!(back.worst_margin, f64::NEG_INFINITY);
    }

    #[test]
    fn ou_passes_everything() {
        let (field, spec) = make_ou_system(1.0, 1.0, 2).unwrap();
        let plan = AuditPlan {
            samples: 1000,
            pair_samples: 2000,
            ..AuditPlan::default()
        };
        for r in audit_all(&field, &spec, &plan).unwrap() {
            assert!(r.passed, "{r:?}");
        }
    }
}
