//! Coefficient fields, Lyapunov data, moduli and controls, plus the built-in
//! example systems.
//!
//! All evaluators are plain closures behind `Arc`, so every type here is
//! cheap to clone and can be shared across worker threads.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// `(t, x, out)`: writes a vector- or matrix-valued result into `out`.
pub type FieldFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// Time-only weight such as `f`, `g` or `l`.
pub type WeightFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type StateScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type StateVecFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// Radius `R` to the modulus `η_R`.
pub type ModulusFamily = Arc<dyn Fn(f64) -> ModulusFunction + Send + Sync>;

/// Drift `b(t, x)` and diffusion `σ(t, x)` of `dX = b dt + √ε σ dB` on `[0, T]`.
///
/// The diffusion is written row-major into a buffer of length `d·m`.
/// Optional Jacobians feed the adjoint gradient of the action; when absent,
/// central differences are used.
#[derive(Clone)]
pub struct CoefficientField {
    name: String,
    dim_state: usize,
    dim_noise: usize,
    horizon: f64,
    drift: FieldFn,
    diffusion: FieldFn,
    drift_jacobian: Option<FieldFn>,
    diffusion_jacobian: Option<FieldFn>,
}

impl fmt::Debug for CoefficientField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientField")
            .field("name", &self.name)
            .field("dim_state", &self.dim_state)
            .field("dim_noise", &self.dim_noise)
            .field("horizon", &self.horizon)
            .finish_non_exhaustive()
    }
}

impl CoefficientField {
    pub fn new<B, S>(
        name: impl Into<String>,
        dim_state: usize,
        dim_noise: usize,
        horizon: f64,
        drift: B,
        diffusion: S,
    ) -> Result<Self>
    where
        B: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
        S: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        if dim_state == 0 || dim_noise == 0 {
            return Err(Error::invalid("state and noise dimensions must be positive"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
        }
        Ok(Self {
            name: name.into(),
            dim_state,
            dim_noise,
            horizon,
            drift: Arc::new(drift),
            diffusion: Arc::new(diffusion),
            drift_jacobian: None,
            diffusion_jacobian: None,
        })
    }

    /// `∂b_i/∂x_j`, row-major `d×d`.
    pub fn with_drift_jacobian<J>(mut self, jac: J) -> Self
    where
        J: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.drift_jacobian = Some(Arc::new(jac));
        self
    }

    /// `∂σ_il/∂x_j` stored at `(i·m + l)·d + j`.
    pub fn with_diffusion_jacobian<J>(mut self, jac: J) -> Self
    where
        J: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.diffusion_jacobian = Some(Arc::new(jac));
        self
    }

    pub fn with_horizon(mut self, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
        }
        self.horizon = horizon;
        Ok(self)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim_state(&self) -> usize {
        self.dim_state
    }

    pub fn dim_noise(&self) -> usize {
        self.dim_noise
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn has_analytic_jacobians(&self) -> bool {
        self.drift_jacobian.is_some() && self.diffusion_jacobian.is_some()
    }

    /// Unchecked drift evaluation for hot loops.
    #[inline]
    pub fn drift_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.drift)(t, x, out)
    }

    /// Unchecked diffusion evaluation for hot loops.
    #[inline]
    pub fn diffusion_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(t, x, out)
    }

    /// Drift and diffusion at `(t, x)`, rejecting non-finite input or output.
    pub fn eval(&self, t: f64, x: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (d, m) = (self.dim_state, self.dim_noise);
        if x.len() != d {
            return Err(Error::config(format!("state has length {}, expected {d}", x.len())));
        }
        let bad = |what| Error::Evaluation {
            what,
            t,
            x: x.to_vec(),
        };
        if !t.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(bad("input"));
        }
        let mut b = vec![0.0; d];
        let mut s = vec![0.0; d * m];
        self.drift_into(t, x, &mut b);
        self.diffusion_into(t, x, &mut s);
        if b.iter().any(|v| !v.is_finite()) {
            return Err(bad("drift"));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(bad("diffusion"));
        }
        Ok((DVector::from_vec(b), DMatrix::from_row_slice(d, m, &s)))
    }

    /// Drift Jacobian, analytic when registered, otherwise central differences.
    pub fn drift_jacobian_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let d = self.dim_state;
        if let Some(jac) = &self.drift_jacobian {
            return jac(t, x, out);
        }
        let mut xp = x.to_vec();
        let mut fp = vec![0.0; d];
        let mut fm = vec![0.0; d];
        for j in 0..d {
            let h = fd_step(x[j]);
            xp[j] = x[j] + h;
            self.drift_into(t, &xp, &mut fp);
            xp[j] = x[j] - h;
            self.drift_into(t, &xp, &mut fm);
            xp[j] = x[j];
            for i in 0..d {
                out[i * d + j] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
    }

    /// Diffusion Jacobian, analytic when registered, otherwise central differences.
    pub fn diffusion_jacobian_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let (d, m) = (self.dim_state, self.dim_noise);
        if let Some(jac) = &self.diffusion_jacobian {
            return jac(t, x, out);
        }
        let mut xp = x.to_vec();
        let mut fp = vec![0.0; d * m];
        let mut fm = vec![0.0; d * m];
        for j in 0..d {
            let h = fd_step(x[j]);
            xp[j] = x[j] + h;
            self.diffusion_into(t, &xp, &mut fp);
            xp[j] = x[j] - h;
            self.diffusion_into(t, &xp, &mut fm);
            xp[j] = x[j];
            for il in 0..d * m {
                out[il * d + j] = (fp[il] - fm[il]) / (2.0 * h);
            }
        }
    }
}

fn fd_step(x: f64) -> f64 {
    1e-6 * (1.0 + x.abs())
}

/// Which closed form a [`ModulusFunction`] carries.
#[derive(Debug, Clone, PartialEq)]
pub enum ModulusKind {
    /// `s`
    Linear,
    /// `scale · s · log(1/s)`, extended by 0 at `s = 0`.
    LogModulus { scale: f64 },
    /// `s · log s + 1` (literal form; decreasing on `(0, 1/e)`).
    SLogSPlusOne,
    /// `s · log(1 + s) + s`, increasing on `[0, ∞)`.
    SLog1pPlusS,
    /// `s²`
    Square,
    Custom(String),
}

/// Scalar modulus such as `η_R` or `γ` restricted to a closed domain.
#[derive(Clone)]
pub struct ModulusFunction {
    eval: ScalarFn,
    domain: (f64, f64),
    kind: ModulusKind,
}

impl fmt::Debug for ModulusFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModulusFunction")
            .field("kind", &self.kind)
            .field("domain", &self.domain)
            .finish()
    }
}

impl ModulusFunction {
    pub fn custom<F>(label: impl Into<String>, domain: (f64, f64), eval: F) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            eval: Arc::new(eval),
            domain,
            kind: ModulusKind::Custom(label.into()),
        }
    }

    pub fn linear() -> Self {
        Self {
            eval: Arc::new(|s| s),
            domain: (0.0, f64::INFINITY),
            kind: ModulusKind::Linear,
        }
    }

    /// `scale · s · log(1/s)` on `[0, min(ε₀², 1/e)]`, where it is increasing.
    pub fn log_modulus(scale: f64, eps0: f64) -> Self {
        let cap = (eps0 * eps0).min(std::f64::consts::E.recip());
        Self {
            eval: Arc::new(move |s| if s <= 0.0 { 0.0 } else { -scale * s * s.ln() }),
            domain: (0.0, cap),
            kind: ModulusKind::LogModulus { scale },
        }
    }

    /// The literal `s · log s + 1`; equals 1 at `s = 0` by continuity.
    pub fn slog_literal() -> Self {
        Self {
            eval: Arc::new(|s| if s <= 0.0 { 1.0 } else { s * s.ln() + 1.0 }),
            domain: (0.0, f64::INFINITY),
            kind: ModulusKind::SLogSPlusOne,
        }
    }

    /// `s · log(1 + s) + s`.
    pub fn slog1p() -> Self {
        Self {
            eval: Arc::new(|s| s * s.ln_1p() + s),
            domain: (0.0, f64::INFINITY),
            kind: ModulusKind::SLog1pPlusS,
        }
    }

    pub fn square() -> Self {
        Self {
            eval: Arc::new(|s| s * s),
            domain: (0.0, f64::INFINITY),
            kind: ModulusKind::Square,
        }
    }

    #[inline]
    pub fn eval(&self, s: f64) -> f64 {
        (self.eval)(s)
    }

    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    pub fn contains(&self, s: f64) -> bool {
        s >= self.domain.0 && s <= self.domain.1
    }

    pub fn kind(&self) -> &ModulusKind {
        &self.kind
    }

    pub fn label(&self) -> String {
        match &self.kind {
            ModulusKind::Linear => "linear".into(),
            ModulusKind::LogModulus { scale } => format!("{scale}*s*log(1/s)"),
            ModulusKind::SLogSPlusOne => "s*log(s)+1".into(),
            ModulusKind::SLog1pPlusS => "s*log(1+s)+s".into(),
            ModulusKind::Square => "s^2".into(),
            ModulusKind::Custom(l) => l.clone(),
        }
    }

    /// Checks `eval(s1) <= eval(s2)` on consecutive sorted samples in the domain.
    pub fn is_increasing_on(&self, samples: &[f64]) -> bool {
        let mut pts: Vec<f64> = samples.iter().copied().filter(|&s| self.contains(s)).collect();
        pts.sort_by(f64::total_cmp);
        pts.windows(2).all(|w| self.eval(w[0]) <= self.eval(w[1]))
    }
}

/// Lyapunov function with its derivatives and the constants/weights that
/// appear in the monotonicity and Lyapunov inequalities.
#[derive(Clone)]
pub struct LyapunovSpec {
    pub value: StateScalarFn,
    pub gradient: StateVecFn,
    /// Row-major `d×d`.
    pub hessian: StateVecFn,
    pub theta: f64,
    pub eta: f64,
    pub big_m: f64,
    pub big_k: f64,
    pub f_weight: WeightFn,
    pub g_weight: WeightFn,
    pub l_weight: WeightFn,
    pub gamma: ModulusFunction,
    pub eta_r: ModulusFamily,
    pub eps0: f64,
}

impl fmt::Debug for LyapunovSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LyapunovSpec")
            .field("theta", &self.theta)
            .field("eta", &self.eta)
            .field("big_m", &self.big_m)
            .field("big_k", &self.big_k)
            .field("gamma", &self.gamma)
            .field("eps0", &self.eps0)
            .finish_non_exhaustive()
    }
}

impl LyapunovSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("theta", self.theta),
            ("eta", self.eta),
            ("M", self.big_m),
            ("K", self.big_k),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.eps0 > 0.0 && self.eps0 < 1.0) {
            return Err(Error::invalid(format!("eps0 must lie in (0,1), got {}", self.eps0)));
        }
        Ok(())
    }

    pub fn with_gamma(mut self, gamma: ModulusFunction) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn eta_at(&self, radius: f64) -> ModulusFunction {
        (self.eta_r)(radius)
    }
}

/// Piecewise-constant `ℝ^m`-valued control on a uniform grid of `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Control {
    horizon: f64,
    dim: usize,
    values: Vec<f64>,
    squared_norm: f64,
}

impl Control {
    /// `values` holds `cells·dim` entries, cell-major.
    pub fn from_flat(horizon: f64, dim: usize, values: Vec<f64>) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid("control horizon must be positive"));
        }
        if dim == 0 || values.is_empty() || !values.len().is_multiple_of(dim) {
            return Err(Error::invalid(format!(
                "control values of length {} do not split into cells of dimension {dim}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("control values must be finite"));
        }
        let cells = values.len() / dim;
        let dt = horizon / cells as f64;
        let squared_norm = values.iter().map(|v| v * v).sum::<f64>() * dt;
        Ok(Self {
            horizon,
            dim,
            values,
            squared_norm,
        })
    }

    pub fn from_cells(horizon: f64, cells: &[Vec<f64>]) -> Result<Self> {
        let dim = cells.first().map_or(0, Vec::len);
        if cells.iter().any(|c| c.len() != dim) {
            return Err(Error::invalid("control cells have inconsistent dimensions"));
        }
        Self::from_flat(horizon, dim, cells.concat())
    }

    pub fn zero(horizon: f64, cells: usize, dim: usize) -> Result<Self> {
        Self::from_flat(horizon, dim, vec![0.0; cells * dim])
    }

    pub fn constant(horizon: f64, cells: usize, value: &[f64]) -> Result<Self> {
        Self::from_flat(horizon, value.len(), value.repeat(cells))
    }

    /// Samples `f` at cell midpoints.
    pub fn from_fn<F>(horizon: f64, cells: usize, dim: usize, f: F) -> Result<Self>
    where
        F: Fn(f64) -> Vec<f64>,
    {
        let dt = horizon / cells as f64;
        let mut values = Vec::with_capacity(cells * dim);
        for k in 0..cells {
            let v = f((k as f64 + 0.5) * dt);
            if v.len() != dim {
                return Err(Error::invalid("control function returned wrong dimension"));
            }
            values.extend_from_slice(&v);
        }
        Self::from_flat(horizon, dim, values)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cells(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.cells() as f64
    }

    pub fn cell(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `∫₀ᵀ |h(s)|² ds`, exact for a step function.
    pub fn squared_norm(&self) -> f64 {
        self.squared_norm
    }

    /// Membership in `S^N`.
    pub fn in_ball(&self, n: f64) -> bool {
        self.squared_norm <= n
    }

    /// Splits every cell into `factor` equal cells with the same value.
    pub fn refine(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::invalid("refinement factor must be positive"));
        }
        let mut values = Vec::with_capacity(self.values.len() * factor);
        for k in 0..self.cells() {
            for _ in 0..factor {
                values.extend_from_slice(self.cell(k));
            }
        }
        Self::from_flat(self.horizon, self.dim, values)
    }

    /// Control cell active during integration step `step` of `n_steps`.
    #[inline]
    pub(crate) fn cell_for_step(&self, step: usize, n_steps: usize) -> &[f64] {
        self.cell(step / (n_steps / self.cells()))
    }

    /// Ensures this control can drive `field` on a grid of `n_steps`.
    pub fn check_compatible(&self, field: &CoefficientField, n_steps: usize) -> Result<()> {
        if self.dim != field.dim_noise() {
            return Err(Error::config(format!(
                "control dimension {} does not match noise dimension {}",
                self.dim,
                field.dim_noise()
            )));
        }
        if (self.horizon - field.horizon()).abs() > 1e-12 * field.horizon() {
            return Err(Error::config(format!(
                "control horizon {} differs from field horizon {}",
                self.horizon,
                field.horizon()
            )));
        }
        if n_steps == 0 || !n_steps.is_multiple_of(self.cells()) {
            return Err(Error::config(format!(
                "control grid of {} cells does not divide {n_steps} integration steps",
                self.cells()
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Built-in systems

/// Diffusion choices for the double-well Hamiltonian system. Both satisfy
/// `‖σ(x)‖² ≤ c₁(x₁⁴ + |x₂|^{4/3} + 1)` with `c₁ = max(s₁², s₂²)` and vanish
/// at the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HamiltonianNoise {
    /// `diag(s₁·x₁², s₂·x₂·(1 + x₂²)^{-1/3})`, smooth and locally Lipschitz.
    Smooth { s1: f64, s2: f64 },
    /// `diag(s₁·x₁², s₂·|x₂|^{2/3})`, only Hölder-2/3 in `x₂`.
    Power { s1: f64, s2: f64 },
}

impl Default for HamiltonianNoise {
    fn default() -> Self {
        HamiltonianNoise::Smooth { s1: 1.0, s2: 1.0 }
    }
}

impl HamiltonianNoise {
    pub fn from_label(label: &str) -> Result<Self> {
        match label {
            "smooth" => Ok(HamiltonianNoise::Smooth { s1: 1.0, s2: 1.0 }),
            "power" => Ok(HamiltonianNoise::Power { s1: 1.0, s2: 1.0 }),
            other => Err(Error::invalid(format!("unknown sigma choice {other:?}"))),
        }
    }

    fn scales(self) -> (f64, f64) {
        match self {
            HamiltonianNoise::Smooth { s1, s2 } | HamiltonianNoise::Power { s1, s2 } => (s1, s2),
        }
    }

    /// The growth constant `c₁`.
    pub fn c1(self) -> f64 {
        let (s1, s2) = self.scales();
        (s1 * s1).max(s2 * s2)
    }

    /// Lipschitz constant of the `x₂` profile (infinite for the power law).
    fn profile_lipschitz(self) -> f64 {
        match self {
            HamiltonianNoise::Smooth { .. } => 1.0,
            HamiltonianNoise::Power { .. } => f64::INFINITY,
        }
    }

    fn profile(self, x2: f64) -> f64 {
        match self {
            HamiltonianNoise::Smooth { .. } => x2 * (1.0 + x2 * x2).powf(-1.0 / 3.0),
            HamiltonianNoise::Power { .. } => x2.abs().powf(2.0 / 3.0),
        }
    }

    fn profile_derivative(self, x2: f64) -> f64 {
        match self {
            HamiltonianNoise::Smooth { .. } => {
                let u = x2 * x2;
                (1.0 + u / 3.0) * (1.0 + u).powf(-4.0 / 3.0)
            }
            HamiltonianNoise::Power { .. } => {
                if x2 == 0.0 {
                    0.0
                } else {
                    2.0 / 3.0 * x2.signum() * x2.abs().powf(-1.0 / 3.0)
                }
            }
        }
    }
}

/// `H(x) = x₂²/2 + x₁⁴/4 − x₁²/2`.
pub fn double_well_hamiltonian(x: &[f64]) -> f64 {
    0.5 * x[1] * x[1] + 0.25 * x[0].powi(4) - 0.5 * x[0] * x[0]
}

/// `∇H(x) = (x₁³ − x₁, x₂)`.
pub fn double_well_gradient(x: &[f64]) -> [f64; 2] {
    [x[0].powi(3) - x[0], x[1]]
}

/// Symplectic part `(∂H/∂x₂, −∂H/∂x₁)`.
pub fn double_well_symplectic(x: &[f64]) -> [f64; 2] {
    let g = double_well_gradient(x);
    [g[1], -g[0]]
}

/// Field of the damped double-well Hamiltonian system without any check on
/// `f0`. `f0 = 0` gives the conservative flow.
pub fn double_well_field(f0: f64, noise: HamiltonianNoise) -> CoefficientField {
    let (s1, s2) = noise.scales();
    CoefficientField::new(
        "hamiltonian-dw",
        2,
        2,
        1.0,
        move |_, x, out| {
            let g = double_well_gradient(x);
            out[0] = g[1] - f0 * g[0];
            out[1] = -g[0] - f0 * g[1];
        },
        move |_, x, out| {
            out[0] = s1 * x[0] * x[0];
            out[1] = 0.0;
            out[2] = 0.0;
            out[3] = s2 * noise.profile(x[1]);
        },
    )
    .expect("static dimensions")
    .with_drift_jacobian(move |_, x, out| {
        let c = 3.0 * x[0] * x[0] - 1.0;
        out[0] = -f0 * c;
        out[1] = 1.0;
        out[2] = -c;
        out[3] = -f0;
    })
    .with_diffusion_jacobian(move |_, x, out| {
        out.fill(0.0);
        // (i, l, j) at (i*2 + l)*2 + j
        out[0] = 2.0 * s1 * x[0];
        out[7] = s2 * noise.profile_derivative(x[1]);
    })
}

/// Damped stochastic Hamiltonian double well with `F ≡ f0` and Lyapunov
/// function `V = H + 1/4`.
///
/// `θ = 1/d₁` and `η = 2d₂` come from grid maxima of the trace and quotient
/// ratios on `[−6, 6]²`; `M = 4c₁`, `K = 8c₁`; `f ≡ 1`, `l ≡ 1`.
pub fn make_hamiltonian_system(
    f0: f64,
    noise: HamiltonianNoise,
) -> Result<(CoefficientField, LyapunovSpec)> {
    if !(f0 > 1.0 && f0.is_finite()) {
        return Err(Error::invalid(format!("damping F0 must exceed 1, got {f0}")));
    }
    let field = double_well_field(f0, noise);
    let c1 = noise.c1();
    let eps0: f64 = 0.5;
    let (s1, s2) = noise.scales();
    // Sufficient local monotonicity bound: LHS ≤ C(R)|x−y|² with
    // C(R) ≤ (2F0 + 2 + s₂²L²) + (3 + 4s₁²)R², against (1+R²)·s·log(1/s).
    let lip = noise.profile_lipschitz();
    let g0 = (2.0 * f0 + 2.0 + s2 * s2 * lip * lip).max(3.0 + 4.0 * s1 * s1)
        / (1.0 / (eps0 * eps0)).ln();
    let g0 = if g0.is_finite() { g0 } else { 1.0 };
    let mut spec = LyapunovSpec {
        value: Arc::new(|x| double_well_hamiltonian(x) + 0.25),
        gradient: Arc::new(|x, out| {
            let g = double_well_gradient(x);
            out[0] = g[0];
            out[1] = g[1];
        }),
        hessian: Arc::new(|x, out| {
            out[0] = 3.0 * x[0] * x[0] - 1.0;
            out[1] = 0.0;
            out[2] = 0.0;
            out[3] = 1.0;
        }),
        theta: 1.0,
        eta: 1.0,
        big_m: 4.0 * c1,
        big_k: 8.0 * c1,
        f_weight: Arc::new(|_| 1.0),
        g_weight: Arc::new(move |_| g0),
        l_weight: Arc::new(|_| 1.0),
        gamma: ModulusFunction::slog1p(),
        eta_r: Arc::new(move |r| ModulusFunction::log_modulus(1.0 + r * r, eps0)),
        eps0,
    };
    let (d1, d2) = crate::checker::estimate_hamiltonian_ratios(&field, &spec, 6.0, 241);
    spec.theta = 1.0 / d1;
    spec.eta = 2.0 * d2;
    spec.validate()?;
    Ok((field, spec))
}

/// Lyapunov data shared by the linear systems: `V = |x|²`, linear `γ` and
/// `η_R`, constant weights large enough for the inequalities to hold.
fn quadratic_spec(sigma0: f64, noise_dim: usize) -> LyapunovSpec {
    let theta = 1.0;
    let eta = 1.0;
    let s2 = sigma0 * sigma0;
    // ⟨b,∇V⟩ ≤ 0, (θ/2)Tr = θ·σ0²·m, |σᵀ∇V|²/(ηV) ≤ 4σ0²/η.
    let f0 = theta * s2 * noise_dim as f64 + 4.0 * s2 / eta + 1.0;
    let g0 = s2.max(1.0);
    LyapunovSpec {
        value: Arc::new(|x| x.iter().map(|v| v * v).sum()),
        gradient: Arc::new(|x, out| {
            for (o, v) in out.iter_mut().zip(x) {
                *o = 2.0 * v;
            }
        }),
        hessian: Arc::new(|x, out| {
            let d = x.len();
            out.fill(0.0);
            for i in 0..d {
                out[i * d + i] = 2.0;
            }
        }),
        theta,
        eta,
        big_m: 1.0,
        big_k: 1.0,
        f_weight: Arc::new(move |_| f0),
        g_weight: Arc::new(move |_| g0),
        l_weight: Arc::new(|_| 1.0),
        gamma: ModulusFunction::linear(),
        eta_r: Arc::new(|_| ModulusFunction::linear()),
        eps0: 0.5,
    }
}

/// Ornstein–Uhlenbeck field `b(x) = −a·x`, `σ = sigma0·I` in dimension `d`.
/// `a = 0` is scaled Brownian motion.
pub fn make_ou_system(a: f64, sigma0: f64, d: usize) -> Result<(CoefficientField, LyapunovSpec)> {
    if !(a >= 0.0 && a.is_finite()) {
        return Err(Error::invalid(format!("OU rate must be nonnegative, got {a}")));
    }
    if !(sigma0 > 0.0 && sigma0.is_finite()) {
        return Err(Error::invalid(format!("sigma0 must be positive, got {sigma0}")));
    }
    if d == 0 {
        return Err(Error::invalid("dimension must be positive"));
    }
    let field = CoefficientField::new(
        "ou",
        d,
        d,
        1.0,
        move |_, x, out| {
            for (o, v) in out.iter_mut().zip(x) {
                *o = -a * v;
            }
        },
        move |_, _, out| {
            out.fill(0.0);
            for i in 0..d {
                out[i * d + i] = sigma0;
            }
        },
    )?
    .with_drift_jacobian(move |_, _, out| {
        out.fill(0.0);
        for i in 0..d {
            out[i * d + i] = -a;
        }
    })
    .with_diffusion_jacobian(|_, _, out| out.fill(0.0));
    Ok((field, quadratic_spec(sigma0, d)))
}

/// Zero drift with `σ = sigma0·[I_m; 0]` (`d×m`, `m ≤ d`). With `m < d` the
/// noise is degenerate and only the first `m` coordinates can be steered.
pub fn make_brownian_system(
    d: usize,
    m: usize,
    sigma0: f64,
) -> Result<(CoefficientField, LyapunovSpec)> {
    if d == 0 || m == 0 || m > d {
        return Err(Error::invalid(format!("need 1 <= m <= d, got d={d}, m={m}")));
    }
    if !(sigma0 > 0.0 && sigma0.is_finite()) {
        return Err(Error::invalid(format!("sigma0 must be positive, got {sigma0}")));
    }
    let field = CoefficientField::new(
        "brownian",
        d,
        m,
        1.0,
        |_, _, out| out.fill(0.0),
        move |_, _, out| {
            out.fill(0.0);
            for i in 0..m {
                out[i * m + i] = sigma0;
            }
        },
    )?
    .with_drift_jacobian(|_, _, out| out.fill(0.0))
    .with_diffusion_jacobian(|_, _, out| out.fill(0.0));
    Ok((field, quadratic_spec(sigma0, m)))
}
