//! Strict JSON run configuration. Unknown keys anywhere are errors.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemConfig,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_n_steps")]
    pub n_steps: usize,
    #[serde(default)]
    pub epsilons: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub check: Option<CheckConfig>,
    pub minact: Option<MinactConfig>,
    pub study: Option<StudyConfig>,
    pub simulate: Option<SimulateConfig>,
}

fn default_horizon() -> f64 {
    1.0
}
fn default_n_steps() -> usize {
    100
}
fn default_trials() -> u64 {
    10_000
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("uldp-out")
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    /// Diffusion variant of `hamiltonian-dw`: `smooth` or `power`.
    pub sigma: Option<String>,
    /// Replaces the growth modulus: `linear`, `square`, `slog`, `slog1p`.
    pub gamma: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckConfig {
    pub radius: Option<f64>,
    pub samples: Option<usize>,
    pub pair_samples: Option<usize>,
    pub t_nodes: Option<usize>,
    pub windows: Option<usize>,
    pub rho: Option<f64>,
    pub tolerance: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MinactConfig {
    pub x0: Vec<f64>,
    pub target: Vec<f64>,
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

fn default_probes() -> usize {
    20
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub mu_initial: Option<f64>,
    pub mu_factor: Option<f64>,
    pub mu_max: Option<f64>,
    pub grad_tol: Option<f64>,
    pub endpoint_tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub cells: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlSpec {
    Zero {},
    Constant { value: Vec<f64> },
    Values { cells: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EventConfig {
    /// `X(T) ≥ threshold`, scalar systems only.
    TerminalAtLeast { threshold: f64 },
    TerminalBall {
        center: Vec<f64>,
        radius: f64,
        #[serde(default)]
        complement: bool,
    },
    /// Tube around the skeleton from `x0` driven by `control` (zero by default).
    Tube {
        radius: f64,
        control: Option<ControlSpec>,
        #[serde(default)]
        complement: bool,
    },
    ExitBall {
        center: Vec<f64>,
        radius: f64,
        #[serde(default)]
        complement: bool,
    },
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub ldp: Option<LdpConfig>,
    pub condition_i: Option<ConditionIConfig>,
    pub condition_ii: Option<ConditionIiConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LdpConfig {
    pub x0: Vec<f64>,
    pub event: EventConfig,
    pub i_ref: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionIConfig {
    pub x: Vec<f64>,
    pub x_seq: Vec<Vec<f64>>,
    pub freqs: Vec<f64>,
    pub amplitude: f64,
    pub direction: Vec<f64>,
    pub control: Option<ControlSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionIiConfig {
    pub x_grid: Vec<Vec<f64>>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    pub control: Option<ControlSpec>,
}

fn default_repeats() -> usize {
    30
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub x0: Vec<f64>,
    pub epsilon: Option<f64>,
    #[serde(default = "default_trajectories")]
    pub trajectories: u64,
    /// Drives the controlled equation when present.
    pub control: Option<ControlSpec>,
}

fn default_trajectories() -> u64 {
    1
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}
