//! The four subcommands. Each reads a [`RunConfig`], writes its files into
//! the output directory and reports an [`Outcome`].

use std::fs;
use std::path::{Path, PathBuf};

use uldp_core::action::{control_csv, gradient_check_report, min_action_endpoint, OptimizerOptions};
use uldp_core::checker::{audit_all, AuditOptions, AuditPlan, DivergenceOptions};
use uldp_core::dynamics::{simulate_controlled, simulate_sde, solve_skeleton, Scheme};
use uldp_core::model::{
    make_brownian_system, make_hamiltonian_system, make_ou_system, CoefficientField, Control, HamiltonianNoise,
    LyapunovSpec, ModulusFunction,
};
use uldp_core::verify::{
    condition_i_study, condition_ii_study, ldp_comparison, EventSpec, LdpOptions, Oscillation,
};

use crate::config::{ControlSpec, EventConfig, RunConfig, SystemConfig};
use crate::failure::Failure;

/// What a command produced.
#[derive(Debug)]
pub struct Outcome {
    pub written: Vec<PathBuf>,
    /// `false` when the computation finished but its verdict is negative
    /// (a failed audit, an infinite rate).
    pub success: bool,
}

fn param(sys: &SystemConfig, key: &str, default: f64) -> f64 {
    sys.params.get(key).copied().unwrap_or(default)
}

fn count_param(sys: &SystemConfig, key: &str, default: usize) -> Result<usize, Failure> {
    let v = param(sys, key, default as f64);
    if v >= 1.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(Failure::usage(format!("system parameter {key} must be a positive integer, got {v}")))
    }
}

fn gamma_override(label: &str) -> Result<ModulusFunction, Failure> {
    Ok(match label {
        "linear" => ModulusFunction::linear(),
        "square" => ModulusFunction::square(),
        "slog" => ModulusFunction::slog_literal(),
        "slog1p" => ModulusFunction::slog1p(),
        other => return Err(Failure::usage(format!("unknown gamma {other:?}"))),
    })
}

/// Builds a registered system: `ou`, `brownian` or `hamiltonian-dw`.
pub fn build_system(cfg: &RunConfig) -> Result<(CoefficientField, LyapunovSpec), Failure> {
    let sys = &cfg.system;
    let allowed: &[&str] = match sys.name.as_str() {
        "ou" => &["a", "sigma0", "d"],
        "brownian" => &["d", "m", "sigma0"],
        "hamiltonian-dw" => &["f0", "s1", "s2"],
        other => return Err(Failure::usage(format!("unknown system {other:?}"))),
    };
    if let Some(k) = sys.params.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(Failure::usage(format!("system {} has no parameter {k:?}", sys.name)));
    }
    if sys.sigma.is_some() && sys.name != "hamiltonian-dw" {
        return Err(Failure::usage("sigma variants exist only for hamiltonian-dw"));
    }
    let (field, spec) = match sys.name.as_str() {
        "ou" => make_ou_system(param(sys, "a", 1.0), param(sys, "sigma0", 1.0), count_param(sys, "d", 1)?)?,
        "brownian" => {
            let d = count_param(sys, "d", 1)?;
            make_brownian_system(d, count_param(sys, "m", d)?, param(sys, "sigma0", 1.0))?
        }
        _ => {
            let (s1, s2) = (param(sys, "s1", 1.0), param(sys, "s2", 1.0));
            let noise = match HamiltonianNoise::from_label(sys.sigma.as_deref().unwrap_or("smooth"))? {
                HamiltonianNoise::Smooth { .. } => HamiltonianNoise::Smooth { s1, s2 },
                HamiltonianNoise::Power { .. } => HamiltonianNoise::Power { s1, s2 },
            };
            make_hamiltonian_system(param(sys, "f0", 2.0), noise)?
        }
    };
    let field = field.with_horizon(cfg.horizon)?;
    let spec = match &sys.gamma {
        Some(label) => spec.with_gamma(gamma_override(label)?),
        None => spec,
    };
    Ok((field, spec))
}

fn build_control(spec: Option<&ControlSpec>, field: &CoefficientField, n_steps: usize) -> Result<Control, Failure> {
    let (t, m) = (field.horizon(), field.dim_noise());
    let c = match spec {
        None | Some(ControlSpec::Zero {}) => Control::zero(t, 1, m)?,
        Some(ControlSpec::Constant { value }) => Control::constant(t, 1, value)?,
        Some(ControlSpec::Values { cells }) => Control::from_cells(t, cells)?,
    };
    c.check_compatible(field, n_steps)?;
    Ok(c)
}

fn check_dim(what: &str, v: &[f64], d: usize) -> Result<(), Failure> {
    if v.len() == d {
        Ok(())
    } else {
        Err(Failure::usage(format!("{what} has length {}, system dimension is {d}", v.len())))
    }
}

/// Sub-seed for one command, so every stream hangs off the top-level seed.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for b in tag.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    // splitmix64 finalizer
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

struct Writer<'a> {
    dir: &'a Path,
    written: Vec<PathBuf>,
}

impl<'a> Writer<'a> {
    fn new(dir: &'a Path) -> Result<Self, Failure> {
        fs::create_dir_all(dir).map_err(|e| Failure::usage(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self {
            dir,
            written: Vec::new(),
        })
    }

    fn put(&mut self, name: &str, content: &str) -> Result<(), Failure> {
        let path = self.dir.join(name);
        fs::write(&path, content).map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))?;
        self.written.push(path);
        Ok(())
    }

    fn done(self, success: bool) -> Outcome {
        Outcome {
            written: self.written,
            success,
        }
    }
}

pub fn cmd_check(cfg: &RunConfig, out: &Path) -> Result<Outcome, Failure> {
    let (field, spec) = build_system(cfg)?;
    let c = cfg.check.clone().unwrap_or_default();
    let defaults = AuditPlan::default();
    let plan = AuditPlan {
        radius: c.radius.unwrap_or(defaults.radius),
        samples: c.samples.unwrap_or(defaults.samples),
        pair_samples: c.pair_samples.unwrap_or(defaults.pair_samples),
        seed: derive_seed(cfg.seed, "check"),
        options: AuditOptions {
            tolerance: c.tolerance.unwrap_or(defaults.options.tolerance),
            t_nodes: c.t_nodes.unwrap_or(defaults.options.t_nodes),
            ..defaults.options
        },
        ratio_grids: None,
        divergence: DivergenceOptions {
            windows: c.windows.unwrap_or(defaults.divergence.windows),
            rho: c.rho.unwrap_or(defaults.divergence.rho),
            ..defaults.divergence
        },
    };
    let reports = audit_all(&field, &spec, &plan)?;
    let mut w = Writer::new(out)?;
    let mut all = true;
    for r in &reports {
        all &= r.passed;
        w.put(&format!("check_{}.json", r.assumption), &(r.to_json() + "\n"))?;
        eprintln!("{:<18} {}", r.assumption, if r.passed { "pass" } else { "FAIL" });
    }
    Ok(w.done(all))
}

pub fn cmd_minact(cfg: &RunConfig, out: &Path) -> Result<Outcome, Failure> {
    let (field, _) = build_system(cfg)?;
    let m = cfg.minact.as_ref().ok_or_else(|| Failure::usage("config has no minact block"))?;
    let d = field.dim_state();
    check_dim("minact.x0", &m.x0, d)?;
    check_dim("minact.target", &m.target, d)?;
    let o = &m.optimizer;
    let def = OptimizerOptions::default();
    let opts = OptimizerOptions {
        mu_initial: o.mu_initial.unwrap_or(def.mu_initial),
        mu_factor: o.mu_factor.unwrap_or(def.mu_factor),
        mu_max: o.mu_max.unwrap_or(def.mu_max),
        grad_tol: o.grad_tol.unwrap_or(def.grad_tol),
        endpoint_tol: o.endpoint_tol.or(def.endpoint_tol),
        max_iter: o.max_iter.unwrap_or(def.max_iter),
        cells: o.cells.or(def.cells),
        initial: None,
    };
    let mut w = Writer::new(out)?;
    let check = gradient_check_report(
        &field,
        &m.x0,
        &m.target,
        cfg.n_steps,
        m.probes,
        derive_seed(cfg.seed, "gradient_check"),
    )?;
    w.put("gradient_check.json", &(serde_json::to_string_pretty(&check).unwrap() + "\n"))?;
    let result = min_action_endpoint(&field, &m.x0, &m.target, cfg.n_steps, &opts)?;
    w.put("minact.json", &(result.to_json() + "\n"))?;
    w.put(
        "minact_telemetry.json",
        &(serde_json::to_string_pretty(&result.telemetry).unwrap() + "\n"),
    )?;
    if let Some(c) = &result.control {
        w.put("minact_control.csv", &control_csv(c))?;
        eprintln!("rate = {}", result.rate);
    } else {
        eprintln!(
            "target unreachable: rate = inf (inf over the empty set), terminal mismatch {} after mu = {:?}",
            result.residual,
            result.telemetry.mu_schedule.last()
        );
    }
    Ok(w.done(result.is_finite()))
}

fn build_event(ev: &EventConfig, field: &CoefficientField, x0: &[f64], n_steps: usize) -> Result<EventSpec, Failure> {
    let d = field.dim_state();
    let (spec, complement) = match ev {
        EventConfig::TerminalAtLeast { threshold } => {
            if d != 1 {
                return Err(Failure::usage("terminal_at_least needs a scalar system"));
            }
            (EventSpec::terminal_at_least(*threshold), false)
        }
        EventConfig::TerminalBall {
            center,
            radius,
            complement,
        } => {
            check_dim("event.center", center, d)?;
            (EventSpec::terminal_ball(center.clone(), *radius)?, *complement)
        }
        EventConfig::Tube {
            radius,
            control,
            complement,
        } => {
            let h = build_control(control.as_ref(), field, n_steps)?;
            let reference = solve_skeleton(field, x0, &h, n_steps, Scheme::Euler)?;
            (EventSpec::tube(reference, *radius)?, *complement)
        }
        EventConfig::ExitBall {
            center,
            radius,
            complement,
        } => {
            check_dim("event.center", center, d)?;
            (EventSpec::exit_ball(center.clone(), *radius)?, *complement)
        }
    };
    Ok(if complement { spec.complemented() } else { spec })
}

pub fn cmd_study(cfg: &RunConfig, out: &Path) -> Result<Outcome, Failure> {
    let (field, _) = build_system(cfg)?;
    let s = cfg.study.as_ref().ok_or_else(|| Failure::usage("config has no study block"))?;
    if s.ldp.is_none() && s.condition_i.is_none() && s.condition_ii.is_none() {
        return Err(Failure::usage("study block names no study"));
    }
    let d = field.dim_state();
    let mut w = Writer::new(out)?;
    if let Some(l) = &s.ldp {
        check_dim("ldp.x0", &l.x0, d)?;
        if cfg.epsilons.is_empty() {
            return Err(Failure::usage("ldp study needs epsilons"));
        }
        let event = build_event(&l.event, &field, &l.x0, cfg.n_steps)?;
        let opts = LdpOptions {
            i_ref: l.i_ref,
            ..LdpOptions::default()
        };
        let table = ldp_comparison(
            &field,
            &l.x0,
            &event,
            &cfg.epsilons,
            cfg.trials,
            cfg.n_steps,
            derive_seed(cfg.seed, "ldp"),
            &opts,
        )?;
        w.put("ldp.csv", &table.to_csv())?;
        w.put("ldp_reports.json", &(serde_json::to_string_pretty(&table.reports).unwrap() + "\n"))?;
    }
    if let Some(c) = &s.condition_i {
        check_dim("condition_i.x", &c.x, d)?;
        for x in &c.x_seq {
            check_dim("condition_i.x_seq entry", x, d)?;
        }
        let h = build_control(c.control.as_ref(), &field, cfg.n_steps)?;
        let osc = Oscillation {
            amplitude: c.amplitude,
            direction: c.direction.clone(),
        };
        let table = condition_i_study(&field, &c.x, &c.x_seq, &h, &c.freqs, &osc, cfg.n_steps)?;
        w.put("condition_i.csv", &table.to_csv())?;
    }
    if let Some(c) = &s.condition_ii {
        for x in &c.x_grid {
            check_dim("condition_ii.x_grid entry", x, d)?;
        }
        if cfg.epsilons.is_empty() {
            return Err(Failure::usage("condition_ii study needs epsilons"));
        }
        let h = build_control(c.control.as_ref(), &field, cfg.n_steps)?;
        let table = condition_ii_study(
            &field,
            &cfg.epsilons,
            &c.x_grid,
            &h,
            cfg.n_steps,
            c.repeats,
            derive_seed(cfg.seed, "condition_ii"),
        )?;
        w.put("condition_ii.csv", &table.to_csv())?;
    }
    Ok(w.done(true))
}

pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<Outcome, Failure> {
    let (field, _) = build_system(cfg)?;
    let s = cfg.simulate.as_ref().ok_or_else(|| Failure::usage("config has no simulate block"))?;
    check_dim("simulate.x0", &s.x0, field.dim_state())?;
    let eps = s
        .epsilon
        .or_else(|| cfg.epsilons.first().copied())
        .ok_or_else(|| Failure::usage("simulate needs epsilon or epsilons"))?;
    let seed = derive_seed(cfg.seed, "simulate");
    let control = match &s.control {
        Some(c) => Some(build_control(Some(c), &field, cfg.n_steps)?),
        None => None,
    };
    let mut w = Writer::new(out)?;
    for i in 0..s.trajectories {
        let traj = match &control {
            Some(h) => simulate_controlled(&field, eps, &s.x0, h, cfg.n_steps, seed, i)?,
            None => simulate_sde(&field, eps, &s.x0, cfg.n_steps, seed, i)?,
        };
        w.put(&format!("trajectory_{i}.csv"), &traj.to_csv())?;
        w.put(&format!("trajectory_{i}.json"), &(traj.meta_json() + "\n"))?;
    }
    Ok(w.done(true))
}
