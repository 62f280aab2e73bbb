//! Experiment configuration, built-in systems, and the Monte Carlo drivers.

mod sweep;
mod verify;

use std::path::PathBuf;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bounds::{envelope_terms, BoundInputs};
use crate::error::{Result, SsidError};
use crate::linalg::{matrix_power, norm2};
use crate::model::{solve_dare_default, StateSpace, StateSpaceDoc, SteadyKalman};
use crate::structmats::HankelParams;

pub use sweep::{
    bootstrap_slope_se, fit_slope, run_trial, sweep, GridSummary, Quantiles, SlopeFit, SweepResult, TrialOutcome,
    TrialStatus, TRIAL_CSV_HEADER,
};
pub use verify::{
    martingale_experiment, verify_bounds, CoverageReport, GridCoverage, MartingaleConfig, MartingaleReport,
};

pub const DEFAULT_GRID: [u64; 7] = [250, 500, 1000, 2000, 4000, 8000, 16000];

/// A built-in system with its future horizon and tuned past-horizon rule.
#[derive(Debug, Clone)]
pub struct Preset {
    pub name: &'static str,
    pub description: &'static str,
    pub system: StateSpace,
    pub f: usize,
    pub c_p: f64,
}

pub const PRESET_NAMES: [&str; 2] = ["scalar", "jordan"];

/// Built-in system with `c_p` tuned on the default grid.
pub fn preset(name: &str) -> Result<Preset> {
    let mut pr = preset_untuned(name)?;
    let kf = solve_dare_default(&pr.system)?;
    pr.c_p = tune_c_p(&kf, pr.f, DEFAULT_GRID[DEFAULT_GRID.len() - 1], default_delta(), default_c_universal())?;
    Ok(pr)
}

fn preset_untuned(name: &str) -> Result<Preset> {
    match name {
        "scalar" => Ok(Preset {
            name: "scalar",
            description: "stable scalar system a = 0.9, c = 1, q = r = 1",
            system: StateSpace::scalar(0.9, 1.0, 1.0, 1.0)?,
            f: 2,
            c_p: 0.0,
        }),
        "jordan" => Ok(Preset {
            name: "jordan",
            description: "marginally stable 2x2 Jordan block at 1, C = [1 0], Q = I, R = 1",
            system: StateSpace::new(
                DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
                DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
                DMatrix::identity(2, 2),
                DMatrix::from_element(1, 1, 1.0),
            )?,
            f: 3,
            c_p: 0.0,
        }),
        other => Err(SsidError::Config(format!(
            "unknown preset '{other}' (available: {})",
            PRESET_NAMES.join(", ")
        ))),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemSpec {
    Preset(String),
    Model(StateSpaceDoc),
}

/// Past horizon as a function of the sample count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PRule {
    Fixed(usize),
    /// `p = max(n + 1, ⌈c_p · log N⌉)`.
    Log { c_p: f64 },
}

impl PRule {
    pub fn p_for(&self, n_samples: u64, n: usize) -> usize {
        match *self {
            PRule::Fixed(p) => p,
            PRule::Log { c_p } => (n + 1).max((c_p * (n_samples as f64).ln()).ceil() as usize),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulationMode {
    /// Sample innovations directly.
    #[default]
    Innovation,
    /// Sample process and measurement noise, then filter.
    StateSpace,
}

fn default_grid() -> Vec<u64> {
    DEFAULT_GRID.to_vec()
}
fn default_trials() -> usize {
    100
}
fn default_delta() -> f64 {
    0.01
}
fn default_c_universal() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemSpec,
    #[serde(default = "default_grid")]
    pub n_grid: Vec<u64>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Defaults to the preset's tuned rule, or a rule tuned on the fly for
    /// explicit models.
    #[serde(default)]
    pub p_rule: Option<PRule>,
    /// Defaults to the preset's value, or `n + 1`.
    #[serde(default)]
    pub f: Option<usize>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_c_universal")]
    pub c_universal: f64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub simulation: SimulationMode,
    #[serde(default)]
    pub ridge: f64,
}

impl ExperimentConfig {
    /// Default sweep over a preset.
    pub fn for_preset(name: &str) -> Self {
        ExperimentConfig {
            system: SystemSpec::Preset(name.to_string()),
            n_grid: default_grid(),
            trials: default_trials(),
            p_rule: None,
            f: None,
            delta: default_delta(),
            master_seed: 0,
            c_universal: default_c_universal(),
            output_dir: None,
            simulation: SimulationMode::default(),
            ridge: 0.0,
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| SsidError::Config(format!("experiment config: {e}")))
    }

    /// Validates the configuration and solves the filter once.
    pub fn resolve(&self) -> Result<Experiment> {
        let (system, preset_f, preset_rule) = match &self.system {
            SystemSpec::Preset(name) => {
                let p = preset(name)?;
                (p.system, Some(p.f), Some(PRule::Log { c_p: p.c_p }))
            }
            SystemSpec::Model(doc) => (doc.into_state_space()?, None, None),
        };
        let kf = solve_dare_default(&system)?;
        let (n, m) = (kf.n(), kf.m());
        let f = self.f.or(preset_f).unwrap_or(n + 1);
        if f < n + 1 {
            return Err(SsidError::Config(format!("f = {f} must be at least n + 1 = {}", n + 1)));
        }
        if self.n_grid.is_empty() {
            return Err(SsidError::Config("n_grid is empty".into()));
        }
        if self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SsidError::Config("n_grid must be strictly ascending".into()));
        }
        if self.trials < 1 {
            return Err(SsidError::Config("trials must be at least 1".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(SsidError::Config(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if !(self.c_universal > 0.0) {
            return Err(SsidError::Config("c_universal must be positive".into()));
        }
        if !(self.ridge >= 0.0) {
            return Err(SsidError::Config("ridge must be nonnegative".into()));
        }
        let p_rule = match self.p_rule.or(preset_rule) {
            Some(r) => r,
            None => PRule::Log { c_p: tune_c_p(&kf, f, *self.n_grid.last().unwrap(), self.delta, self.c_universal)? },
        };
        if let PRule::Log { c_p } = p_rule {
            if !(c_p > 0.0) {
                return Err(SsidError::Config(format!("c_p must be positive, got {c_p}")));
            }
        }
        for &big_n in &self.n_grid {
            let p = p_rule.p_for(big_n, n);
            HankelParams::new(p, f, n)?;
            if (big_n as usize) < m * p {
                return Err(SsidError::Config(format!("N = {big_n} is below m * p = {}", m * p)));
            }
        }
        Ok(Experiment { cfg: self.clone(), kf, f, p_rule })
    }
}

/// A validated configuration together with its solved filter.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub kf: SteadyKalman,
    pub f: usize,
    pub p_rule: PRule,
}

impl Experiment {
    pub fn hankel_params(&self, n_samples: u64) -> HankelParams {
        HankelParams { p: self.p_rule.p_for(n_samples, self.kf.n()), f: self.f }
    }

    pub fn bound_inputs(&self, n_samples: u64) -> BoundInputs<'_> {
        BoundInputs {
            kf: &self.kf,
            hp: self.hankel_params(n_samples),
            n_samples,
            delta: self.cfg.delta,
            c_universal: self.cfg.c_universal,
        }
    }
}

/// Smallest `p ≥ n + 1` at which the truncation term of the full-form
/// envelope is below its cross term at `n_max`.
pub fn min_balanced_p(kf: &SteadyKalman, f: usize, n_max: u64, delta: f64, c_universal: f64) -> Result<usize> {
    for p in kf.n() + 1..=kf.n() + 200 {
        let bi = BoundInputs { kf, hp: HankelParams { p, f }, n_samples: n_max, delta, c_universal };
        let t = envelope_terms(&bi, false)?;
        if t.truncation <= t.cross {
            return Ok(p);
        }
    }
    Err(SsidError::Config("no past horizon up to n + 200 balances the envelope terms".into()))
}

/// Smallest `p ≥ n + 1` with `‖(A−KC)^p‖₂ ≤ 1/√n_max`, which keeps the
/// truncation bias below the statistical error across the grid.
pub fn min_bias_p(kf: &SteadyKalman, n_max: u64) -> Result<usize> {
    let closed = kf.closed_loop();
    let target = 1.0 / (n_max as f64).sqrt();
    let mut pow = matrix_power(&closed, kf.n() + 1);
    for p in kf.n() + 1..=kf.n() + 2000 {
        if norm2(&pow) <= target {
            return Ok(p);
        }
        pow = &pow * &closed;
    }
    Err(SsidError::Config("closed loop decays too slowly to pick a past horizon".into()))
}

/// `c_p` such that `⌈c_p log N_max⌉` reaches both [`min_balanced_p`] and
/// [`min_bias_p`].
pub fn tune_c_p(kf: &SteadyKalman, f: usize, n_max: u64, delta: f64, c_universal: f64) -> Result<f64> {
    let p = min_balanced_p(kf, f, n_max, delta, c_universal)?.max(min_bias_p(kf, n_max)?);
    Ok(p as f64 / (n_max as f64).ln())
}

/// `git describe`-style version string, falling back to the package version.
pub fn version_string() -> String {
    let pkg = concat!("v", env!("CARGO_PKG_VERSION"));
    let described = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty());
    match described {
        Some(d) => format!("{pkg}-g{d}"),
        None => pkg.to_string(),
    }
}

