use std::fs;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use super::sweep::{sweep, SweepResult};
use super::ExperimentConfig;
use crate::bounds::{hankel_error_bound, martingale_bound, BoundReport};
use crate::error::{Result, SsidError};
use crate::simulate::{derive_seed, rng_from_seed};

/// Seed-space tag separating the martingale runs from the sweep cells.
const MARTINGALE_TAG: u64 = 0x6d61_7274;

/// Scalar self-normalized martingale experiment: `X_t = a X_{t−1} + η_{t−1}`
/// is predictable, `η_t` is standard normal, `r = m = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MartingaleConfig {
    pub t_max: usize,
    pub seeds: usize,
    pub delta: f64,
    pub ar_coef: f64,
    /// Regularizer `V`.
    pub v: f64,
    pub master_seed: u64,
}

impl Default for MartingaleConfig {
    fn default() -> Self {
        MartingaleConfig { t_max: 500, seeds: 2000, delta: 0.1, ar_coef: 0.9, v: 1.0, master_seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MartingaleReport {
    pub config: MartingaleConfig,
    /// Runs in which the bound failed at some `t ≤ t_max`.
    pub violations: usize,
    pub frequency: f64,
    /// Binomial standard error at the nominal rate `δ`.
    pub std_err: f64,
    /// `δ + 3·SE`.
    pub limit: f64,
    pub pass: bool,
    /// Largest observed ratio of statistic to bound.
    pub max_ratio: f64,
}

/// Returns (violated, max ratio) for one run.
fn martingale_run(mc: &MartingaleConfig, seed: u64) -> Result<(bool, f64)> {
    let mut rng = rng_from_seed(seed);
    let v = DMatrix::from_element(1, 1, mc.v);
    let mut x: f64 = StandardNormal.sample(&mut rng);
    let (mut s, mut vbar) = (0.0, mc.v);
    let mut violated = false;
    let mut max_ratio: f64 = 0.0;
    for _ in 0..mc.t_max {
        let eta: f64 = StandardNormal.sample(&mut rng);
        s += x * eta;
        vbar += x * x;
        let stat = s * s / vbar;
        let bound = martingale_bound(1, 1, mc.delta, &v, &DMatrix::from_element(1, 1, vbar))?;
        violated |= stat > bound;
        max_ratio = max_ratio.max(stat / bound);
        x = mc.ar_coef * x + eta;
    }
    Ok((violated, max_ratio))
}

pub fn martingale_experiment(mc: &MartingaleConfig) -> Result<MartingaleReport> {
    if !(mc.delta > 0.0 && mc.delta < 1.0) || mc.seeds == 0 || !(mc.v > 0.0) {
        return Err(SsidError::Config("martingale experiment needs delta in (0,1), seeds >= 1, v > 0".into()));
    }
    let runs: Vec<(bool, f64)> = (0..mc.seeds as u64)
        .into_par_iter()
        .map(|i| martingale_run(mc, derive_seed(mc.master_seed, &[MARTINGALE_TAG, i])))
        .collect::<Result<_>>()?;
    let violations = runs.iter().filter(|r| r.0).count();
    let frequency = violations as f64 / mc.seeds as f64;
    let std_err = (mc.delta * (1.0 - mc.delta) / mc.seeds as f64).sqrt();
    let limit = mc.delta + 3.0 * std_err;
    Ok(MartingaleReport {
        config: *mc,
        violations,
        frequency,
        std_err,
        limit,
        pass: frequency <= limit,
        max_ratio: runs.iter().map(|r| r.1).fold(0.0, f64::max),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridCoverage {
    pub n_samples: u64,
    pub p: usize,
    pub trials: usize,
    /// Fraction with `err_g` below the full-form envelope.
    pub coverage_freq: f64,
    /// `1 − δ_N − 6δ`, clamped.
    pub coverage_floor: f64,
    pub coverage_std_err: f64,
    pub coverage_ok: bool,
    pub pe_both_freq: f64,
    pub pe_margin_freq: f64,
    /// `1 − δ_N − 2δ`, clamped.
    pub pe_floor: f64,
    pub pe_std_err: f64,
    pub pe_ok: bool,
    pub above_thresholds: bool,
    pub bound: BoundReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoverageReport {
    pub grid: Vec<GridCoverage>,
    pub martingale: MartingaleReport,
    #[serde(skip)]
    pub sweep: SweepResult,
}

impl CoverageReport {
    pub fn all_ok(&self) -> bool {
        self.grid.iter().all(|g| g.coverage_ok && g.pe_ok) && self.martingale.pass
    }
}

fn binomial_se(p: f64, trials: usize) -> f64 {
    (p * (1.0 - p) / trials.max(1) as f64).sqrt()
}

/// Coverage of the regression envelope and the excitation events over a
/// sweep, plus the martingale sub-experiment.
pub fn verify_bounds(cfg: &ExperimentConfig, jobs: Option<usize>) -> Result<CoverageReport> {
    let exp = cfg.resolve()?;
    let result = sweep(cfg, jobs)?;
    let mut grid = Vec::with_capacity(result.grid.len());
    for g in &result.grid {
        let bound = hankel_error_bound(&exp.bound_inputs(g.n_samples), false)?;
        let coverage_floor = bound.total_probability;
        let raw_pe = 1.0 - bound.delta_n - 2.0 * cfg.delta;
        let pe_floor = raw_pe.clamp(0.0, 1.0);
        let pe_std_err = binomial_se(pe_floor, g.trials);
        grid.push(GridCoverage {
            n_samples: g.n_samples,
            p: g.p,
            trials: g.trials,
            coverage_freq: g.coverage_freq,
            coverage_floor,
            coverage_std_err: binomial_se(coverage_floor, g.trials),
            coverage_ok: g.coverage_freq >= coverage_floor,
            pe_both_freq: g.pe_both_freq,
            pe_margin_freq: g.pe_margin_nonneg_freq,
            pe_floor,
            pe_std_err,
            pe_ok: g.pe_both_freq >= pe_floor - 3.0 * pe_std_err,
            above_thresholds: bound.above_thresholds(),
            bound,
        });
    }
    let martingale =
        martingale_experiment(&MartingaleConfig { master_seed: cfg.master_seed, ..MartingaleConfig::default() })?;
    let report = CoverageReport { grid, martingale, sweep: result };
    if let Some(dir) = cfg.output_dir.as_deref() {
        fs::write(dir.join("coverage.json"), serde_json::to_string_pretty(&report).expect("report serializes"))?;
    }
    Ok(report)
}
