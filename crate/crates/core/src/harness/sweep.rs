use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{version_string, Experiment, ExperimentConfig, PRule, SimulationMode};
use crate::bounds::envelope_terms;
use crate::error::{Result, SsidError};
use crate::identify::{identify_from_data, IdentifyOptions};
use crate::metrics::{
    error_metrics, pe_events, reference_realization, truncation_diagnostic, ErrorRecord, PeEvents, PE_TOL,
};
use crate::simulate::{derive_seed, rng_from_seed, simulate_innovation, simulate_statespace, SimConfig};
use crate::structmats::{build_data_matrices, hankel_true};

pub const TRIAL_CSV_HEADER: [&str; 14] = [
    "N",
    "trial",
    "seed",
    "err_g",
    "err_a",
    "err_c",
    "err_k",
    "err_markov",
    "err_spectrum",
    "pe_y",
    "pe_e",
    "pe_margin",
    "bound_total",
    "status",
];

/// Grid points below this success rate are left out of the slope fit.
const SLOPE_MIN_SUCCESS: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Ok,
    RankGapWarning,
    Failed { kind: String, message: String },
}

impl TrialStatus {
    pub fn tag(&self) -> String {
        match self {
            TrialStatus::Ok => "ok".into(),
            TrialStatus::RankGapWarning => "rank_gap_warning".into(),
            TrialStatus::Failed { kind, .. } => format!("failed:{kind}"),
        }
    }

    pub fn succeeded(&self) -> bool {
        !matches!(self, TrialStatus::Failed { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub n_samples: u64,
    pub trial: u64,
    pub seed: u64,
    pub p: usize,
    pub status: TrialStatus,
    pub record: Option<ErrorRecord>,
    pub pe: Option<PeEvents>,
    /// Truncation diagnostic pair, when the Gram matrix is invertible.
    pub truncation: Option<(f64, f64)>,
    /// Full-form regression envelope at this `N`.
    pub bound_total: f64,
}

impl TrialOutcome {
    pub fn covered(&self) -> bool {
        self.record.as_ref().is_some_and(|r| r.err_g <= self.bound_total)
    }

    pub fn csv_row(&self) -> Vec<String> {
        let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let flag = |v: Option<bool>| v.map(|x| x.to_string()).unwrap_or_default();
        let r = self.record.as_ref();
        vec![
            self.n_samples.to_string(),
            self.trial.to_string(),
            self.seed.to_string(),
            num(r.map(|r| r.err_g)),
            num(r.map(|r| r.err_a)),
            num(r.map(|r| r.err_c)),
            num(r.map(|r| r.err_k)),
            num(r.map(|r| r.err_markov)),
            num(r.map(|r| r.err_spectrum)),
            flag(self.pe.map(|p| p.pe_y)),
            flag(self.pe.map(|p| p.pe_e)),
            num(self.pe.map(|p| p.pe_margin)),
            self.bound_total.to_string(),
            self.status.tag(),
        ]
    }
}

/// One Monte Carlo cell. Stage failures are recorded in the status, never
/// propagated.
pub fn run_trial(exp: &Experiment, n_samples: u64, trial: u64) -> TrialOutcome {
    let hp = exp.hankel_params(n_samples);
    let seed = derive_seed(exp.cfg.master_seed, &[n_samples, trial]);
    let bound_total = envelope_terms(&exp.bound_inputs(n_samples), false)
        .map(|t| t.cross + t.truncation)
        .unwrap_or(f64::NAN);
    let mut out = TrialOutcome {
        n_samples,
        trial,
        seed,
        p: hp.p,
        status: TrialStatus::Ok,
        record: None,
        pe: None,
        truncation: None,
        bound_total,
    };
    let fail = |out: &mut TrialOutcome, e: SsidError| {
        out.status = TrialStatus::Failed { kind: e.kind().to_string(), message: e.to_string() };
    };

    let sim = SimConfig::for_samples(n_samples as usize, &hp, seed);
    let traj = match exp.cfg.simulation {
        SimulationMode::Innovation => simulate_innovation(&exp.kf, &sim),
        SimulationMode::StateSpace => simulate_statespace(&exp.kf, &sim),
    };
    let dm = match traj.and_then(|t| build_data_matrices(&t, &hp)) {
        Ok(dm) => dm,
        Err(e) => {
            fail(&mut out, e);
            return out;
        }
    };
    match pe_events(&dm, &exp.kf, &hp, PE_TOL) {
        Ok(pe) => out.pe = Some(pe),
        Err(e) => {
            fail(&mut out, e);
            return out;
        }
    }
    out.truncation = truncation_diagnostic(&dm, &exp.kf, &hp).ok();

    let opts = IdentifyOptions { ridge: exp.cfg.ridge, ..Default::default() };
    let res = identify_from_data(&dm, exp.kf.n(), &opts).and_then(|(he, est)| {
        let reference = reference_realization(&exp.kf, &hp)?;
        let rec = error_metrics(&est, &reference, &he.ghat, &hankel_true(&exp.kf, &hp))?;
        Ok((rec, est.rank_gap_warning))
    });
    match res {
        Ok((rec, warn)) => {
            out.record = Some(rec.with_pe(out.pe.as_ref().expect("set above")));
            if warn {
                out.status = TrialStatus::RankGapWarning;
            }
        }
        Err(e) => fail(&mut out, e),
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Quantiles {
    pub q10: f64,
    pub median: f64,
    pub q90: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

impl Quantiles {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let mut v: Vec<f64> = values.into_iter().filter(|x| !x.is_nan()).collect();
        v.sort_by(f64::total_cmp);
        Quantiles { q10: quantile_sorted(&v, 0.1), median: quantile_sorted(&v, 0.5), q90: quantile_sorted(&v, 0.9) }
    }
}

pub fn median(values: impl IntoIterator<Item = f64>) -> f64 {
    Quantiles::of(values).median
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSummary {
    pub n_samples: u64,
    pub p: usize,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub err_g: Quantiles,
    pub err_a: Quantiles,
    pub err_c: Quantiles,
    pub err_k: Quantiles,
    pub err_markov: Quantiles,
    pub err_spectrum: Quantiles,
    /// Fraction of all trials with both excitation events.
    pub pe_both_freq: f64,
    pub pe_margin_nonneg_freq: f64,
    pub bound_total: f64,
    /// Fraction of all trials with `err_g ≤ bound_total`.
    pub coverage_freq: f64,
    pub truncation_noise_median: f64,
    pub truncation_cross_median: f64,
    pub elapsed_secs: f64,
}

impl GridSummary {
    pub fn from_outcomes(n_samples: u64, outcomes: &[TrialOutcome], elapsed_secs: f64) -> Self {
        let trials = outcomes.len();
        let recs: Vec<&ErrorRecord> = outcomes.iter().filter_map(|o| o.record.as_ref()).collect();
        let successes = outcomes.iter().filter(|o| o.status.succeeded()).count();
        let frac = |k: usize| k as f64 / trials.max(1) as f64;
        let q = |get: fn(&ErrorRecord) -> f64| Quantiles::of(recs.iter().map(|r| get(r)));
        GridSummary {
            n_samples,
            p: outcomes.first().map_or(0, |o| o.p),
            trials,
            successes,
            success_rate: frac(successes),
            err_g: q(|r| r.err_g),
            err_a: q(|r| r.err_a),
            err_c: q(|r| r.err_c),
            err_k: q(|r| r.err_k),
            err_markov: q(|r| r.err_markov),
            err_spectrum: q(|r| r.err_spectrum),
            pe_both_freq: frac(outcomes.iter().filter(|o| o.pe.is_some_and(|p| p.both())).count()),
            pe_margin_nonneg_freq: frac(outcomes.iter().filter(|o| o.pe.is_some_and(|p| p.pe_margin >= 0.0)).count()),
            bound_total: outcomes.first().map_or(f64::NAN, |o| o.bound_total),
            coverage_freq: frac(outcomes.iter().filter(|o| o.covered()).count()),
            truncation_noise_median: median(outcomes.iter().filter_map(|o| o.truncation.map(|t| t.0))),
            truncation_cross_median: median(outcomes.iter().filter_map(|o| o.truncation.map(|t| t.1))),
            elapsed_secs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// Least-squares standard error of the slope; `None` with two points.
    pub std_err: Option<f64>,
    pub points: Vec<u64>,
}

/// Ordinary least squares of `log y` on `log N`.
pub fn fit_slope(points: &[(u64, f64)]) -> Option<SlopeFit> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(_, y)| *y > 0.0 && y.is_finite())
        .map(|&(n, y)| ((n as f64).ln(), y.ln()))
        .collect();
    let k = pts.len();
    if k < 2 {
        return None;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k as f64;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let std_err = (k > 2).then(|| {
        let ssr: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
        (ssr / (k - 2) as f64 / sxx).sqrt()
    });
    Some(SlopeFit {
        slope,
        intercept,
        std_err,
        points: points.iter().filter(|(_, y)| *y > 0.0 && y.is_finite()).map(|p| p.0).collect(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub config: ExperimentConfig,
    pub version: String,
    pub p_rule: PRule,
    pub grid: Vec<GridSummary>,
    /// Slope of `log median err_g` against `log N`.
    pub slope: Option<SlopeFit>,
    pub elapsed_secs: f64,
    #[serde(skip)]
    pub trials: Vec<TrialOutcome>,
}

impl SweepResult {
    pub fn outcomes_at(&self, n_samples: u64) -> impl Iterator<Item = &TrialOutcome> {
        self.trials.iter().filter(move |o| o.n_samples == n_samples)
    }

    pub fn write_trials_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(TRIAL_CSV_HEADER)?;
        for o in &self.trials {
            wtr.write_record(o.csv_row())?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn slope_from_grid(grid: &[GridSummary]) -> Option<SlopeFit> {
    let pts: Vec<(u64, f64)> = grid
        .iter()
        .filter(|g| g.success_rate >= SLOPE_MIN_SUCCESS)
        .map(|g| (g.n_samples, g.err_g.median))
        .collect();
    fit_slope(&pts)
}

/// Standard error of the fitted slope by resampling trials within each grid
/// point.
pub fn bootstrap_slope_se(result: &SweepResult, n_boot: usize, seed: u64) -> Option<f64> {
    let mut rng = rng_from_seed(seed);
    let per_n: Vec<(u64, Vec<f64>)> = result
        .grid
        .iter()
        .filter(|g| g.success_rate >= SLOPE_MIN_SUCCESS)
        .map(|g| {
            let errs = result.outcomes_at(g.n_samples).filter_map(|o| o.record.as_ref().map(|r| r.err_g)).collect();
            (g.n_samples, errs)
        })
        .collect();
    let mut slopes = Vec::with_capacity(n_boot);
    for _ in 0..n_boot {
        let pts: Vec<(u64, f64)> = per_n
            .iter()
            .map(|(n, errs)| {
                let sample = (0..errs.len()).map(|_| errs[rng.random_range(0..errs.len())]);
                (*n, median(sample))
            })
            .collect();
        if let Some(fit) = fit_slope(&pts) {
            slopes.push(fit.slope);
        }
    }
    if slopes.len() < 2 {
        return None;
    }
    let mean = slopes.iter().sum::<f64>() / slopes.len() as f64;
    let var = slopes.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (slopes.len() - 1) as f64;
    Some(var.sqrt())
}

fn open_trials_csv(dir: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    fs::create_dir_all(dir)?;
    let mut wtr = csv::Writer::from_writer(BufWriter::new(File::create(dir.join("trials.csv"))?));
    wtr.write_record(TRIAL_CSV_HEADER)?;
    wtr.flush()?;
    Ok(wtr)
}

/// Runs every `(N, trial)` cell. With `output_dir` set, trial rows are
/// flushed after each grid point and a summary JSON is written at the end.
pub fn sweep(cfg: &ExperimentConfig, jobs: Option<usize>) -> Result<SweepResult> {
    let exp = cfg.resolve()?;
    let pool = match jobs {
        Some(j) => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(j.max(1))
                .build()
                .map_err(|e| SsidError::Config(format!("thread pool: {e}")))?,
        ),
        None => None,
    };
    let start = Instant::now();
    let mut writer = cfg.output_dir.as_deref().map(open_trials_csv).transpose()?;
    let mut trials = Vec::with_capacity(cfg.n_grid.len() * cfg.trials);
    let mut grid = Vec::with_capacity(cfg.n_grid.len());
    for &n_samples in &cfg.n_grid {
        let t0 = Instant::now();
        let run = || -> Vec<TrialOutcome> {
            (0..cfg.trials as u64).into_par_iter().map(|t| run_trial(&exp, n_samples, t)).collect()
        };
        let outcomes = match &pool {
            Some(p) => p.install(run),
            None => run(),
        };
        if let Some(w) = writer.as_mut() {
            for o in &outcomes {
                w.write_record(o.csv_row())?;
            }
            w.flush()?;
        }
        grid.push(GridSummary::from_outcomes(n_samples, &outcomes, t0.elapsed().as_secs_f64()));
        trials.extend(outcomes);
    }
    let result = SweepResult {
        config: cfg.clone(),
        version: version_string(),
        p_rule: exp.p_rule,
        slope: slope_from_grid(&grid),
        grid,
        elapsed_secs: start.elapsed().as_secs_f64(),
        trials,
    };
    if let Some(dir) = cfg.output_dir.as_deref() {
        let json = serde_json::to_string_pretty(&result).expect("summary serializes");
        fs::write(dir.join("summary.json"), json)?;
    }
    Ok(result)
}
