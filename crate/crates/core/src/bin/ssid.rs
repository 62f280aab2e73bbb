use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use ssid::bounds::{hankel_error_bound, BoundInputs};
use ssid::harness::{preset, sweep, verify_bounds, ExperimentConfig, PRESET_NAMES};
use ssid::identify::{identify, IdentifyOptions};
use ssid::metrics::{error_metrics, reference_realization};
use ssid::model::{solve_dare_default, StateSpace};
use ssid::simulate::{simulate_innovation, simulate_statespace, SimConfig, Trajectory};
use ssid::structmats::{hankel_true, HankelParams};
use ssid::SsidError;

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_THRESHOLD: u8 = 3;

#[derive(Parser)]
#[command(name = "ssid", version, about = "Stochastic subspace identification and bound verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct SystemArgs {
    /// System description (JSON with n, m, A, C, Q, R).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in system name.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args, Clone)]
struct ExperimentArgs {
    /// Experiment configuration (JSON).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Run the default sweep of a built-in system.
    #[arg(long)]
    preset: Option<String>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory for CSV and JSON results.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the number of trials per grid point.
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Innovation,
    StateSpace,
}

#[derive(Subcommand)]
enum Command {
    /// Print the steady-state Kalman filter of a system.
    Dare {
        #[command(flatten)]
        sys: SystemArgs,
    },
    /// Emit a simulated output trajectory as CSV.
    Simulate {
        #[command(flatten)]
        sys: SystemArgs,
        /// Number of output samples.
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Mode::Innovation)]
        mode: Mode,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate (A, C, K) from a trajectory CSV or a fresh simulation.
    Identify {
        #[command(flatten)]
        sys: SystemArgs,
        /// Trajectory CSV; simulates from the system when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Regression columns N for a fresh simulation.
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Model order; defaults to the system's.
        #[arg(long)]
        order: Option<usize>,
        #[arg(long)]
        p: Option<usize>,
        #[arg(long)]
        f: Option<usize>,
        #[arg(long, default_value_t = 0.0)]
        ridge: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the regression error envelope with all intermediates.
    Bounds {
        #[command(flatten)]
        sys: SystemArgs,
        #[arg(long, default_value_t = 1000)]
        samples: u64,
        #[arg(long)]
        p: Option<usize>,
        #[arg(long)]
        f: Option<usize>,
        #[arg(long, default_value_t = 0.01)]
        delta: f64,
        #[arg(long, default_value_t = 1.0)]
        c_universal: f64,
        /// Use the simplified cross term.
        #[arg(long)]
        simplified: bool,
    },
    /// Monte Carlo sweep over the sample grid.
    Sweep {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Fail with exit code 3 unless the fitted slope lies in [LO, HI].
        #[arg(long, num_args = 2, value_names = ["LO", "HI"], allow_negative_numbers = true)]
        assert_slope: Option<Vec<f64>>,
    },
    /// Bound coverage, excitation frequencies and the martingale check.
    VerifyBounds {
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// List built-in systems.
    Presets,
}

enum Failure {
    Error(SsidError),
    Threshold(String),
}

impl From<SsidError> for Failure {
    fn from(e: SsidError) -> Self {
        Failure::Error(e)
    }
}

type CliResult = std::result::Result<(), Failure>;

fn read_config(path: &Path) -> Result<String, SsidError> {
    fs::read_to_string(path).map_err(|e| SsidError::Config(format!("{}: {e}", path.display())))
}

fn load_system(sys: &SystemArgs) -> Result<(StateSpace, Option<usize>), SsidError> {
    match (&sys.config, &sys.preset) {
        (Some(path), _) => Ok((StateSpace::from_json_str(&read_config(path)?)?, None)),
        (None, Some(name)) => {
            let p = preset(name)?;
            Ok((p.system, Some(p.f)))
        }
        (None, None) => Err(SsidError::Config("one of --config or --preset is required".into())),
    }
}

fn load_experiment(args: &ExperimentArgs) -> Result<ExperimentConfig, SsidError> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => ExperimentConfig::from_json_str(&read_config(path)?)?,
        (None, Some(name)) => {
            preset(name)?;
            ExperimentConfig::for_preset(name)
        }
        (None, None) => return Err(SsidError::Config("one of --config or --preset is required".into())),
    };
    if let Some(s) = args.seed {
        cfg.master_seed = s;
    }
    if let Some(t) = args.trials {
        cfg.trials = t;
    }
    if let Some(o) = &args.out {
        cfg.output_dir = Some(o.clone());
    }
    Ok(cfg)
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), SsidError> {
    match out {
        Some(path) => fs::write(path, text)?,
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.write_all(b"\n")?;
        }
    }
    Ok(())
}

fn pretty(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("JSON value serializes")
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Dare { sys } => {
            let (ss, _) = load_system(&sys)?;
            let kf = solve_dare_default(&ss)?;
            emit(None, &pretty(&kf.to_json_value()))?;
        }
        Command::Simulate { sys, samples, seed, mode, out } => {
            let (ss, _) = load_system(&sys)?;
            let kf = solve_dare_default(&ss)?;
            let cfg = SimConfig { nbar: samples, seed };
            let traj = match mode {
                Mode::Innovation => simulate_innovation(&kf, &cfg)?,
                Mode::StateSpace => simulate_statespace(&kf, &cfg)?,
            };
            match out {
                Some(path) => traj.write_csv(fs::File::create(path).map_err(SsidError::from)?)?,
                None => traj.write_csv(io::stdout().lock())?,
            }
        }
        Command::Identify { sys, input, samples, seed, order, p, f, ridge, out } => {
            let system = if sys.config.is_some() || sys.preset.is_some() { Some(load_system(&sys)?) } else { None };
            let kf = system.as_ref().map(|(ss, _)| solve_dare_default(ss)).transpose()?;
            let n = order
                .or(kf.as_ref().map(|k| k.n()))
                .ok_or_else(|| SsidError::Config("--order is required without a system".into()))?;
            let f = f.or(system.as_ref().and_then(|s| s.1)).unwrap_or(n + 1);
            let hp = HankelParams::new(p.unwrap_or(n + 1), f, n)?;
            let traj = match (&input, &kf) {
                (Some(path), _) => Trajectory::read_csv(fs::File::open(path).map_err(SsidError::from)?)?,
                (None, Some(kf)) => simulate_innovation(kf, &SimConfig::for_samples(samples, &hp, seed))?,
                (None, None) => return Err(SsidError::Config("--input or a system is required".into()).into()),
            };
            let (he, est) = identify(&traj, &hp, n, &IdentifyOptions { ridge, ..Default::default() })?;
            let mut doc = json!({
                "realization": est.to_json_value(),
                "gram_min_eig": he.gram_min_eig,
                "hankel_singular_values": he.singular_values,
            });
            if let Some(kf) = kf.as_ref().filter(|k| k.m() == traj.m() && k.n() == n) {
                let reference = reference_realization(kf, &hp)?;
                let rec = error_metrics(&est, &reference, &he.ghat, &hankel_true(kf, &hp))?;
                doc["errors"] = serde_json::to_value(rec).expect("record serializes");
            }
            emit(out.as_deref(), &pretty(&doc))?;
        }
        Command::Bounds { sys, samples, p, f, delta, c_universal, simplified } => {
            let (ss, preset_f) = load_system(&sys)?;
            let kf = solve_dare_default(&ss)?;
            let n = kf.n();
            let hp = HankelParams::new(p.unwrap_or(n + 1), f.or(preset_f).unwrap_or(n + 1), n)?;
            let bi = BoundInputs::new(&kf, hp, samples, delta, c_universal)?;
            let report = hankel_error_bound(&bi, simplified)?;
            emit(None, &pretty(&serde_json::to_value(report).expect("report serializes")))?;
        }
        Command::Sweep { exp, assert_slope } => {
            let cfg = load_experiment(&exp)?;
            let result = sweep(&cfg, exp.jobs)?;
            let mut stdout = io::stdout().lock();
            let _ = writeln!(stdout, "{:>8} {:>4} {:>8} {:>12} {:>12} {:>9}", "N", "p", "success", "med err_g", "bound", "coverage");
            for g in &result.grid {
                let _ = writeln!(
                    stdout,
                    "{:>8} {:>4} {:>8.3} {:>12.5e} {:>12.5e} {:>9.3}",
                    g.n_samples, g.p, g.success_rate, g.err_g.median, g.bound_total, g.coverage_freq
                );
            }
            match &result.slope {
                Some(s) => {
                    let se = s.std_err.map_or("n/a".to_string(), |e| format!("{e:.4}"));
                    let _ = writeln!(stdout, "slope {:.4} (se {se})", s.slope);
                }
                None => {
                    let _ = writeln!(stdout, "slope unavailable");
                }
            }
            if let Some(range) = assert_slope {
                let (lo, hi) = (range[0], range[1]);
                match &result.slope {
                    Some(s) if s.slope >= lo && s.slope <= hi => {}
                    Some(s) => return Err(Failure::Threshold(format!("slope {} outside [{lo}, {hi}]", s.slope))),
                    None => return Err(Failure::Threshold("no slope could be fitted".into())),
                }
            }
        }
        Command::VerifyBounds { exp } => {
            let cfg = load_experiment(&exp)?;
            let report = verify_bounds(&cfg, exp.jobs)?;
            let mut stdout = io::stdout().lock();
            let fmt_t = |t: Option<u64>| t.map_or("cap".to_string(), |v| v.to_string());
            for g in &report.grid {
                let _ = writeln!(
                    stdout,
                    "N={} p={} coverage {:.3} (floor {:.3}) pe {:.3} (floor {:.3}) margin>=0 {:.3} N0={} N1={} N2={} above={}",
                    g.n_samples,
                    g.p,
                    g.coverage_freq,
                    g.coverage_floor,
                    g.pe_both_freq,
                    g.pe_floor,
                    g.pe_margin_freq,
                    fmt_t(g.bound.n0),
                    fmt_t(g.bound.n1),
                    fmt_t(g.bound.n2),
                    g.above_thresholds
                );
            }
            let m = &report.martingale;
            let _ = writeln!(
                stdout,
                "martingale: {} / {} violations ({:.4}, limit {:.4}) {}",
                m.violations,
                m.config.seeds,
                m.frequency,
                m.limit,
                if m.pass { "pass" } else { "FAIL" }
            );
            if !report.all_ok() {
                return Err(Failure::Threshold("coverage below its probability floor".into()));
            }
        }
        Command::Presets => {
            let list: Vec<_> = PRESET_NAMES
                .iter()
                .map(|name| {
                    let p = preset(name).expect("built-in preset is valid");
                    json!({
                        "name": p.name,
                        "description": p.description,
                        "f": p.f,
                        "c_p": p.c_p,
                        "system": serde_json::from_str::<serde_json::Value>(&p.system.to_json_string())
                            .expect("system JSON parses"),
                    })
                })
                .collect();
            emit(None, &pretty(&serde_json::Value::Array(list)))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { EXIT_CONFIG } else { EXIT_RUNTIME })
        }
        Err(Failure::Threshold(msg)) => {
            eprintln!("threshold failure: {msg}");
            ExitCode::from(EXIT_THRESHOLD)
        }
    }
}
