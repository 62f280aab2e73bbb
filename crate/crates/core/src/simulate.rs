//! Seeded trajectory generation.
//!
//! Every trajectory owns an independent ChaCha8 stream seeded from a 64-bit
//! value, so simulations are reproducible bit-for-bit and can be generated in
//! parallel without coordination.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, SsidError};
use crate::linalg::{cholesky_lower, covariance_factor};
use crate::model::SteadyKalman;
use crate::structmats::HankelParams;

/// Innovations and filter states recorded alongside the outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterDiagnostics {
    /// `m × N̄`, column `k` is `e_k`.
    pub e: DMatrix<f64>,
    /// `n × (N̄ + 1)`, column `k` is `x̂_k`; column 0 is zero.
    pub xhat: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `m × N̄`, column `k` is `y_k`.
    pub y: DMatrix<f64>,
    pub diagnostics: Option<FilterDiagnostics>,
    pub seed: u64,
}

impl Trajectory {
    /// Outputs only, e.g. loaded from a CSV file.
    pub fn from_outputs(y: DMatrix<f64>) -> Self {
        Trajectory { y, diagnostics: None, seed: 0 }
    }

    pub fn len(&self) -> usize {
        self.y.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.y.ncols() == 0
    }

    pub fn m(&self) -> usize {
        self.y.nrows()
    }

    /// Writes `k, y_1, ..., y_m` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["k".to_string()];
        header.extend((1..=self.m()).map(|i| format!("y_{i}")));
        wtr.write_record(&header)?;
        for k in 0..self.len() {
            let mut row = vec![k.to_string()];
            row.extend(self.y.column(k).iter().map(|v| v.to_string()));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads the format produced by [`Trajectory::write_csv`]. Rows must be
    /// in time order starting at `k = 0`.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let m = rdr.headers()?.len().saturating_sub(1);
        if m == 0 {
            return Err(SsidError::Config("trajectory CSV needs at least one output column".into()));
        }
        let mut data = Vec::new();
        for (row_idx, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let k: usize = rec[0]
                .trim()
                .parse()
                .map_err(|_| SsidError::Config(format!("row {row_idx}: bad time index")))?;
            if k != row_idx {
                return Err(SsidError::Config(format!("row {row_idx}: expected k = {row_idx}, got {k}")));
            }
            for i in 1..=m {
                let v: f64 = rec
                    .get(i)
                    .ok_or_else(|| SsidError::Config(format!("row {row_idx}: missing column {i}")))?
                    .trim()
                    .parse()
                    .map_err(|_| SsidError::Config(format!("row {row_idx}: bad value in column {i}")))?;
                data.push(v);
            }
        }
        let nbar = data.len() / m;
        Ok(Trajectory::from_outputs(DMatrix::from_column_slice(m, nbar, &data)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimConfig {
    /// Total number of output samples `N̄`.
    pub nbar: usize,
    pub seed: u64,
}

impl SimConfig {
    /// `N̄ = N + p + f − 1` samples, enough for `N` regression columns.
    pub fn for_samples(n_cols: usize, hp: &HankelParams, seed: u64) -> Self {
        SimConfig { nbar: n_cols + hp.p + hp.f - 1, seed }
    }
}

/// SplitMix64 finalizer; used to derive independent per-trial seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for a cell of an experiment, a pure function of its coordinates.
pub fn derive_seed(master: u64, coords: &[u64]) -> u64 {
    coords.iter().fold(mix64(master), |acc, &c| mix64(acc ^ mix64(c)))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn fill_normal<R: Rng>(rng: &mut R, z: &mut DVector<f64>) {
    for v in z.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}

/// Samples the innovation form directly: `e_k = L z_k` with `L Lᵀ = R̄`.
pub fn simulate_innovation(kf: &SteadyKalman, cfg: &SimConfig) -> Result<Trajectory> {
    let (n, m) = (kf.n(), kf.m());
    let l = cholesky_lower(kf.rbar(), "Rbar")?;
    let mut rng = rng_from_seed(cfg.seed);
    let mut z = DVector::zeros(m);
    let mut y = DMatrix::zeros(m, cfg.nbar);
    let mut e = DMatrix::zeros(m, cfg.nbar);
    let mut xhat = DMatrix::zeros(n, cfg.nbar + 1);
    for k in 0..cfg.nbar {
        fill_normal(&mut rng, &mut z);
        let ek = &l * &z;
        let xk = xhat.column(k).clone_owned();
        y.set_column(k, &(kf.c() * &xk + &ek));
        xhat.set_column(k + 1, &(kf.a() * &xk + kf.k() * &ek));
        e.set_column(k, &ek);
    }
    Ok(Trajectory { y, diagnostics: Some(FilterDiagnostics { e, xhat }), seed: cfg.seed })
}

/// Samples the generative model with `x₀ ~ N(0, P)` and reconstructs the
/// innovations by running the steady-state filter on the outputs.
pub fn simulate_statespace(kf: &SteadyKalman, cfg: &SimConfig) -> Result<Trajectory> {
    let ss = kf.base();
    let (n, m) = (ss.n(), ss.m());
    let lq = covariance_factor(ss.q(), "Q")?;
    let lr = cholesky_lower(ss.r(), "R")?;
    let lp = cholesky_lower(kf.p(), "P")?;
    let mut rng = rng_from_seed(cfg.seed);
    let mut zn = DVector::zeros(n);
    let mut zm = DVector::zeros(m);
    fill_normal(&mut rng, &mut zn);
    let mut x = &lp * &zn;
    let mut y = DMatrix::zeros(m, cfg.nbar);
    for k in 0..cfg.nbar {
        fill_normal(&mut rng, &mut zm);
        y.set_column(k, &(ss.c() * &x + &lr * &zm));
        fill_normal(&mut rng, &mut zn);
        x = ss.a() * &x + &lq * &zn;
    }
    let diagnostics = run_filter(kf, &y)?;
    Ok(Trajectory { y, diagnostics: Some(diagnostics), seed: cfg.seed })
}

/// Runs the steady-state filter from `x̂₀ = 0` over the columns of `y`.
pub fn run_filter(kf: &SteadyKalman, y: &DMatrix<f64>) -> Result<FilterDiagnostics> {
    if y.nrows() != kf.m() {
        return Err(SsidError::DimensionMismatch(format!(
            "outputs have {} rows, model has m = {}",
            y.nrows(),
            kf.m()
        )));
    }
    let nbar = y.ncols();
    let mut e = DMatrix::zeros(kf.m(), nbar);
    let mut xhat = DMatrix::zeros(kf.n(), nbar + 1);
    for k in 0..nbar {
        let xk = xhat.column(k).clone_owned();
        let ek = y.column(k) - kf.c() * &xk;
        xhat.set_column(k + 1, &(kf.a() * &xk + kf.k() * &ek));
        e.set_column(k, &ek);
    }
    Ok(FilterDiagnostics { e, xhat })
}
