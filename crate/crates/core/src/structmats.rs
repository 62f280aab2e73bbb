//! Structured matrices of the innovation model and the batch data matrices.
//!
//! Column `k` of every batch matrix corresponds to regression time `p + k`:
//! `Y₋[:, k]` stacks `y_k .. y_{k+p-1}` and `Y₊[:, k]` stacks
//! `y_{p+k} .. y_{p+k+f-1}`.

use nalgebra::DMatrix;

use crate::error::{Result, SsidError};
use crate::model::SteadyKalman;
use crate::simulate::Trajectory;

/// Past (`p`) and future (`f`) horizons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct HankelParams {
    pub p: usize,
    pub f: usize,
}

impl HankelParams {
    /// Requires `p, f ≥ n + 1`.
    pub fn new(p: usize, f: usize, n: usize) -> Result<Self> {
        if p < n + 1 || f < n + 1 {
            return Err(SsidError::Config(format!(
                "horizons p = {p}, f = {f} must both be at least n + 1 = {}",
                n + 1
            )));
        }
        Ok(HankelParams { p, f })
    }
}

/// Extended observability matrix: block row `i` is `C Aⁱ`.
pub fn observability(a: &DMatrix<f64>, c: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let (m, n) = c.shape();
    let mut out = DMatrix::zeros(m * k, n);
    let mut blk = c.clone();
    for i in 0..k {
        out.view_mut((i * m, 0), (m, n)).copy_from(&blk);
        if i + 1 < k {
            blk = &blk * a;
        }
    }
    out
}

/// Reversed extended controllability matrix of `(A − KC, K)`:
/// `[(A−KC)^{k−1}K, ..., (A−KC)K, K]`.
pub fn controllability_rev(
    a: &DMatrix<f64>,
    gain: &DMatrix<f64>,
    c: &DMatrix<f64>,
    k: usize,
) -> DMatrix<f64> {
    let (n, m) = gain.shape();
    let closed = a - gain * c;
    let mut out = DMatrix::zeros(n, m * k);
    let mut blk = gain.clone();
    for j in 0..k {
        let col = (k - 1 - j) * m;
        out.view_mut((0, col), (n, m)).copy_from(&blk);
        if j + 1 < k {
            blk = &closed * &blk;
        }
    }
    out
}

/// Block lower-triangular Toeplitz matrix of the innovation response:
/// identity on the diagonal, `C A^{i−j−1} K` in block `(i, j)` for `i > j`.
pub fn toeplitz(a: &DMatrix<f64>, c: &DMatrix<f64>, gain: &DMatrix<f64>, s: usize) -> DMatrix<f64> {
    let m = c.nrows();
    let mut out = DMatrix::zeros(m * s, m * s);
    let mut markov = c * gain;
    let eye = DMatrix::<f64>::identity(m, m);
    for i in 0..s {
        out.view_mut((i * m, i * m), (m, m)).copy_from(&eye);
    }
    for d in 1..s {
        for j in 0..s - d {
            let i = j + d;
            out.view_mut((i * m, j * m), (m, m)).copy_from(&markov);
        }
        if d + 1 < s {
            markov = c * crate::linalg::matrix_power(a, d) * gain;
        }
    }
    out
}

pub fn observability_of(kf: &SteadyKalman, k: usize) -> DMatrix<f64> {
    observability(kf.a(), kf.c(), k)
}

pub fn controllability_of(kf: &SteadyKalman, k: usize) -> DMatrix<f64> {
    controllability_rev(kf.a(), kf.k(), kf.c(), k)
}

pub fn toeplitz_of(kf: &SteadyKalman, s: usize) -> DMatrix<f64> {
    toeplitz(kf.a(), kf.c(), kf.k(), s)
}

/// `G = 𝒪_f 𝒦_p`.
pub fn hankel_true(kf: &SteadyKalman, hp: &HankelParams) -> DMatrix<f64> {
    observability_of(kf, hp.f) * controllability_of(kf, hp.p)
}

/// Batch past/future matrices. The diagnostic blocks are present only when
/// the trajectory carries filter diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrices {
    pub yplus: DMatrix<f64>,
    pub yminus: DMatrix<f64>,
    pub eplus: Option<DMatrix<f64>>,
    pub eminus: Option<DMatrix<f64>>,
    /// Columns `x̂₀ .. x̂_{N−1}`.
    pub xhat_block: Option<DMatrix<f64>>,
    /// Columns `x̂_p .. x̂_{N+p−1}`.
    pub xhat_future: Option<DMatrix<f64>>,
    pub n_cols: usize,
    pub hp: HankelParams,
}

impl DataMatrices {
    /// Effective sample count `N`.
    pub fn n(&self) -> usize {
        self.n_cols
    }
}

fn stack(src: &DMatrix<f64>, start: usize, depth: usize, n_cols: usize) -> DMatrix<f64> {
    let m = src.nrows();
    let mut out = DMatrix::zeros(m * depth, n_cols);
    for k in 0..n_cols {
        for i in 0..depth {
            out.view_mut((i * m, k), (m, 1)).copy_from(&src.column(start + k + i));
        }
    }
    out
}

pub fn build_data_matrices(traj: &Trajectory, hp: &HankelParams) -> Result<DataMatrices> {
    let nbar = traj.len();
    let needed = hp.p + hp.f;
    if nbar < needed {
        return Err(SsidError::InsufficientSamples { needed, got: nbar });
    }
    let n_cols = nbar - hp.p - hp.f + 1;
    let yminus = stack(&traj.y, 0, hp.p, n_cols);
    let yplus = stack(&traj.y, hp.p, hp.f, n_cols);
    let (eplus, eminus, xhat_block, xhat_future) = match &traj.diagnostics {
        Some(d) => (
            Some(stack(&d.e, hp.p, hp.f, n_cols)),
            Some(stack(&d.e, 0, hp.p, n_cols)),
            Some(d.xhat.columns(0, n_cols).into_owned()),
            Some(d.xhat.columns(hp.p, n_cols).into_owned()),
        ),
        None => (None, None, None, None),
    };
    Ok(DataMatrices { yplus, yminus, eplus, eminus, xhat_block, xhat_future, n_cols, hp: *hp })
}
