//! Estimation error up to similarity, and the excitation events on
//! simulated data.

use nalgebra::{Complex, DMatrix};
use serde::Serialize;

use crate::bounds::sigma_e_matrix;
use crate::error::{Result, SsidError};
use crate::identify::{balanced_realization, Realization, RealizationOptions};
use crate::linalg::{eigenvalues, norm2, sym_min_eig, symmetrize, ThinSvd};
use crate::model::SteadyKalman;
use crate::structmats::{hankel_true, observability_of, toeplitz_of, DataMatrices, HankelParams};

/// Relative tolerance for the semidefiniteness checks, scaled by `‖Y₋Y₋ᵀ‖₂`.
pub const PE_TOL: f64 = 1e-8;

/// Above this order the spectrum matching falls back to a greedy pairing.
const EXACT_MATCHING_MAX: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorRecord {
    pub err_g: f64,
    pub err_a: f64,
    pub err_c: f64,
    pub err_k: f64,
    pub err_markov: f64,
    pub err_spectrum: f64,
    pub pe_y: Option<bool>,
    pub pe_e: Option<bool>,
    pub pe_margin: Option<f64>,
}

impl ErrorRecord {
    pub fn with_pe(mut self, pe: &PeEvents) -> Self {
        self.pe_y = Some(pe.pe_y);
        self.pe_e = Some(pe.pe_e);
        self.pe_margin = Some(pe.pe_margin);
        self
    }
}

/// Balanced realization of the exact `G = 𝒪_f 𝒦_p`.
pub fn reference_realization(kf: &SteadyKalman, hp: &HankelParams) -> Result<Realization> {
    let g = hankel_true(kf, hp);
    balanced_realization(&g, kf.n(), kf.m(), hp, &RealizationOptions::default())
}

/// Orthonormal `T` minimizing `‖x − y T‖_F`: `T = U Vᵀ` from the SVD of `yᵀx`.
pub fn procrustes_align(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.shape() != y.shape() {
        return Err(SsidError::DimensionMismatch(format!(
            "Procrustes operands are {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let svd = ThinSvd::new(&(y.transpose() * x))?;
    Ok(&svd.u * &svd.vt)
}

/// Minimum total cost `Σ |λᵢ − λ̂_{π(i)}|` over perfect matchings `π`.
pub fn spectrum_distance(a: &[Complex<f64>], b: &[Complex<f64>]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(SsidError::DimensionMismatch(format!(
            "spectra have {} and {} eigenvalues",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n == 0 {
        return Ok(0.0);
    }
    let cost = |i: usize, j: usize| (a[i] - b[j]).norm();
    if n > EXACT_MATCHING_MAX {
        let mut used = vec![false; n];
        let mut total = 0.0;
        for i in 0..n {
            let (j, c) = (0..n)
                .filter(|&j| !used[j])
                .map(|j| (j, cost(i, j)))
                .min_by(|x, y| x.1.total_cmp(&y.1))
                .expect("a free column remains");
            used[j] = true;
            total += c;
        }
        return Ok(total);
    }
    // dp[mask]: best cost assigning the first popcount(mask) rows to `mask`.
    let mut dp = vec![f64::INFINITY; 1 << n];
    dp[0] = 0.0;
    for mask in 0usize..(1 << n) {
        let i = mask.count_ones() as usize;
        if i == n || !dp[mask].is_finite() {
            continue;
        }
        for j in 0..n {
            if mask & (1 << j) == 0 {
                let next = mask | (1 << j);
                let c = dp[mask] + cost(i, j);
                if c < dp[next] {
                    dp[next] = c;
                }
            }
        }
    }
    Ok(dp[(1 << n) - 1])
}

/// Errors of `est` against the reference realization, aligned on the
/// observability factors. PE fields are left unset.
pub fn error_metrics(
    est: &Realization,
    reference: &Realization,
    ghat: &DMatrix<f64>,
    g: &DMatrix<f64>,
) -> Result<ErrorRecord> {
    if est.n() != reference.n() || est.m != reference.m || est.hp != reference.hp {
        return Err(SsidError::DimensionMismatch(format!(
            "estimate (n={}, m={}, p={}, f={}) vs reference (n={}, m={}, p={}, f={})",
            est.n(),
            est.m,
            est.hp.p,
            est.hp.f,
            reference.n(),
            reference.m,
            reference.hp.p,
            reference.hp.f
        )));
    }
    if ghat.shape() != g.shape() {
        return Err(SsidError::DimensionMismatch(format!(
            "G-hat is {:?}, G is {:?}",
            ghat.shape(),
            g.shape()
        )));
    }
    let t = procrustes_align(&est.obs_f, &reference.obs_f)?;
    let err_a = norm2(&(&est.ahat - t.transpose() * &reference.ahat * &t));
    let err_c = norm2(&(&est.chat - &reference.chat * &t));
    let err_k = norm2(&(&est.khat - t.transpose() * &reference.khat));
    let err_g = norm2(&(ghat - g));

    let mut err_markov: f64 = 0.0;
    let mut pe = DMatrix::identity(est.n(), est.n());
    let mut pr = DMatrix::identity(est.n(), est.n());
    for _ in 0..=est.hp.f + est.hp.p {
        let me = &est.chat * &pe * &est.khat;
        let mr = &reference.chat * &pr * &reference.khat;
        err_markov = err_markov.max(norm2(&(me - mr)));
        pe = &pe * &est.ahat;
        pr = &pr * &reference.ahat;
    }
    let err_spectrum = spectrum_distance(&eigenvalues(&est.ahat)?, &eigenvalues(&reference.ahat)?)?;
    Ok(ErrorRecord {
        err_g,
        err_a,
        err_c,
        err_k,
        err_markov,
        err_spectrum,
        pe_y: None,
        pe_e: None,
        pe_margin: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PeEvents {
    pub pe_y: bool,
    pub pe_e: bool,
    /// `λ_min(Y₋Y₋ᵀ) − N σ_E / 4`.
    pub pe_margin: f64,
    pub gram_min_eig: f64,
    /// Absolute tolerance actually used: `tol · ‖Y₋Y₋ᵀ‖₂`.
    pub abs_tol: f64,
    pub sigma_e: f64,
}

impl PeEvents {
    pub fn both(&self) -> bool {
        self.pe_y && self.pe_e
    }
}

fn diagnostics(dm: &DataMatrices) -> Result<(&DMatrix<f64>, &DMatrix<f64>)> {
    match (&dm.eminus, &dm.xhat_block) {
        (Some(e), Some(x)) => Ok((e, x)),
        _ => Err(SsidError::MissingDiagnostics),
    }
}

/// Noise and output excitation events. `tol` is relative to `‖Y₋Y₋ᵀ‖₂`.
pub fn pe_events(dm: &DataMatrices, kf: &SteadyKalman, hp: &HankelParams, tol: f64) -> Result<PeEvents> {
    let (eminus, xhat) = diagnostics(dm)?;
    let n = dm.n() as f64;
    let tp = toeplitz_of(kf, hp.p);
    let op = observability_of(kf, hp.p);
    let (sigma, sigma_e) = sigma_e_matrix(kf, hp.p);

    let gram = symmetrize(&(&dm.yminus * dm.yminus.transpose()));
    let abs_tol = tol * norm2(&gram);
    let te = &tp * eminus;
    let noise = symmetrize(&(&te * te.transpose()));
    let ox = &op * xhat;
    let state = symmetrize(&(&ox * ox.transpose()));

    let pe_e = sym_min_eig(&(&noise - &sigma * (n / 2.0))) >= -abs_tol;
    let pe_y = sym_min_eig(&(&gram - &state * 0.5 - &noise * 0.5)) >= -abs_tol;
    let gram_min_eig = sym_min_eig(&gram);
    Ok(PeEvents {
        pe_y,
        pe_e,
        pe_margin: gram_min_eig - n * sigma_e / 4.0,
        gram_min_eig,
        abs_tol,
        sigma_e,
    })
}

/// `(‖𝒯_pE₋E₋ᵀ𝒯_pᵀ(Y₋Y₋ᵀ)⁻¹‖₂, ‖𝒯_pE₋X̂ᵀ𝒪_pᵀ(Y₋Y₋ᵀ)⁻¹‖₂)`.
pub fn truncation_diagnostic(dm: &DataMatrices, kf: &SteadyKalman, hp: &HankelParams) -> Result<(f64, f64)> {
    let (eminus, xhat) = diagnostics(dm)?;
    let tp = toeplitz_of(kf, hp.p);
    let op = observability_of(kf, hp.p);
    let gram = symmetrize(&(&dm.yminus * dm.yminus.transpose()));
    let chol = nalgebra::Cholesky::new(gram).ok_or(SsidError::SingularGram)?;
    let te = &tp * eminus;
    let noise = &te * te.transpose();
    let cross = &te * xhat.transpose() * op.transpose();
    // M G⁻¹ = (G⁻¹ Mᵀ)ᵀ for symmetric G.
    let first = chol.solve(&noise.transpose()).transpose();
    let second = chol.solve(&cross.transpose()).transpose();
    Ok((norm2(&first), norm2(&second)))
}
