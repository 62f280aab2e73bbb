//! Two-stage stochastic subspace identification.
//!
//! 1. Least-squares regression of future outputs on past outputs gives the
//!    Hankel-like estimate `Ĝ = Y₊Y₋ᵀ(Y₋Y₋ᵀ)⁻¹`.
//! 2. A rank-`n` SVD of `Ĝ` is split into balanced observability and
//!    controllability factors from which `Ĉ`, `K̂` are read off and `Â` is
//!    solved for by least squares on the shift structure of `Ô_f`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Result, SsidError};
use crate::linalg::{pinv, singular_values, ThinSvd};
use crate::serde_mat::row_major;
use crate::simulate::Trajectory;
use crate::structmats::{build_data_matrices, DataMatrices, HankelParams};

/// Gram matrices with `λ_min < PE_FLOOR · N` are rejected when no ridge is used.
pub const PE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct HankelEstimate {
    pub ghat: DMatrix<f64>,
    /// Smallest eigenvalue of the unridged `Y₋Y₋ᵀ`.
    pub gram_min_eig: f64,
    /// Descending singular values of `Ĝ`.
    pub singular_values: Vec<f64>,
}

/// Solves the regression through a QR factorization of `Y₋ᵀ` (augmented with
/// `√ridge·I` rows when `ridge > 0`), which is the same estimator as the normal
/// equations but does not square the condition number of the regressors.
pub fn regress_hankel(dm: &DataMatrices, ridge: f64) -> Result<HankelEstimate> {
    if !(ridge >= 0.0) {
        return Err(SsidError::Config(format!("ridge must be nonnegative, got {ridge}")));
    }
    let n = dm.n();
    let mp = dm.yminus.nrows();
    let mf = dm.yplus.nrows();
    let floor = PE_FLOOR * n as f64;

    let gram_min_eig = if n < mp {
        0.0
    } else {
        let r = dm.yminus.transpose().qr().r();
        let s = singular_values(&r)?;
        let smin = s.iter().cloned().fold(f64::INFINITY, f64::min);
        smin * smin
    };
    if ridge == 0.0 && !(gram_min_eig >= floor) {
        return Err(SsidError::PersistenceFailure { min_eig: gram_min_eig, floor });
    }

    let extra = if ridge > 0.0 { mp } else { 0 };
    let rows = n + extra;
    let mut design = DMatrix::zeros(rows, mp);
    design.view_mut((0, 0), (n, mp)).copy_from(&dm.yminus.transpose());
    let mut rhs = DMatrix::zeros(rows, mf);
    rhs.view_mut((0, 0), (n, mf)).copy_from(&dm.yplus.transpose());
    if extra > 0 {
        let s = ridge.sqrt();
        for i in 0..mp {
            design[(n + i, i)] = s;
        }
    }
    let qr = design.qr();
    let r = qr.r();
    qr.q_tr_mul(&mut rhs);
    let top = rhs.rows(0, mp).into_owned();
    let ghat_t = r.solve_upper_triangular(&top).ok_or(SsidError::SingularGram)?;
    let ghat = ghat_t.transpose();
    if ghat.iter().any(|x| !x.is_finite()) {
        return Err(SsidError::SingularGram);
    }
    let sv = singular_values(&ghat)?;
    Ok(HankelEstimate { ghat, gram_min_eig, singular_values: sv.iter().cloned().collect() })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RealizationOptions {
    /// Warn when `σ_n − σ_{n+1} < gap_floor · σ_1`.
    pub gap_floor: f64,
    /// Singular values of `Ô_f^u` below `pinv_cutoff · σ_max` count as zero.
    pub pinv_cutoff: f64,
}

impl Default for RealizationOptions {
    fn default() -> Self {
        RealizationOptions { gap_floor: 1e-8, pinv_cutoff: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Realization {
    pub ahat: DMatrix<f64>,
    pub chat: DMatrix<f64>,
    pub khat: DMatrix<f64>,
    /// `Ô_f = Û₁Σ̂₁^{1/2}`, `mf × n`.
    pub obs_f: DMatrix<f64>,
    /// `𝒦̂_p = Σ̂₁^{1/2}V̂₁ᵀ`, `n × mp`.
    pub ctrl_p: DMatrix<f64>,
    /// The `n` leading singular values.
    pub sigma1: Vec<f64>,
    /// `σ_{n+1}(Ĝ)`, zero if `Ĝ` has only `n` singular values.
    pub sigma_np1: f64,
    pub rank_gap_warning: bool,
    pub m: usize,
    pub hp: HankelParams,
}

impl Realization {
    pub fn n(&self) -> usize {
        self.ahat.nrows()
    }

    /// `Ĉ Âⁱ K̂`.
    pub fn markov(&self, i: usize) -> DMatrix<f64> {
        &self.chat * crate::linalg::matrix_power(&self.ahat, i) * &self.khat
    }

    /// Upper `m(f−1)` rows of `Ô_f`.
    pub fn obs_upper(&self) -> DMatrix<f64> {
        self.obs_f.rows(0, self.m * (self.hp.f - 1)).into_owned()
    }

    /// Rank-`n` product `Ô_f 𝒦̂_p`.
    pub fn product(&self) -> DMatrix<f64> {
        &self.obs_f * &self.ctrl_p
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        #[derive(Serialize)]
        struct Doc<'a> {
            n: usize,
            m: usize,
            p: usize,
            f: usize,
            #[serde(rename = "A")]
            a: Vec<f64>,
            #[serde(rename = "C")]
            c: Vec<f64>,
            #[serde(rename = "K")]
            k: Vec<f64>,
            obs_f: Vec<f64>,
            ctrl_p: Vec<f64>,
            sigma1: &'a [f64],
            sigma_np1: f64,
            rank_gap_warning: bool,
        }
        serde_json::to_value(Doc {
            n: self.n(),
            m: self.m,
            p: self.hp.p,
            f: self.hp.f,
            a: row_major(&self.ahat),
            c: row_major(&self.chat),
            k: row_major(&self.khat),
            obs_f: row_major(&self.obs_f),
            ctrl_p: row_major(&self.ctrl_p),
            sigma1: &self.sigma1,
            sigma_np1: self.sigma_np1,
            rank_gap_warning: self.rank_gap_warning,
        })
        .expect("realization serializes")
    }
}

/// Balanced realization of an `mf × mp` Hankel-like matrix.
pub fn balanced_realization(
    ghat: &DMatrix<f64>,
    n: usize,
    m: usize,
    hp: &HankelParams,
    opts: &RealizationOptions,
) -> Result<Realization> {
    let (mf, mp) = (m * hp.f, m * hp.p);
    if ghat.shape() != (mf, mp) {
        return Err(SsidError::DimensionMismatch(format!(
            "G is {:?}, expected {mf}x{mp}",
            ghat.shape()
        )));
    }
    if n == 0 || mf.min(mp) < n || m * (hp.f - 1) < n {
        return Err(SsidError::Config(format!(
            "order n = {n} needs min(mf, mp) >= n and m(f-1) >= n (m = {m}, p = {}, f = {})",
            hp.p, hp.f
        )));
    }
    let svd = ThinSvd::new(ghat)?;
    let sqrt_s = svd.s.rows(0, n).map(f64::sqrt);
    let sq = DMatrix::from_diagonal(&sqrt_s);
    let obs_f = svd.u.columns(0, n) * &sq;
    let ctrl_p = &sq * svd.vt.rows(0, n);
    let chat = obs_f.rows(0, m).into_owned();
    let khat = ctrl_p.columns((hp.p - 1) * m, m).into_owned();

    let upper = obs_f.rows(0, m * (hp.f - 1)).into_owned();
    let lower = obs_f.rows(m, m * (hp.f - 1)).into_owned();
    let up_sv = singular_values(&upper)?;
    let sigma_n_up = up_sv[n - 1];
    let cutoff = opts.pinv_cutoff * up_sv[0];
    if !(sigma_n_up > cutoff) || sigma_n_up == 0.0 {
        return Err(SsidError::PinvFailure { sigma_n: sigma_n_up, cutoff });
    }
    let ahat = pinv(&upper, opts.pinv_cutoff)? * lower;

    let sigma1: Vec<f64> = svd.s.iter().take(n).cloned().collect();
    let sigma_np1 = svd.sigma(n);
    let rank_gap_warning = sigma1[n - 1] - sigma_np1 < opts.gap_floor * sigma1[0];
    Ok(Realization {
        ahat,
        chat,
        khat,
        obs_f,
        ctrl_p,
        sigma1,
        sigma_np1,
        rank_gap_warning,
        m,
        hp: *hp,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IdentifyOptions {
    pub ridge: f64,
    pub realization: RealizationOptions,
}

/// Data matrices, regression and realization in one call.
pub fn identify(
    traj: &Trajectory,
    hp: &HankelParams,
    n: usize,
    opts: &IdentifyOptions,
) -> Result<(HankelEstimate, Realization)> {
    let dm = build_data_matrices(traj, hp)?;
    identify_from_data(&dm, n, opts)
}

pub fn identify_from_data(
    dm: &DataMatrices,
    n: usize,
    opts: &IdentifyOptions,
) -> Result<(HankelEstimate, Realization)> {
    let he = regress_hankel(dm, opts.ridge)?;
    let m = dm.yminus.nrows() / dm.hp.p;
    let real = balanced_realization(&he.ghat, n, m, &dm.hp, &opts.realization)?;
    Ok((he, real))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{eigenvalues, norm2};
    use crate::model::{solve_dare_default, StateSpace};
    use crate::simulate::{simulate_innovation, SimConfig};
    use crate::structmats::hankel_true;
    use rand::{Rng, SeedableRng};

    fn dm_from(yminus: DMatrix<f64>, yplus: DMatrix<f64>, p: usize, f: usize) -> DataMatrices {
        DataMatrices {
            n_cols: yminus.ncols(),
            yminus,
            yplus,
            eplus: None,
            eminus: None,
            xhat_block: None,
            xhat_future: None,
            hp: HankelParams { p, f },
        }
    }

    #[test]
    fn noiseless_regression_recovers_exact_map() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let yminus = DMatrix::from_fn(3, 40, |_, _| rng.random::<f64>() - 0.5);
        let map = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 0.25, 0.0, 3.0]);
        let yplus = &map * &yminus;
        let he = regress_hankel(&dm_from(yminus, yplus, 3, 2), 0.0).unwrap();
        assert!((he.ghat - map).amax() < 1e-10);
        assert!(he.gram_min_eig > 0.0);
    }

    #[test]
    fn too_few_columns_is_persistence_failure() {
        let yminus = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 7.0]);
        let yplus = DMatrix::zeros(1, 2);
        let err = regress_hankel(&dm_from(yminus.clone(), yplus.clone(), 3, 1), 0.0).unwrap_err();
        assert!(matches!(err, SsidError::PersistenceFailure { .. }));
        // A ridge makes it solvable and matches the normal equations.
        let he = regress_hankel(&dm_from(yminus.clone(), yplus, 3, 1), 0.5).unwrap();
        assert!(he.ghat.amax() < 1e-15);
        assert_eq!(he.gram_min_eig, 0.0);
    }

    #[test]
    fn ridge_matches_normal_equations() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let yminus = DMatrix::from_fn(2, 30, |_, _| rng.random::<f64>());
        let yplus = DMatrix::from_fn(2, 30, |_, _| rng.random::<f64>());
        let ridge = 0.7;
        let gram = &yminus * yminus.transpose() + DMatrix::identity(2, 2) * ridge;
        let expect = &yplus * yminus.transpose() * gram.try_inverse().unwrap();
        let he = regress_hankel(&dm_from(yminus, yplus, 2, 2), ridge).unwrap();
        assert!((he.ghat - expect).amax() < 1e-12);
    }

    #[test]
    fn exact_hankel_realization_preserves_invariants() {
        let kf = solve_dare_default(&StateSpace::scalar(0.9, 1.0, 1.0, 1.0).unwrap()).unwrap();
        let hp = HankelParams::new(2, 2, 1).unwrap();
        let g = hankel_true(&kf, &hp);
        let real = balanced_realization(&g, 1, 1, &hp, &RealizationOptions::default()).unwrap();
        assert!((real.product() - &g).amax() < 1e-10);
        for i in 0..4 {
            let truth = kf.c() * crate::linalg::matrix_power(kf.a(), i) * kf.k();
            assert!((real.markov(i) - truth).amax() < 1e-8);
        }
        let ev = eigenvalues(&real.ahat).unwrap();
        assert!((ev[0].re - 0.9).abs() < 1e-8);
        assert_eq!(real.chat, real.obs_f.rows(0, 1).into_owned());
        assert_eq!(real.khat, real.ctrl_p.columns(1, 1).into_owned());
        assert!(!real.rank_gap_warning);
    }

    #[test]
    fn rank_deficient_input_warns_or_fails() {
        let hp = HankelParams { p: 3, f: 3 };
        let g = DMatrix::from_fn(3, 3, |i, j| if i == 0 && j == 0 { 1.0 } else { 0.0 });
        let err = balanced_realization(&g, 2, 1, &hp, &RealizationOptions::default());
        assert!(matches!(err, Err(SsidError::PinvFailure { .. })));
        // Equal singular values at the cut: proceed with a warning.
        let g = DMatrix::from_fn(3, 3, |i, j| if i == j { 1.0 } else { 0.0 });
        let hp = HankelParams { p: 3, f: 3 };
        let real = balanced_realization(&g, 1, 1, &hp, &RealizationOptions::default());
        match real {
            Ok(r) => assert!(r.rank_gap_warning),
            Err(e) => assert!(matches!(e, SsidError::PinvFailure { .. })),
        }
    }

    #[test]
    fn pipeline_on_simulated_scalar_system() {
        let kf = solve_dare_default(&StateSpace::scalar(0.9, 1.0, 1.0, 1.0).unwrap()).unwrap();
        let hp = HankelParams::new(2, 2, 1).unwrap();
        let traj = simulate_innovation(&kf, &SimConfig { nbar: 10_003, seed: 2024 }).unwrap();
        let (he, real) = identify(&traj, &hp, 1, &IdentifyOptions::default()).unwrap();
        assert!(norm2(&(&he.ghat - hankel_true(&kf, &hp))) < 0.2);
        let (he2, real2) = identify(&traj, &hp, 1, &IdentifyOptions::default()).unwrap();
        assert_eq!(he, he2);
        assert_eq!(real, real2);

        let short = simulate_innovation(&kf, &SimConfig { nbar: 3, seed: 1 }).unwrap();
        assert!(matches!(
            identify(&short, &hp, 1, &IdentifyOptions::default()),
            Err(SsidError::InsufficientSamples { .. })
        ));
    }
}
