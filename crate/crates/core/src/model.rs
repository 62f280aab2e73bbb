//! Generative and innovation-form system models.
//!
//! A [`StateSpace`] is the noise-driven model
//!
//! ```text
//! x[k+1] = A x[k] + w[k],   w ~ N(0, Q)
//! y[k]   = C x[k] + v[k],   v ~ N(0, R)
//! ```
//!
//! and a [`SteadyKalman`] is its innovation form
//!
//! ```text
//! xhat[k+1] = A xhat[k] + K e[k]
//! y[k]      = C xhat[k] + e[k],   e ~ N(0, Rbar),  Rbar = C P Cᵀ + R
//! ```
//!
//! where `P` is the stabilizing solution of the filtering Riccati equation.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SsidError};
use crate::linalg::{
    eigenvalues, norm2, numerical_rank, sym_min_eig, sym_sqrt_psd, symmetrize,
};
use crate::serde_mat::MatrixData;
use crate::structmats::{controllability_rev, observability};

/// Default fixed-point tolerance (spectral norm of one Riccati step).
pub const DARE_TOL: f64 = 1e-12;
pub const DARE_MAX_ITER: usize = 100_000;
/// Consecutive residual increases after which the iteration is declared divergent.
pub const DARE_DIVERGENCE_WINDOW: usize = 200;
/// Relative singular-value cutoff for rank decisions.
pub const RANK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    a: DMatrix<f64>,
    c: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl StateSpace {
    /// Validates dimensions, symmetry, `Q ⪰ 0` and `R ≻ 0`.
    pub fn new(a: DMatrix<f64>, c: DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        let m = c.nrows();
        if n == 0 || m == 0 {
            return Err(SsidError::InvalidModel("n and m must be positive".into()));
        }
        if a.ncols() != n {
            return Err(SsidError::DimensionMismatch(format!("A is {}x{}", n, a.ncols())));
        }
        if c.ncols() != n {
            return Err(SsidError::DimensionMismatch(format!(
                "C is {}x{}, expected {}x{}",
                m,
                c.ncols(),
                m,
                n
            )));
        }
        if q.shape() != (n, n) {
            return Err(SsidError::DimensionMismatch(format!("Q is {:?}, expected {n}x{n}", q.shape())));
        }
        if r.shape() != (m, m) {
            return Err(SsidError::DimensionMismatch(format!("R is {:?}, expected {m}x{m}", r.shape())));
        }
        for (name, mat) in [("A", &a), ("C", &c), ("Q", &q), ("R", &r)] {
            if mat.iter().any(|x| !x.is_finite()) {
                return Err(SsidError::InvalidModel(format!("{name} has non-finite entries")));
            }
        }
        let sym_tol = |x: &DMatrix<f64>| 1e-10 * x.amax().max(1.0);
        if (&q - q.transpose()).amax() > sym_tol(&q) {
            return Err(SsidError::InvalidModel("Q is not symmetric".into()));
        }
        if (&r - r.transpose()).amax() > sym_tol(&r) {
            return Err(SsidError::InvalidModel("R is not symmetric".into()));
        }
        let q = symmetrize(&q);
        let r = symmetrize(&r);
        if sym_min_eig(&q) < -1e-12 * q.amax().max(1.0) {
            return Err(SsidError::InvalidModel("Q is not positive semidefinite".into()));
        }
        if sym_min_eig(&r) <= 0.0 {
            return Err(SsidError::InvalidModel("R is not positive definite".into()));
        }
        Ok(StateSpace { a, c, q, r })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    pub fn m(&self) -> usize {
        self.c.nrows()
    }
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }
    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn scalar(a: f64, c: f64, q: f64, r: f64) -> Result<Self> {
        let s = |x| DMatrix::from_element(1, 1, x);
        StateSpace::new(s(a), s(c), s(q), s(r))
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let doc: StateSpaceDoc = serde_json::from_str(s)?;
        doc.into_state_space()
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&StateSpaceDoc::from(self)).expect("state space serializes")
    }
}

/// JSON document for a [`StateSpace`]: explicit `n`, `m` and row-major matrices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateSpaceDoc {
    pub n: usize,
    pub m: usize,
    #[serde(rename = "A")]
    pub a: MatrixData,
    #[serde(rename = "C")]
    pub c: MatrixData,
    #[serde(rename = "Q")]
    pub q: MatrixData,
    #[serde(rename = "R")]
    pub r: MatrixData,
}

impl StateSpaceDoc {
    pub fn into_state_space(&self) -> Result<StateSpace> {
        let (n, m) = (self.n, self.m);
        StateSpace::new(
            self.a.to_matrix(n, n, "A")?,
            self.c.to_matrix(m, n, "C")?,
            self.q.to_matrix(n, n, "Q")?,
            self.r.to_matrix(m, m, "R")?,
        )
    }
}

impl From<&StateSpace> for StateSpaceDoc {
    fn from(ss: &StateSpace) -> Self {
        StateSpaceDoc {
            n: ss.n(),
            m: ss.m(),
            a: MatrixData::from_matrix(&ss.a),
            c: MatrixData::from_matrix(&ss.c),
            q: MatrixData::from_matrix(&ss.q),
            r: MatrixData::from_matrix(&ss.r),
        }
    }
}

/// Steady-state Kalman filter of a [`StateSpace`].
#[derive(Debug, Clone, PartialEq)]
pub struct SteadyKalman {
    base: StateSpace,
    k: DMatrix<f64>,
    p: DMatrix<f64>,
    rbar: DMatrix<f64>,
}

impl SteadyKalman {
    pub fn base(&self) -> &StateSpace {
        &self.base
    }
    pub fn n(&self) -> usize {
        self.base.n()
    }
    pub fn m(&self) -> usize {
        self.base.m()
    }
    pub fn a(&self) -> &DMatrix<f64> {
        self.base.a()
    }
    pub fn c(&self) -> &DMatrix<f64> {
        self.base.c()
    }
    pub fn k(&self) -> &DMatrix<f64> {
        &self.k
    }
    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }
    pub fn rbar(&self) -> &DMatrix<f64> {
        &self.rbar
    }

    /// Closed-loop matrix `A - K C`.
    pub fn closed_loop(&self) -> DMatrix<f64> {
        self.a() - &self.k * self.c()
    }

    /// `‖P - Ric(P)‖₂` for the stored `P`.
    pub fn riccati_residual(&self) -> f64 {
        let next = riccati_step(&self.base, &self.p).map(|(p, _, _)| p);
        match next {
            Ok(next) => norm2(&(next - &self.p)),
            Err(_) => f64::INFINITY,
        }
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        let cl_rho = spectral_radius(&self.closed_loop()).unwrap_or(f64::NAN);
        serde_json::json!({
            "n": self.n(),
            "m": self.m(),
            "A": crate::serde_mat::row_major(self.a()),
            "C": crate::serde_mat::row_major(self.c()),
            "Q": crate::serde_mat::row_major(self.base.q()),
            "R": crate::serde_mat::row_major(self.base.r()),
            "K": crate::serde_mat::row_major(&self.k),
            "P": crate::serde_mat::row_major(&self.p),
            "Rbar": crate::serde_mat::row_major(&self.rbar),
            "riccati_residual": self.riccati_residual(),
            "closed_loop_spectral_radius": cl_rho,
        })
    }
}

/// One application of the Riccati map. Returns `(Ric(P), K, Rbar)` where `K`
/// and `Rbar` are evaluated at the input `P`.
fn riccati_step(
    ss: &StateSpace,
    p: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let (a, c) = (ss.a(), ss.c());
    let rbar = symmetrize(&(c * p * c.transpose() + ss.r()));
    let chol = nalgebra::Cholesky::new(rbar.clone()).ok_or(SsidError::CholeskyFailure("Rbar"))?;
    // K = A P Cᵀ Rbar⁻¹, computed as (Rbar⁻¹ C P Aᵀ)ᵀ.
    let cpa = c * p * a.transpose();
    let k = chol.solve(&cpa).transpose();
    let next = a * p * a.transpose() + ss.q() - &k * &cpa;
    Ok((symmetrize(&next), k, rbar))
}

/// Solves `P = A P Aᵀ + Q − A P Cᵀ (C P Cᵀ + R)⁻¹ C P Aᵀ` by fixed-point
/// iteration from `P₀ = Q`.
pub fn solve_dare(ss: &StateSpace, tol: f64, max_iter: usize) -> Result<SteadyKalman> {
    let mut p = ss.q().clone();
    let mut prev_residual = f64::INFINITY;
    let mut rising = 0usize;
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let (next, _, _) = riccati_step(ss, &p)?;
        residual = norm2(&(&next - &p));
        p = next;
        if !residual.is_finite() || p.iter().any(|x| !x.is_finite()) {
            return Err(SsidError::NotDetectable("iterate became non-finite".into()));
        }
        if residual <= tol {
            return finish(ss, p);
        }
        if residual > prev_residual {
            rising += 1;
            if rising >= DARE_DIVERGENCE_WINDOW {
                return Err(SsidError::NotDetectable(format!(
                    "residual grew for {rising} consecutive iterations (now {residual:e})"
                )));
            }
        } else {
            rising = 0;
        }
        prev_residual = residual;
    }
    Err(SsidError::NonConvergence { residual, iterations: max_iter })
}

pub fn solve_dare_default(ss: &StateSpace) -> Result<SteadyKalman> {
    solve_dare(ss, DARE_TOL, DARE_MAX_ITER)
}

fn finish(ss: &StateSpace, p: DMatrix<f64>) -> Result<SteadyKalman> {
    let (_, k, rbar) = riccati_step(ss, &p)?;
    if sym_min_eig(&p) <= 0.0 {
        return Err(SsidError::InvalidModel(
            "Riccati solution is not positive definite ((A, Q^1/2) not controllable?)".into(),
        ));
    }
    let kf = SteadyKalman { base: ss.clone(), k, p, rbar };
    let rho = spectral_radius(&kf.closed_loop())?;
    if rho >= 1.0 {
        return Err(SsidError::NotDetectable(format!("closed loop spectral radius {rho}")));
    }
    Ok(kf)
}

/// `max |λᵢ(M)|`.
pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64> {
    Ok(eigenvalues(m)?.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub observable: bool,
    pub q_controllable: bool,
    pub k_controllable: bool,
    pub spectral_radius: f64,
    pub r_pos_def: bool,
    pub marginally_stable: bool,
}

impl AssumptionReport {
    /// Everything the identification analysis relies on.
    pub fn all_hold(&self) -> bool {
        self.observable
            && self.q_controllable
            && self.k_controllable
            && self.r_pos_def
            && self.marginally_stable
    }
}

/// Rank checks use singular values relative to the largest one (`tol`).
pub fn check_assumptions(kf: &SteadyKalman, tol: f64) -> AssumptionReport {
    let n = kf.n();
    let a = kf.a();
    let rank = |m: &DMatrix<f64>| numerical_rank(m, tol).unwrap_or(0);

    let observable = rank(&observability(a, kf.c(), n)) == n;

    let q_half = sym_sqrt_psd(kf.base().q());
    let mut ctrb = DMatrix::zeros(n, n * n);
    let mut blk = q_half;
    for i in 0..n {
        ctrb.view_mut((0, i * n), (n, n)).copy_from(&blk);
        blk = a * blk;
    }
    let q_controllable = rank(&ctrb) == n;

    let k_controllable = rank(&controllability_rev(a, kf.k(), kf.c(), n)) == n;

    let spectral_radius = spectral_radius(a).unwrap_or(f64::NAN);
    AssumptionReport {
        observable,
        q_controllable,
        k_controllable,
        spectral_radius,
        r_pos_def: sym_min_eig(kf.base().r()) > 0.0,
        marginally_stable: spectral_radius <= 1.0 + tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, v)
    }

    #[test]
    fn zero_dynamics_gives_p_equal_q() {
        let ss = StateSpace::scalar(0.0, 1.0, 2.0, 3.0).unwrap();
        let kf = solve_dare_default(&ss).unwrap();
        assert!((kf.p()[(0, 0)] - 2.0).abs() < 1e-14);
        assert_eq!(kf.k()[(0, 0)], 0.0);
        assert!((kf.rbar()[(0, 0)] - 5.0).abs() < 1e-14);
    }

    #[test]
    fn scalar_dare_matches_quadratic_formula() {
        // With c = 1 the fixed point solves P² + (r(1−a²) − q)P − qr = 0.
        let (a, q, r) = (0.9_f64, 1.0, 1.0);
        let b = r * (1.0 - a * a) - q;
        let p_star = (-b + (b * b + 4.0 * q * r).sqrt()) / 2.0;
        let kf = solve_dare_default(&StateSpace::scalar(a, 1.0, q, r).unwrap()).unwrap();
        assert!((kf.p()[(0, 0)] - p_star).abs() < 1e-10);
        assert!((kf.k()[(0, 0)] - a * p_star / (p_star + r)).abs() < 1e-10);
        assert!((kf.rbar()[(0, 0)] - (p_star + r)).abs() < 1e-10);
        assert!((kf.p()[(0, 0)] - 1.48390).abs() < 1e-5);
        assert!((kf.k()[(0, 0)] - 0.53766).abs() < 1e-5);
    }

    #[test]
    fn invalid_models_are_rejected() {
        assert!(StateSpace::scalar(0.5, 1.0, 1.0, 0.0).is_err());
        assert!(StateSpace::scalar(0.5, 1.0, -1.0, 1.0).is_err());
        let err = StateSpace::new(m(2, 2, &[1.0, 0.0, 0.0, 1.0]), m(1, 1, &[1.0]), m(1, 1, &[1.0]), m(1, 1, &[1.0]));
        assert!(matches!(err, Err(SsidError::DimensionMismatch(_))));
        let asym = StateSpace::new(
            m(2, 2, &[0.5, 0.0, 0.0, 0.5]),
            m(1, 2, &[1.0, 0.0]),
            m(2, 2, &[1.0, 0.5, 0.0, 1.0]),
            m(1, 1, &[1.0]),
        );
        assert!(asym.is_err());
    }

    #[test]
    fn unobservable_unstable_mode_is_not_detectable() {
        let ss = StateSpace::new(
            m(2, 2, &[1.2, 0.0, 0.0, 0.5]),
            m(1, 2, &[0.0, 1.0]),
            DMatrix::identity(2, 2),
            m(1, 1, &[1.0]),
        )
        .unwrap();
        let err = solve_dare(&ss, 1e-12, 100_000).unwrap_err();
        assert!(matches!(err, SsidError::NotDetectable(_)), "{err:?}");
    }

    #[test]
    fn iteration_budget_exhaustion_is_non_convergence() {
        let ss = StateSpace::scalar(0.9, 1.0, 1.0, 1.0).unwrap();
        let err = solve_dare(&ss, 1e-12, 3).unwrap_err();
        assert!(matches!(err, SsidError::NonConvergence { iterations: 3, .. }));
    }

    #[test]
    fn assumption_examples() {
        let kf = solve_dare_default(&StateSpace::scalar(0.9, 1.0, 1.0, 1.0).unwrap()).unwrap();
        let rep = check_assumptions(&kf, RANK_TOL);
        assert!(rep.all_hold());
        assert!((rep.spectral_radius - 0.9).abs() < 1e-12);

        let jordan = StateSpace::new(
            m(2, 2, &[1.0, 1.0, 0.0, 1.0]),
            m(1, 2, &[1.0, 0.0]),
            DMatrix::identity(2, 2),
            m(1, 1, &[1.0]),
        )
        .unwrap();
        let rep = check_assumptions(&solve_dare_default(&jordan).unwrap(), RANK_TOL);
        assert!(rep.marginally_stable && rep.observable);
        assert!((rep.spectral_radius - 1.0).abs() < 1e-7);

        let blind = solve_dare_default(&StateSpace::scalar(0.5, 0.0, 1.0, 1.0).unwrap()).unwrap();
        assert!(!check_assumptions(&blind, RANK_TOL).observable);
    }

    #[test]
    fn spectral_radius_examples() {
        assert_eq!(spectral_radius(&DMatrix::zeros(2, 2)).unwrap(), 0.0);
        assert_eq!(spectral_radius(&m(2, 2, &[0.0, 1.0, 0.0, 0.0])).unwrap(), 0.0);
        assert!((spectral_radius(&m(2, 2, &[0.9, 1.0, 0.0, 0.8])).unwrap() - 0.9).abs() < 1e-14);
    }

    #[test]
    fn json_round_trip() {
        let ss = StateSpace::new(
            m(2, 2, &[1.0, 1.0, 0.0, 1.0]),
            m(1, 2, &[1.0, 0.0]),
            DMatrix::identity(2, 2),
            m(1, 1, &[1.0]),
        )
        .unwrap();
        let back = StateSpace::from_json_str(&ss.to_json_string()).unwrap();
        assert_eq!(ss, back);
        let nested = r#"{"n":2,"m":1,"A":[[1,1],[0,1]],"C":[[1,0]],"Q":[[1,0],[0,1]],"R":[[1]]}"#;
        assert_eq!(StateSpace::from_json_str(nested).unwrap(), ss);
    }
}
