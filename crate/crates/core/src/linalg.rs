//! Dense linear-algebra helpers shared by the identification modules.
//!
//! Everything here works on `DMatrix<f64>`; dimensions in this crate are small
//! (block sizes of at most a few hundred), so no attempt is made at blocking
//! or sparsity.

use nalgebra::{Complex, DMatrix, DVector, Schur, SymmetricEigen, SVD};

use crate::error::{Result, SsidError};

const SVD_MAX_ITER: usize = 1_000_000;
const SCHUR_MAX_ITER: usize = 1_000_000;

/// Thin SVD `m = u * diag(s) * vt` with singular values sorted in descending
/// order and a deterministic sign convention: every left singular vector has
/// its largest-magnitude entry positive (first index wins on ties), and the
/// matching right singular vector is flipped along with it.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub vt: DMatrix<f64>,
}

impl ThinSvd {
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        let k = m.nrows().min(m.ncols());
        if k == 0 {
            return Ok(ThinSvd {
                u: DMatrix::zeros(m.nrows(), 0),
                s: DVector::zeros(0),
                vt: DMatrix::zeros(0, m.ncols()),
            });
        }
        let (mut u, s, mut vt) = checked_svd(m)?;
        for j in 0..k {
            let mut best = 0;
            let mut best_abs = -1.0;
            for i in 0..u.nrows() {
                let a = u[(i, j)].abs();
                if a > best_abs {
                    best_abs = a;
                    best = i;
                }
            }
            if u[(best, j)] < 0.0 {
                u.column_mut(j).neg_mut();
                vt.row_mut(j).neg_mut();
            }
        }
        Ok(ThinSvd { u, s, vt })
    }

    /// Singular value `i` (0-based), or zero when out of range.
    pub fn sigma(&self, i: usize) -> f64 {
        if i < self.s.len() {
            self.s[i]
        } else {
            0.0
        }
    }
}

/// Convergence thresholds tried in turn by [`checked_svd`].
const SVD_EPS_LADDER: [f64; 4] = [f64::EPSILON, 1e-14, 1e-12, 1e-10];

/// Reconstruction error, relative to `‖m‖_F`, accepted without trying the
/// other variants.
const SVD_RECOMPOSE_TOL: f64 = 1e-12;

/// Looser bound applied to the best variant when none meets the tight one.
const SVD_RECOMPOSE_FALLBACK_TOL: f64 = 1e-6;

#[derive(Clone, Copy)]
enum SvdInput {
    AsIs,
    Transposed,
    Reflected,
}

/// Fixed Householder reflection `I − 2vvᵀ/‖v‖²` with `v = (1, 2, …, r)`.
fn fixed_reflector(r: usize) -> DMatrix<f64> {
    let v = DVector::from_fn(r, |i, _| (i + 1) as f64);
    DMatrix::identity(r, r) - &v * v.transpose() * (2.0 / v.norm_squared())
}

/// SVD with a reconstruction and orthogonality check. The bidiagonal QR
/// iteration can return an inconsistent factorization on some nearly
/// rank-deficient inputs (small blocks in particular). Those are retried with
/// looser thresholds, on the transpose, and on a reflected copy before giving up.
fn checked_svd(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    let k = m.nrows().min(m.ncols());
    let scale = m.norm().max(f64::MIN_POSITIVE) * (k as f64).sqrt();
    let eye = DMatrix::<f64>::identity(k, k);
    let reflector = fixed_reflector(m.nrows());
    let mut best: Option<(f64, DMatrix<f64>, DVector<f64>, DMatrix<f64>)> = None;
    for eps in SVD_EPS_LADDER {
        for input in [SvdInput::AsIs, SvdInput::Transposed, SvdInput::Reflected] {
            let src = match input {
                SvdInput::AsIs => m.clone(),
                SvdInput::Transposed => m.transpose(),
                SvdInput::Reflected => &reflector * m,
            };
            let Some(svd) = SVD::try_new(src, true, true, eps, SVD_MAX_ITER) else { continue };
            let (Some(u), Some(vt)) = (svd.u, svd.v_t) else { continue };
            let (u, vt) = match input {
                SvdInput::AsIs => (u, vt),
                SvdInput::Transposed => (vt.transpose(), u.transpose()),
                SvdInput::Reflected => (&reflector * u, vt),
            };
            let s = svd.singular_values;
            let valid = (u.transpose() * &u - &eye).amax() <= 1e-10
                && (&vt * vt.transpose() - &eye).amax() <= 1e-10
                && s.iter().all(|x| x.is_finite() && *x >= 0.0);
            if !valid {
                continue;
            }
            let err = (&u * DMatrix::from_diagonal(&s) * &vt - m).norm() / scale;
            if err <= SVD_RECOMPOSE_TOL {
                return Ok((u, s, vt));
            }
            if best.as_ref().is_none_or(|b| err < b.0) {
                best = Some((err, u, s, vt));
            }
        }
    }
    if let Some((u, s, vt)) = jacobi_svd(m) {
        let err = (&u * DMatrix::from_diagonal(&s) * &vt - m).norm() / scale;
        if best.as_ref().is_none_or(|b| err < b.0) {
            best = Some((err, u, s, vt));
        }
    }
    match best {
        Some((err, u, s, vt)) if err <= SVD_RECOMPOSE_FALLBACK_TOL => Ok((u, s, vt)),
        _ => Err(SsidError::SvdFailure),
    }
}

/// One-sided Jacobi SVD, descending. Slow but accurate to roundoff; used when
/// the bidiagonal iteration cannot produce a consistent factorization.
fn jacobi_svd(m: &DMatrix<f64>) -> Option<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    if m.nrows() < m.ncols() {
        let (u, s, vt) = jacobi_svd(&m.transpose())?;
        return Some((vt.transpose(), s, u.transpose()));
    }
    let (rows, k) = m.shape();
    let mut w = m.clone();
    let mut v = DMatrix::<f64>::identity(k, k);
    for _ in 0..100 {
        let mut rotated = false;
        for p in 0..k {
            for q in p + 1..k {
                let alpha = w.column(p).norm_squared();
                let beta = w.column(q).norm_squared();
                let gamma = w.column(p).dot(&w.column(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = c * t;
                for mat in [&mut w, &mut v] {
                    for i in 0..mat.nrows() {
                        let (xp, xq) = (mat[(i, p)], mat[(i, q)]);
                        mat[(i, p)] = c * xp - sn * xq;
                        mat[(i, q)] = sn * xp + c * xq;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<usize> = (0..k).collect();
    let norms: Vec<f64> = (0..k).map(|j| w.column(j).norm()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
    let s = DVector::from_iterator(k, order.iter().map(|&j| norms[j]));
    if s.iter().any(|x| !x.is_finite()) {
        return None;
    }
    let mut u = DMatrix::<f64>::zeros(rows, k);
    let mut vt = DMatrix::<f64>::zeros(k, k);
    let floor = s[0] * f64::EPSILON * rows as f64;
    for (dst, &j) in order.iter().enumerate() {
        vt.row_mut(dst).copy_from(&v.column(j).transpose());
        if norms[j] > floor && norms[j] > 0.0 {
            u.set_column(dst, &(w.column(j) / norms[j]));
        } else {
            // Complete with the basis vector least covered by the columns so far.
            let mut pick = DVector::zeros(rows);
            let mut pick_norm = -1.0;
            for e in 0..rows {
                let mut x = DVector::<f64>::zeros(rows);
                x[e] = 1.0;
                for _ in 0..2 {
                    for c in 0..dst {
                        let proj = u.column(c).dot(&x);
                        x -= u.column(c) * proj;
                    }
                }
                let nx = x.norm();
                if nx > pick_norm {
                    pick_norm = nx;
                    pick = x / nx;
                }
            }
            u.set_column(dst, &pick);
        }
    }
    Some((u, s, vt))
}

/// Descending singular values.
pub fn singular_values(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(DVector::zeros(0));
    }
    Ok(checked_svd(m)?.1)
}

/// Spectral norm (largest singular value). Zero for empty matrices.
pub fn norm2(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    if m.nrows() == 1 || m.ncols() == 1 {
        return m.norm();
    }
    match singular_values(m) {
        Ok(s) => s.iter().cloned().fold(0.0, f64::max),
        Err(_) => f64::NAN,
    }
}

/// `n`-th largest singular value, 1-based as in the usual `sigma_n` notation.
pub fn sigma_n(m: &DMatrix<f64>, n: usize) -> Result<f64> {
    let s = singular_values(m)?;
    Ok(if n >= 1 && n <= s.len() { s[n - 1] } else { 0.0 })
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    let mut ev = SymmetricEigen::new(symmetrize(m)).eigenvalues;
    ev.as_mut_slice().sort_by(|a, b| a.total_cmp(b));
    ev
}

pub fn sym_min_eig(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    sym_eigenvalues(m)[0]
}

pub fn sym_max_eig(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let ev = sym_eigenvalues(m);
    ev[ev.len() - 1]
}

/// Lower Cholesky factor `L` with `m = L Lᵀ`.
pub fn cholesky_lower(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    nalgebra::Cholesky::new(symmetrize(m))
        .map(|c| c.l())
        .ok_or(SsidError::CholeskyFailure(what))
}

/// Gaussian sampling factor: Cholesky when possible, otherwise the symmetric
/// square root (handles semidefinite covariances such as a rank-deficient Q).
pub fn covariance_factor(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    match cholesky_lower(m, what) {
        Ok(l) => Ok(l),
        Err(_) => {
            let scale = sym_max_eig(m).abs().max(1.0);
            if sym_min_eig(m) < -1e-12 * scale {
                return Err(SsidError::CholeskyFailure(what));
            }
            Ok(sym_sqrt_psd(m))
        }
    }
}

/// Symmetric PSD square root; negative eigenvalues (round-off) are clamped.
pub fn sym_sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let d = eig.eigenvalues.map(|x| x.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    v * DMatrix::from_diagonal(&d) * v.transpose()
}

/// `a^k` by repeated squaring.
pub fn matrix_power(a: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    assert!(a.is_square(), "matrix_power needs a square matrix");
    let mut result = DMatrix::identity(a.nrows(), a.ncols());
    let mut base = a.clone();
    let mut e = k;
    while e > 0 {
        if e & 1 == 1 {
            result = &result * &base;
        }
        e >>= 1;
        if e > 0 {
            base = &base * &base;
        }
    }
    result
}

/// Moore-Penrose pseudo-inverse. Singular values below `rel_cutoff * sigma_max`
/// are treated as zero.
pub fn pinv(m: &DMatrix<f64>, rel_cutoff: f64) -> Result<DMatrix<f64>> {
    let svd = ThinSvd::new(m)?;
    let smax = svd.sigma(0);
    let cut = rel_cutoff * smax;
    let inv = svd.s.map(|s| if s > cut && s > 0.0 { 1.0 / s } else { 0.0 });
    Ok(svd.vt.transpose() * DMatrix::from_diagonal(&inv) * svd.u.transpose())
}

/// Number of singular values above `rel_tol * sigma_max`.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> Result<usize> {
    let s = singular_values(m)?;
    let smax = s.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return Ok(0);
    }
    Ok(s.iter().filter(|&&x| x > rel_tol * smax).count())
}

/// Complex eigenvalues of a real square matrix via the real Schur form.
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<Complex<f64>>> {
    if !m.is_square() {
        return Err(SsidError::DimensionMismatch(format!(
            "eigenvalues of a {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.nrows() == 0 {
        return Ok(Vec::new());
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(SsidError::EigenFailure);
    }
    let schur =
        Schur::try_new(m.clone(), f64::EPSILON, SCHUR_MAX_ITER).ok_or(SsidError::EigenFailure)?;
    Ok(schur.complex_eigenvalues().iter().cloned().collect())
}

/// Block-diagonal matrix with `count` copies of `block`.
pub fn block_diag_repeat(block: &DMatrix<f64>, count: usize) -> DMatrix<f64> {
    let (r, c) = block.shape();
    let mut out = DMatrix::zeros(r * count, c * count);
    for i in 0..count {
        out.view_mut((i * r, i * c), (r, c)).copy_from(block);
    }
    out
}
