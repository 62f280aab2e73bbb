//! Finite-sample bound quantities for the regression and realization steps.
//!
//! All logarithms are natural. `δ_N` is carried in log space since it
//! underflows for any realistic `N`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Result, SsidError};
use crate::linalg::{block_diag_repeat, cholesky_lower, matrix_power, norm2, sigma_n, sym_min_eig, symmetrize};
use crate::model::SteadyKalman;
use crate::structmats::{observability_of, toeplitz_of, HankelParams};

/// Default upper limit for the `N₀`, `N₁`, `N₂` scans.
pub const SCAN_CAP: u64 = 1_000_000_000_000;

/// Below this index `Γ_k` is computed by the plain recursion; above it by
/// doubling on `Γ_{a+b} = Γ_a + Aᵃ Γ_b Aᵃᵀ`.
const GAMMA_RECURSION_LIMIT: u64 = 4096;

#[derive(Debug, Clone)]
pub struct BoundInputs<'a> {
    pub kf: &'a SteadyKalman,
    pub hp: HankelParams,
    /// Regression sample count `N`.
    pub n_samples: u64,
    /// Confidence parameter in `(0, 1)`.
    pub delta: f64,
    /// Constant of the noise persistence-of-excitation lemma.
    pub c_universal: f64,
}

impl<'a> BoundInputs<'a> {
    pub fn new(kf: &'a SteadyKalman, hp: HankelParams, n_samples: u64, delta: f64, c_universal: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(SsidError::Config(format!("delta must lie in (0, 1), got {delta}")));
        }
        if n_samples < 1 {
            return Err(SsidError::Config("N must be at least 1".into()));
        }
        if !(c_universal > 0.0) {
            return Err(SsidError::Config(format!("c_universal must be positive, got {c_universal}")));
        }
        Ok(BoundInputs { kf, hp, n_samples, delta, c_universal })
    }
}

/// `Γ_k = E[x̂_k x̂_kᵀ]`: `Γ₀ = 0`, `Γ_k = A Γ_{k−1} Aᵀ + K R̄ Kᵀ`.
pub fn state_covariance(kf: &SteadyKalman, k: u64) -> DMatrix<f64> {
    let a = kf.a();
    let qbar = symmetrize(&(kf.k() * kf.rbar() * kf.k().transpose()));
    let n = kf.n();
    if k <= GAMMA_RECURSION_LIMIT {
        let mut g = DMatrix::zeros(n, n);
        for _ in 0..k {
            g = symmetrize(&(a * &g * a.transpose() + &qbar));
        }
        return g;
    }
    // (Γ_j, Aʲ) pairs combined by binary expansion of k.
    let mut acc = (DMatrix::zeros(n, n), DMatrix::identity(n, n));
    let mut base = (qbar, a.clone());
    let mut e = k;
    while e > 0 {
        if e & 1 == 1 {
            let g = &acc.0 + &acc.1 * &base.0 * acc.1.transpose();
            acc = (symmetrize(&g), &acc.1 * &base.1);
        }
        e >>= 1;
        if e > 0 {
            let g = &base.0 + &base.1 * &base.0 * base.1.transpose();
            base = (symmetrize(&g), &base.1 * &base.1);
        }
    }
    acc.0
}

/// `Σ_E = 𝒯_p diag(R̄, …, R̄) 𝒯_pᵀ` and `σ_E = σ_min(Σ_E)`.
pub fn sigma_e_matrix(kf: &SteadyKalman, p: usize) -> (DMatrix<f64>, f64) {
    let t = toeplitz_of(kf, p);
    let sigma = symmetrize(&(&t * block_diag_repeat(kf.rbar(), p) * t.transpose()));
    let smin = sym_min_eig(&sigma);
    (sigma, smin)
}

/// `log δ_N = −log²(2pm) · log²(2(N+p−1)m)`.
pub fn log_delta_n(n_samples: u64, p: usize, m: usize) -> f64 {
    let a = (2.0 * (p * m) as f64).ln();
    let b = (2.0 * (n_samples as f64 + p as f64 - 1.0) * m as f64).ln();
    -(a * a) * (b * b)
}

/// `δ_N = (2(N+p−1)m)^{−log²(2pm)·log(2(N+p−1)m)}`; underflows to zero quickly.
pub fn delta_n(n_samples: u64, p: usize, m: usize) -> f64 {
    log_delta_n(n_samples, p, m).exp()
}

/// Quantities shared by the κ_N, C_XE and C_N expressions.
#[derive(Debug, Clone)]
struct SystemTerms {
    obs_p_norm_sq: f64,
    trace_sigma_e: f64,
    sigma_e: f64,
    rbar_norm: f64,
    toeplitz_p_norm: f64,
}

impl SystemTerms {
    fn new(kf: &SteadyKalman, hp: &HankelParams) -> Self {
        let (sig, sigma_e) = sigma_e_matrix(kf, hp.p);
        let obs_p = norm2(&observability_of(kf, hp.p));
        SystemTerms {
            obs_p_norm_sq: obs_p * obs_p,
            trace_sigma_e: sig.trace(),
            sigma_e,
            rbar_norm: norm2(kf.rbar()),
            toeplitz_p_norm: norm2(&toeplitz_of(kf, hp.p)),
        }
    }
}

fn trace_gamma(kf: &SteadyKalman, n_samples: u64) -> f64 {
    state_covariance(kf, n_samples.saturating_sub(1)).trace()
}

/// `κ_N = (4/σ_E)(‖𝒪_p‖₂² Tr Γ_{N−1} + Tr Σ_E) + δ`.
pub fn kappa_n(bi: &BoundInputs) -> f64 {
    let t = SystemTerms::new(bi.kf, &bi.hp);
    kappa_from(&t, trace_gamma(bi.kf, bi.n_samples), bi.delta)
}

fn kappa_from(t: &SystemTerms, tr_gamma: f64, delta: f64) -> f64 {
    4.0 / t.sigma_e * (t.obs_p_norm_sq * tr_gamma + t.trace_sigma_e) + delta
}

/// `C₁ = 8 √(‖R̄‖₂/σ_E) ‖𝒯_f‖₂` and `C₂ = 4 ‖𝒪_f‖₂ ‖𝒪_p†‖₂`.
pub fn constants_c1_c2(kf: &SteadyKalman, hp: &HankelParams) -> Result<(f64, f64)> {
    let (_, sigma_e) = sigma_e_matrix(kf, hp.p);
    let c1 = 8.0 * (norm2(kf.rbar()) / sigma_e).sqrt() * norm2(&toeplitz_of(kf, hp.f));
    let sn = sigma_n(&observability_of(kf, hp.p), kf.n())?;
    let c2 = 4.0 * norm2(&observability_of(kf, hp.f)) / sn;
    Ok((c1, c2))
}

/// `log(p·5^m/δ)` without forming `5^m`.
fn log_p5m_over_delta(p: usize, m: usize, delta: f64) -> f64 {
    (p as f64).ln() + m as f64 * 5f64.ln() - delta.ln()
}

/// `C_XE = 8p((n/2)·log(‖𝒪_p‖² Tr Γ_{N−1}/δ + 1) + log(p5^m/δ))`.
pub fn c_xe(bi: &BoundInputs, n_samples: u64) -> f64 {
    let t = SystemTerms::new(bi.kf, &bi.hp);
    c_xe_from(bi, &t, trace_gamma(bi.kf, n_samples))
}

fn c_xe_from(bi: &BoundInputs, t: &SystemTerms, tr_gamma: f64) -> f64 {
    let (p, n, m) = (bi.hp.p as f64, bi.kf.n() as f64, bi.kf.m());
    8.0 * p * ((n / 2.0) * (t.obs_p_norm_sq * tr_gamma / bi.delta + 1.0).ln()
        + log_p5m_over_delta(bi.hp.p, m, bi.delta))
}

/// `γ_N = 2‖𝒯_p‖₂ √(C_XE ‖R̄‖₂ / N)`.
pub fn gamma_n(bi: &BoundInputs, n_samples: u64) -> f64 {
    let t = SystemTerms::new(bi.kf, &bi.hp);
    gamma_from(bi, &t, n_samples)
}

fn gamma_from(bi: &BoundInputs, t: &SystemTerms, n_samples: u64) -> f64 {
    let cxe = c_xe_from(bi, t, trace_gamma(bi.kf, n_samples));
    2.0 * t.toeplitz_p_norm * (cxe * t.rbar_norm / n_samples as f64).sqrt()
}

/// `C_N = √((mp²/2)·log(2‖𝒪_p‖² Tr Γ_{N−1}/(δσ_E) + 1) + p·log(p5^m/δ))`.
pub fn c_n(bi: &BoundInputs, n_samples: u64) -> f64 {
    let t = SystemTerms::new(bi.kf, &bi.hp);
    c_n_from(bi, &t, trace_gamma(bi.kf, n_samples))
}

fn c_n_from(bi: &BoundInputs, t: &SystemTerms, tr_gamma: f64) -> f64 {
    let (p, m) = (bi.hp.p as f64, bi.kf.m() as f64);
    let inner = 2.0 * t.obs_p_norm_sq * tr_gamma / (bi.delta * t.sigma_e) + 1.0;
    ((m * p * p / 2.0) * inner.ln() + p * log_p5m_over_delta(bi.hp.p, bi.kf.m(), bi.delta)).sqrt()
}

pub fn n0_predicate(bi: &BoundInputs, n_samples: u64) -> bool {
    let (p, m) = (bi.hp.p, bi.kf.m());
    let a = (2.0 * (p * m) as f64).ln();
    let b = (2.0 * (n_samples as f64 + p as f64 - 1.0) * m as f64).ln();
    n_samples as f64 >= 2.0 * bi.c_universal * (p * m) as f64 * a * a * b * b
}

pub fn n1_predicate(bi: &BoundInputs, n_samples: u64) -> bool {
    let t = SystemTerms::new(bi.kf, &bi.hp);
    gamma_from(bi, &t, n_samples) <= 1f64.min(t.sigma_e / 4.0)
}

pub fn n2_predicate(bi: &BoundInputs, n_samples: u64) -> bool {
    let t = SystemTerms::new(bi.kf, &bi.hp);
    n2_lhs(bi, &t, n_samples) <= 1.0
}

fn n2_lhs(bi: &BoundInputs, t: &SystemTerms, n_samples: u64) -> f64 {
    let cn = c_n_from(bi, t, trace_gamma(bi.kf, n_samples));
    8.0 * (t.rbar_norm / t.sigma_e).sqrt() * t.toeplitz_p_norm * cn / (n_samples as f64).sqrt()
}

/// Smallest `N ≥ 1` with `pred(N)`, assuming the predicate is eventually
/// monotone: doubling brackets the transition, bisection pins it down.
pub fn scan_threshold<F: Fn(u64) -> bool>(pred: F, cap: u64) -> Result<u64> {
    if pred(1) {
        return Ok(1);
    }
    let mut lo = 1u64;
    let mut hi = 2u64;
    loop {
        if hi >= cap {
            if pred(cap) {
                hi = cap;
                break;
            }
            return Err(SsidError::ScanLimit(cap));
        }
        if pred(hi) {
            break;
        }
        lo = hi;
        hi = hi.saturating_mul(2);
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if pred(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Thresholds {
    pub n0: u64,
    pub n1: u64,
    pub n2: u64,
}

pub fn thresholds(bi: &BoundInputs, cap: u64) -> Result<Thresholds> {
    let t = SystemTerms::new(bi.kf, &bi.hp);
    let lim = 1f64.min(t.sigma_e / 4.0);
    let n0 = scan_threshold(|n| n0_predicate(bi, n), cap)?;
    let n1 = scan_threshold(|n| gamma_from(bi, &t, n) <= lim, cap)?;
    let n2 = scan_threshold(|n| n2_lhs(bi, &t, n) <= 1.0, cap)?;
    Ok(Thresholds { n0, n1, n2 })
}

/// Every intermediate of the regression-error envelope, for audit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub n_samples: u64,
    pub p: usize,
    pub f: usize,
    pub delta: f64,
    pub c_universal: f64,
    pub simplified: bool,
    pub sigma_e: f64,
    pub sigma_min_r: f64,
    pub log_delta_n: f64,
    pub delta_n: f64,
    pub kappa_n: f64,
    pub c1: f64,
    pub c2: f64,
    /// `None` when the scan cap was hit.
    pub n0: Option<u64>,
    pub n1: Option<u64>,
    pub n2: Option<u64>,
    pub closed_loop_power_norm: f64,
    pub cross_term_bound: f64,
    pub truncation_bound: f64,
    pub total_bound: f64,
    /// `1 − δ_N − 6δ` clamped to `[0, 1]`.
    pub total_probability: f64,
    /// Same, unclamped.
    pub total_probability_raw: f64,
    pub trace_gamma: f64,
    pub trace_sigma_e: f64,
}

impl BoundReport {
    /// Whether `N` clears all three thresholds.
    pub fn above_thresholds(&self) -> bool {
        [self.n0, self.n1, self.n2].iter().all(|t| t.is_some_and(|t| self.n_samples >= t))
    }
}

/// The two envelope terms without the threshold scans.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvelopeTerms {
    pub cross: f64,
    pub truncation: f64,
    pub kappa_n: f64,
    pub trace_gamma: f64,
    pub c1: f64,
    pub c2: f64,
    pub closed_loop_power_norm: f64,
}

pub fn envelope_terms(bi: &BoundInputs, simplified: bool) -> Result<EnvelopeTerms> {
    let kf = bi.kf;
    let (p, f, m) = (bi.hp.p, bi.hp.f, kf.m());
    let n = bi.n_samples as f64;
    let t = SystemTerms::new(kf, &bi.hp);
    let tr_gamma = trace_gamma(kf, bi.n_samples);
    let kappa = kappa_from(&t, tr_gamma, bi.delta);
    let (c1, c2) = constants_c1_c2(kf, &bi.hp)?;
    let fmp = (f * m * p) as f64;
    let cross = if simplified {
        c1 * ((fmp / n) * (5.0 * f as f64 * kappa / bi.delta).ln()).sqrt()
    } else {
        let log_term = f as f64 * (m as f64 * 5f64.ln() + (f as f64).ln() - bi.delta.ln());
        c1 / n.sqrt() * ((fmp / 2.0) * (kappa / bi.delta).ln() + log_term).sqrt()
    };
    let cl_pow = norm2(&matrix_power(&kf.closed_loop(), p));
    Ok(EnvelopeTerms {
        cross,
        truncation: c2 * cl_pow,
        kappa_n: kappa,
        trace_gamma: tr_gamma,
        c1,
        c2,
        closed_loop_power_norm: cl_pow,
    })
}

/// Regression-step envelope `‖G − Ĝ‖₂ ≤ cross + truncation`.
///
/// `simplified = true` gives `C₁√((fmp/N)·log(5fκ_N/δ))`; otherwise the
/// unsimplified `(C₁/√N)√((fmp/2)·log(κ_N/δ) + f·log(5^m f/δ))`. The
/// truncation term `C₂‖(A−KC)^p‖₂` is shared.
pub fn hankel_error_bound(bi: &BoundInputs, simplified: bool) -> Result<BoundReport> {
    let kf = bi.kf;
    let (p, f, m) = (bi.hp.p, bi.hp.f, kf.m());
    let t = SystemTerms::new(kf, &bi.hp);
    let terms = envelope_terms(bi, simplified)?;
    let (kappa, tr_gamma, c1, c2) = (terms.kappa_n, terms.trace_gamma, terms.c1, terms.c2);
    let (cross, truncation, cl_pow) = (terms.cross, terms.truncation, terms.closed_loop_power_norm);
    let ldn = log_delta_n(bi.n_samples, p, m);
    let raw = 1.0 - ldn.exp() - 6.0 * bi.delta;
    let lim = 1f64.min(t.sigma_e / 4.0);
    let n0 = scan_threshold(|x| n0_predicate(bi, x), SCAN_CAP).ok();
    let n1 = scan_threshold(|x| gamma_from(bi, &t, x) <= lim, SCAN_CAP).ok();
    let n2 = scan_threshold(|x| n2_lhs(bi, &t, x) <= 1.0, SCAN_CAP).ok();
    Ok(BoundReport {
        n_samples: bi.n_samples,
        p,
        f,
        delta: bi.delta,
        c_universal: bi.c_universal,
        simplified,
        sigma_e: t.sigma_e,
        sigma_min_r: sym_min_eig(kf.base().r()),
        log_delta_n: ldn,
        delta_n: ldn.exp(),
        kappa_n: kappa,
        c1,
        c2,
        n0,
        n1,
        n2,
        closed_loop_power_norm: cl_pow,
        cross_term_bound: cross,
        truncation_bound: truncation,
        total_bound: cross + truncation,
        total_probability: raw.clamp(0.0, 1.0),
        total_probability_raw: raw,
        trace_gamma: tr_gamma,
        trace_sigma_e: t.trace_sigma_e,
    })
}

/// Squared-norm envelope of the self-normalized vector martingale:
/// `8r(log(r5^m/δ) + ½ log det(V̄ V⁻¹))`.
pub fn martingale_bound(r: usize, m: usize, delta: f64, v: &DMatrix<f64>, vbar: &DMatrix<f64>) -> Result<f64> {
    if v.shape() != vbar.shape() || !v.is_square() {
        return Err(SsidError::DimensionMismatch(format!(
            "V is {:?}, V-bar is {:?}",
            v.shape(),
            vbar.shape()
        )));
    }
    let scale = vbar.amax().max(1.0);
    let diff_min = sym_min_eig(&(vbar - v));
    if diff_min < -1e-10 * scale {
        return Err(SsidError::NotDominated(diff_min));
    }
    let logdet = |x: &DMatrix<f64>, what| -> Result<f64> {
        let l = cholesky_lower(x, what)?;
        Ok(2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>())
    };
    let ld = logdet(vbar, "V-bar")? - logdet(v, "V")?;
    let r = r as f64;
    Ok(8.0 * r * (r.ln() + m as f64 * 5f64.ln() - delta.ln() + 0.5 * ld))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RealizationBounds {
    pub obs_bound: f64,
    pub c_bound: f64,
    pub a_bound: f64,
    pub k_bound: f64,
}

/// Realization robustness envelopes, valid when `err_g ≤ σ_n(G)/4`.
pub fn realization_error_bounds(
    g_norm: f64,
    sigma_n_g: f64,
    err_g: f64,
    n: usize,
    sigma_o: f64,
) -> Result<RealizationBounds> {
    if !(sigma_o > 0.0) {
        return Err(SsidError::Config(format!("sigma_o must be positive, got {sigma_o}")));
    }
    if !(sigma_n_g > 0.0) {
        return Err(SsidError::Config(format!("sigma_n(G) must be positive, got {sigma_n_g}")));
    }
    let limit = sigma_n_g / 4.0;
    if err_g > limit {
        return Err(SsidError::RobustnessViolated { err_g, limit });
    }
    let obs = 2.0 * (10.0 * n as f64 / sigma_n_g).sqrt() * err_g;
    let a = (g_norm.sqrt() + sigma_o) / (sigma_o * sigma_o) * obs;
    Ok(RealizationBounds { obs_bound: obs, c_bound: obs, a_bound: a, k_bound: obs })
}

/// `‖𝒯_s‖₂ ≤ 1 + ‖C‖₂‖K‖₂ Σ_{i=0}^{s−2} ‖Aⁱ‖₂`.
pub fn toeplitz_norm_bound(kf: &SteadyKalman, s: usize) -> f64 {
    1.0 + norm2(kf.c()) * norm2(kf.k()) * power_norm_sum(kf.a(), s.saturating_sub(1))
}

/// `‖𝒪_k‖₂ ≤ ‖C‖₂ Σ_{i=0}^{k−1} ‖Aⁱ‖₂`.
pub fn observability_norm_bound(kf: &SteadyKalman, k: usize) -> f64 {
    norm2(kf.c()) * power_norm_sum(kf.a(), k)
}

/// `Σ_{i=0}^{count−1} ‖Aⁱ‖₂`.
pub fn power_norm_sum(a: &DMatrix<f64>, count: usize) -> f64 {
    let mut pow = DMatrix::identity(a.nrows(), a.ncols());
    let mut sum = 0.0;
    for _ in 0..count {
        sum += norm2(&pow);
        pow = &pow * a;
    }
    sum
}

/// `√r · maxᵢ ‖Mᵢ‖₂` for a horizontal block row `[M₁ … M_r]`.
pub fn block_norm_bound(blocks: &[DMatrix<f64>]) -> f64 {
    let max = blocks.iter().map(norm2).fold(0.0, f64::max);
    (blocks.len() as f64).sqrt() * max
}

/// Markov-inequality level for `‖Y₋Y₋ᵀ‖₂`:
/// `N(‖𝒪_p‖₂² Tr Γ_{N−1} + Tr Σ_E)/δ`.
pub fn output_gram_markov_level(kf: &SteadyKalman, hp: &HankelParams, n_samples: u64, delta: f64) -> f64 {
    let t = SystemTerms::new(kf, hp);
    n_samples as f64 * (t.obs_p_norm_sq * trace_gamma(kf, n_samples) + t.trace_sigma_e) / delta
}
