#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use ssid::linalg::{sigma_n, singular_values};
use ssid::model::{solve_dare_default, spectral_radius, StateSpace, SteadyKalman};
use ssid::simulate::rng_from_seed;
use ssid::structmats::{hankel_true, HankelParams};

pub fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn scalar_kf() -> SteadyKalman {
    solve_dare_default(&StateSpace::scalar(0.9, 1.0, 1.0, 1.0).unwrap()).unwrap()
}

pub fn jordan_kf() -> SteadyKalman {
    let ss = StateSpace::new(
        DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
        DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        DMatrix::identity(2, 2),
        DMatrix::from_element(1, 1, 1.0),
    )
    .unwrap();
    solve_dare_default(&ss).unwrap()
}

/// Random system with `ρ(A) ≤ rho_max`, `Q = BBᵀ + 0.1 I`, `R = DDᵀ + 0.5 I`.
pub fn random_system(seed: u64, n: usize, m: usize, rho_max: f64) -> StateSpace {
    let mut rng = rng_from_seed(seed);
    let mut a = gaussian(&mut rng, n, n);
    let rho = spectral_radius(&a).unwrap();
    let target = rng.random_range(0.2..rho_max);
    if rho > 0.0 {
        a *= target / rho;
    }
    let c = gaussian(&mut rng, m, n);
    let b = gaussian(&mut rng, n, n);
    let d = gaussian(&mut rng, m, m);
    let q = &b * b.transpose() + DMatrix::identity(n, n) * 0.1;
    let r = &d * d.transpose() + DMatrix::identity(m, m) * 0.5;
    StateSpace::new(a, c, q, r).unwrap()
}

/// Random filter whose `G` has `σ_n(G)/σ_1(G) ≥ 1e-4` at the given horizons.
/// Draws are rejected deterministically until one qualifies.
pub fn random_kf(seed: u64, n: usize, m: usize, extra: usize) -> (SteadyKalman, HankelParams) {
    for attempt in 0u64.. {
        let ss = random_system(seed.wrapping_mul(1000).wrapping_add(attempt), n, m, 0.95);
        let Ok(kf) = solve_dare_default(&ss) else { continue };
        let hp = HankelParams::new(n + 1 + extra, n + 1 + extra, n).unwrap();
        let g = hankel_true(&kf, &hp);
        let s1 = singular_values(&g).unwrap()[0];
        if sigma_n(&g, n).unwrap() >= 1e-4 * s1 {
            return (kf, hp);
        }
    }
    unreachable!()
}

/// Random dimensions in `n ∈ 1..=5`, `m ∈ 1..=3` from a seed.
pub fn random_dims(seed: u64) -> (usize, usize) {
    let mut rng = rng_from_seed(seed ^ 0xd1a5);
    (rng.random_range(1..=5), rng.random_range(1..=3))
}

/// Random orthonormal matrix via QR of a Gaussian matrix.
pub fn random_orthonormal<R: Rng>(rng: &mut R, n: usize) -> DMatrix<f64> {
    gaussian(rng, n, n).qr().q()
}
