mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use ssid::bounds::*;
use ssid::linalg::{matrix_power, norm2, sigma_n, sym_min_eig};
use ssid::simulate::{rng_from_seed, simulate_innovation, SimConfig};
use ssid::structmats::{build_data_matrices, hankel_true, observability_of, toeplitz_of, HankelParams};

fn admissible(seed: u64) -> ssid::model::SteadyKalman {
    let (n, m) = common::random_dims(seed);
    common::random_kf(seed, n, m, 0).0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn past_error_covariance_dominates_noise(seed in any::<u64>(), p in 1usize..8) {
        let kf = admissible(seed);
        let (_, sigma_e) = sigma_e_matrix(&kf, p);
        let smin_r = sym_min_eig(kf.base().r());
        prop_assert!(sigma_e >= smin_r * (1.0 - 1e-10), "{} < {}", sigma_e, smin_r);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn state_covariance_is_monotone_and_psd(seed in any::<u64>()) {
        let kf = admissible(seed);
        let mut prev = state_covariance(&kf, 0);
        for k in 1..=50 {
            let cur = state_covariance(&kf, k);
            let scale = cur.amax().max(1.0);
            prop_assert!(sym_min_eig(&cur) >= -1e-12 * scale);
            prop_assert!(sym_min_eig(&(&cur - &prev)) >= -1e-12 * scale, "not monotone at k = {}", k);
            prev = cur;
        }
    }

    #[test]
    fn toeplitz_and_observability_norms_are_bounded(seed in any::<u64>()) {
        let kf = admissible(seed);
        for k in 1..=20 {
            let t = norm2(&toeplitz_of(&kf, k));
            prop_assert!(t <= toeplitz_norm_bound(&kf, k) * (1.0 + 1e-12));
            let o = norm2(&observability_of(&kf, k));
            prop_assert!(o <= observability_norm_bound(&kf, k) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn block_row_norm_is_bounded(seed in any::<u64>(), r in 1usize..7, rows in 1usize..5, cols in 1usize..5) {
        let mut rng = rng_from_seed(seed);
        let blocks: Vec<DMatrix<f64>> = (0..r)
            .map(|i| common::gaussian(&mut rng, rows, cols) * (1.0 + i as f64))
            .collect();
        let mut full = DMatrix::zeros(rows, cols * r);
        for (i, b) in blocks.iter().enumerate() {
            full.view_mut((0, i * cols), (rows, cols)).copy_from(b);
        }
        prop_assert!(norm2(&full) <= block_norm_bound(&blocks) * (1.0 + 1e-12));
    }

    #[test]
    fn excitation_singular_values_grow_with_past_horizon(seed in any::<u64>()) {
        let kf = admissible(seed);
        let n = kf.n();
        let f = n + 1;
        let mut prev_o = 0.0;
        let mut prev_g = 0.0;
        for p in n + 1..=n + 10 {
            let so = sigma_n(&observability_of(&kf, p), n).unwrap();
            let sg = sigma_n(&hankel_true(&kf, &HankelParams { p, f }), n).unwrap();
            prop_assert!(so >= prev_o * (1.0 - 1e-10), "sigma_n(O_p) fell at p = {}", p);
            prop_assert!(sg >= prev_g * (1.0 - 1e-10), "sigma_n(G) fell at p = {}", p);
            prev_o = so;
            prev_g = sg;
        }
    }

    #[test]
    fn simplified_envelope_dominates_full_form(
        seed in any::<u64>(),
        log_n in 5.0f64..14.0,
        delta in 0.001f64..0.15,
    ) {
        let (kf, hp) = common::random_kf(seed, common::random_dims(seed).0, common::random_dims(seed).1, 0);
        let bi = BoundInputs::new(&kf, hp, log_n.exp() as u64, delta, 1.0).unwrap();
        let simple = envelope_terms(&bi, true).unwrap();
        let full = envelope_terms(&bi, false).unwrap();
        prop_assert!(simple.cross >= full.cross, "{} < {}", simple.cross, full.cross);
        prop_assert_eq!(simple.truncation, full.truncation);
    }
}

#[test]
fn state_covariance_matches_monte_carlo_variance() {
    let kf = common::scalar_kf();
    let (a, k, rbar) = (kf.a()[(0, 0)], kf.k()[(0, 0)], kf.rbar()[(0, 0)]);
    let mut rng = rng_from_seed(50);
    let trials = 100_000;
    let mut sum_sq = 0.0;
    let mut sum_4 = 0.0;
    for _ in 0..trials {
        let mut x = 0.0;
        for _ in 0..50 {
            let e: f64 = rng.sample(StandardNormal);
            x = a * x + k * rbar.sqrt() * e;
        }
        sum_sq += x * x;
        sum_4 += x.powi(4);
    }
    let mean_sq = sum_sq / trials as f64;
    let se = ((sum_4 / trials as f64 - mean_sq * mean_sq) / trials as f64).sqrt();
    let gamma = state_covariance(&kf, 50)[(0, 0)];
    assert!((mean_sq - gamma).abs() <= 3.0 * se, "MC {mean_sq} vs {gamma} (se {se})");
}

#[test]
fn past_error_covariance_matches_sampling() {
    let kf = common::scalar_kf();
    let p = 3;
    let (sigma, _) = sigma_e_matrix(&kf, p);
    let t = toeplitz_of(&kf, p);
    let sd = kf.rbar()[(0, 0)].sqrt();
    let mut rng = rng_from_seed(3);
    let trials = 100_000;
    let mut sum = DMatrix::<f64>::zeros(p, p);
    let mut sum_sq = DMatrix::<f64>::zeros(p, p);
    for _ in 0..trials {
        let e = DMatrix::from_fn(p, 1, |_, _| sd * rng.sample::<f64, _>(StandardNormal));
        let v = &t * e;
        let outer = &v * v.transpose();
        sum_sq += outer.component_mul(&outer);
        sum += outer;
    }
    let mean = &sum / trials as f64;
    for i in 0..p {
        for j in 0..p {
            let var = sum_sq[(i, j)] / trials as f64 - mean[(i, j)].powi(2);
            let se = (var / trials as f64).sqrt();
            assert!((mean[(i, j)] - sigma[(i, j)]).abs() <= 4.0 * se, "entry ({i},{j})");
        }
    }
}

#[test]
fn delta_n_log_space_values() {
    let expect = -(4f64.ln().powi(2)) * 202f64.ln().powi(2);
    assert!((log_delta_n(100, 2, 1) - expect).abs() <= 1e-12 * expect.abs());
    let mut prev = f64::INFINITY;
    for n in [1u64, 10, 100, 1000, 10_000] {
        let l = log_delta_n(n, 2, 1);
        assert!(l < prev);
        prev = l;
    }
    assert!(delta_n(1, 1, 1) < 1.0);
    assert!(log_delta_n(1, 1, 1) < 0.0);
}

#[test]
fn kappa_grows_with_samples_and_shifts_by_delta() {
    let kf = common::scalar_kf();
    let hp = HankelParams::new(2, 2, 1).unwrap();
    let mut prev = 0.0;
    for n in [1u64, 10, 100, 1000, 100_000] {
        let k = kappa_n(&BoundInputs::new(&kf, hp, n, 0.1, 1.0).unwrap());
        assert!(k > 0.0 && k >= prev);
        prev = k;
    }
    let with = kappa_n(&BoundInputs { kf: &kf, hp, n_samples: 500, delta: 0.1, c_universal: 1.0 });
    let without = kappa_n(&BoundInputs { kf: &kf, hp, n_samples: 500, delta: 0.0, c_universal: 1.0 });
    assert!((with - without - 0.1).abs() <= 1e-12 * with);
}

#[test]
fn scalar_constants_match_hand_computation() {
    let kf = common::scalar_kf();
    let (a, c, k, rbar) = (kf.a()[(0, 0)], kf.c()[(0, 0)], kf.k()[(0, 0)], kf.rbar()[(0, 0)]);
    let hp = HankelParams::new(2, 2, 1).unwrap();
    // T_2 = [[1, 0], [b, 1]] with b = cK.
    let b = c * k;
    let t_norm = (b.abs() + (b * b + 4.0).sqrt()) / 2.0;
    assert!((norm2(&toeplitz_of(&kf, 2)) - t_norm).abs() < 1e-12);
    let s = 2.0 + b * b;
    let sigma_e = rbar * (s - (s * s - 4.0).sqrt()) / 2.0;
    assert!((sigma_e_matrix(&kf, 2).1 - sigma_e).abs() < 1e-12);
    let obs = c.abs() * (1.0 + a * a).sqrt();
    assert!((norm2(&observability_of(&kf, 2)) - obs).abs() < 1e-12);
    let (c1, c2) = constants_c1_c2(&kf, &hp).unwrap();
    assert!((c1 - 8.0 * (rbar / sigma_e).sqrt() * t_norm).abs() < 1e-10 * c1);
    // n = 1 and p = f, so the pseudo-inverse norm cancels the observability norm.
    assert!((c2 - 4.0).abs() < 1e-12);
    assert!(c1 > 0.0 && c2 > 0.0);
}

#[test]
fn thresholds_sit_at_predicate_transitions() {
    for kf in [common::scalar_kf(), common::jordan_kf()] {
        let n = kf.n();
        let hp = HankelParams::new(n + 1, n + 1, n).unwrap();
        let bi = BoundInputs::new(&kf, hp, 1000, 0.05, 1.0).unwrap();
        let th = thresholds(&bi, SCAN_CAP).unwrap();
        let preds: [(u64, &dyn Fn(u64) -> bool); 3] = [
            (th.n0, &|x| n0_predicate(&bi, x)),
            (th.n1, &|x| n1_predicate(&bi, x)),
            (th.n2, &|x| n2_predicate(&bi, x)),
        ];
        for (t, pred) in preds {
            assert!(pred(t));
            if t > 1 {
                assert!(!pred(t - 1), "predicate already true below {t}");
            }
        }
    }
}

#[test]
fn first_threshold_matches_explicit_inequality() {
    let kf = common::scalar_kf();
    let hp = HankelParams::new(2, 2, 1).unwrap();
    let bi = BoundInputs::new(&kf, hp, 1000, 0.05, 1.0).unwrap();
    let n0 = thresholds(&bi, SCAN_CAP).unwrap().n0;
    let holds = |n: u64| n as f64 >= 4.0 * 4f64.ln().powi(2) * (2.0 * (n as f64 + 1.0)).ln().powi(2);
    assert!(holds(n0) && !holds(n0 - 1));
}

#[test]
fn scan_cap_is_reported() {
    assert!(scan_threshold(|_| false, 1 << 20).is_err());
    assert_eq!(scan_threshold(|n| n >= 12345, SCAN_CAP).unwrap(), 12345);
}

#[test]
fn gamma_and_cross_term_vanish_with_samples() {
    let kf = common::scalar_kf();
    let hp = HankelParams::new(2, 2, 1).unwrap();
    let bi = BoundInputs::new(&kf, hp, 1000, 0.05, 1.0).unwrap();
    let mut prev_gamma = f64::INFINITY;
    let mut prev_cross = f64::INFINITY;
    for n in [1_000u64, 1_000_000, 1_000_000_000, 1_000_000_000_000] {
        let g = gamma_n(&bi, n);
        assert!(g < prev_gamma);
        prev_gamma = g;
        let cross = envelope_terms(&BoundInputs::new(&kf, hp, n, 0.05, 1.0).unwrap(), false).unwrap().cross;
        assert!(cross < prev_cross);
        prev_cross = cross;
    }
    assert!(prev_gamma < 1e-3 && prev_cross < 1e-3);
}

#[test]
fn truncation_term_follows_closed_loop_powers() {
    let kf = common::jordan_kf();
    let f = 3;
    let truncation = |p: usize| {
        let hp = HankelParams { p, f };
        envelope_terms(&BoundInputs::new(&kf, hp, 1000, 0.05, 1.0).unwrap(), true).unwrap().truncation
    };
    let phi = kf.closed_loop();
    for p in [3usize, 4, 6] {
        let c2 = |p| constants_c1_c2(&kf, &HankelParams { p, f }).unwrap().1;
        let ratio = truncation(2 * p) / truncation(p);
        let expect = c2(2 * p) / c2(p) * norm2(&matrix_power(&phi, 2 * p)) / norm2(&matrix_power(&phi, p));
        assert!((ratio - expect).abs() <= 1e-10 * expect);
        assert!(ratio < 1.0);
    }
}

#[test]
fn report_is_internally_consistent() {
    let kf = common::scalar_kf();
    let hp = HankelParams::new(2, 2, 1).unwrap();
    let rep = hankel_error_bound(&BoundInputs::new(&kf, hp, 4000, 0.01, 1.0).unwrap(), false).unwrap();
    assert_eq!(rep.total_bound, rep.cross_term_bound + rep.truncation_bound);
    assert!(rep.sigma_e >= rep.sigma_min_r && rep.sigma_min_r > 0.0);
    assert!((rep.total_probability_raw - (1.0 - rep.delta_n - 0.06)).abs() < 1e-15);
    let json = serde_json::to_value(&rep).unwrap();
    for key in ["sigma_e", "kappa_n", "c1", "c2", "n0", "n1", "n2", "trace_gamma", "trace_sigma_e"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn martingale_bound_values() {
    let v = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
    let base = martingale_bound(3, 2, 0.1, &v, &v).unwrap();
    assert!((base - 24.0 * (3.0 * 25.0 / 0.1f64).ln()).abs() < 1e-10);
    let one = DMatrix::from_element(1, 1, 1.0);
    assert!((martingale_bound(1, 1, 1.0, &one, &one).unwrap() - 8.0 * 5f64.ln()).abs() < 1e-12);
    assert!((8.0 * 5f64.ln() - 12.8755).abs() < 1e-4);
    let bigger = &v * 4.0;
    let grown = martingale_bound(3, 2, 0.1, &v, &bigger).unwrap();
    assert!((grown - base - 24.0 * 0.5 * 16f64.ln()).abs() < 1e-10);
    assert!(martingale_bound(3, 2, 0.1, &bigger, &v).is_err());
}

#[test]
fn realization_bound_values() {
    let zero = realization_error_bounds(4.0, 1.0, 0.0, 2, 0.5).unwrap();
    assert_eq!((zero.obs_bound, zero.c_bound, zero.a_bound, zero.k_bound), (0.0, 0.0, 0.0, 0.0));
    let b = realization_error_bounds(1.0, 1.0, 0.25, 1, 1.0).unwrap();
    assert!((b.obs_bound - 2.0 * 10f64.sqrt() * 0.25).abs() < 1e-12);
    assert!((b.obs_bound - 1.5811).abs() < 1e-4);
    assert!((b.a_bound - 2.0 * b.obs_bound).abs() < 1e-12);
    assert!(realization_error_bounds(1.0, 1.0, 0.26, 1, 1.0).is_err());
}

#[test]
fn output_gram_exceeds_markov_level_rarely() {
    let kf = common::scalar_kf();
    let hp = HankelParams::new(2, 2, 1).unwrap();
    let n_cols = 500;
    let trials = 1000;
    let norms: Vec<f64> = (0..trials)
        .map(|s| {
            let traj = simulate_innovation(&kf, &SimConfig::for_samples(n_cols, &hp, 9000 + s)).unwrap();
            let dm = build_data_matrices(&traj, &hp).unwrap();
            norm2(&(&dm.yminus * dm.yminus.transpose()))
        })
        .collect();
    for delta in [0.2, 0.5] {
        let level = output_gram_markov_level(&kf, &hp, n_cols as u64, delta);
        let freq = norms.iter().filter(|&&x| x >= level).count() as f64 / trials as f64;
        let se = (delta * (1.0 - delta) / trials as f64).sqrt();
        assert!(freq <= delta + 3.0 * se, "delta {delta}: frequency {freq}");
    }
}
