mod common;

use proptest::prelude::*;

use ssid::linalg::matrix_power;
use ssid::simulate::{simulate_innovation, simulate_statespace, SimConfig};
use ssid::structmats::{
    build_data_matrices, controllability_of, hankel_true, observability_of, toeplitz_of, HankelParams,
};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn past_and_future_identities_hold(seed in any::<u64>(), extra in 0usize..3, mode in 0u8..2) {
        let (n, m) = common::random_dims(seed);
        let (kf, _) = common::random_kf(seed, n, m, 0);
        let hp = HankelParams::new(n + 1 + extra, n + 2, n).unwrap();
        let cfg = SimConfig::for_samples(300, &hp, seed);
        let traj = if mode == 0 { simulate_innovation(&kf, &cfg) } else { simulate_statespace(&kf, &cfg) }.unwrap();
        let dm = build_data_matrices(&traj, &hp).unwrap();
        prop_assert_eq!(dm.n(), 300);
        let (em, ep) = (dm.eminus.as_ref().unwrap(), dm.eplus.as_ref().unwrap());
        let x = dm.xhat_block.as_ref().unwrap();
        let op = observability_of(&kf, hp.p);
        let past = &op * x + toeplitz_of(&kf, hp.p) * em;
        let scale = dm.yminus.amax().max(1.0);
        prop_assert!((&past - &dm.yminus).amax() <= 1e-10 * scale);
        let future = hankel_true(&kf, &hp) * &dm.yminus
            + observability_of(&kf, hp.f) * matrix_power(&kf.closed_loop(), hp.p) * x
            + toeplitz_of(&kf, hp.f) * ep;
        prop_assert!((&future - &dm.yplus).amax() <= 1e-10 * dm.yplus.amax().max(1.0));
        // The shifted state block obeys the closed-loop recursion driven by past outputs.
        let xf = dm.xhat_future.as_ref().unwrap();
        let rebuilt = controllability_of(&kf, hp.p) * &dm.yminus + matrix_power(&kf.closed_loop(), hp.p) * x;
        prop_assert!((&rebuilt - xf).amax() <= 1e-10 * xf.amax().max(1.0));
    }

    #[test]
    fn structured_matrix_shapes_and_blocks(seed in any::<u64>(), k in 1usize..6) {
        let (n, m) = common::random_dims(seed);
        let (kf, _) = common::random_kf(seed, n, m, 0);
        let o = observability_of(&kf, k);
        prop_assert_eq!(o.shape(), (m * k, n));
        let ctrl = controllability_of(&kf, k);
        prop_assert_eq!(ctrl.shape(), (n, m * k));
        let t = toeplitz_of(&kf, k);
        prop_assert_eq!(t.shape(), (m * k, m * k));
        for i in 0..k {
            let blk = o.view((i * m, 0), (m, n));
            prop_assert!((blk - kf.c() * matrix_power(kf.a(), i)).amax() < 1e-10);
            let cblk = ctrl.view((0, i * m), (n, m));
            prop_assert!((cblk - matrix_power(&kf.closed_loop(), k - 1 - i) * kf.k()).amax() < 1e-10);
            for j in 0..k {
                let tb = t.view((i * m, j * m), (m, m)).into_owned();
                if i == j {
                    prop_assert!((tb - nalgebra::DMatrix::<f64>::identity(m, m)).amax() == 0.0);
                } else if i < j {
                    prop_assert!(tb.amax() == 0.0);
                } else {
                    let expect = kf.c() * matrix_power(kf.a(), i - j - 1) * kf.k();
                    prop_assert!((tb - expect).amax() < 1e-10);
                }
            }
        }
    }
}

#[test]
fn sample_count_bookkeeping() {
    let kf = common::scalar_kf();
    let hp = HankelParams::new(3, 2, 1).unwrap();
    let cfg = SimConfig::for_samples(1000, &hp, 1);
    assert_eq!(cfg.nbar, 1000 + 3 + 2 - 1);
    let dm = build_data_matrices(&simulate_innovation(&kf, &cfg).unwrap(), &hp).unwrap();
    assert_eq!(dm.n(), 1000);
    assert_eq!(dm.yplus.shape(), (2, 1000));
    assert_eq!(dm.yminus.shape(), (3, 1000));
}
