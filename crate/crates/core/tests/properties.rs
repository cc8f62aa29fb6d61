//! Randomized invariants across modules.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use contrakt::certify::{certify, compute_eta, gershgorin_check, sampled_contraction_margin, CertifyConfig, ContractionProblem};
use contrakt::domain::BoxDomain;
use contrakt::ibp::{interval_product_bounds, left_mul_bounds, slope_scale_bounds, MatrixBounds};
use contrakt::linalg::sym_eig_max;
use contrakt::ncm::{mdot_eval, ncm_eval, ncm_grad, NcmParams};
use contrakt::nn::MlpParams;
use contrakt::systems::{andrieu3, pendulum, SystemModel};
use contrakt::train::{loss_l2, train, OptimizerKind, TrainConfig};
use contrakt::Mat;

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> Mat {
    Mat::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-s..=s)).collect()).unwrap()
}

fn rand_bounds(rng: &mut ChaCha8Rng, r: usize, c: usize) -> MatrixBounds {
    let mid = rand_mat(rng, r, c, 2.0);
    let rad = rand_mat(rng, r, c, 1.0).map(f64::abs);
    MatrixBounds::new(&mid - &rad, &mid + &rad).unwrap()
}

/// A matrix inside `b`: corners half of the time, interior otherwise.
fn realize(rng: &mut ChaCha8Rng, b: &MatrixBounds) -> Mat {
    let corner = rng.gen_bool(0.5);
    let data = b
        .lo
        .as_slice()
        .iter()
        .zip(b.hi.as_slice())
        .map(|(&l, &h)| {
            if corner {
                if rng.gen_bool(0.5) { l } else { h }
            } else {
                rng.gen_range(l..=h)
            }
        })
        .collect();
    Mat::from_vec(b.rows(), b.cols(), data).unwrap()
}

fn widen(rng: &mut ChaCha8Rng, b: &MatrixBounds) -> MatrixBounds {
    let grow = |m: &Mat, sign: f64, rng: &mut ChaCha8Rng| {
        Mat::from_vec(m.rows(), m.cols(), m.as_slice().iter().map(|v| v + sign * rng.gen_range(0.0..0.5)).collect()).unwrap()
    };
    let lo = grow(&b.lo, -1.0, rng);
    let hi = grow(&b.hi, 1.0, rng);
    MatrixBounds::new(lo, hi).unwrap()
}

fn linear(a: Mat, g: Mat) -> SystemModel {
    let n = a.rows();
    SystemModel::linear("linear", a, g, BoxDomain::new(vec![-1.0; n], vec![1.0; n]).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn interval_ops_are_sound(seed in any::<u64>(), r in 1usize..4, k in 1usize..4, c in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rand_mat(&mut rng, r, k, 2.0);
        let wb = rand_bounds(&mut rng, r, k);
        let pb = rand_bounds(&mut rng, k, c);
        let (a, b) = (rng.gen_range(0.05..0.5), 1.0);
        let f1 = left_mul_bounds(&pb, &w).unwrap();
        let f2 = slope_scale_bounds(&pb, a, b).unwrap();
        let f3 = interval_product_bounds(&wb, &pb).unwrap();
        for _ in 0..200 {
            let p = realize(&mut rng, &pb);
            prop_assert!(f1.contains(&w.matmul(&p).unwrap(), 1e-12));
            let slopes: Vec<f64> = (0..k).map(|_| if rng.gen_bool(0.3) { a } else { rng.gen_range(a..=b) }).collect();
            prop_assert!(f2.contains(&Mat::from_diag(&slopes).matmul(&p).unwrap(), 1e-12));
            let wr = realize(&mut rng, &wb);
            prop_assert!(f3.contains(&wr.matmul(&p).unwrap(), 1e-12));
        }
    }

    #[test]
    fn widening_inputs_never_tightens(seed in any::<u64>(), r in 1usize..4, k in 1usize..4, c in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rand_mat(&mut rng, r, k, 2.0);
        let wb = rand_bounds(&mut rng, r, k);
        let pb = rand_bounds(&mut rng, k, c);
        let (wb2, pb2) = (widen(&mut rng, &wb), widen(&mut rng, &pb));
        prop_assert!(left_mul_bounds(&pb2, &w).unwrap().encloses(&left_mul_bounds(&pb, &w).unwrap()));
        prop_assert!(slope_scale_bounds(&pb2, 0.3, 1.0).unwrap().encloses(&slope_scale_bounds(&pb, 0.3, 1.0).unwrap()));
        prop_assert!(interval_product_bounds(&wb2, &pb2).unwrap().encloses(&interval_product_bounds(&wb, &pb).unwrap()));
    }

    #[test]
    fn point_bounds_give_exact_products(seed in any::<u64>(), r in 1usize..5, k in 1usize..5, c in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rand_mat(&mut rng, r, k, 3.0);
        let p = rand_mat(&mut rng, k, c, 3.0);
        let exact = MatrixBounds::point(w.matmul(&p).unwrap());
        prop_assert_eq!(left_mul_bounds(&MatrixBounds::point(p.clone()), &w).unwrap(), exact.clone());
        prop_assert_eq!(
            interval_product_bounds(&MatrixBounds::point(w), &MatrixBounds::point(p)).unwrap(),
            exact
        );
    }

    #[test]
    fn passing_gershgorin_bounds_hold_for_members(seed in any::<u64>(), n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = rand_bounds(&mut rng, n, n);
        for i in 0..n {
            b.lo[(i, i)] -= 4.0;
            b.hi[(i, i)] -= 4.0;
        }
        let shift = rng.gen_range(-2.0..2.0);
        let (pass, margins) = gershgorin_check(&b, shift).unwrap();
        prop_assert_eq!(pass, margins.iter().all(|m| *m >= 0.0));
        if pass {
            for _ in 0..500 {
                let y = realize(&mut rng, &b);
                prop_assert!(sym_eig_max(&y.sym()).unwrap() <= -shift + 1e-9);
            }
        }
    }

    #[test]
    fn metrics_are_positive_definite_and_respect_the_input_direction(seed in any::<u64>(), general in any::<bool>()) {
        let sys = andrieu3();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = rng.gen_range(0.01..1.0);
        let phi = if general {
            NcmParams::general_random(&sys.g, eps, 3, 1.5, seed)
        } else {
            NcmParams::log_cosh_random(&sys.g, eps, 1.5, seed)
        };
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let m = ncm_eval(&phi, &x).unwrap();
            prop_assert!(-sym_eig_max(&m.scale(-1.0)).unwrap() >= eps - 1e-12);
            let along_g = ncm_grad(&phi, &x).unwrap().matvec(sys.g.as_slice()).unwrap();
            prop_assert!(along_g.iter().all(|v| v.abs() < 1e-8));
            let u1 = [rng.gen_range(-50.0..50.0)];
            let u2 = [rng.gen_range(-50.0..50.0)];
            let d = &mdot_eval(&phi, &sys, &x, &u1).unwrap() - &mdot_eval(&phi, &sys, &x, &u2).unwrap();
            prop_assert!(d.max_abs() < 1e-8);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // Only the sound row test is claimed to imply the pointwise condition.
    #[test]
    fn sound_certificate_implies_oracle(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = rand_mat(&mut rng, 2, 2, 0.5);
        for i in 0..2 {
            a[(i, i)] -= rng.gen_range(0.5..6.0);
        }
        let g = rand_mat(&mut rng, 2, 1, 1.0);
        let sys = linear(a, g.clone());
        let mut ctrl = MlpParams::random(&[2, 6, 1], 0.3, seed).unwrap();
        let shrink = rng.gen_range(0.0..0.5);
        let flat: Vec<f64> = ctrl.flat().iter().map(|v| v * shrink).collect();
        ctrl.set_flat(&flat).unwrap();
        let phi = if rng.gen_bool(0.5) {
            NcmParams::identity(2)
        } else {
            NcmParams::log_cosh_random(&g, 0.5, 0.3, seed)
        };
        let x_star = vec![0.0, 0.0];
        let u0 = ctrl.forward(&x_star).unwrap();
        let cfg = CertifyConfig {
            rho: rng.gen_range(0.0..0.5),
            domain: sys.domain.clone(),
            grid_tau: 0.25,
            x_star: x_star.clone(),
            equilibrium_tol: 1e3,
            oracle_samples: 1000,
            oracle_seed: seed,
        };
        prop_assume!(u0.iter().all(|v| v.is_finite()));
        let r = certify(&sys, &phi, &ctrl, &cfg).unwrap();
        if r.sound_pass {
            prop_assert!(r.oracle_min_margin >= -1e-9, "oracle {}", r.oracle_min_margin);
        }
    }

    #[test]
    fn scaling_the_metric_scales_budgets_and_oracle(k in 0.1f64..10.0, seed in any::<u64>()) {
        let sys = pendulum();
        let base = NcmParams::log_cosh_zero(&sys.g, 1.0);
        let scaled = NcmParams::log_cosh_zero(&sys.g, k);
        let x = sys.domain.samples(1, seed).pop().unwrap();
        prop_assert!((&ncm_eval(&scaled, &x).unwrap() - &Mat::identity(2).scale(k)).max_abs() == 0.0);
        let e1 = compute_eta(&sys, &base, 0.5, &sys.domain, 0.2).unwrap();
        let ek = compute_eta(&sys, &scaled, 0.5, &sys.domain, 0.2).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()));
        prop_assert!(close(ek.c1, k * e1.c1), "c1 {} vs {}", ek.c1, k * e1.c1);
        prop_assert!(close(ek.c2, k * e1.c2), "c2 {} vs {}", ek.c2, k * e1.c2);
        let ctrl = MlpParams::random(&[2, 8, 1], 0.3, seed).unwrap();
        let samples = sys.domain.samples(50, seed);
        let o1 = sampled_contraction_margin(&sys, &base, &ctrl, 0.5, &samples).unwrap();
        let ok = sampled_contraction_margin(&sys, &scaled, &ctrl, 0.5, &samples).unwrap();
        prop_assert!(close(ok, k * o1), "oracle {ok} vs {}", k * o1);
    }

    #[test]
    fn halving_grid_spacing_never_raises_budgets(seed in any::<u64>(), tau in 0.15f64..0.6) {
        let sys = pendulum();
        let dom = BoxDomain::new(vec![-1.0, -2.0], vec![1.5, 2.0]).unwrap();
        let phi = NcmParams::log_cosh_random(&sys.g, 0.2, 0.5, seed);
        let coarse = compute_eta(&sys, &phi, 0.5, &dom, tau).unwrap();
        let fine = compute_eta(&sys, &phi, 0.5, &dom, tau / 2.0).unwrap();
        prop_assert!(fine.c1 <= coarse.c1 + 1e-9, "c1 {} > {}", fine.c1, coarse.c1);
        prop_assert!(fine.c2 <= coarse.c2 + 1e-9, "c2 {} > {}", fine.c2, coarse.c2);
    }

    #[test]
    fn zero_hinge_loss_matches_certificate(seed in any::<u64>(), rho in 0.05f64..1.0) {
        let sys = pendulum();
        let dom = BoxDomain::new(vec![-0.5, -0.5], vec![0.5, 0.5]).unwrap();
        let mut ctrl = MlpParams::random(&[2, 6, 1], 0.3, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = rng.gen_range(0.0..40.0);
        let flat: Vec<f64> = ctrl.flat().iter().map(|v| v * s).collect();
        ctrl.set_flat(&flat).unwrap();
        let phi = NcmParams::identity(2);
        let pb = ContractionProblem::new(&sys, &phi, rho, &dom, 0.25).unwrap();
        let l2 = loss_l2(&pb.row_margins(&ctrl).unwrap());
        let cfg = CertifyConfig {
            rho,
            domain: dom,
            grid_tau: 0.25,
            x_star: vec![0.0, 0.0],
            equilibrium_tol: f64::INFINITY,
            oracle_samples: 10,
            oracle_seed: 0,
        };
        let r = certify(&sys, &phi, &ctrl, &cfg).unwrap();
        prop_assert_eq!(l2 == 0.0, r.pass);
    }
}

#[test]
fn sound_certificate_is_attainable() {
    let sys = linear(Mat::from_rows(&[[-3.0, 0.2], [0.0, -2.0]]), Mat::from_rows(&[[1.0], [0.5]]));
    let ctrl = MlpParams::zeros(&[2, 4, 1], 0.3).unwrap();
    let cfg = CertifyConfig {
        rho: 0.5,
        domain: sys.domain.clone(),
        grid_tau: 0.25,
        x_star: vec![0.0, 0.0],
        equilibrium_tol: 1e-4,
        oracle_samples: 1000,
        oracle_seed: 3,
    };
    let r = certify(&sys, &NcmParams::identity(2), &ctrl, &cfg).unwrap();
    assert!(r.sound_pass);
    assert!(r.oracle_min_margin > 0.0);
}

#[test]
fn certified_start_keeps_losses_flat() {
    // u ≡ 0 through a zero output layer: ℓ₁ = 0 at the hanging equilibrium
    // and every hinge is inactive, so nothing moves.
    let sys = pendulum();
    let mut ctrl = MlpParams::random(&[2, 16, 1], 0.3, 4).unwrap();
    ctrl.wo = Mat::zeros(1, 16);
    for optimizer in [OptimizerKind::Adam, OptimizerKind::Sgd] {
        let cfg = TrainConfig {
            rho: 0.5,
            nu: 1.0,
            lr: 1e-2,
            epochs: 10,
            seed: 0,
            domain: sys.domain.clone(),
            grid_tau: 0.2,
            x_star: vec![0.0, 0.0],
            optimizer,
            target_l1: 1e-4,
            log_every: 1,
            early_stop: false,
            train_metric: false,
        };
        let r = train(&sys, &ctrl, &NcmParams::identity(2), &cfg).unwrap();
        assert_eq!(r.history.len(), 11);
        for w in r.history.windows(2) {
            assert!(w[1].total <= w[0].total);
            assert_eq!(w[1].l2, 0.0);
        }
        assert_eq!(r.controller, ctrl);
    }
}
