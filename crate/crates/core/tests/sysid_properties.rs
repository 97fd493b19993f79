use nalgebra::{Matrix3, Vector3};
use platoon_core::dynamics::OvmParams;
use platoon_core::sysid::{rls_update, HdvEstimate, OnlineEstimator, RlsState, Sample};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const S_EQ: f64 = 20.0;
const V_EQ: f64 = 15.0;

fn random_features(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen_range(-5.0..5.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]
}

/// Batch least squares through the normal equations.
fn normal_equations(xs: &[[f64; 3]], ys: &[f64]) -> Vector3<f64> {
    let mut xtx = Matrix3::zeros();
    let mut xty = Vector3::zeros();
    for (x, &y) in xs.iter().zip(ys) {
        let phi = Vector3::from(*x);
        xtx += phi * phi.transpose();
        xty += phi * y;
    }
    xtx.cholesky().expect("persistently exciting data").solve(&xty)
}

#[test]
fn rls_without_forgetting_matches_batch_least_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let truth = [0.8, -1.4, 0.9];
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut rls = RlsState::new(1.0, 1e8);
    for _ in 0..300 {
        let x = random_features(&mut rng);
        // noisy target, so the LS solution differs from the truth
        let y = truth.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + rng.gen_range(-0.5..0.5);
        rls = rls_update(&rls, &x, y);
        xs.push(x);
        ys.push(y);
    }
    let ls = normal_equations(&xs, &ys);
    for k in 0..3 {
        assert!((rls.theta[k] - ls[k]).abs() <= 1e-6 * ls[k].abs().max(1.0), "coeff {k}: {} vs {}", rls.theta[k], ls[k]);
    }
}

#[test]
fn rls_recovers_noiseless_linear_target() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let lin = OvmParams::default().linearize(S_EQ, V_EQ).unwrap();
    let truth = Vector3::new(lin.a1, -lin.a2, lin.a3);
    let mut rls = RlsState::new(0.999, 1e3);
    for _ in 0..200 {
        let x = random_features(&mut rng);
        rls = rls_update(&rls, &x, truth.dot(&Vector3::from(x)));
    }
    assert!((rls.theta - truth).amax() <= 1e-3, "{:?}", rls.theta);
}

fn sample_from(law: impl Fn(f64, f64, f64) -> f64, rng: &mut ChaCha8Rng, ds: f64, dv: f64) -> Sample {
    let s = S_EQ + rng.gen_range(-ds..ds);
    let v = V_EQ + rng.gen_range(-dv..dv);
    let v_prev = V_EQ + rng.gen_range(-dv..dv);
    Sample { s, v, v_prev, accel: law(s, v, v_prev) }
}

#[test]
fn linear_plant_is_identified_with_negligible_residual() {
    let lin = OvmParams::default().linearize(S_EQ, V_EQ).unwrap();
    let law = |s: f64, v: f64, vp: f64| lin.eval(s - S_EQ, v - V_EQ, vp - V_EQ);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut online = OnlineEstimator::with_defaults(HdvEstimate::new(S_EQ, V_EQ, 5.0, 1e-4, 7), 7);
    for _ in 0..3000 {
        online.observe(sample_from(law, &mut rng, 2.0, 1.0));
    }
    let est = &online.est;
    for (got, want) in est.coeffs.iter().zip([lin.a1, lin.a2, lin.a3]) {
        assert!((got - want).abs() <= 0.1 * want, "{:?} vs ({}, {}, {})", est.coeffs, lin.a1, lin.a2, lin.a3);
    }
    for _ in 0..200 {
        let smp = sample_from(law, &mut rng, 2.0, 1.0);
        let x = est.features(smp.s, smp.v, smp.v_prev);
        assert!(est.zeta(&x).abs() < 0.05, "zeta {}", est.zeta(&x));
    }
}

#[test]
fn residual_network_helps_in_the_nonlinear_regime() {
    let ovm = OvmParams::default();
    let law = |s: f64, v: f64, vp: f64| ovm.accel(s, v, vp).clamp(-5.0, 5.0);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut online = OnlineEstimator::with_defaults(HdvEstimate::new(S_EQ, V_EQ, 5.0, 1e-4, 8), 8);
    // spacing excursions of ±12 m reach well into the curved part of V(s)
    for _ in 0..3000 {
        online.observe(sample_from(law, &mut rng, 12.0, 2.0));
    }
    let held_out: Vec<Sample> = (0..1000).map(|_| sample_from(law, &mut rng, 12.0, 2.0)).collect();
    let mse = |f: &dyn Fn(&Sample) -> f64| held_out.iter().map(|s| (f(s) - s.accel).powi(2)).sum::<f64>() / 1000.0;
    let est = &online.est;
    let combined = mse(&|s| est.predict(s.s, s.v, s.v_prev));
    let linear = mse(&|s| est.predict_linear(s.s, s.v, s.v_prev));
    assert!(combined < linear, "combined {combined} vs linear {linear}");
}

proptest! {
    #[test]
    fn predictions_stay_within_actuator_range(
        coeffs in prop::array::uniform3(-50.0f64..50.0),
        seed in 0u64..1000,
        s in -100.0f64..200.0,
        v in -10.0f64..60.0,
        v_prev in -10.0f64..60.0,
    ) {
        let mut est = HdvEstimate::new(S_EQ, V_EQ, 5.0, 1e-4, seed);
        est.coeffs = coeffs;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut est.residual.params {
            *p = rng.gen_range(-10.0..10.0);
        }
        let a = est.predict(s, v, v_prev);
        prop_assert!((-5.0..=5.0).contains(&a));
        prop_assert!((-5.0..=5.0).contains(&est.predict_linear(s, v, v_prev)));
    }

    #[test]
    fn updates_keep_parameters_finite(
        samples in prop::collection::vec(
            (-100.0f64..200.0, -10.0f64..60.0, -10.0f64..60.0, -50.0f64..50.0), 1..50),
    ) {
        let mut online = OnlineEstimator::new(HdvEstimate::new(S_EQ, V_EQ, 5.0, 1e-4, 0), 16, 2, 4, 0);
        for (s, v, v_prev, accel) in samples {
            online.observe(Sample { s, v, v_prev, accel });
        }
        prop_assert!(online.est.coeffs.iter().all(|c| c.is_finite()));
        prop_assert!(online.est.residual.params.iter().all(|p| p.is_finite()));
    }
}
