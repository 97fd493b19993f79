use platoon_core::dynamics::{self, OvmParams, PlatoonConfig, PlatoonState};
use proptest::prelude::*;

#[test]
fn optimal_velocity_shape_on_grid() {
    let p = OvmParams::default();
    let n = 1000;
    let (lo, hi) = (0.0, 50.0);
    let ds = (hi - lo) / (n - 1) as f64;
    // steepest slope of the cosine branch
    let lipschitz = p.v_max / 2.0 * std::f64::consts::PI / (p.s_go - p.s_st);
    let mut prev = p.optimal_velocity(lo);
    for k in 1..n {
        let v = p.optimal_velocity(lo + k as f64 * ds);
        assert!(v >= prev - 1e-9, "decreasing at grid point {k}");
        assert!(v - prev <= lipschitz * ds + 1e-9, "jump at grid point {k}");
        assert!((0.0..=p.v_max).contains(&v));
        prev = v;
    }
    assert_eq!(p.optimal_velocity(p.s_st), 0.0);
    assert!((p.optimal_velocity(p.s_go) - p.v_max).abs() <= 1e-9);
    for s in [p.s_st, p.s_go] {
        for eps in [1e-12, 1e-10] {
            let jump = (p.optimal_velocity(s + eps) - p.optimal_velocity(s - eps)).abs();
            assert!(jump <= 1e-9, "discontinuous at {s}");
        }
    }
}

#[test]
fn linearization_residual_is_second_order() {
    let p = OvmParams::default();
    let lin = p.linearize(20.0, 15.0).unwrap();
    // alpha * max|V''| / 2 with max|V''| = v_max/2 * (pi / (s_go - s_st))^2
    let vpp = p.v_max / 2.0 * (std::f64::consts::PI / (p.s_go - p.s_st)).powi(2);
    let c = p.alpha * vpp / 2.0;
    let mut worst: f64 = 0.0;
    for i in 0..=20 {
        for j in 0..=20 {
            for k in 0..=4 {
                let ds = -0.1 + 0.01 * i as f64;
                let dv = -0.1 + 0.01 * j as f64;
                let dvp = -0.1 + 0.05 * k as f64;
                let norm2 = ds * ds + dv * dv + dvp * dvp;
                if norm2 > 0.01 || norm2 == 0.0 {
                    continue;
                }
                let exact = p.accel(20.0 + ds, 15.0 + dv, 15.0 + dvp);
                let resid = (exact - lin.eval(ds, dv, dvp)).abs();
                worst = worst.max(resid / norm2);
            }
        }
    }
    assert!(worst <= c + 1e-12, "residual ratio {worst} exceeds {c}");
}

fn perturbed(cfg: &PlatoonConfig) -> PlatoonState {
    let mut x = cfg.equilibrium_state();
    x.spacing[0] += 1.5;
    x.velocity[1] -= 0.8;
    x.spacing[3] -= 1.0;
    x
}

fn recovery_endpoint(dt: f64) -> Vec<f64> {
    let cfg = PlatoonConfig { dt, ..PlatoonConfig::default() };
    let steps = (10.0 / dt).round() as usize;
    let mut x = perturbed(&cfg);
    for _ in 0..steps {
        x = dynamics::step(&x, &cfg, 0.0, 0.0).unwrap();
    }
    x.spacing.iter().chain(&x.velocity).copied().collect()
}

#[test]
fn euler_converges_at_first_order() {
    let reference = recovery_endpoint(0.1 / 64.0);
    let err = |dt: f64| {
        recovery_endpoint(dt)
            .iter()
            .zip(&reference)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    };
    let coarse = err(0.1);
    let fine = err(0.05);
    let order = (coarse / fine).log2();
    assert!(order >= 0.9, "empirical order {order}");
}

#[test]
fn equilibrium_has_zero_drift_for_long_horizons() {
    let cfg = PlatoonConfig::default();
    let x0 = cfg.equilibrium_state();
    let mut x = x0.clone();
    for _ in 0..5000 {
        let next = dynamics::step(&x, &cfg, 0.0, 0.0).unwrap();
        assert_eq!(next.spacing, x.spacing);
        assert_eq!(next.velocity, x.velocity);
        x = next;
    }
    assert_eq!(x.v_head, x0.v_head);
}

proptest! {
    #[test]
    fn spacings_positive_unless_collision_flagged(
        ds in prop::collection::vec(-15.0f64..15.0, 5),
        dv in prop::collection::vec(-10.0f64..10.0, 5),
        controls in prop::collection::vec(-5.0f64..5.0, 200),
        head in prop::collection::vec(-3.0f64..3.0, 200),
    ) {
        let cfg = PlatoonConfig::default();
        let mut x = cfg.equilibrium_state();
        for i in 0..5 {
            x.spacing[i] += ds[i];
            x.velocity[i] += dv[i];
        }
        for (u, a) in controls.iter().zip(&head) {
            x = dynamics::step(&x, &cfg, *u, *a).unwrap();
            prop_assert!(x.velocity.iter().all(|&v| v >= 0.0));
            if !x.collided {
                prop_assert!(x.spacing.iter().all(|&s| s > 0.0));
            }
        }
    }
}
