mod support;

use nalgebra::{DMatrix, DVector};
use platoon_core::qp::{self, QpProblem, SolveStatus};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::oracles::{self, RandomQp};

fn to_problem(p: &RandomQp) -> QpProblem {
    QpProblem::diagonal(&p.diag, p.g.clone(), p.rhs.clone(), Some(p.linear.clone())).unwrap()
}

/// Every row either clearly slack or clearly active, so small perturbations
/// of `q` keep the active set.
fn well_separated(prob: &QpProblem, sol: &qp::QpSolution, margin: f64) -> bool {
    let r = prob.residual(&sol.w);
    (0..prob.n_constraints()).all(|k| r[k] < -margin || sol.lambda[k] > margin)
}

#[test]
fn matches_exhaustive_oracle_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..1000 {
        let p = oracles::random_qp(&mut rng, 4, 8);
        let prob = to_problem(&p);
        let sol = qp::solve(&prob).unwrap();
        assert_ne!(sol.status, SolveStatus::Infeasible, "case {case}");
        let (w_ref, _) = oracles::enumerate_active_sets(&p).expect("oracle finds the KKT point");
        let err = (&sol.w - &w_ref).amax();
        assert!(err <= 1e-7, "case {case}: |dw| = {err:e}");
    }
}

#[test]
fn sensitivities_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let h = 1e-5;
    let mut checked = 0;
    for _ in 0..400 {
        let p = oracles::random_qp(&mut rng, 4, 8);
        let prob = to_problem(&p);
        let sol = qp::solve(&prob).unwrap();
        if sol.status != SolveStatus::Optimal || !well_separated(&prob, &sol, 1e-3) {
            continue;
        }
        let sens = qp::kkt_sensitivity(&prob, &sol).unwrap();
        for k in 0..prob.n_constraints() {
            let fd = oracles::central_diff(
                |x| {
                    let mut pp = prob.clone();
                    pp.rhs[k] = x;
                    let s = qp::solve(&pp).unwrap();
                    s.w.iter().chain(s.lambda.iter()).copied().collect()
                },
                prob.rhs[k],
                h,
            );
            let d = prob.dim();
            for i in 0..d {
                let e = oracles::rel_err(sens.dw_dq[(i, k)], fd[i], 1e-3);
                assert!(e <= 1e-4, "dw{i}/dq{k}: {} vs {} ({e:e})", sens.dw_dq[(i, k)], fd[i]);
            }
            for j in 0..prob.n_constraints() {
                let e = oracles::rel_err(sens.dlambda_dq[(j, k)], fd[d + j], 1e-3);
                assert!(e <= 1e-4, "dl{j}/dq{k}: {} vs {}", sens.dlambda_dq[(j, k)], fd[d + j]);
            }
        }
        checked += 1;
    }
    assert!(checked > 100, "only {checked} non-degenerate instances");
}

#[test]
fn reduced_kkt_agrees_with_full_kkt_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    for _ in 0..300 {
        let p = oracles::random_qp(&mut rng, 4, 8);
        let prob = to_problem(&p);
        let sol = qp::solve(&prob).unwrap();
        if sol.status != SolveStatus::Optimal || !well_separated(&prob, &sol, 1e-6) {
            continue;
        }
        let Some((dw, dl)) = oracles::full_kkt_sensitivity(&p, &sol.w, &sol.lambda) else { continue };
        let sens = qp::kkt_sensitivity(&prob, &sol).unwrap();
        assert!((&dw - &sens.dw_dq).amax() < 1e-8);
        assert!((&dl - &sens.dlambda_dq).amax() < 1e-8);
        checked += 1;
    }
    assert!(checked > 100);
}

#[test]
fn strictly_slack_rows_have_zero_columns() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..300 {
        let p = oracles::random_qp(&mut rng, 4, 8);
        let prob = to_problem(&p);
        let sol = qp::solve(&prob).unwrap();
        let Ok(sens) = qp::kkt_sensitivity(&prob, &sol) else { continue };
        let r = prob.residual(&sol.w);
        for k in 0..prob.n_constraints() {
            if sol.lambda[k] == 0.0 && r[k] < -qp::FEAS_TOL {
                assert_eq!(sens.dw_dq.column(k).amax(), 0.0);
            }
        }
    }
}

fn qp_strategy() -> impl Strategy<Value = RandomQp> {
    (1usize..=4, 1usize..=8).prop_flat_map(|(d, c)| {
        (
            prop::collection::vec(0.2f64..10.0, d),
            prop::collection::vec(-5.0f64..5.0, d),
            prop::collection::vec(-3.0f64..3.0, c * d),
            prop::collection::vec(-3.0f64..3.0, d),
            prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..3.0], c),
        )
            .prop_map(move |(diag, lin, g, w0, slack)| {
                let g = DMatrix::from_row_slice(c, d, &g);
                let w0 = DVector::from_vec(w0);
                let rhs = &g * &w0 + DVector::from_vec(slack);
                RandomQp { diag, linear: DVector::from_vec(lin), g, rhs }
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn kkt_conditions_hold(p in qp_strategy()) {
        let prob = to_problem(&p);
        let sol = qp::solve(&prob).unwrap();
        prop_assert_ne!(sol.status, SolveStatus::Infeasible);
        let stationarity = &prob.hessian * &sol.w + &prob.linear + prob.g.transpose() * &sol.lambda;
        prop_assert!(stationarity.amax() <= 1e-8, "stationarity {}", stationarity.amax());
        let r = prob.residual(&sol.w);
        // nearly parallel active rows show up as large multipliers and cost
        // feasibility accuracy in proportion
        let feas_tol = 1e-8 * sol.lambda.amax().max(1.0);
        for k in 0..prob.n_constraints() {
            prop_assert!(r[k] <= feas_tol, "row {} violated by {}", k, r[k]);
            // multipliers blow up on nearly dependent rows; compare relative to them
            prop_assert!((sol.lambda[k] * r[k]).abs() <= 1e-8 * sol.lambda[k].abs().max(1.0), "lambda {} r {}", sol.lambda[k], r[k]);
            prop_assert!(sol.lambda[k] >= -1e-10);
        }
    }

    #[test]
    fn solve_is_deterministic(p in qp_strategy()) {
        let prob = to_problem(&p);
        let a = qp::solve(&prob).unwrap();
        let b = qp::solve(&prob).unwrap();
        let bits = |v: &DVector<f64>| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a.w), bits(&b.w));
        prop_assert_eq!(bits(&a.lambda), bits(&b.lambda));
    }
}
