//! Independent reference computations shared by the integration and
//! acceptance tests. Nothing here calls into the solver it checks.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Relative error with an absolute floor on the denominator.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// A random strictly convex QP `min 1/2 w'diag(h)w + p'w s.t. Gw <= q`,
/// feasible by construction around a random interior-or-boundary point.
#[derive(Debug, Clone)]
pub struct RandomQp {
    pub diag: Vec<f64>,
    pub linear: DVector<f64>,
    pub g: DMatrix<f64>,
    pub rhs: DVector<f64>,
}

pub fn random_qp(rng: &mut ChaCha8Rng, max_d: usize, max_c: usize) -> RandomQp {
    let d = rng.gen_range(1..=max_d);
    let c = rng.gen_range(1..=max_c);
    let diag: Vec<f64> = (0..d).map(|_| rng.gen_range(0.5..5.0)).collect();
    let linear = DVector::from_fn(d, |_, _| rng.gen_range(-3.0..3.0));
    let g = DMatrix::from_fn(c, d, |_, _| rng.gen_range(-2.0..2.0));
    let w0 = DVector::from_fn(d, |_, _| rng.gen_range(-2.0..2.0));
    let slack = DVector::from_fn(c, |_, _| if rng.gen_bool(0.25) { 0.0 } else { rng.gen_range(0.0..2.0) });
    let rhs = &g * &w0 + slack;
    RandomQp { diag, linear, g, rhs }
}

/// Exhaustive active-set enumeration: for every subset S of rows, solve the
/// equality-constrained KKT system and accept the first candidate that is
/// primal feasible with non-negative multipliers.
pub fn enumerate_active_sets(p: &RandomQp) -> Option<(DVector<f64>, DVector<f64>)> {
    let d = p.diag.len();
    let c = p.rhs.len();
    let mut subsets: Vec<Vec<usize>> = (0u32..(1 << c))
        .map(|mask| (0..c).filter(|k| mask & (1 << k) != 0).collect())
        .collect();
    subsets.sort_by_key(|s| s.len());
    for rows in subsets {
        if rows.len() > d {
            continue;
        }
        let a = rows.len();
        let mut kkt = DMatrix::<f64>::zeros(d + a, d + a);
        let mut rhs = DVector::<f64>::zeros(d + a);
        for i in 0..d {
            kkt[(i, i)] = p.diag[i];
            rhs[i] = -p.linear[i];
        }
        for (j, &k) in rows.iter().enumerate() {
            for i in 0..d {
                kkt[(i, d + j)] = p.g[(k, i)];
                kkt[(d + j, i)] = p.g[(k, i)];
            }
            rhs[d + j] = p.rhs[k];
        }
        // skip rank-deficient subsets
        let svd = kkt.clone().svd(false, false);
        let smin = svd.singular_values.min();
        let smax = svd.singular_values.max();
        if smin <= 1e-10 * smax.max(1.0) {
            continue;
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let w = sol.rows(0, d).into_owned();
        let mut lambda = DVector::zeros(c);
        for (j, &k) in rows.iter().enumerate() {
            lambda[k] = sol[d + j];
        }
        let feasible = (0..c).all(|k| {
            let r = (p.g.row(k) * &w)[0] - p.rhs[k];
            r <= 1e-9 * (1.0 + p.rhs[k].abs())
        });
        if feasible && lambda.iter().all(|&l| l >= -1e-10) {
            return Some((w, lambda));
        }
    }
    None
}

/// Sensitivities from the full (unreduced) KKT matrix
/// `K = [Q G'; D(λ)G D(Gw - q)]` with right-hand side `[0; D(λ)]`.
pub fn full_kkt_sensitivity(
    p: &RandomQp,
    w: &DVector<f64>,
    lambda: &DVector<f64>,
) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let d = p.diag.len();
    let c = p.rhs.len();
    let mut k = DMatrix::<f64>::zeros(d + c, d + c);
    for i in 0..d {
        k[(i, i)] = p.diag[i];
    }
    let residual = &p.g * w - &p.rhs;
    for r in 0..c {
        for i in 0..d {
            k[(i, d + r)] = p.g[(r, i)];
            k[(d + r, i)] = lambda[r] * p.g[(r, i)];
        }
        k[(d + r, d + r)] = residual[r];
    }
    let mut rhs = DMatrix::<f64>::zeros(d + c, c);
    for r in 0..c {
        rhs[(d + r, r)] = lambda[r];
    }
    let sol = k.lu().solve(&rhs)?;
    Some((sol.rows(0, d).into_owned(), sol.rows(d, c).into_owned()))
}

/// Central finite differences of a vector-valued function of one scalar.
pub fn central_diff<F>(f: F, x: f64, h: f64) -> Vec<f64>
where
    F: Fn(f64) -> Vec<f64>,
{
    let plus = f(x + h);
    let minus = f(x - h);
    plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * h)).collect()
}
