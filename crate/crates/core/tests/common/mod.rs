//! Helpers shared by the integration tests and the acceptance runner.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use segtrend::limit_dist::Basis;
use segtrend::trend_model::evaluate_trend;
use segtrend::{EquationParams, MultiSeries, Result};

use nalgebra::DMatrix;

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let diff = left + right - whole;
    if depth == 0 || diff.abs() <= 15.0 * tol {
        return left + right + diff / 15.0;
    }
    adaptive(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + adaptive(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// Adaptive Simpson on `[a, b]`, restarted at each point of `knots` so that
/// every panel sees a smooth integrand.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, knots: &[f64], tol: f64) -> f64 {
    let mut cuts: Vec<f64> = knots.iter().copied().filter(|&k| k > a && k < b).collect();
    cuts.push(a);
    cuts.push(b);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let f = &f;
    cuts.windows(2)
        .map(|w| {
            let (lo, hi) = (w[0], w[1]);
            // evaluate just inside the panel so step functions take their
            // interior value at the ends
            let eps = (hi - lo) * 1e-15;
            let g = |r: f64| f(r.clamp(lo + eps, hi - eps));
            let fa = g(lo);
            let fb = g(hi);
            let fm = g(0.5 * (lo + hi));
            let whole = simpson(lo, hi, fa, fm, fb);
            adaptive(&g, lo, hi, fa, fm, fb, whole, tol, 40)
        })
        .sum()
}

pub fn knot(b: Basis) -> Option<f64> {
    match b {
        Basis::Ramp(x) | Basis::Step(x) => Some(x),
        Basis::One | Basis::Lin => None,
    }
}

/// `int_0^1 a(r) b(r) dr` by quadrature.
pub fn quad_inner(a: Basis, b: Basis) -> f64 {
    let knots: Vec<f64> = [knot(a), knot(b)].into_iter().flatten().collect();
    integrate(|r| a.eval(r) * b.eval(r), 0.0, 1.0, &knots, 1e-14)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Sorted dates in `[lo, hi]` at least `sep` apart.
pub fn random_dates(
    rng: &mut ChaCha8Rng,
    m: usize,
    lo: usize,
    hi: usize,
    sep: usize,
) -> Vec<usize> {
    loop {
        let mut k: Vec<usize> = (0..m).map(|_| rng.random_range(lo..=hi)).collect();
        k.sort_unstable();
        if k.windows(2).all(|w| w[1] - w[0] >= sep) {
            return k;
        }
    }
}

/// Joined trends with the given dates and slope changes, plus iid noise.
pub fn trend_system(
    rng: &mut ChaCha8Rng,
    t: usize,
    dates: &[Vec<usize>],
    changes: &[Vec<f64>],
    noise: f64,
) -> Result<MultiSeries> {
    let n = dates.len();
    let mut values = DMatrix::zeros(n, t);
    for i in 0..n {
        let p = EquationParams::new(0.5 * i as f64, 0.01 * (i as f64 + 1.0), changes[i].clone());
        let trend = evaluate_trend(&p, &dates[i], t)?;
        for (s, v) in trend.into_iter().enumerate() {
            values[(i, s)] = v + noise * normal(rng);
        }
    }
    MultiSeries::new(values, (0..n).map(|i| format!("y{}", i + 1)).collect(), 1)
}
