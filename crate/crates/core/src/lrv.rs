//! Short-run and long-run (HAC) covariance of residuals, quadratic spectral
//! kernel with an AR(1) plug-in bandwidth.

use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;

/// Largest autoregressive coefficient used in the bandwidth rule.
pub const AR1_CLAMP: f64 = 0.97;

/// Relative eigenvalue floor applied before `psi` is inverted downstream.
pub const PSI_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct HacEstimate {
    /// `Gamma_0 = U U' / T`
    pub sigma: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    pub bandwidth: f64,
}

impl HacEstimate {
    /// `psi` with eigenvalues below `PSI_FLOOR * trace` raised to that floor.
    pub fn psi_floored(&self) -> DMatrix<f64> {
        linalg::floor_eigenvalues(&self.psi, PSI_FLOOR).0
    }
}

// Below this |z| the closed form loses digits to cancellation.
const SERIES_CUTOFF: f64 = 1e-2;

pub fn qs_weight(x: f64) -> f64 {
    if x == 0.0 {
        return 1.0;
    }
    let z = 6.0 * PI * x / 5.0;
    if z.abs() < SERIES_CUTOFF {
        // series: 1 - z^2/10 + z^4/280
        let z2 = z * z;
        return 1.0 - z2 / 10.0 + z2 * z2 / 280.0;
    }
    25.0 / (12.0 * PI * PI * x * x) * (z.sin() / z - z.cos())
}

fn check_len(residuals: &DMatrix<f64>) -> Result<()> {
    if residuals.ncols() < 10 {
        return Err(Error::invalid(format!(
            "long-run variance needs T >= 10, got {}",
            residuals.ncols()
        )));
    }
    Ok(())
}

/// Andrews' AR(1) plug-in bandwidth for the QS kernel, unit weights.
pub fn andrews_bandwidth(residuals: &DMatrix<f64>) -> Result<f64> {
    check_len(residuals)?;
    let t = residuals.ncols();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..residuals.nrows() {
        let u = residuals.row(i);
        let mut sxy = 0.0;
        let mut sxx = 0.0;
        for s in 1..t {
            sxy += u[s] * u[s - 1];
            sxx += u[s - 1] * u[s - 1];
        }
        if sxx == 0.0 {
            continue;
        }
        let mut rho = sxy / sxx;
        if rho.abs() > AR1_CLAMP {
            log::warn!("AR(1) coefficient {rho:.4} of series {i} clamped to +-{AR1_CLAMP}");
            rho = rho.clamp(-AR1_CLAMP, AR1_CLAMP);
        }
        let s2 = (1..t).map(|s| (u[s] - rho * u[s - 1]).powi(2)).sum::<f64>() / (t - 1) as f64;
        let s4 = s2 * s2;
        num += 4.0 * rho * rho * s4 / (1.0 - rho).powi(8);
        den += s4 / (1.0 - rho).powi(4);
    }
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok(1.3221 * (num / den * t as f64).powf(0.2))
}

pub fn long_run_variance(residuals: &DMatrix<f64>) -> Result<HacEstimate> {
    let bw = andrews_bandwidth(residuals)?;
    long_run_variance_with_bandwidth(residuals, bw)
}

/// HAC estimate at a given bandwidth; a bandwidth of zero returns
/// `psi = sigma`.
pub fn long_run_variance_with_bandwidth(
    residuals: &DMatrix<f64>,
    bandwidth: f64,
) -> Result<HacEstimate> {
    check_len(residuals)?;
    if !(bandwidth >= 0.0) {
        return Err(Error::invalid(format!("bandwidth {bandwidth} is negative")));
    }
    let t = residuals.ncols();
    let n = residuals.nrows();
    let tf = t as f64;
    let sigma = linalg::symmetrize(&(residuals * residuals.transpose() / tf));
    let mut psi = sigma.clone();
    if bandwidth > 0.0 {
        for j in 1..t {
            let w = qs_weight(j as f64 / bandwidth);
            if w == 0.0 {
                continue;
            }
            let lead = residuals.columns(j, t - j);
            let lag = residuals.columns(0, t - j);
            let gamma = lead * lag.transpose() / tf;
            for a in 0..n {
                for b in 0..n {
                    psi[(a, b)] += w * (gamma[(a, b)] + gamma[(b, a)]);
                }
            }
        }
    }
    Ok(HacEstimate {
        sigma,
        psi,
        bandwidth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, t: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, t, |_, _| StandardNormal.sample(&mut rng))
    }

    fn ar1(alpha: f64, t: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut e = 0.0;
        for _ in 0..100 {
            let z: f64 = StandardNormal.sample(&mut rng);
            e = alpha * e + (1.0 - alpha) * z;
        }
        DMatrix::from_fn(1, t, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            e = alpha * e + (1.0 - alpha) * z;
            e
        })
    }

    #[test]
    fn qs_weight_at_origin_and_near_it() {
        assert_eq!(qs_weight(0.0), 1.0);
        assert!((qs_weight(1e-8) - 1.0).abs() < 1e-6);
        // continuity across the series switch
        let x = SERIES_CUTOFF * 5.0 / (6.0 * PI);
        let a = qs_weight(x * (1.0 - 1e-9));
        let b = qs_weight(x * (1.0 + 1e-9));
        assert!((a - b).abs() < 1e-11, "{}", a - b);
    }

    #[test]
    fn qs_weight_at_one_matches_high_precision_value() {
        // 25/(12 pi^2) (sin(6pi/5)/(6pi/5) - cos(6pi/5)), evaluated to 30 digits
        let expected = 0.137860581674594_f64;
        assert!(
            (qs_weight(1.0) - expected).abs() < 1e-12,
            "{}",
            qs_weight(1.0)
        );
    }

    #[test]
    fn white_residuals_with_zero_rho_give_zero_bandwidth() {
        // every lag-one product u_t u_{t-1} is zero
        let u =
            DMatrix::from_row_slice(1, 12, &[1., 0., -1., 0., 1., 0., -1., 0., 1., 0., -1., 0.]);
        assert_eq!(andrews_bandwidth(&u).unwrap(), 0.0);
    }

    #[test]
    fn bandwidth_matches_scalar_formula() {
        let u = ar1(0.5, 100, 4);
        let row = u.row(0);
        let rho = (1..100).map(|s| row[s] * row[s - 1]).sum::<f64>()
            / (1..100).map(|s| row[s - 1] * row[s - 1]).sum::<f64>();
        // single series: the innovation variance cancels
        let alpha2 = 4.0 * rho * rho / (1.0 - rho).powi(4);
        let expected = 1.3221 * (alpha2 * 100.0).powf(0.2);
        assert!((andrews_bandwidth(&u).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn bandwidth_is_scale_invariant() {
        let u = gaussian(2, 200, 8);
        let a = andrews_bandwidth(&u).unwrap();
        let b = andrews_bandwidth(&(&u * 10.0)).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn iid_long_run_variance_is_identity() {
        let h = long_run_variance(&gaussian(2, 2000, 21)).unwrap();
        let err = (&h.psi - DMatrix::<f64>::identity(2, 2)).abs().max();
        assert!(err < 0.15, "{err}");
    }

    #[test]
    fn unit_long_run_variance_design() {
        let h = long_run_variance(&ar1(0.5, 2000, 3)).unwrap();
        assert!((h.psi[(0, 0)] - 1.0).abs() < 0.2, "{}", h.psi[(0, 0)]);
    }

    #[test]
    fn zero_bandwidth_returns_sigma() {
        let u = gaussian(3, 50, 1);
        let h = long_run_variance_with_bandwidth(&u, 0.0).unwrap();
        assert_eq!(h.psi, h.sigma);
    }

    #[test]
    fn white_noise_psi_approaches_sigma() {
        let gap = |t: usize| {
            let h = long_run_variance(&gaussian(2, t, 77)).unwrap();
            (&h.psi - &h.sigma).abs().max()
        };
        let small = gap(500);
        let large = gap(2000);
        assert!(small < 0.2 && large < 0.1, "{small} {large}");
    }

    #[test]
    fn short_samples_are_rejected() {
        assert!(long_run_variance(&gaussian(1, 9, 0)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn congruence_equivariance(seed in 0u64..10_000, a in -2.0f64..2.0, b in -2.0f64..2.0, bw in 0.0f64..8.0) {
            let u = gaussian(2, 60, seed);
            let m = DMatrix::from_row_slice(2, 2, &[1.0 + a * a, a, b, 1.0]);
            let h = long_run_variance_with_bandwidth(&u, bw).unwrap();
            let g = long_run_variance_with_bandwidth(&(&m * &u), bw).unwrap();
            let expected = &m * &h.psi * m.transpose();
            prop_assert!((&g.psi - &expected).abs().max() < 1e-10 * (1.0 + expected.abs().max()));
        }

        #[test]
        fn psi_is_symmetric(seed in 0u64..10_000) {
            let h = long_run_variance(&gaussian(3, 40, seed)).unwrap();
            prop_assert!((&h.psi - h.psi.transpose()).abs().max() < 1e-12);
        }
    }
}
