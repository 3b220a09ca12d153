//! Tests of linear restrictions on break fractions: quasi-likelihood ratio,
//! GLS-Wald and OLS-Wald.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::break_search::{RestrictionSet, SearchConfig, SearchResult, SystemSearcher, Weighting};
use crate::error::{Error, Result};
use crate::limit_dist::{assemble_eq_limit_cov, assemble_limit_cov};
use crate::linalg;
use crate::lrv::{self, HacEstimate};
use crate::trend_model::{BreakVector, MultiSeries};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TestMethod {
    Lr,
    GlsWald,
    OlsWald,
}

impl TestMethod {
    pub const ALL: [TestMethod; 3] = [TestMethod::Lr, TestMethod::GlsWald, TestMethod::OlsWald];

    pub fn name(self) -> &'static str {
        match self {
            TestMethod::Lr => "LR",
            TestMethod::GlsWald => "GLS-Wald",
            TestMethod::OlsWald => "OLS-Wald",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TestReport {
    pub method: TestMethod,
    pub statistic: f64,
    pub df: usize,
    pub p_asymptotic: f64,
    pub p_bootstrap: Option<f64>,
    /// Dates estimated under the restriction (LR only).
    pub k_restricted: Option<BreakVector>,
    /// Dates the statistic is built on: FGLS for LR and GLS-Wald,
    /// per-equation least squares for OLS-Wald.
    pub k_unrestricted: BreakVector,
    /// An unrestricted date sits on the edge of the search range.
    pub boundary_warning: bool,
    /// Bandwidth of the long-run variance estimate.
    pub bandwidth: f64,
    /// The chi-square limit of LR assumes no serial correlation; set when
    /// the residuals suggest otherwise (bandwidth above one).
    pub lr_unreliable: bool,
}

impl TestReport {
    pub fn rejects(&self, level: f64) -> bool {
        self.p_asymptotic < level
    }
}

/// Upper tail of the chi-square distribution with `q` degrees of freedom.
pub fn chi_square_sf(x: f64, q: usize) -> f64 {
    if !(x > 0.0) {
        return 1.0;
    }
    ChiSquared::new(q as f64)
        .map(|d| d.sf(x))
        .unwrap_or(f64::NAN)
}

/// `p`-quantile of the chi-square distribution.
pub fn chi_square_quantile(p: f64, q: usize) -> f64 {
    ChiSquared::new(q as f64)
        .map(|d| d.inverse_cdf(p))
        .unwrap_or(f64::NAN)
}

/// HAC estimate whose bandwidth is chosen on per-series standardized
/// residuals, so that rescaling a series leaves it unchanged.
pub fn hac_for_tests(residuals: &DMatrix<f64>) -> Result<HacEstimate> {
    let mut z = residuals.clone();
    for mut row in z.row_iter_mut() {
        let sd = (row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64).sqrt();
        if sd > 0.0 {
            row /= sd;
        }
    }
    let bw = lrv::andrews_bandwidth(&z)?;
    lrv::long_run_variance_with_bandwidth(residuals, bw)
}

/// Shared state for testing several restrictions on one data set. The
/// unrestricted FGLS and least-squares estimates are computed on first use.
#[derive(Debug)]
pub struct CommonBreakTester {
    m: Vec<usize>,
    fgls: SystemSearcher,
    ols: SystemSearcher,
    unrestricted_fgls: OnceLock<Result<(SearchResult, HacEstimate)>>,
    unrestricted_ols: OnceLock<Result<(SearchResult, HacEstimate)>>,
}

fn clone_err(e: &Error) -> Error {
    match e {
        Error::InvalidArgument(s) => Error::InvalidArgument(s.clone()),
        Error::NumericalFailure(s) => Error::NumericalFailure(s.clone()),
        Error::Parse(s) => Error::Parse(s.clone()),
        Error::Io(io) => Error::NumericalFailure(io.to_string()),
    }
}

impl CommonBreakTester {
    pub fn new(y: &MultiSeries, m: &[usize], cfg: &SearchConfig) -> Result<Self> {
        if m.len() != y.n() {
            return Err(Error::invalid(format!(
                "{} break counts for {} equations",
                m.len(),
                y.n()
            )));
        }
        let fgls = SystemSearcher::new(y, cfg.with_weighting(Weighting::Fgls))?;
        let ols = SystemSearcher::new(y, cfg.with_weighting(Weighting::Diagonal))?;
        Ok(Self {
            m: m.to_vec(),
            fgls,
            ols,
            unrestricted_fgls: OnceLock::new(),
            unrestricted_ols: OnceLock::new(),
        })
    }

    pub fn t(&self) -> usize {
        self.fgls.t()
    }

    pub fn counts(&self) -> &[usize] {
        &self.m
    }

    fn unrestricted(&self, which: Weighting) -> Result<&(SearchResult, HacEstimate)> {
        let (cell, searcher) = match which {
            Weighting::Fgls => (&self.unrestricted_fgls, &self.fgls),
            Weighting::Diagonal => (&self.unrestricted_ols, &self.ols),
        };
        let total: usize = self.m.iter().sum();
        cell.get_or_init(|| {
            let res = searcher.search(&self.m, &RestrictionSet::none(total))?;
            let hac = hac_for_tests(&res.fit.residuals)?;
            Ok((res, hac))
        })
        .as_ref()
        .map_err(clone_err)
    }

    /// Unrestricted FGLS estimate.
    pub fn fgls_estimate(&self) -> Result<&SearchResult> {
        Ok(&self.unrestricted(Weighting::Fgls)?.0)
    }

    /// Per-equation least-squares estimate.
    pub fn ols_estimate(&self) -> Result<&SearchResult> {
        Ok(&self.unrestricted(Weighting::Diagonal)?.0)
    }

    /// Estimate under the restriction with the given weighting.
    pub fn restricted(
        &self,
        restriction: &RestrictionSet,
        weighting: Weighting,
    ) -> Result<SearchResult> {
        match weighting {
            Weighting::Fgls => self.fgls.search(&self.m, restriction),
            Weighting::Diagonal => self.ols.search(&self.m, restriction),
        }
    }

    fn on_boundary(&self, k: &BreakVector) -> bool {
        let t = self.t();
        match self.fgls.config().bounds(t) {
            Ok((lo, hi)) => k.flat().iter().any(|&d| d == lo || d == hi),
            Err(_) => false,
        }
    }

    fn check(&self, restriction: &RestrictionSet) -> Result<usize> {
        let total: usize = self.m.iter().sum();
        if restriction.m() != total {
            return Err(Error::invalid(format!(
                "restriction is over {} breaks, model has {total}",
                restriction.m()
            )));
        }
        if restriction.q() == 0 {
            return Err(Error::invalid("the restriction set is empty"));
        }
        Ok(restriction.q())
    }

    pub fn lr(&self, restriction: &RestrictionSet) -> Result<TestReport> {
        let q = self.check(restriction)?;
        let (u, hac) = self.unrestricted(Weighting::Fgls)?;
        let r = self.fgls.search(&self.m, restriction)?;
        let statistic = (self.t() as f64 * (r.objective - u.objective)).max(0.0);
        Ok(TestReport {
            method: TestMethod::Lr,
            statistic,
            df: q,
            p_asymptotic: chi_square_sf(statistic, q),
            p_bootstrap: None,
            k_restricted: Some(r.breaks),
            k_unrestricted: u.breaks.clone(),
            boundary_warning: self.on_boundary(&u.breaks),
            bandwidth: hac.bandwidth,
            lr_unreliable: hac.bandwidth > 1.0,
        })
    }

    pub fn gls_wald(&self, restriction: &RestrictionSet) -> Result<TestReport> {
        let q = self.check(restriction)?;
        let (u, hac) = self.unrestricted(Weighting::Fgls)?;
        let t = self.t();
        let lambda = clamped_fractions(&u.breaks, t);
        let delta = per_equation_deltas(&u.fit.params);
        let cov = assemble_limit_cov(&lambda, &delta, &u.fit.sigma, &hac.psi_floored())?;
        let statistic = wald(&cov.xi, &lambda, restriction, t)?;
        Ok(self.wald_report(TestMethod::GlsWald, statistic, q, &u.breaks, hac))
    }

    pub fn ols_wald(&self, restriction: &RestrictionSet) -> Result<TestReport> {
        let q = self.check(restriction)?;
        let (u, hac) = self.unrestricted(Weighting::Diagonal)?;
        let t = self.t();
        let lambda = clamped_fractions(&u.breaks, t);
        let delta = per_equation_deltas(&u.fit.params);
        let cov = assemble_eq_limit_cov(&lambda, &delta, &hac.psi_floored())?;
        let statistic = wald(&cov.xi_s, &lambda, restriction, t)?;
        Ok(self.wald_report(TestMethod::OlsWald, statistic, q, &u.breaks, hac))
    }

    pub fn run(&self, method: TestMethod, restriction: &RestrictionSet) -> Result<TestReport> {
        match method {
            TestMethod::Lr => self.lr(restriction),
            TestMethod::GlsWald => self.gls_wald(restriction),
            TestMethod::OlsWald => self.ols_wald(restriction),
        }
    }

    fn wald_report(
        &self,
        method: TestMethod,
        statistic: f64,
        q: usize,
        k: &BreakVector,
        hac: &HacEstimate,
    ) -> TestReport {
        TestReport {
            method,
            statistic,
            df: q,
            p_asymptotic: chi_square_sf(statistic, q),
            p_bootstrap: None,
            k_restricted: None,
            k_unrestricted: k.clone(),
            boundary_warning: self.on_boundary(k),
            bandwidth: hac.bandwidth,
            lr_unreliable: hac.bandwidth > 1.0,
        }
    }
}

/// Break fractions clamped to `[1/T, 1 - 1/T]`, per equation.
pub fn clamped_fractions(k: &BreakVector, t: usize) -> Vec<Vec<f64>> {
    let tf = t as f64;
    k.per_equation()
        .iter()
        .map(|ki| {
            ki.iter()
                .map(|&d| (d as f64 / tf).clamp(1.0 / tf, 1.0 - 1.0 / tf))
                .collect()
        })
        .collect()
}

fn per_equation_deltas(params: &[crate::trend_model::EquationParams]) -> Vec<Vec<f64>> {
    params.iter().map(|p| p.slope_changes.clone()).collect()
}

/// `T^3 (R l - r)' (R Xi R')^-1 (R l - r)`.
fn wald(
    xi: &DMatrix<f64>,
    lambda: &[Vec<f64>],
    restriction: &RestrictionSet,
    t: usize,
) -> Result<f64> {
    let l = DVector::from_iterator(xi.nrows(), lambda.iter().flatten().copied());
    let r_mat = restriction.r_matrix();
    let diff = &r_mat * l - DVector::from_vec(restriction.r_vector());
    let middle = linalg::symmetrize(&(&r_mat * xi * r_mat.transpose()));
    let inv =
        linalg::spd_inverse(&middle).ok_or_else(|| Error::numerical("R Xi R' is singular"))?;
    let stat = (t as f64).powi(3) * diff.dot(&(inv * &diff));
    if !stat.is_finite() {
        return Err(Error::numerical("Wald statistic is not finite"));
    }
    Ok(stat.max(0.0))
}

pub fn lr_test(
    y: &MultiSeries,
    m: &[usize],
    restriction: &RestrictionSet,
    cfg: &SearchConfig,
) -> Result<TestReport> {
    CommonBreakTester::new(y, m, cfg)?.lr(restriction)
}

pub fn gls_wald_test(
    y: &MultiSeries,
    m: &[usize],
    restriction: &RestrictionSet,
    cfg: &SearchConfig,
) -> Result<TestReport> {
    CommonBreakTester::new(y, m, cfg)?.gls_wald(restriction)
}

pub fn ols_wald_test(
    y: &MultiSeries,
    m: &[usize],
    restriction: &RestrictionSet,
    cfg: &SearchConfig,
) -> Result<TestReport> {
    CommonBreakTester::new(y, m, cfg)?.ols_wald(restriction)
}

/// All three tests of one restriction, sharing the unrestricted estimates.
pub fn common_break_tests(
    y: &MultiSeries,
    m: &[usize],
    restriction: &RestrictionSet,
    cfg: &SearchConfig,
) -> Result<Vec<TestReport>> {
    let tester = CommonBreakTester::new(y, m, cfg)?;
    TestMethod::ALL
        .iter()
        .map(|&method| tester.run(method, restriction))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trend_model::{evaluate_trend, EquationParams};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn system(seed: u64, delta: f64, t: usize, breaks: [usize; 2]) -> MultiSeries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = breaks
            .iter()
            .map(|&k| {
                let tr =
                    evaluate_trend(&EquationParams::new(0.0, 0.0, vec![delta]), &[k], t).unwrap();
                tr.into_iter()
                    .map(|v| {
                        v + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                    })
                    .collect()
            })
            .collect();
        MultiSeries::from_rows(&rows).unwrap()
    }

    #[test]
    fn chi_square_tail_values() {
        assert_eq!(chi_square_sf(0.0, 3), 1.0);
        assert!((chi_square_sf(3.841, 1) - 0.05).abs() < 2e-4);
        assert!((chi_square_sf(5.991, 2) - 0.05).abs() < 2e-4);
        // df = 2 is exponential: sf(x) = exp(-x/2)
        assert!((chi_square_sf(7.3, 2) - (-3.65f64).exp()).abs() < 1e-12);
        assert!((chi_square_quantile(0.95, 2) - 5.991464547107979).abs() < 1e-9);
    }

    #[test]
    fn restriction_satisfied_by_unrestricted_optimum() {
        let y = system(3, 1.5, 100, [50, 50]);
        let tester = CommonBreakTester::new(&y, &[1, 1], &SearchConfig::default()).unwrap();
        let k = tester.fgls_estimate().unwrap().breaks.flat();
        let t = 100.0;
        let r =
            RestrictionSet::fixed_dates(2, &[(0, k[0] as f64 / t), (1, k[1] as f64 / t)]).unwrap();
        let lr = tester.lr(&r).unwrap();
        assert_eq!(lr.statistic, 0.0);
        assert_eq!(lr.p_asymptotic, 1.0);
        let w = tester.gls_wald(&r).unwrap();
        assert!(w.statistic < 1e-12);
    }

    #[test]
    fn duplicated_series_give_zero_ols_wald() {
        let y = system(4, 1.0, 100, [50, 50]);
        let row = y.series(0);
        let dup = MultiSeries::from_rows(&[row.clone(), row]).unwrap();
        let r = RestrictionSet::common(2, &[vec![0, 1]]).unwrap();
        let rep = ols_wald_test(&dup, &[1, 1], &r, &SearchConfig::default()).unwrap();
        assert_eq!(rep.statistic, 0.0);
        assert_eq!(
            rep.k_unrestricted.equation(0),
            rep.k_unrestricted.equation(1)
        );
    }

    #[test]
    fn single_equation_wald_tests_coincide() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tr = evaluate_trend(&EquationParams::new(0.0, 0.0, vec![1.0]), &[45], 100).unwrap();
        let y: Vec<f64> = tr
            .iter()
            .map(|v| v + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        let y = MultiSeries::from_rows(&[y]).unwrap();
        let r = RestrictionSet::fixed_dates(1, &[(0, 0.5)]).unwrap();
        let reps = common_break_tests(&y, &[1], &r, &SearchConfig::default()).unwrap();
        assert!((reps[1].statistic - reps[2].statistic).abs() < 1e-8 * reps[1].statistic.max(1.0));
        assert!(reps.iter().all(|r| r.df == 1));
    }

    #[test]
    fn boundary_estimates_are_flagged() {
        let y = system(5, 3.0, 100, [5, 95]);
        let r = RestrictionSet::common(2, &[vec![0, 1]]).unwrap();
        let rep = lr_test(&y, &[1, 1], &r, &SearchConfig::default()).unwrap();
        assert!(rep.boundary_warning);
    }

    #[test]
    fn empty_restriction_is_rejected() {
        let y = system(1, 1.0, 60, [30, 30]);
        assert!(lr_test(
            &y,
            &[1, 1],
            &RestrictionSet::none(2),
            &SearchConfig::default()
        )
        .is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(6))]

        #[test]
        fn statistics_survive_affine_shifts_and_rescaling(
            seed in 0u64..10_000,
            a in -20.0f64..20.0,
            b in -1.0f64..1.0,
            c in 0.1f64..10.0,
        ) {
            let y = system(seed, 1.0, 60, [30, 33]);
            let r = RestrictionSet::common(2, &[vec![0, 1]]).unwrap();
            let cfg = SearchConfig::default();
            let base = common_break_tests(&y, &[1, 1], &r, &cfg).unwrap();
            let mut v = y.values().clone();
            for j in 0..60 {
                v[(0, j)] += a + b * (j + 1) as f64;
                v[(1, j)] *= c;
            }
            let moved = common_break_tests(&y.with_values(v).unwrap(), &[1, 1], &r, &cfg).unwrap();
            for (x, z) in base.iter().zip(&moved) {
                prop_assert!((x.statistic - z.statistic).abs() <= 1e-6 * x.statistic.max(1.0),
                    "{:?} {} {}", x.method, x.statistic, z.statistic);
            }
        }
    }
}
