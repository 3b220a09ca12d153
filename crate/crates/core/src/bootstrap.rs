//! Residual bootstrap for the break tests: a VAR(1) is fitted to the
//! residuals of the null-restricted fit, its coefficients are bias corrected,
//! and pseudo samples are built by adding resampled VAR paths to the null
//! trend. The warp-speed variant draws one pseudo sample per Monte Carlo
//! replicate and pools the draws.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::break_search::{RestrictionSet, SearchConfig, SystemSearcher};
use crate::break_tests::{CommonBreakTester, TestMethod};
use crate::error::{Error, Result};
use crate::extra_break;
use crate::linalg;
use crate::trend_model::{MultiSeries, SystemFit};

pub const DEFAULT_REPLICATIONS: usize = 199;
pub const DEFAULT_KILIAN_REPS: usize = 200;
pub const DEFAULT_BURN_IN: usize = 50;

const TAG_KILIAN: u64 = 0x4b49_4c49;
const TAG_DRAW: u64 = 0x4452_4157;

/// Fitted VAR(1) `u_t = c + A u_{t-1} + e_t`.
#[derive(Debug, Clone)]
pub struct VarModel {
    pub intercept: DVector<f64>,
    pub a: DMatrix<f64>,
    /// `n x (T-1)` fitted innovations.
    pub innovations: DMatrix<f64>,
    pub bias_corrected: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Resample {
    /// Innovations drawn with replacement after centering.
    #[default]
    IidInnovations,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapConfig {
    pub replications: usize,
    pub seed: u64,
    pub warp_speed: bool,
    pub resample: Resample,
    pub kilian_reps: usize,
    pub burn_in: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replications: DEFAULT_REPLICATIONS,
            seed: 0,
            warp_speed: false,
            resample: Resample::IidInnovations,
            kilian_reps: DEFAULT_KILIAN_REPS,
            burn_in: DEFAULT_BURN_IN,
        }
    }
}

impl BootstrapConfig {
    pub fn with_replications(mut self, b: usize) -> Self {
        self.replications = b;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d4_9bb4_6ebb_0d9b);
    z ^ (z >> 31)
}

/// Independent generator for `(seed, tag, index)`; the index selects the
/// ChaCha stream so draws do not depend on scheduling.
pub fn stream_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(tag)));
    rng.set_stream(index);
    rng
}

/// Least-squares VAR(1) with intercept on an `n x T` residual matrix.
pub fn fit_var1(residuals: &DMatrix<f64>) -> Result<VarModel> {
    let n = residuals.nrows();
    let t = residuals.ncols();
    if t < n + 5 {
        return Err(Error::invalid(format!(
            "VAR(1) on {n} series needs T >= {}, got {t}",
            n + 5
        )));
    }
    let rows = t - 1;
    let x = DMatrix::from_fn(rows, n + 1, |s, c| {
        if c == 0 {
            1.0
        } else {
            residuals[(c - 1, s)]
        }
    });
    let yt = residuals.columns(1, rows).transpose();
    let xt = x.transpose();
    let coef = (&xt * &x)
        .cholesky()
        .map(|c| c.solve(&(&xt * &yt)))
        .filter(|c| c.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::numerical("VAR(1) design is singular"))?;
    let intercept = coef.row(0).transpose();
    let a = coef.rows(1, n).transpose();
    let innovations = (yt - x * coef).transpose();
    Ok(VarModel {
        intercept,
        a,
        innovations,
        bias_corrected: false,
    })
}

/// Intercept and innovations of `u` under fixed coefficients `a`.
fn refit_intercept(residuals: &DMatrix<f64>, a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let t = residuals.ncols();
    let lead = residuals.columns(1, t - 1);
    let lag = residuals.columns(0, t - 1);
    let mut e = lead - a * lag;
    let c = e.column_mean();
    for mut col in e.column_iter_mut() {
        col -= &c;
    }
    (c, e)
}

/// Centered innovations, the pool the bootstrap draws from.
fn centered(innovations: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = innovations.column_mean();
    let mut e = innovations.clone();
    for mut col in e.column_iter_mut() {
        col -= &mean;
    }
    e
}

/// One VAR path of length `t` after `burn_in` discarded steps, started at
/// `start`.
fn simulate_var(
    var: &VarModel,
    pool: &DMatrix<f64>,
    start: DVector<f64>,
    t: usize,
    burn_in: usize,
    rng: &mut ChaCha8Rng,
) -> DMatrix<f64> {
    let n = var.a.nrows();
    let draws = pool.ncols();
    let mut u = start;
    let mut out = DMatrix::zeros(n, t);
    for s in 0..burn_in + t {
        let j = rng.random_range(0..draws);
        u = &var.intercept + &var.a * &u + pool.column(j);
        if s >= burn_in {
            out.set_column(s - burn_in, &u);
        }
    }
    out
}

/// Bootstrap estimate of the small-sample bias of `model.a` and the
/// entrywise standard error of that estimate.
pub fn kilian_bias(
    model: &VarModel,
    residuals: &DMatrix<f64>,
    inner: usize,
    burn_in: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = model.a.nrows();
    let t = residuals.ncols();
    let pool = centered(&model.innovations);
    let mut sum = DMatrix::zeros(n, n);
    let mut sum2 = DMatrix::zeros(n, n);
    let mut used = 0usize;
    for _ in 0..inner {
        let start = residuals.column(rng.random_range(0..t)).into_owned();
        let u = simulate_var(model, &pool, start, t, burn_in, rng);
        if let Ok(fit) = fit_var1(&u) {
            sum += &fit.a;
            sum2 += fit.a.component_mul(&fit.a);
            used += 1;
        }
    }
    if used < 2 {
        return Err(Error::numerical("bias simulation produced no usable fits"));
    }
    let k = used as f64;
    let mean = &sum / k;
    let var = (sum2 / k - mean.component_mul(&mean)).map(|v| v.max(0.0)) * (k / (k - 1.0));
    Ok((mean - &model.a, var.map(|v| (v / k).sqrt())))
}

/// Bias-corrected VAR. The correction is halved until the coefficient
/// matrix is stable; an unstable least-squares estimate is shrunk to
/// radius 0.99 first.
pub fn kilian_correct(
    model: &VarModel,
    residuals: &DMatrix<f64>,
    inner: usize,
    burn_in: usize,
    rng: &mut ChaCha8Rng,
) -> VarModel {
    let mut base = model.a.clone();
    let r0 = linalg::spectral_radius(&base);
    if !(r0 < 1.0) {
        log::warn!("VAR(1) estimate has spectral radius {r0:.4}, shrinking to 0.99");
        base *= 0.99 / r0;
    }
    let stable = VarModel {
        a: base.clone(),
        ..model.clone()
    };
    let bias = match kilian_bias(&stable, residuals, inner, burn_in, rng) {
        Ok((b, _)) => b,
        Err(e) => {
            log::warn!("bias correction skipped: {e}");
            DMatrix::zeros(base.nrows(), base.ncols())
        }
    };
    let mut scale = 1.0;
    let mut a = &base - &bias;
    for _ in 0..60 {
        if linalg::spectral_radius(&a) < 1.0 {
            break;
        }
        scale *= 0.5;
        a = &base - &bias * scale;
    }
    if !(linalg::spectral_radius(&a) < 1.0) {
        a = base;
    }
    let (intercept, innovations) = refit_intercept(residuals, &a);
    VarModel {
        intercept,
        a,
        innovations,
        bias_corrected: true,
    }
}

/// Pseudo sample: the fitted null trend plus a VAR path driven by
/// resampled innovations, started from a random in-sample residual column.
pub fn make_null_sample(
    y: &MultiSeries,
    null_fit: &SystemFit,
    var: &VarModel,
    burn_in: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MultiSeries> {
    let t = y.t();
    if null_fit.t() != t || null_fit.n() != y.n() {
        return Err(Error::invalid(
            "null fit does not match the data dimensions",
        ));
    }
    let trend = null_fit.fitted()?;
    let pool = centered(&var.innovations);
    let start = null_fit
        .residuals
        .column(rng.random_range(0..t))
        .into_owned();
    let u = simulate_var(var, &pool, start, t, burn_in, rng);
    y.with_values(trend + u)
}

/// A test that can be bootstrapped: its statistic, and the trend fitted
/// under its null hypothesis.
pub trait BootstrapTest: Sync {
    fn statistic(&self, y: &MultiSeries) -> Result<f64>;
    fn null_fit(&self, y: &MultiSeries) -> Result<SystemFit>;
}

/// Null fit and bias-corrected VAR from which pseudo samples are drawn.
#[derive(Debug, Clone)]
pub struct NullModel {
    pub fit: SystemFit,
    pub var: VarModel,
}

impl NullModel {
    pub fn new(fit: SystemFit, cfg: &BootstrapConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let raw = fit_var1(&fit.residuals)?;
        let var = kilian_correct(&raw, &fit.residuals, cfg.kilian_reps, cfg.burn_in, rng);
        Ok(Self { fit, var })
    }

    pub fn sample(
        &self,
        y: &MultiSeries,
        burn_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<MultiSeries> {
        make_null_sample(y, &self.fit, &self.var, burn_in, rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapOutcome {
    pub statistic: f64,
    pub p_value: f64,
    pub replications: usize,
    /// Replicates whose statistic could not be computed; they count as
    /// exceedances.
    pub failures: usize,
}

/// `p = (1 + #{stat* >= stat}) / (B + 1)`.
pub fn bootstrap_pvalue(
    test: &dyn BootstrapTest,
    y: &MultiSeries,
    cfg: &BootstrapConfig,
) -> Result<BootstrapOutcome> {
    if cfg.replications == 0 {
        return Err(Error::invalid("bootstrap needs at least one replication"));
    }
    let statistic = test.statistic(y)?;
    let mut rng = stream_rng(cfg.seed, TAG_KILIAN, 0);
    let null = NullModel::new(test.null_fit(y)?, cfg, &mut rng)?;
    let draws: Vec<Option<f64>> = (0..cfg.replications)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(cfg.seed, TAG_DRAW, b as u64);
            let ys = null.sample(y, cfg.burn_in, &mut rng).ok()?;
            test.statistic(&ys).ok().filter(|s| s.is_finite())
        })
        .collect();
    let failures = draws.iter().filter(|d| d.is_none()).count();
    if failures > 0 {
        log::warn!(
            "{failures} of {} bootstrap replicates failed",
            cfg.replications
        );
    }
    let exceed = draws
        .iter()
        .filter(|d| d.is_none_or(|s| s >= statistic))
        .count();
    Ok(BootstrapOutcome {
        statistic,
        p_value: (1 + exceed) as f64 / (cfg.replications + 1) as f64,
        replications: cfg.replications,
        failures,
    })
}

/// Fraction of `observed` above the `1 - level` quantile of the pooled
/// bootstrap statistics.
pub fn warp_speed_rate(observed: &[f64], pooled: &[f64], level: f64) -> f64 {
    if observed.is_empty() || pooled.is_empty() {
        return 0.0;
    }
    let crit = upper_quantile(pooled, level);
    observed.iter().filter(|&&s| s > crit).count() as f64 / observed.len() as f64
}

/// Empirical `1 - level` quantile, the `ceil((1 - level) N)`-th order
/// statistic.
pub fn upper_quantile(values: &[f64], level: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let idx = ((1.0 - level) * v.len() as f64 - 1e-9).ceil().max(1.0) as usize - 1;
    v[idx.min(v.len() - 1)]
}

/// Warp-speed rejection rates at `level`, one per test, over `reps` data
/// sets from `dgp`. Each replicate contributes its statistic and one
/// bootstrap statistic per test.
pub fn warp_speed_rates<D>(
    dgp: D,
    tests: &[&dyn BootstrapTest],
    reps: usize,
    level: f64,
    cfg: &BootstrapConfig,
) -> Result<Vec<f64>>
where
    D: Fn(&mut ChaCha8Rng) -> Result<MultiSeries> + Sync,
{
    const TAG_DGP: u64 = 0x4447_5030;
    let per_rep: Vec<Vec<(Option<f64>, Option<f64>)>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(cfg.seed, TAG_DGP, r as u64);
            let Ok(y) = dgp(&mut rng) else {
                return vec![(None, None); tests.len()];
            };
            tests
                .iter()
                .enumerate()
                .map(|(i, test)| {
                    let mut rng = stream_rng(cfg.seed ^ splitmix(i as u64 + 1), TAG_DRAW, r as u64);
                    warp_pair(*test, &y, cfg, &mut rng)
                })
                .collect()
        })
        .collect();
    Ok((0..tests.len())
        .map(|i| {
            let obs: Vec<f64> = per_rep.iter().filter_map(|p| p[i].0).collect();
            let pool: Vec<f64> = per_rep.iter().filter_map(|p| p[i].1).collect();
            warp_speed_rate(&obs, &pool, level)
        })
        .collect())
}

fn warp_pair(
    test: &dyn BootstrapTest,
    y: &MultiSeries,
    cfg: &BootstrapConfig,
    rng: &mut ChaCha8Rng,
) -> (Option<f64>, Option<f64>) {
    let Ok(stat) = test.statistic(y) else {
        return (None, None);
    };
    let boot = test
        .null_fit(y)
        .and_then(|fit| NullModel::new(fit, cfg, rng))
        .and_then(|null| null.sample(y, cfg.burn_in, rng))
        .and_then(|ys| test.statistic(&ys))
        .ok();
    (Some(stat), boot)
}

/// Bootstrap wrapper for one of the common-break tests. The null trend is
/// the restricted fit with the weighting the test itself uses.
#[derive(Debug, Clone)]
pub struct CommonBreakBootstrap {
    pub method: TestMethod,
    pub m: Vec<usize>,
    pub restriction: RestrictionSet,
    pub search: SearchConfig,
}

impl BootstrapTest for CommonBreakBootstrap {
    fn statistic(&self, y: &MultiSeries) -> Result<f64> {
        let tester = CommonBreakTester::new(y, &self.m, &self.search)?;
        Ok(tester.run(self.method, &self.restriction)?.statistic)
    }

    fn null_fit(&self, y: &MultiSeries) -> Result<SystemFit> {
        let tester = CommonBreakTester::new(y, &self.m, &self.search)?;
        let weighting = match self.method {
            TestMethod::Lr | TestMethod::GlsWald => crate::break_search::Weighting::Fgls,
            TestMethod::OlsWald => crate::break_search::Weighting::Diagonal,
        };
        Ok(tester.restricted(&self.restriction, weighting)?.fit)
    }
}

/// Bootstrap wrapper for the additional-break test. Each replicate
/// re-estimates the `m` existing breaks before profiling the extra one.
#[derive(Debug, Clone)]
pub struct ExtraBreakBootstrap {
    pub m: Vec<usize>,
    /// `None` takes the sup over equations.
    pub equation: Option<usize>,
    pub trim: f64,
    pub search: SearchConfig,
}

impl ExtraBreakBootstrap {
    fn base(&self, searcher: &SystemSearcher) -> Result<SystemFit> {
        let total = self.m.iter().sum();
        Ok(searcher.search(&self.m, &RestrictionSet::none(total))?.fit)
    }
}

impl BootstrapTest for ExtraBreakBootstrap {
    fn statistic(&self, y: &MultiSeries) -> Result<f64> {
        let searcher = SystemSearcher::new(y, self.search)?;
        let base = self.base(&searcher)?.breaks;
        let rep = match self.equation {
            Some(i) => extra_break::lr_profile(&searcher, &base, i, self.trim)?,
            None => extra_break::sup_lr_profile(&searcher, &base, self.trim)?,
        };
        Ok(rep.statistic)
    }

    fn null_fit(&self, y: &MultiSeries) -> Result<SystemFit> {
        self.base(&SystemSearcher::new(y, self.search)?)
    }
}
