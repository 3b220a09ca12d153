//! Exhaustive grid search for break dates, per equation by least squares and
//! for the whole system by feasible GLS, optionally under date restrictions.

mod kernel;
mod restriction;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::trend_model::{
    build_regressors, check_admissible, BreakVector, EquationParams, MultiSeries, SystemFit,
};

pub use kernel::Weighting;
pub(crate) use kernel::{slot_equations, SystemData};
pub use restriction::{round_half_up, Constraint, RestrictionKind, RestrictionSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchConfig {
    pub trim_fraction: f64,
    /// Minimum distance between consecutive breaks of one equation.
    /// `None` means `max(3, ceil(0.05 T))`.
    pub min_separation: Option<usize>,
    pub max_fgls_iter: usize,
    pub fgls_tol: f64,
    pub weighting: Weighting,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            trim_fraction: 0.05,
            min_separation: None,
            max_fgls_iter: 50,
            fgls_tol: 1e-10,
            weighting: Weighting::Fgls,
        }
    }
}

impl SearchConfig {
    pub fn with_weighting(mut self, weighting: Weighting) -> Self {
        self.weighting = weighting;
        self
    }

    pub fn with_trim(mut self, trim: f64) -> Self {
        self.trim_fraction = trim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.trim_fraction > 0.0 && self.trim_fraction < 0.5) {
            return Err(Error::invalid(format!(
                "trim fraction {} not in (0, 0.5)",
                self.trim_fraction
            )));
        }
        if matches!(self.min_separation, Some(s) if s < 2) {
            return Err(Error::invalid("min_separation must be at least 2"));
        }
        if self.max_fgls_iter == 0 || !(self.fgls_tol > 0.0) {
            return Err(Error::invalid(
                "FGLS needs max_fgls_iter >= 1 and fgls_tol > 0",
            ));
        }
        Ok(())
    }

    /// Inclusive range of admissible dates for sample length `t`.
    pub fn bounds(&self, t: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let cut = (self.trim_fraction * t as f64 - 1e-9).ceil().max(0.0) as usize;
        let lo = cut.max(2);
        let hi = t.saturating_sub(cut).min(t.saturating_sub(2));
        if lo > hi {
            return Err(Error::invalid(format!(
                "no admissible break dates for T = {t}"
            )));
        }
        Ok((lo, hi))
    }

    pub fn separation(&self, t: usize) -> usize {
        self.min_separation
            .unwrap_or_else(|| ((0.05 * t as f64 - 1e-9).ceil() as usize).max(3))
    }
}

/// Least-squares fit of one segmented trend.
#[derive(Debug, Clone)]
pub struct OlsFit {
    pub params: EquationParams,
    pub ssr: f64,
    pub residuals: Vec<f64>,
}

pub fn ols_fit_single(y: &[f64], k: &[usize]) -> Result<OlsFit> {
    let t = y.len();
    let x = build_regressors(t, k)?;
    let yv = DVector::from_column_slice(y);
    let coef =
        least_squares(&x, &yv).ok_or_else(|| Error::numerical("singular normal equations"))?;
    let fitted = &x * &coef;
    let residuals: Vec<f64> = yv.iter().zip(fitted.iter()).map(|(a, b)| a - b).collect();
    let ssr = residuals.iter().map(|r| r * r).sum();
    let params = EquationParams::new(coef[0], coef[1], coef.iter().skip(2).cloned().collect());
    Ok(OlsFit {
        params,
        ssr,
        residuals,
    })
}

fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<DVector<f64>> {
    let p = x.ncols();
    let qr = x.clone().qr();
    let r = qr.r();
    let qty = qr.q().transpose() * y;
    r.solve_upper_triangular(&qty.rows(0, p).into_owned())
}

/// Least-squares dates for `m` breaks in one series.
pub fn ols_break_search(y: &[f64], m: usize, cfg: &SearchConfig) -> Result<(Vec<usize>, f64)> {
    let series = MultiSeries::from_rows(&[y.to_vec()])?;
    let cfg = cfg.with_weighting(Weighting::Diagonal);
    let searcher = SystemSearcher::new(&series, cfg)?;
    let res = searcher.search(&[m], &RestrictionSet::none(m))?;
    let k = res.breaks.equation(0).to_vec();
    let ssr = ols_fit_single(y, &k)?.ssr;
    Ok((k, ssr))
}

/// Iterated FGLS fit at given dates. Fails when the residual covariance is
/// singular.
pub fn fgls_fit(y: &MultiSeries, k: &BreakVector, cfg: &SearchConfig) -> Result<SystemFit> {
    let fit = SystemSearcher::new(y, *cfg)?.fit(k)?;
    if fit.degenerate {
        return Err(Error::numerical(format!(
            "residual covariance is singular at breaks {k} (collinear residuals)"
        )));
    }
    Ok(fit)
}

/// Grid minimizer of `log det Sigma(k)` under the restriction.
pub fn system_break_search(
    y: &MultiSeries,
    m: &[usize],
    restriction: &RestrictionSet,
    cfg: &SearchConfig,
) -> Result<(BreakVector, SystemFit)> {
    let res = SystemSearcher::new(y, *cfg)?.search(m, restriction)?;
    Ok((res.breaks, res.fit))
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub breaks: BreakVector,
    pub fit: SystemFit,
    /// Minimized objective: `log det Sigma` for FGLS, `sum_i log sigma_ii`
    /// for diagonal weighting.
    pub objective: f64,
}

/// Reusable search state for one data set. Sample moments are computed once
/// and shared by every search and fit on the same data.
#[derive(Debug, Clone)]
pub struct SystemSearcher {
    data: SystemData,
    cfg: SearchConfig,
}

impl SystemSearcher {
    pub fn new(y: &MultiSeries, cfg: SearchConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            data: SystemData::from_series(y),
            cfg,
        })
    }

    pub fn config(&self) -> &SearchConfig {
        &self.cfg
    }

    pub fn n(&self) -> usize {
        self.data.n
    }

    pub fn t(&self) -> usize {
        self.data.t
    }

    /// Objective at given dates, or `None` when the fit is singular.
    pub fn objective(&self, k: &BreakVector) -> Result<f64> {
        self.check_breaks(k)?;
        let slot_eq = slot_equations(&k.counts());
        self.data
            .fit_gamma(
                &k.flat(),
                &slot_eq,
                self.cfg.weighting,
                self.cfg.max_fgls_iter,
                self.cfg.fgls_tol,
            )
            .map(|g| g.logdet)
            .ok_or_else(|| Error::numerical(format!("singular normal equations at breaks {k}")))
    }

    pub fn fit(&self, k: &BreakVector) -> Result<SystemFit> {
        self.check_breaks(k)?;
        self.data.system_fit(
            k,
            self.cfg.weighting,
            self.cfg.max_fgls_iter,
            self.cfg.fgls_tol,
        )
    }

    fn check_breaks(&self, k: &BreakVector) -> Result<()> {
        if k.n() != self.data.n {
            return Err(Error::invalid(format!(
                "break vector has {} equations, data has {}",
                k.n(),
                self.data.n
            )));
        }
        for ki in k.per_equation() {
            check_admissible(self.data.t, ki)?;
        }
        Ok(())
    }

    pub fn search(&self, m: &[usize], restriction: &RestrictionSet) -> Result<SearchResult> {
        let n = self.data.n;
        let t = self.data.t;
        if m.len() != n {
            return Err(Error::invalid(format!(
                "{} break counts for {n} equations",
                m.len()
            )));
        }
        let total: usize = m.iter().sum();
        if restriction.m() != total {
            return Err(Error::invalid(format!(
                "restriction is over {} breaks, model has {total}",
                restriction.m()
            )));
        }
        let (lo, hi) = self.cfg.bounds(t)?;
        let sep = self.cfg.separation(t);
        let map = restriction.resolve(t)?;
        let slot_eq = slot_equations(m);
        // first slot of each equation has no predecessor
        let prev_same: Vec<Option<usize>> = (0..total)
            .map(|s| (s > 0 && slot_eq[s - 1] == slot_eq[s]).then(|| s - 1))
            .collect();

        // slots fully determined once roots 0..=j are assigned
        let mut ready_after: Vec<Vec<usize>> = vec![Vec::new(); map.free + 1];
        for (s, rule) in map.slots.iter().enumerate() {
            match *rule {
                restriction::SlotRule::Pinned(_) => ready_after[0].push(s),
                restriction::SlotRule::Free { root, .. } => ready_after[root + 1].push(s),
            }
        }

        let mut scan = Scan {
            data: &self.data,
            cfg: &self.cfg,
            map: &map,
            slot_eq: &slot_eq,
            prev_same: &prev_same,
            ready_after: &ready_after,
            lo: lo as i64,
            hi: hi as i64,
            sep: sep as i64,
            roots: vec![0; map.free],
            dates: vec![0; total],
            set: vec![false; total],
            kbuf: vec![0; total],
            best: None,
        };
        if scan.admit(0) {
            scan.recurse(0);
        }
        let (objective, k) = scan
            .best
            .ok_or_else(|| Error::invalid("restriction leaves no admissible break dates"))?;
        let breaks = BreakVector::from_flat(&k, m)?;
        let fit = self.fit(&breaks)?;
        Ok(SearchResult {
            breaks,
            fit,
            objective,
        })
    }
}

struct Scan<'a> {
    data: &'a SystemData,
    cfg: &'a SearchConfig,
    map: &'a restriction::SlotMap,
    slot_eq: &'a [usize],
    prev_same: &'a [Option<usize>],
    ready_after: &'a [Vec<usize>],
    lo: i64,
    hi: i64,
    sep: i64,
    roots: Vec<i64>,
    dates: Vec<i64>,
    set: Vec<bool>,
    kbuf: Vec<usize>,
    best: Option<(f64, Vec<usize>)>,
}

impl Scan<'_> {
    /// Marks the slots fixed by roots `0..level` and checks them against
    /// the grid and against every already-fixed neighbour.
    fn admit(&mut self, level: usize) -> bool {
        for &s in &self.ready_after[level] {
            let d = match self.map.slots[s] {
                restriction::SlotRule::Pinned(d) => d,
                restriction::SlotRule::Free { root, offset } => self.roots[root] + offset,
            };
            if d < self.lo || d > self.hi {
                return false;
            }
            self.dates[s] = d;
            self.set[s] = true;
        }
        for &s in &self.ready_after[level] {
            if let Some(p) = self.prev_same[s] {
                if self.set[p] && self.dates[s] - self.dates[p] < self.sep {
                    return false;
                }
            }
            let next = s + 1;
            if next < self.slot_eq.len()
                && self.prev_same[next] == Some(s)
                && self.set[next]
                && self.dates[next] - self.dates[s] < self.sep
            {
                return false;
            }
        }
        true
    }

    fn unset(&mut self, level: usize) {
        for &s in &self.ready_after[level] {
            self.set[s] = false;
        }
    }

    fn recurse(&mut self, j: usize) {
        if j == self.map.free {
            self.evaluate();
            return;
        }
        for v in self.lo..=self.hi {
            self.roots[j] = v;
            if self.admit(j + 1) {
                self.recurse(j + 1);
            }
            self.unset(j + 1);
        }
    }

    fn evaluate(&mut self) {
        for (k, &d) in self.kbuf.iter_mut().zip(&self.dates) {
            *k = d as usize;
        }
        let Some(g) = self.data.fit_gamma(
            &self.kbuf,
            self.slot_eq,
            self.cfg.weighting,
            self.cfg.max_fgls_iter,
            self.cfg.fgls_tol,
        ) else {
            return;
        };
        let better = match &self.best {
            None => true,
            Some((v, k)) => g.logdet < *v || (g.logdet == *v && self.kbuf < *k),
        };
        if better {
            self.best = Some((g.logdet, self.kbuf.clone()));
        }
    }
}
