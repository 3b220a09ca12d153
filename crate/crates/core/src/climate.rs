//! Annual series ingestion, filtering of oscillation modes by BIC-selected
//! regressions, and the bivariate forcing/temperature break analyses.

use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rayon::prelude::*;

use crate::bootstrap::{
    bootstrap_pvalue, stream_rng, BootstrapConfig, CommonBreakBootstrap, ExtraBreakBootstrap,
};
use crate::break_search::{RestrictionSet, SearchConfig, SystemSearcher};
use crate::break_tests::{CommonBreakTester, TestMethod};
use crate::error::{Error, Result};
use crate::extra_break::{self, DEFAULT_TRIM};
use crate::trend_model::{BreakVector, MultiSeries};

/// Bootstrap replications for application runs.
pub const APPLICATION_REPLICATIONS: usize = 999;

const TAG_PAIR: u64 = 0x636c_696d;

/// One annual series starting at `first_year`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnualSeries {
    pub name: String,
    pub first_year: i64,
    pub values: Vec<f64>,
}

impl AnnualSeries {
    pub fn new(name: impl Into<String>, first_year: i64, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if values.is_empty() {
            return Err(Error::invalid(format!("series '{name}' is empty")));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "series '{name}' has a non-finite value at year {}",
                first_year + i as i64
            )));
        }
        Ok(Self {
            name,
            first_year,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn last_year(&self) -> i64 {
        self.first_year + self.values.len() as i64 - 1
    }

    pub fn years(&self) -> impl Iterator<Item = i64> + '_ {
        (0..self.values.len()).map(move |i| self.first_year + i as i64)
    }

    pub fn get(&self, year: i64) -> Option<f64> {
        if year < self.first_year {
            return None;
        }
        self.values.get((year - self.first_year) as usize).copied()
    }

    /// Inclusive year range; errors when the series does not cover it.
    pub fn slice(&self, from: i64, to: i64) -> Result<Self> {
        if from > to {
            return Err(Error::invalid(format!("empty year range {from}:{to}")));
        }
        if from < self.first_year || to > self.last_year() {
            return Err(Error::invalid(format!(
                "series '{}' covers {}-{}, requested {from}-{to}",
                self.name,
                self.first_year,
                self.last_year()
            )));
        }
        let lo = (from - self.first_year) as usize;
        let hi = (to - self.first_year) as usize;
        Ok(Self {
            name: self.name.clone(),
            first_year: from,
            values: self.values[lo..=hi].to_vec(),
        })
    }
}

/// Named columns sharing one contiguous year index.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesTable {
    first_year: i64,
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
}

impl SeriesTable {
    pub fn from_series(series: &[AnnualSeries]) -> Result<Self> {
        let first = series
            .first()
            .ok_or_else(|| Error::invalid("no series given"))?;
        for s in series {
            if s.first_year != first.first_year || s.len() != first.len() {
                return Err(Error::invalid(format!(
                    "series '{}' covers {}-{} but '{}' covers {}-{}",
                    s.name,
                    s.first_year,
                    s.last_year(),
                    first.name,
                    first.first_year,
                    first.last_year()
                )));
            }
        }
        Ok(Self {
            first_year: first.first_year,
            names: series.iter().map(|s| s.name.clone()).collect(),
            columns: series.iter().map(|s| s.values.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn first_year(&self) -> i64 {
        self.first_year
    }

    pub fn last_year(&self) -> i64 {
        self.first_year + self.len() as i64 - 1
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.columns[i].as_slice())
            .ok_or_else(|| Error::parse(format!("no column named '{name}'")))
    }

    pub fn series(&self, name: &str) -> Result<AnnualSeries> {
        let values = self.column(name)?.to_vec();
        Ok(AnnualSeries {
            name: name.to_string(),
            first_year: self.first_year,
            values,
        })
    }

    pub fn all_series(&self) -> Vec<AnnualSeries> {
        self.names
            .iter()
            .zip(&self.columns)
            .map(|(n, c)| AnnualSeries {
                name: n.clone(),
                first_year: self.first_year,
                values: c.clone(),
            })
            .collect()
    }

    pub fn slice(&self, from: i64, to: i64) -> Result<Self> {
        let parts = self
            .all_series()
            .iter()
            .map(|s| s.slice(from, to))
            .collect::<Result<Vec<_>>>()?;
        Self::from_series(&parts)
    }

    /// Reads `year,<name>,...` rows; `columns` restricts the value columns
    /// kept, an empty slice keeps all of them.
    pub fn from_reader<R: Read>(reader: R, columns: &[&str]) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::parse(format!("header row: {e}")))?
            .iter()
            .map(str::to_string)
            .collect();
        let year_col = header
            .iter()
            .position(|h| h.eq_ignore_ascii_case("year"))
            .ok_or_else(|| Error::parse("header has no 'year' column"))?;
        let keep: Vec<usize> = if columns.is_empty() {
            (0..header.len()).filter(|&i| i != year_col).collect()
        } else {
            columns
                .iter()
                .map(|c| {
                    header
                        .iter()
                        .position(|h| h == c)
                        .filter(|&i| i != year_col)
                        .ok_or_else(|| Error::parse(format!("no column named '{c}' in header")))
                })
                .collect::<Result<_>>()?
        };
        if keep.is_empty() {
            return Err(Error::parse("no value columns"));
        }

        let mut years: Vec<i64> = Vec::new();
        let mut values: Vec<Vec<f64>> = vec![Vec::new(); keep.len()];
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::parse(e.to_string()))?;
            let line = rec.position().map_or(0, |p| p.line());
            let cell = |i: usize| rec.get(i).unwrap_or("");
            let year: i64 = cell(year_col).parse().map_err(|_| {
                Error::parse(format!(
                    "line {line}, column 'year': '{}' is not a year",
                    cell(year_col)
                ))
            })?;
            if let Some(&prev) = years.last() {
                if year == prev {
                    return Err(Error::parse(format!("line {line}: duplicate year {year}")));
                }
                if year != prev + 1 {
                    return Err(Error::parse(format!(
                        "line {line}: year {year} follows {prev}, years must be consecutive"
                    )));
                }
            }
            years.push(year);
            for (slot, &i) in keep.iter().enumerate() {
                let raw = cell(i);
                let v: f64 = raw
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| {
                        Error::parse(format!(
                            "line {line}, column '{}': '{raw}' is not a finite number",
                            header[i]
                        ))
                    })?;
                values[slot].push(v);
            }
        }
        let first_year = *years.first().ok_or_else(|| Error::parse("no data rows"))?;
        Ok(Self {
            first_year,
            names: keep.iter().map(|&i| header[i].clone()).collect(),
            columns: values,
        })
    }
}

pub fn load_series(path: impl AsRef<Path>, columns: &[&str]) -> Result<SeriesTable> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    SeriesTable::from_reader(std::io::BufReader::new(file), columns).map_err(|e| match e {
        Error::Parse(msg) => Error::parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Selected oscillation regressors and their coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterSpec {
    pub kmax: usize,
    /// `(mode name, lag)` pairs, in the order the modes were given.
    pub chosen: Vec<(String, usize)>,
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub bic: f64,
    /// Observations used for the coefficients.
    pub nobs: usize,
}

struct Ols {
    coef: DVector<f64>,
    resid: Vec<f64>,
}

/// Least squares with an intercept column prepended; `None` when the
/// regressors are collinear.
fn ols_with_constant(y: &[f64], regressors: &[Vec<f64>]) -> Option<Ols> {
    let n = y.len();
    let p = regressors.len() + 1;
    let x = DMatrix::from_fn(n, p, |r, c| if c == 0 { 1.0 } else { regressors[c - 1][r] });
    let yv = DVector::from_column_slice(y);
    let xtx = x.transpose() * &x;
    let coef = xtx.cholesky()?.solve(&(x.transpose() * &yv));
    if coef.iter().any(|c| !c.is_finite()) {
        return None;
    }
    let fitted = &x * &coef;
    let resid = y.iter().zip(fitted.iter()).map(|(a, b)| a - b).collect();
    Some(Ols { coef, resid })
}

fn find_mode<'a>(modes: &'a [AnnualSeries], name: &str) -> Result<&'a AnnualSeries> {
    modes
        .iter()
        .find(|m| m.name == name)
        .ok_or_else(|| Error::invalid(format!("no oscillation series named '{name}'")))
}

/// Years of `temp` at which every `(mode, lag)` regressor is observed.
fn usable_years(temp: &AnnualSeries, regs: &[(&AnnualSeries, usize)]) -> Vec<i64> {
    temp.years()
        .filter(|&y| regs.iter().all(|(m, lag)| m.get(y - *lag as i64).is_some()))
        .collect()
}

fn design(
    temp: &AnnualSeries,
    regs: &[(&AnnualSeries, usize)],
    years: &[i64],
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let y = years
        .iter()
        .map(|&yr| temp.get(yr).unwrap_or(f64::NAN))
        .collect();
    let x = regs
        .iter()
        .map(|(m, lag)| {
            years
                .iter()
                .map(|&yr| m.get(yr - *lag as i64).unwrap_or(f64::NAN))
                .collect()
        })
        .collect();
    (y, x)
}

/// Exhaustive BIC search over regressor sets in which each mode enters at
/// most once, at a lag in `0..kmax`. All candidates are scored on the same
/// `T - kmax` final years; the winner is refit on every usable year.
pub fn bic_select_filter(
    temp: &AnnualSeries,
    modes: &[AnnualSeries],
    kmax: usize,
) -> Result<FilterSpec> {
    let t = temp.len();
    if kmax == 0 {
        return Err(Error::invalid("kmax must be at least 1"));
    }
    if 2 * kmax >= t {
        return Err(Error::invalid(format!(
            "kmax = {kmax} is not below T/2 = {}",
            t as f64 / 2.0
        )));
    }
    let sample: Vec<i64> = temp.years().skip(kmax).collect();
    for m in modes {
        let need_from = sample[0] - kmax as i64 + 1;
        let need_to = *sample.last().unwrap_or(&sample[0]);
        if m.get(need_from).is_none() || m.get(need_to).is_none() {
            return Err(Error::invalid(format!(
                "oscillation series '{}' ({}-{}) does not cover {need_from}-{need_to}",
                m.name,
                m.first_year,
                m.last_year()
            )));
        }
    }

    let nobs = sample.len() as f64;
    // choice[j] == 0 leaves mode j out, otherwise lag choice[j] - 1
    let mut choice = vec![0usize; modes.len()];
    let mut best: Option<(f64, usize, Vec<usize>)> = None;
    loop {
        let regs: Vec<(&AnnualSeries, usize)> = choice
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(j, &c)| (&modes[j], c - 1))
            .collect();
        let (y, x) = design(temp, &regs, &sample);
        if let Some(fit) = ols_with_constant(&y, &x) {
            let ssr: f64 = fit.resid.iter().map(|e| e * e).sum();
            let p = regs.len() + 1;
            let bic = nobs * (ssr.max(f64::MIN_POSITIVE) / nobs).ln() + p as f64 * nobs.ln();
            let better = match &best {
                None => true,
                Some((b, bp, _)) => {
                    bic < b - 1e-10 * b.abs().max(1.0)
                        || ((bic - b).abs() <= 1e-10 * b.abs().max(1.0) && p < *bp)
                }
            };
            if better {
                best = Some((bic, p, choice.clone()));
            }
        }
        // odometer over (kmax + 1)^modes choices
        let mut j = 0;
        while j < choice.len() {
            choice[j] += 1;
            if choice[j] <= kmax {
                break;
            }
            choice[j] = 0;
            j += 1;
        }
        if j == choice.len() {
            break;
        }
    }
    let (bic, _, choice) =
        best.ok_or_else(|| Error::numerical("no regressor set could be fitted"))?;
    let chosen: Vec<(String, usize)> = choice
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(j, &c)| (modes[j].name.clone(), c - 1))
        .collect();
    let fit = refit(temp, modes, &chosen)?;
    Ok(FilterSpec {
        kmax,
        chosen,
        intercept: fit.1.coef[0],
        coefficients: fit.1.coef.iter().skip(1).copied().collect(),
        bic,
        nobs: fit.0.len(),
    })
}

fn refit(
    temp: &AnnualSeries,
    modes: &[AnnualSeries],
    chosen: &[(String, usize)],
) -> Result<(Vec<i64>, Ols)> {
    let regs = chosen
        .iter()
        .map(|(name, lag)| Ok((find_mode(modes, name)?, *lag)))
        .collect::<Result<Vec<_>>>()?;
    let years = usable_years(temp, &regs);
    if years.len() <= regs.len() + 1 {
        return Err(Error::invalid(format!(
            "too few overlapping years to filter '{}'",
            temp.name
        )));
    }
    let (y, x) = design(temp, &regs, &years);
    let fit = ols_with_constant(&y, &x)
        .ok_or_else(|| Error::numerical("filter regressors are collinear"))?;
    Ok((years, fit))
}

/// Residuals from regressing `temp` on a constant and the chosen modes,
/// plus the fitted constant. Covers the years at which all chosen lags are
/// observed.
pub fn filter_series(
    temp: &AnnualSeries,
    modes: &[AnnualSeries],
    spec: &FilterSpec,
) -> Result<AnnualSeries> {
    let (years, fit) = refit(temp, modes, &spec.chosen)?;
    let values = fit.resid.iter().map(|e| e + fit.coef[0]).collect();
    let first = years[0];
    if years.last() != Some(&(first + years.len() as i64 - 1)) {
        return Err(Error::invalid(format!(
            "oscillation series leave gaps in the filtered '{}'",
            temp.name
        )));
    }
    AnnualSeries::new(temp.name.clone(), first, values)
}

/// A forcing series and a temperature series over a common year range.
#[derive(Debug, Clone)]
pub struct Pairing {
    pub forcing: AnnualSeries,
    pub temperature: AnnualSeries,
}

impl Pairing {
    pub fn new(forcing: AnnualSeries, temperature: AnnualSeries) -> Self {
        Self {
            forcing,
            temperature,
        }
    }

    /// Both series restricted to `range`, or as given when `None`.
    pub fn system(&self, range: Option<(i64, i64)>) -> Result<MultiSeries> {
        let (f, t) = match range {
            Some((a, b)) => (self.forcing.slice(a, b)?, self.temperature.slice(a, b)?),
            None => (self.forcing.clone(), self.temperature.clone()),
        };
        let table = SeriesTable::from_series(&[f, t])?;
        let values = DMatrix::from_fn(2, table.len(), |i, j| table.columns[i][j]);
        MultiSeries::new(values, table.names.clone(), table.first_year)
    }

    fn key(&self) -> String {
        format!("{}/{}", self.forcing.name, self.temperature.name)
    }
}

fn pair_seed(seed: u64, index: usize) -> u64 {
    stream_rng(seed, TAG_PAIR, index as u64).next_u64()
}

#[derive(Debug, Clone)]
pub struct CommonBreakConfig {
    /// Breaks per equation, shared by both equations.
    pub breaks: usize,
    pub range: Option<(i64, i64)>,
    pub methods: Vec<TestMethod>,
    /// `None` skips the bootstrap.
    pub boot: Option<BootstrapConfig>,
    pub search: SearchConfig,
}

impl Default for CommonBreakConfig {
    fn default() -> Self {
        Self {
            breaks: 1,
            range: None,
            methods: TestMethod::ALL.to_vec(),
            boot: Some(BootstrapConfig::default().with_replications(APPLICATION_REPLICATIONS)),
            search: SearchConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MethodResult {
    pub method: TestMethod,
    pub statistic: f64,
    pub p_asymptotic: f64,
    pub p_bootstrap: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CommonBreakRow {
    pub forcing: String,
    pub temperature: String,
    pub first_year: i64,
    pub last_year: i64,
    /// Calendar years of the unrestricted system estimates.
    pub forcing_breaks: Vec<i64>,
    pub temperature_breaks: Vec<i64>,
    /// Calendar years estimated under the common-break restriction.
    pub common_breaks: Vec<i64>,
    pub results: Vec<MethodResult>,
}

impl CommonBreakRow {
    pub fn result(&self, method: TestMethod) -> Option<&MethodResult> {
        self.results.iter().find(|r| r.method == method)
    }
}

/// Restriction that the `j`-th break of every equation coincides.
pub fn common_restriction(n: usize, breaks: usize) -> Result<RestrictionSet> {
    let groups: Vec<Vec<usize>> = (0..breaks)
        .map(|j| (0..n).map(|i| i * breaks + j).collect())
        .collect();
    RestrictionSet::common(n * breaks, &groups)
}

fn calendar(y: &MultiSeries, k: &BreakVector, eq: usize) -> Vec<i64> {
    k.equation(eq).iter().map(|&d| y.calendar(d)).collect()
}

fn common_row(pair: &Pairing, cfg: &CommonBreakConfig, index: usize) -> Result<CommonBreakRow> {
    let y = pair.system(cfg.range)?;
    let m = [cfg.breaks, cfg.breaks];
    let restriction = common_restriction(2, cfg.breaks)?;
    let tester = CommonBreakTester::new(&y, &m, &cfg.search)?;
    let unrestricted = tester.fgls_estimate()?.breaks.clone();
    let restricted = tester
        .restricted(&restriction, crate::break_search::Weighting::Fgls)?
        .breaks;
    let mut results = Vec::with_capacity(cfg.methods.len());
    for (slot, &method) in cfg.methods.iter().enumerate() {
        let report = tester.run(method, &restriction)?;
        let p_bootstrap = match &cfg.boot {
            Some(boot) => {
                let test = CommonBreakBootstrap {
                    method,
                    m: m.to_vec(),
                    restriction: restriction.clone(),
                    search: cfg.search,
                };
                let b = (*boot).with_seed(pair_seed(boot.seed, index * 8 + slot));
                Some(bootstrap_pvalue(&test, &y, &b)?.p_value)
            }
            None => None,
        };
        results.push(MethodResult {
            method,
            statistic: report.statistic,
            p_asymptotic: report.p_asymptotic,
            p_bootstrap,
        });
    }
    Ok(CommonBreakRow {
        forcing: pair.forcing.name.clone(),
        temperature: pair.temperature.name.clone(),
        first_year: y.start_period(),
        last_year: y.calendar(y.t()),
        forcing_breaks: calendar(&y, &unrestricted, 0),
        temperature_breaks: calendar(&y, &unrestricted, 1),
        common_breaks: calendar(&y, &restricted, 0),
        results,
    })
}

fn sorted_pairs(pairs: &[Pairing]) -> Vec<(usize, &Pairing)> {
    let mut idx: Vec<(usize, &Pairing)> = pairs.iter().enumerate().collect();
    idx.sort_by(|a, b| a.1.key().cmp(&b.1.key()).then(a.0.cmp(&b.0)));
    idx
}

/// Common-break tests for each forcing/temperature pair. Rows come back
/// ordered by `(forcing, temperature)` name.
pub fn analyze_common_breaks(
    pairs: &[Pairing],
    cfg: &CommonBreakConfig,
) -> Result<Vec<CommonBreakRow>> {
    if cfg.breaks == 0 {
        return Err(Error::invalid("at least one break per equation is needed"));
    }
    sorted_pairs(pairs)
        .into_par_iter()
        .map(|(i, p)| common_row(p, cfg, i))
        .collect()
}

#[derive(Debug, Clone)]
pub struct HiatusConfig {
    pub range: Option<(i64, i64)>,
    pub trim: f64,
    pub boot: Option<BootstrapConfig>,
    pub search: SearchConfig,
}

impl Default for HiatusConfig {
    fn default() -> Self {
        Self {
            range: None,
            trim: DEFAULT_TRIM,
            boot: Some(BootstrapConfig::default().with_replications(APPLICATION_REPLICATIONS)),
            search: SearchConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct HiatusRow {
    pub forcing: String,
    pub temperature: String,
    pub first_year: i64,
    pub last_year: i64,
    pub forcing_break: i64,
    pub statistic: f64,
    pub p_bootstrap: Option<f64>,
    /// Temperature break date under the alternative.
    pub break_year: i64,
}

fn hiatus_row(pair: &Pairing, cfg: &HiatusConfig, index: usize) -> Result<HiatusRow> {
    let y = pair.system(cfg.range)?;
    let m = [1, 0];
    let searcher = SystemSearcher::new(&y, cfg.search)?;
    let base = searcher.search(&m, &RestrictionSet::none(1))?.breaks;
    let report = extra_break::lr_profile(&searcher, &base, 1, cfg.trim)?;
    let p_bootstrap = match &cfg.boot {
        Some(boot) => {
            let test = ExtraBreakBootstrap {
                m: m.to_vec(),
                equation: Some(1),
                trim: cfg.trim,
                search: cfg.search,
            };
            let b = (*boot).with_seed(pair_seed(boot.seed, index));
            Some(bootstrap_pvalue(&test, &y, &b)?.p_value)
        }
        None => None,
    };
    Ok(HiatusRow {
        forcing: pair.forcing.name.clone(),
        temperature: pair.temperature.name.clone(),
        first_year: y.start_period(),
        last_year: y.calendar(y.t()),
        forcing_break: y.calendar(base.equation(0)[0]),
        statistic: report.statistic,
        p_bootstrap,
        break_year: y.calendar(report.nu_hat),
    })
}

/// Test of no temperature break against one, given the forcing break
/// estimated in the bivariate system. Rows are ordered as in
/// [`analyze_common_breaks`].
pub fn analyze_hiatus(pairs: &[Pairing], cfg: &HiatusConfig) -> Result<Vec<HiatusRow>> {
    sorted_pairs(pairs)
        .into_par_iter()
        .map(|(i, p)| hiatus_row(p, cfg, i))
        .collect()
}

fn fmt_p(p: Option<f64>, digits: usize) -> String {
    p.map_or_else(|| "-".to_string(), |v| format!("{v:.digits$}"))
}

fn fmt_years(v: &[i64]) -> String {
    v.iter().map(i64::to_string).collect::<Vec<_>>().join(" ")
}

pub fn common_rows_csv(rows: &[CommonBreakRow]) -> String {
    let mut out = String::from("forcing,temperature,first_year,last_year,method,statistic,p_asymptotic,p_bootstrap,forcing_break,temperature_break,common_break\n");
    for r in rows {
        for m in &r.results {
            out.push_str(&format!(
                "{},{},{},{},{},{:.6},{:.6},{},{},{},{}\n",
                r.forcing,
                r.temperature,
                r.first_year,
                r.last_year,
                m.method.name(),
                m.statistic,
                m.p_asymptotic,
                m.p_bootstrap
                    .map_or_else(String::new, |p| format!("{p:.6}")),
                fmt_years(&r.forcing_breaks),
                fmt_years(&r.temperature_breaks),
                fmt_years(&r.common_breaks),
            ));
        }
    }
    out
}

pub fn common_rows_text(rows: &[CommonBreakRow]) -> String {
    let methods: Vec<TestMethod> = rows
        .first()
        .map_or_else(Vec::new, |r| r.results.iter().map(|m| m.method).collect());
    let mut out = format!("{:<10} {:<12}", "forcing", "temperature");
    for m in &methods {
        out.push_str(&format!(" | {:>8} asym  boot", m.name()));
    }
    out.push_str(" | forc. temp. comm.\n");
    for r in rows {
        out.push_str(&format!("{:<10} {:<12}", r.forcing, r.temperature));
        for m in &r.results {
            out.push_str(&format!(
                " | {:>8.3} {:>5} {:>5}",
                m.statistic,
                fmt_p(Some(m.p_asymptotic), 2),
                fmt_p(m.p_bootstrap, 2)
            ));
        }
        out.push_str(&format!(
            " | {} {} {}\n",
            fmt_years(&r.forcing_breaks),
            fmt_years(&r.temperature_breaks),
            fmt_years(&r.common_breaks)
        ));
    }
    out
}

pub fn hiatus_rows_csv(rows: &[HiatusRow]) -> String {
    let mut out = String::from(
        "forcing,temperature,first_year,last_year,forcing_break,statistic,p_bootstrap,break_year\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.6},{},{}\n",
            r.forcing,
            r.temperature,
            r.first_year,
            r.last_year,
            r.forcing_break,
            r.statistic,
            r.p_bootstrap
                .map_or_else(String::new, |p| format!("{p:.6}")),
            r.break_year
        ));
    }
    out
}

pub fn hiatus_rows_text(rows: &[HiatusRow]) -> String {
    let mut out = format!(
        "{:<10} {:<12} {:>6} {:>9} {:>7} {:>6}\n",
        "forcing", "temperature", "forc.", "LR", "p", "break"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<10} {:<12} {:>6} {:>9.3} {:>7} {:>6}\n",
            r.forcing,
            r.temperature,
            r.forcing_break,
            r.statistic,
            fmt_p(r.p_bootstrap, 3),
            r.break_year
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trend_model::{evaluate_trend, EquationParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    fn table(text: &str) -> Result<SeriesTable> {
        SeriesTable::from_reader(text.as_bytes(), &[])
    }

    #[test]
    fn reads_a_small_file() {
        let t = table("year,amo\n1900,0.1\n1901,-0.2\n1902,0.3\n").unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.first_year(), 1900);
        assert_eq!(t.column("amo").unwrap(), &[0.1, -0.2, 0.3]);
    }

    #[test]
    fn gaps_and_duplicates_are_parse_errors() {
        let gap = table("year,amo\n1900,0.1\n1902,0.3\n").unwrap_err();
        assert!(
            matches!(gap, Error::Parse(ref m) if m.contains("line 3")),
            "{gap}"
        );
        let dup = table("year,amo\n1900,0.1\n1900,0.3\n").unwrap_err();
        assert!(
            matches!(dup, Error::Parse(ref m) if m.contains("duplicate")),
            "{dup}"
        );
    }

    #[test]
    fn bad_cells_name_row_and_column() {
        let err = table("year,amo,nao\n1900,0.1,0.2\n1901,x,0.3\n").unwrap_err();
        assert!(
            matches!(err, Error::Parse(ref m) if m.contains("line 3") && m.contains("'amo'")),
            "{err}"
        );
        let err = table("year,amo\n1900,NaN\n").unwrap_err();
        assert!(matches!(err, Error::Parse(_)));
        let err = table("year,amo\n1900,\n").unwrap_err();
        assert!(matches!(err, Error::Parse(_)));
    }

    #[test]
    fn missing_column_is_named() {
        let err =
            SeriesTable::from_reader("year,amo\n1900,0.1\n".as_bytes(), &["nao"]).unwrap_err();
        assert!(
            matches!(err, Error::Parse(ref m) if m.contains("'nao'")),
            "{err}"
        );
        let err = table("yr,amo\n1900,0.1\n").unwrap_err();
        assert!(matches!(err, Error::Parse(ref m) if m.contains("year")));
    }

    #[test]
    fn slicing_composes() {
        let t = table("year,a,b\n1900,1,10\n1901,2,20\n1902,3,30\n1903,4,40\n").unwrap();
        let s = t.slice(1901, 1903).unwrap().slice(1902, 1903).unwrap();
        assert_eq!(s, t.slice(1902, 1903).unwrap());
        assert_eq!(s.column("b").unwrap(), &[30.0, 40.0]);
        assert!(t.slice(1899, 1902).is_err());
    }

    fn modes(t: usize, rng: &mut ChaCha8Rng) -> Vec<AnnualSeries> {
        vec![
            AnnualSeries::new("amo", 1850, normals(t, rng)).unwrap(),
            AnnualSeries::new("nao", 1850, normals(t, rng)).unwrap(),
        ]
    }

    #[test]
    fn bic_finds_the_relevant_mode() {
        // Each spurious NAO lag enters with probability P(chi2(1) > ln n),
        // about 0.025, so the exact set is expected in roughly 95% of draws.
        let seeds = 1000;
        let mut hits = 0;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = modes(150, &mut rng);
            let noise = normals(150, &mut rng);
            let temp: Vec<f64> = m[0]
                .values
                .iter()
                .zip(&noise)
                .map(|(a, e)| 0.8 * a + 0.1 * e)
                .collect();
            let temp = AnnualSeries::new("g", 1850, temp).unwrap();
            let spec = bic_select_filter(&temp, &m, 2).unwrap();
            hits += usize::from(spec.chosen == vec![("amo".to_string(), 0)]);
        }
        let rate = hits as f64 / seeds as f64;
        assert!(rate >= 0.93, "{rate}");
    }

    #[test]
    fn bic_prefers_the_constant_for_noise() {
        let mut empty = 0;
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let m = modes(150, &mut rng);
            let temp = AnnualSeries::new("g", 1850, normals(150, &mut rng)).unwrap();
            empty += usize::from(bic_select_filter(&temp, &m, 2).unwrap().chosen.is_empty());
        }
        assert!(empty > 50, "{empty}");
    }

    #[test]
    fn bic_locates_a_deeper_lag() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = modes(150, &mut rng);
        let noise = normals(150, &mut rng);
        let nao = &m[1];
        let temp: Vec<f64> = (0..150)
            .map(|i| {
                if i >= 3 {
                    nao.values[i - 3] + 0.05 * noise[i]
                } else {
                    noise[i]
                }
            })
            .collect();
        let temp = AnnualSeries::new("g", 1850, temp)
            .unwrap()
            .slice(1860, 1999)
            .unwrap();
        assert!(bic_select_filter(&temp, &m, 2)
            .unwrap()
            .chosen
            .iter()
            .all(|c| c.1 < 2));
        let spec = bic_select_filter(&temp, &m, 4).unwrap();
        assert!(
            spec.chosen.contains(&("nao".to_string(), 3)),
            "{:?}",
            spec.chosen
        );
    }

    #[test]
    fn bic_is_invariant_to_affine_mode_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = modes(120, &mut rng);
        let noise = normals(120, &mut rng);
        let temp: Vec<f64> = (0..120).map(|i| 0.3 * m[0].values[i] + noise[i]).collect();
        let temp = AnnualSeries::new("g", 1850, temp).unwrap();
        let scaled: Vec<AnnualSeries> = m
            .iter()
            .map(|s| {
                AnnualSeries::new(
                    s.name.clone(),
                    s.first_year,
                    s.values.iter().map(|v| 3.0 - 7.0 * v).collect(),
                )
                .unwrap()
            })
            .collect();
        let a = bic_select_filter(&temp, &m, 3).unwrap();
        let b = bic_select_filter(&temp, &scaled, 3).unwrap();
        assert_eq!(a.chosen, b.chosen);
        assert!((a.bic - b.bic).abs() < 1e-8);
    }

    #[test]
    fn large_kmax_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = modes(20, &mut rng);
        let temp = AnnualSeries::new("g", 1850, normals(20, &mut rng)).unwrap();
        assert!(matches!(
            bic_select_filter(&temp, &m, 10),
            Err(Error::InvalidArgument(_))
        ));
        assert!(bic_select_filter(&temp, &m, 9).is_ok());
    }

    fn spec_with(chosen: Vec<(String, usize)>) -> FilterSpec {
        FilterSpec {
            kmax: 2,
            chosen,
            intercept: 0.0,
            coefficients: Vec::new(),
            bic: 0.0,
            nobs: 0,
        }
    }

    #[test]
    fn empty_filter_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = modes(50, &mut rng);
        let temp = AnnualSeries::new("g", 1850, normals(50, &mut rng)).unwrap();
        let out = filter_series(&temp, &m, &spec_with(Vec::new())).unwrap();
        assert_eq!(out.first_year, 1850);
        for (a, b) in out.values.iter().zip(&temp.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_mode_is_removed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = modes(50, &mut rng);
        let temp = AnnualSeries::new("g", 1850, m[0].values.clone()).unwrap();
        let out = filter_series(&temp, &m, &spec_with(vec![("amo".into(), 0)])).unwrap();
        let first = out.values[0];
        assert!(out.values.iter().all(|v| (v - first).abs() < 1e-10));
    }

    #[test]
    fn filtering_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = modes(80, &mut rng);
        let noise = normals(80, &mut rng);
        let temp: Vec<f64> = (0..80)
            .map(|i| 0.5 * m[0].values[i] - 0.2 * m[1].values[i] + noise[i])
            .collect();
        let temp = AnnualSeries::new("g", 1850, temp).unwrap();
        let spec = spec_with(vec![("amo".into(), 0), ("nao".into(), 0)]);
        let once = filter_series(&temp, &m, &spec).unwrap();
        let twice = filter_series(&once, &m, &spec).unwrap();
        for (a, b) in once.values.iter().zip(&twice.values) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn lagged_filter_starts_later_unless_modes_reach_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = modes(60, &mut rng);
        let temp = AnnualSeries::new("g", 1850, normals(60, &mut rng)).unwrap();
        let spec = spec_with(vec![("nao".into(), 2)]);
        assert_eq!(filter_series(&temp, &m, &spec).unwrap().first_year, 1852);
        let late = temp.slice(1855, 1909).unwrap();
        let out = filter_series(&late, &m, &spec).unwrap();
        assert_eq!((out.first_year, out.len()), (1855, 55));
    }

    fn synthetic_pair(seed: u64, t: usize, kf: usize, kt: Option<usize>, noise: f64) -> Pairing {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = evaluate_trend(&EquationParams::new(0.0, 0.02, vec![-0.015]), &[kf], t).unwrap();
        let temp = match kt {
            Some(k) => {
                evaluate_trend(&EquationParams::new(0.0, 0.01, vec![0.02]), &[k], t).unwrap()
            }
            None => evaluate_trend(&EquationParams::new(0.0, 0.01, Vec::new()), &[], t).unwrap(),
        };
        let f: Vec<f64> = f
            .iter()
            .map(|v| v + 0.02 * normals(1, &mut rng)[0])
            .collect();
        let temp: Vec<f64> = temp
            .iter()
            .map(|v| v + noise * normals(1, &mut rng)[0])
            .collect();
        Pairing::new(
            AnnualSeries::new("W", 1900, f).unwrap(),
            AnnualSeries::new("G", 1900, temp).unwrap(),
        )
    }

    fn small_boot(seed: u64) -> Option<BootstrapConfig> {
        let mut b = BootstrapConfig::default()
            .with_replications(19)
            .with_seed(seed);
        b.kilian_reps = 20;
        Some(b)
    }

    #[test]
    fn common_break_row_reports_calendar_dates() {
        let pair = synthetic_pair(1, 93, 63, Some(63), 0.02);
        let cfg = CommonBreakConfig {
            boot: None,
            ..CommonBreakConfig::default()
        };
        let rows = analyze_common_breaks(&[pair], &cfg).unwrap();
        let r = &rows[0];
        assert_eq!((r.first_year, r.last_year), (1900, 1992));
        assert!(
            (r.forcing_breaks[0] - 1962).abs() <= 2,
            "{:?}",
            r.forcing_breaks
        );
        assert!(
            (r.common_breaks[0] - 1962).abs() <= 2,
            "{:?}",
            r.common_breaks
        );
        assert_eq!(r.results.len(), 3);
    }

    #[test]
    fn a_series_paired_with_itself_has_a_trivial_common_break() {
        let pair = synthetic_pair(2, 60, 30, None, 0.05);
        let same = Pairing::new(
            pair.forcing.clone(),
            AnnualSeries {
                name: "copy".into(),
                ..pair.forcing.clone()
            },
        );
        let cfg = CommonBreakConfig {
            boot: None,
            ..CommonBreakConfig::default()
        };
        let r = &analyze_common_breaks(&[same], &cfg).unwrap()[0];
        assert_eq!(r.forcing_breaks, r.temperature_breaks);
        assert_eq!(r.forcing_breaks, r.common_breaks);
        for m in &r.results {
            assert!(
                m.statistic.abs() < 1e-8,
                "{} {}",
                m.method.name(),
                m.statistic
            );
        }
    }

    #[test]
    fn range_slicing_matches_pre_truncated_input() {
        let pair = synthetic_pair(3, 80, 40, Some(45), 0.05);
        let cut = Pairing::new(
            pair.forcing.slice(1905, 1974).unwrap(),
            pair.temperature.slice(1905, 1974).unwrap(),
        );
        let a = analyze_common_breaks(
            &[pair],
            &CommonBreakConfig {
                range: Some((1905, 1974)),
                boot: small_boot(1),
                ..Default::default()
            },
        )
        .unwrap();
        let b = analyze_common_breaks(
            &[cut],
            &CommonBreakConfig {
                boot: small_boot(1),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(common_rows_csv(&a), common_rows_csv(&b));
    }

    #[test]
    fn mismatched_ranges_are_rejected() {
        let pair = synthetic_pair(4, 60, 30, Some(30), 0.05);
        let short = Pairing::new(
            pair.forcing.clone(),
            pair.temperature.slice(1900, 1950).unwrap(),
        );
        let cfg = CommonBreakConfig {
            boot: None,
            ..CommonBreakConfig::default()
        };
        assert!(matches!(
            analyze_common_breaks(std::slice::from_ref(&short), &cfg),
            Err(Error::InvalidArgument(_))
        ));
        let cfg = CommonBreakConfig {
            range: Some((1900, 1955)),
            ..cfg
        };
        assert!(analyze_common_breaks(&[short], &cfg).is_err());
    }

    #[test]
    fn rows_are_ordered_and_reproducible() {
        let mut a = synthetic_pair(5, 60, 30, Some(35), 0.05);
        a.temperature.name = "Z".into();
        let b = synthetic_pair(6, 60, 25, Some(30), 0.05);
        let cfg = CommonBreakConfig {
            boot: small_boot(7),
            ..Default::default()
        };
        let r1 = analyze_common_breaks(&[a.clone(), b.clone()], &cfg).unwrap();
        let r2 = analyze_common_breaks(&[a, b], &cfg).unwrap();
        assert_eq!(r1[0].temperature, "G");
        assert_eq!(r1[1].temperature, "Z");
        assert_eq!(common_rows_csv(&r1), common_rows_csv(&r2));
        assert_eq!(common_rows_text(&r1), common_rows_text(&r2));
    }

    #[test]
    fn hiatus_detects_a_temperature_break() {
        let pair = synthetic_pair(8, 60, 20, Some(40), 0.02);
        let cfg = HiatusConfig {
            boot: small_boot(3),
            ..Default::default()
        };
        let r = &analyze_hiatus(&[pair], &cfg).unwrap()[0];
        assert!((r.break_year - 1939).abs() <= 2, "{}", r.break_year);
        assert!((r.forcing_break - 1919).abs() <= 2, "{}", r.forcing_break);
        assert_eq!(r.p_bootstrap, Some(0.05));
        assert_eq!(hiatus_rows_csv(std::slice::from_ref(r)).lines().count(), 2);
    }
}
