use std::fmt::Write as _;
use std::path::Path;

use segtrend::climate::{self, common_restriction};
use segtrend::extra_break::{lr_profile, sup_lr_profile};
use segtrend::monte_carlo::design_grid;
use segtrend::{
    bic_select_filter, bootstrap_pvalue, filter_series, run_table, AnnualSeries, BootstrapConfig,
    BreakVector, CommonBreakBootstrap, CommonBreakConfig, CommonBreakTester, Error,
    ExtraBreakBootstrap, HiatusConfig, McConfig, MultiSeries, Pairing, RestrictionSet, Result,
    SearchConfig, SeriesTable, SystemSearcher, Weighting,
};

use crate::input::{load_columns, load_system, restrict};
use crate::{DataOpts, Format, GlobalOpts, MethodArg, PairOpts, WeightingArg};

fn boot_config(g: &GlobalOpts) -> Option<BootstrapConfig> {
    (g.boot_reps > 0).then(|| {
        BootstrapConfig::default()
            .with_replications(g.boot_reps)
            .with_seed(g.seed)
    })
}

fn search_config(trim: f64) -> Result<SearchConfig> {
    let cfg = SearchConfig::default().with_trim(trim);
    cfg.validate()?;
    Ok(cfg)
}

fn check_breaks(y: &MultiSeries, m: &[usize]) -> Result<()> {
    if m.len() != y.n() {
        return Err(Error::InvalidArgument(format!(
            "--breaks lists {} counts for {} series",
            m.len(),
            y.n()
        )));
    }
    Ok(())
}

fn years(y: &MultiSeries, k: &[usize]) -> String {
    if k.is_empty() {
        return "-".to_string();
    }
    k.iter()
        .map(|&d| y.calendar(d).to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn all_years(y: &MultiSeries, k: &BreakVector) -> String {
    (0..k.n())
        .map(|i| years(y, k.equation(i)))
        .collect::<Vec<_>>()
        .join(" | ")
}

fn fmt_p(p: Option<f64>) -> String {
    p.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

fn sample_line(y: &MultiSeries) -> String {
    format!(
        "sample {}-{} (T = {})",
        y.start_period(),
        y.calendar(y.t()),
        y.t()
    )
}

pub fn estimate(g: &GlobalOpts, data: &DataOpts, weighting: WeightingArg) -> Result<String> {
    let y = load_system(data, g.range)?;
    check_breaks(&y, &data.breaks)?;
    let w = match weighting {
        WeightingArg::Fgls => Weighting::Fgls,
        WeightingArg::Diagonal => Weighting::Diagonal,
    };
    let cfg = search_config(data.search_trim)?.with_weighting(w);
    let total = data.breaks.iter().sum();
    let res = SystemSearcher::new(&y, cfg)?.search(&data.breaks, &RestrictionSet::none(total))?;
    let mut out = String::new();
    match g.format {
        Format::Csv => {
            out.push_str("equation,break_years,intercept,slope,slope_changes\n");
            for (i, p) in res.fit.params.iter().enumerate() {
                let changes: Vec<String> =
                    p.slope_changes.iter().map(|d| format!("{d:.8}")).collect();
                let _ = writeln!(
                    out,
                    "{},{},{:.8},{:.8},{}",
                    y.labels()[i],
                    years(&y, res.breaks.equation(i)),
                    p.intercept,
                    p.slope,
                    changes.join(" ")
                );
            }
        }
        Format::Text => {
            let _ = writeln!(
                out,
                "{}, log-likelihood {:.4}",
                sample_line(&y),
                res.fit.loglik
            );
            let _ = writeln!(
                out,
                "{:<12} {:<16} {:>12} {:>12}  slope changes",
                "equation", "breaks", "intercept", "slope"
            );
            for (i, p) in res.fit.params.iter().enumerate() {
                let changes: Vec<String> =
                    p.slope_changes.iter().map(|d| format!("{d:.5}")).collect();
                let _ = writeln!(
                    out,
                    "{:<12} {:<16} {:>12.5} {:>12.5}  {}",
                    y.labels()[i],
                    years(&y, res.breaks.equation(i)),
                    p.intercept,
                    p.slope,
                    changes.join(" ")
                );
            }
            if res.fit.degenerate {
                out.push_str("note: residual covariance is singular (exact fit)\n");
            }
        }
    }
    Ok(out)
}

/// `common`, `fixed:<year>,...` (one year per break, equation by equation)
/// or `offset:<c>` (`lambda_1j - lambda_ij = c` for every equation `i` and
/// break `j`).
pub fn parse_restriction(spec: &str, y: &MultiSeries, m: &[usize]) -> Result<RestrictionSet> {
    let total: usize = m.iter().sum();
    let equal = || -> Result<usize> {
        let first = m[0];
        if first == 0 || m.iter().any(|&mi| mi != first) {
            return Err(Error::InvalidArgument(format!(
                "'{spec}' needs the same positive break count in every equation"
            )));
        }
        if m.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "'{spec}' needs at least two equations"
            )));
        }
        Ok(first)
    };
    if spec == "common" {
        return common_restriction(m.len(), equal()?);
    }
    if let Some(rest) = spec.strip_prefix("fixed:") {
        let years: Vec<i64> = rest
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad year '{s}' in restriction")))
            })
            .collect::<Result<_>>()?;
        if years.len() != total {
            return Err(Error::InvalidArgument(format!(
                "fixed restriction lists {} years for {total} breaks",
                years.len()
            )));
        }
        let t = y.t() as f64;
        let pins: Vec<(usize, f64)> = years
            .iter()
            .enumerate()
            .map(|(slot, &yr)| (slot, (yr - y.start_period() + 1) as f64 / t))
            .collect();
        return RestrictionSet::fixed_dates(total, &pins);
    }
    if let Some(rest) = spec.strip_prefix("offset:") {
        let c: f64 = rest
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad offset '{rest}'")))?;
        let per = equal()?;
        let offsets: Vec<(usize, usize, f64)> = (1..m.len())
            .flat_map(|i| (0..per).map(move |j| (j, i * per + j, c)))
            .collect();
        return RestrictionSet::offsets(total, &offsets);
    }
    Err(Error::InvalidArgument(format!(
        "unknown restriction '{spec}', expected common, fixed:<years> or offset:<c>"
    )))
}

pub fn test_common(
    g: &GlobalOpts,
    data: &DataOpts,
    restriction: &str,
    method: MethodArg,
) -> Result<String> {
    let y = load_system(data, g.range)?;
    check_breaks(&y, &data.breaks)?;
    let cfg = search_config(data.search_trim)?;
    let r = parse_restriction(restriction, &y, &data.breaks)?;
    let tester = CommonBreakTester::new(&y, &data.breaks, &cfg)?;
    let boot = boot_config(g);
    let mut reports = Vec::new();
    for m in method.methods() {
        let mut rep = tester.run(m, &r)?;
        if let Some(b) = &boot {
            let test = CommonBreakBootstrap {
                method: m,
                m: data.breaks.clone(),
                restriction: r.clone(),
                search: cfg,
            };
            rep.p_bootstrap = Some(bootstrap_pvalue(&test, &y, b)?.p_value);
        }
        reports.push(rep);
    }
    let mut out = String::new();
    match g.format {
        Format::Csv => {
            out.push_str("method,statistic,df,p_asymptotic,p_bootstrap,unrestricted_breaks,restricted_breaks\n");
            for rep in &reports {
                let _ = writeln!(
                    out,
                    "{},{:.8},{},{:.8},{},{},{}",
                    rep.method.name(),
                    rep.statistic,
                    rep.df,
                    rep.p_asymptotic,
                    rep.p_bootstrap
                        .map_or_else(String::new, |p| format!("{p:.8}")),
                    all_years(&y, &rep.k_unrestricted),
                    rep.k_restricted
                        .as_ref()
                        .map_or_else(String::new, |k| all_years(&y, k)),
                );
            }
        }
        Format::Text => {
            let _ = writeln!(out, "{}, restriction {restriction}", sample_line(&y));
            let _ = writeln!(
                out,
                "{:<9} {:>10} {:>3} {:>7} {:>7}  {:<20} restricted",
                "method", "statistic", "df", "asym.", "boot.", "breaks"
            );
            for rep in &reports {
                let _ = writeln!(
                    out,
                    "{:<9} {:>10.4} {:>3} {:>7.3} {:>7}  {:<20} {}",
                    rep.method.name(),
                    rep.statistic,
                    rep.df,
                    rep.p_asymptotic,
                    fmt_p(rep.p_bootstrap),
                    all_years(&y, &rep.k_unrestricted),
                    rep.k_restricted
                        .as_ref()
                        .map_or_else(|| "-".to_string(), |k| all_years(&y, k)),
                );
                if rep.boundary_warning {
                    let _ = writeln!(
                        out,
                        "note: {} uses a break at the edge of the search range",
                        rep.method.name()
                    );
                }
                if rep.lr_unreliable && rep.method == segtrend::TestMethod::Lr {
                    out.push_str("note: residuals look serially correlated, the LR chi-square p-value may be off\n");
                }
            }
        }
    }
    Ok(out)
}

fn equation_index(y: &MultiSeries, eq: &str) -> Result<usize> {
    if let Some(i) = y.labels().iter().position(|l| l == eq) {
        return Ok(i);
    }
    match eq.parse::<usize>() {
        Ok(i) if i < y.n() => Ok(i),
        _ => Err(Error::InvalidArgument(format!("no equation '{eq}'"))),
    }
}

pub fn test_extra(
    g: &GlobalOpts,
    data: &DataOpts,
    equation: Option<&str>,
    trim: f64,
) -> Result<String> {
    let y = load_system(data, g.range)?;
    check_breaks(&y, &data.breaks)?;
    let cfg = search_config(data.search_trim)?;
    let eq = equation.map(|e| equation_index(&y, e)).transpose()?;
    let searcher = SystemSearcher::new(&y, cfg)?;
    let total = data.breaks.iter().sum();
    let base = searcher
        .search(&data.breaks, &RestrictionSet::none(total))?
        .breaks;
    let rep = match eq {
        Some(i) => lr_profile(&searcher, &base, i, trim)?,
        None => sup_lr_profile(&searcher, &base, trim)?,
    };
    let p_boot = match boot_config(g) {
        Some(b) => {
            let test = ExtraBreakBootstrap {
                m: data.breaks.clone(),
                equation: eq,
                trim,
                search: cfg,
            };
            Some(bootstrap_pvalue(&test, &y, &b)?.p_value)
        }
        None => None,
    };
    let name = &y.labels()[rep.equation_hat];
    let year = y.calendar(rep.nu_hat);
    let mut out = String::new();
    match g.format {
        Format::Csv => {
            out.push_str("equation,statistic,p_bootstrap,break_year,existing_breaks\n");
            let _ = writeln!(
                out,
                "{name},{:.8},{},{year},{}",
                rep.statistic,
                p_boot.map_or_else(String::new, |p| format!("{p:.8}")),
                all_years(&y, &base)
            );
        }
        Format::Text => {
            let _ = writeln!(out, "{}, trim {trim}", sample_line(&y));
            let _ = writeln!(out, "existing breaks  {}", all_years(&y, &base));
            let _ = writeln!(out, "equation         {name}");
            let _ = writeln!(out, "LR statistic     {:.4}", rep.statistic);
            let _ = writeln!(out, "bootstrap p      {}", fmt_p(p_boot));
            let _ = writeln!(out, "break under H1   {year}");
        }
    }
    Ok(out)
}

fn filtered_temperatures(
    temps: Vec<AnnualSeries>,
    modes: &[AnnualSeries],
    kmax: usize,
    range: Option<(i64, i64)>,
) -> Result<Vec<(AnnualSeries, segtrend::FilterSpec)>> {
    restrict(temps, range)?
        .into_iter()
        .map(|t| {
            let spec = bic_select_filter(&t, modes, kmax)?;
            let f = filter_series(&t, modes, &spec)?;
            Ok((f, spec))
        })
        .collect()
}

fn spec_line(name: &str, spec: &segtrend::FilterSpec) -> String {
    let regs: Vec<String> = spec
        .chosen
        .iter()
        .zip(&spec.coefficients)
        .map(|((m, lag), c)| format!("{m}(lag {lag}) {c:.5}"))
        .collect();
    let regs = if regs.is_empty() {
        "none".to_string()
    } else {
        regs.join(", ")
    };
    format!(
        "{name}: kmax {}, BIC {:.4}, constant {:.5}, regressors {regs}, {} obs",
        spec.kmax, spec.bic, spec.intercept, spec.nobs
    )
}

/// The filtered series over the years they all cover.
fn common_table(series: &[AnnualSeries]) -> Result<SeriesTable> {
    let from = series.iter().map(|s| s.first_year).max().unwrap_or(0);
    let to = series
        .iter()
        .map(AnnualSeries::last_year)
        .min()
        .unwrap_or(0);
    let cut = series
        .iter()
        .map(|s| s.slice(from, to))
        .collect::<Result<Vec<_>>>()?;
    SeriesTable::from_series(&cut)
}

fn table_csv(table: &SeriesTable) -> String {
    let mut out = format!("year,{}\n", table.names().join(","));
    let cols: Vec<&[f64]> = table
        .names()
        .iter()
        .map(|n| table.column(n).unwrap_or(&[]))
        .collect();
    for r in 0..table.len() {
        let _ = write!(out, "{}", table.first_year() + r as i64);
        for c in &cols {
            let _ = write!(out, ",{}", c[r]);
        }
        out.push('\n');
    }
    out
}

pub fn filter(
    g: &GlobalOpts,
    temperature: &Path,
    columns: &[String],
    modes: &Path,
    kmax: usize,
    output: Option<&Path>,
) -> Result<String> {
    let temps = load_columns(temperature, columns)?;
    let modes = load_columns(modes, &[])?;
    let results = filtered_temperatures(temps, &modes, kmax, g.range)?;
    let series: Vec<AnnualSeries> = results.iter().map(|(s, _)| s.clone()).collect();
    let table = common_table(&series)?;
    let csv = table_csv(&table);
    if let Some(path) = output {
        std::fs::write(path, &csv)?;
    }
    let mut out = String::new();
    match g.format {
        Format::Csv => {
            for (s, spec) in &results {
                eprintln!("{}", spec_line(&s.name, spec));
            }
            out.push_str(&csv);
        }
        Format::Text => {
            for (s, spec) in &results {
                out.push_str(&spec_line(&s.name, spec));
                out.push('\n');
            }
            if output.is_none() {
                out.push('\n');
                let _ = write!(out, "{:>6}", "year");
                for n in table.names() {
                    let _ = write!(out, " {n:>12}");
                }
                out.push('\n');
                for r in 0..table.len() {
                    let _ = write!(out, "{:>6}", table.first_year() + r as i64);
                    for n in table.names() {
                        let _ = write!(out, " {:>12.5}", table.column(n)?[r]);
                    }
                    out.push('\n');
                }
            }
        }
    }
    Ok(out)
}

pub fn mc_table(
    g: &GlobalOpts,
    method: MethodArg,
    deltas: &[f64],
    reps: usize,
    level: f64,
    bootstrap: bool,
) -> Result<String> {
    let designs: Vec<_> = deltas.iter().flat_map(|&d| design_grid(d)).collect();
    let cfg = McConfig {
        reps,
        seed: g.seed,
        level,
        bootstrap,
        ..McConfig::default()
    };
    let table = run_table(&method.methods(), &designs, &cfg)?;
    Ok(match g.format {
        Format::Csv => table.to_csv(),
        Format::Text => table.render_text(),
    })
}

fn pairings(g: &GlobalOpts, opts: &PairOpts) -> Result<(Vec<Pairing>, Vec<String>)> {
    let forcing = load_columns(&opts.forcing, &[])?;
    let temps = load_columns(&opts.temperature, &[])?;
    let mut notes = Vec::new();
    let temps = match &opts.modes {
        Some(path) => {
            let modes = load_columns(path, &[])?;
            filtered_temperatures(temps, &modes, opts.kmax, g.range)?
                .into_iter()
                .map(|(s, spec)| {
                    notes.push(spec_line(&s.name, &spec));
                    s
                })
                .collect()
        }
        None => temps,
    };
    let pairs = forcing
        .iter()
        .flat_map(|f| {
            temps
                .iter()
                .map(move |t| Pairing::new(f.clone(), t.clone()))
        })
        .collect();
    Ok((pairs, notes))
}

pub fn climate_common(
    g: &GlobalOpts,
    opts: &PairOpts,
    breaks: usize,
    method: MethodArg,
) -> Result<String> {
    let (pairs, notes) = pairings(g, opts)?;
    let cfg = CommonBreakConfig {
        breaks,
        range: g.range,
        methods: method.methods(),
        boot: boot_config(g),
        search: SearchConfig::default(),
    };
    let rows = climate::analyze_common_breaks(&pairs, &cfg)?;
    Ok(match g.format {
        Format::Csv => climate::common_rows_csv(&rows),
        Format::Text => {
            notes.iter().map(|n| format!("{n}\n")).collect::<String>()
                + &climate::common_rows_text(&rows)
        }
    })
}

pub fn climate_hiatus(g: &GlobalOpts, opts: &PairOpts, trim: f64) -> Result<String> {
    let (pairs, notes) = pairings(g, opts)?;
    let cfg = HiatusConfig {
        range: g.range,
        trim,
        boot: boot_config(g),
        search: SearchConfig::default(),
    };
    let rows = climate::analyze_hiatus(&pairs, &cfg)?;
    Ok(match g.format {
        Format::Csv => climate::hiatus_rows_csv(&rows),
        Format::Text => {
            notes.iter().map(|n| format!("{n}\n")).collect::<String>()
                + &climate::hiatus_rows_text(&rows)
        }
    })
}
