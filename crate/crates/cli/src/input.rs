use std::path::Path;

use nalgebra::DMatrix;
use segtrend::{load_series, AnnualSeries, Error, MultiSeries, Result, SeriesTable};

use crate::DataOpts;

pub fn parse_range(s: &str) -> std::result::Result<(i64, i64), String> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| format!("expected <y1>:<y2>, got '{s}'"))?;
    let a: i64 = a
        .trim()
        .parse()
        .map_err(|_| format!("bad start year '{a}'"))?;
    let b: i64 = b
        .trim()
        .parse()
        .map_err(|_| format!("bad end year '{b}'"))?;
    if a >= b {
        return Err(format!("range {a}:{b} is empty"));
    }
    Ok((a, b))
}

/// Every value column of `path`, or only `columns` when non-empty.
pub fn load_columns(path: &Path, columns: &[String]) -> Result<Vec<AnnualSeries>> {
    let names: Vec<&str> = columns.iter().map(String::as_str).collect();
    Ok(load_series(path, &names)?.all_series())
}

pub fn restrict(series: Vec<AnnualSeries>, range: Option<(i64, i64)>) -> Result<Vec<AnnualSeries>> {
    match range {
        Some((a, b)) => series.iter().map(|s| s.slice(a, b)).collect(),
        None => Ok(series),
    }
}

/// The system described by `--data` and `--columns` over `range`.
pub fn load_system(opts: &DataOpts, range: Option<(i64, i64)>) -> Result<MultiSeries> {
    let mut all = Vec::new();
    for f in &opts.files {
        all.extend(load_columns(f, &[])?);
    }
    let chosen = if opts.columns.is_empty() {
        all
    } else {
        opts.columns
            .iter()
            .map(|c| {
                all.iter()
                    .find(|s| &s.name == c)
                    .cloned()
                    .ok_or_else(|| Error::Parse(format!("no column named '{c}' in the data files")))
            })
            .collect::<Result<_>>()?
    };
    let table = SeriesTable::from_series(&restrict(chosen, range)?)?;
    let series = table.all_series();
    let values = DMatrix::from_fn(series.len(), table.len(), |i, j| series[i].values[j]);
    MultiSeries::new(values, table.names().to_vec(), table.first_year())
}
