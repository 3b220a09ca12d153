//! Likelihood-ratio tests for one additional slope break in a given
//! equation, or in whichever equation fits it best (sup-LR).
//!
//! The existing dates are held at their estimates under both hypotheses.

use crate::break_search::{SearchConfig, SystemSearcher};
use crate::error::{Error, Result};
use crate::trend_model::{BreakVector, MultiSeries};

pub const DEFAULT_TRIM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct AddBreakHypothesis {
    /// Equation receiving the extra break; `None` takes the sup over all.
    pub equation: Option<usize>,
    pub trim: f64,
    pub base_breaks: BreakVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AddBreakReport {
    pub statistic: f64,
    /// Date of the additional break maximizing the likelihood.
    pub nu_hat: usize,
    pub equation_hat: usize,
    pub p_bootstrap: Option<f64>,
    /// `(h, LR(h))` over the admissible dates of `equation_hat`.
    pub profile: Vec<(usize, f64)>,
}

/// Dates `h` with `trim <= h/T <= 1 - trim` and at least `trim * T` away
/// from every existing break of the equation.
pub fn admissible_grid(existing: &[usize], trim: f64, t: usize) -> Result<Vec<usize>> {
    check_trim(existing, trim, t)?;
    let tf = t as f64;
    let gap = trim * tf - 1e-9;
    let grid: Vec<usize> = (2..=t.saturating_sub(2))
        .filter(|&h| {
            let hf = h as f64;
            hf >= gap && hf <= tf - gap && existing.iter().all(|&k| (hf - k as f64).abs() >= gap)
        })
        .collect();
    if grid.is_empty() {
        return Err(Error::invalid(format!(
            "no admissible dates for an extra break with trim {trim}"
        )));
    }
    Ok(grid)
}

fn check_trim(existing: &[usize], trim: f64, t: usize) -> Result<()> {
    let tf = t as f64;
    let upper = match (existing.first(), existing.last()) {
        (Some(&a), Some(&b)) => (a as f64 / tf).min(1.0 - b as f64 / tf),
        _ => 0.5,
    };
    if !(trim > 0.0 && trim < upper) {
        return Err(Error::invalid(format!(
            "trim {trim} must lie in (0, {upper:.4})"
        )));
    }
    Ok(())
}

fn with_extra(base: &BreakVector, equation: usize, h: usize) -> Result<BreakVector> {
    let mut per = base.per_equation().to_vec();
    let ki = &mut per[equation];
    let pos = ki.partition_point(|&d| d < h);
    ki.insert(pos, h);
    BreakVector::new(per)
}

/// Profile and maximum of `LR(h)` for one equation, reusing a searcher.
pub fn lr_profile(
    searcher: &SystemSearcher,
    base: &BreakVector,
    equation: usize,
    trim: f64,
) -> Result<AddBreakReport> {
    if equation >= base.n() {
        return Err(Error::invalid(format!("equation {equation} out of range")));
    }
    let t = searcher.t();
    let grid = admissible_grid(base.equation(equation), trim, t)?;
    let null = searcher.objective(base)?;
    let tf = t as f64;
    let mut profile = Vec::with_capacity(grid.len());
    for h in grid {
        let alt = with_extra(base, equation, h)?;
        match searcher.objective(&alt) {
            Ok(v) => profile.push((h, (tf * (null - v)).max(0.0))),
            Err(e) => log::warn!("extra break at {h} in equation {equation} skipped: {e}"),
        }
    }
    let &(nu_hat, statistic) = profile
        .iter()
        .fold(None, |best: Option<&(usize, f64)>, p| match best {
            Some(b) if b.1 >= p.1 => Some(b),
            _ => Some(p),
        })
        .ok_or_else(|| Error::numerical("every augmented fit failed"))?;
    Ok(AddBreakReport {
        statistic,
        nu_hat,
        equation_hat: equation,
        p_bootstrap: None,
        profile,
    })
}

/// Maximum of the per-equation profiles; ties go to the lowest equation.
pub fn sup_lr_profile(
    searcher: &SystemSearcher,
    base: &BreakVector,
    trim: f64,
) -> Result<AddBreakReport> {
    let mut best: Option<AddBreakReport> = None;
    for i in 0..base.n() {
        let rep = lr_profile(searcher, base, i, trim)?;
        if best.as_ref().is_none_or(|b| rep.statistic > b.statistic) {
            best = Some(rep);
        }
    }
    best.ok_or_else(|| Error::invalid("system has no equations"))
}

pub fn lr_extra_break(
    y: &MultiSeries,
    hyp: &AddBreakHypothesis,
    cfg: &SearchConfig,
) -> Result<AddBreakReport> {
    let searcher = SystemSearcher::new(y, *cfg)?;
    match hyp.equation {
        Some(i) => lr_profile(&searcher, &hyp.base_breaks, i, hyp.trim),
        None => sup_lr_profile(&searcher, &hyp.base_breaks, hyp.trim),
    }
}

pub fn sup_lr_extra_break(
    y: &MultiSeries,
    base: &BreakVector,
    trim: f64,
    cfg: &SearchConfig,
) -> Result<AddBreakReport> {
    sup_lr_profile(&SystemSearcher::new(y, *cfg)?, base, trim)
}
