//! Joined segmented trend model: data containers and regressor construction.
//!
//! Each series follows `y_t = mu + beta * t + sum_j delta_j * (t - k_j)^+ + u_t`
//! for `t = 1..T`; the trend is continuous at every break date `k_j` and only
//! its slope changes. Break dates are 1-based sample indices.

use std::fmt;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;

/// Smallest admissible break date. A break at 1 is collinear with the trend.
pub const MIN_BREAK: usize = 2;

/// `n x T` panel of observations.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiSeries {
    values: DMatrix<f64>,
    labels: Vec<String>,
    start_period: i64,
}

impl MultiSeries {
    pub fn new(values: DMatrix<f64>, labels: Vec<String>, start_period: i64) -> Result<Self> {
        let (n, t) = values.shape();
        if n == 0 {
            return Err(Error::invalid("a system needs at least one series"));
        }
        if t < 5 {
            return Err(Error::invalid(format!("need at least 5 periods, got {t}")));
        }
        if labels.len() != n {
            return Err(Error::invalid(format!(
                "{} labels supplied for {n} series",
                labels.len()
            )));
        }
        if let Some(((i, j), _)) = values
            .iter()
            .enumerate()
            .map(|(idx, v)| ((idx % n, idx / n), v))
            .find(|(_, v)| !v.is_finite())
        {
            return Err(Error::invalid(format!(
                "series '{}' has a missing or non-finite value at period {}",
                labels[i],
                start_period + j as i64
            )));
        }
        Ok(Self {
            values,
            labels,
            start_period,
        })
    }

    /// Builds a panel from row vectors with default labels `y1, y2, ...`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::invalid("a system needs at least one series"));
        }
        let t = rows[0].len();
        if rows.iter().any(|r| r.len() != t) {
            return Err(Error::invalid("all series must have the same length"));
        }
        let values = DMatrix::from_fn(n, t, |i, j| rows[i][j]);
        let labels = (1..=n).map(|i| format!("y{i}")).collect();
        Self::new(values, labels, 1)
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn t(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn start_period(&self) -> i64 {
        self.start_period
    }

    /// Copy of series `i` as a contiguous vector.
    pub fn series(&self, i: usize) -> Vec<f64> {
        self.values.row(i).iter().copied().collect()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n()).map(|i| self.series(i)).collect()
    }

    /// Calendar label of sample index `k` (1-based).
    pub fn calendar(&self, k: usize) -> i64 {
        self.start_period + k as i64 - 1
    }

    /// Subsystem made of the listed series, in order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.n()) {
            return Err(Error::invalid(format!("series index {bad} out of range")));
        }
        let values = DMatrix::from_fn(idx.len(), self.t(), |i, j| self.values[(idx[i], j)]);
        let labels = idx.iter().map(|&i| self.labels[i].clone()).collect();
        Self::new(values, labels, self.start_period)
    }

    /// Same labels and calendar anchor, new values.
    pub fn with_values(&self, values: DMatrix<f64>) -> Result<Self> {
        if values.shape() != self.values.shape() {
            return Err(Error::invalid("replacement values have the wrong shape"));
        }
        Self::new(values, self.labels.clone(), self.start_period)
    }
}

/// Per-equation break dates, strictly increasing within each equation.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct BreakVector {
    per_equation: Vec<Vec<usize>>,
}

impl BreakVector {
    pub fn new(per_equation: Vec<Vec<usize>>) -> Result<Self> {
        for (i, k) in per_equation.iter().enumerate() {
            if k.contains(&0) {
                return Err(Error::invalid(format!(
                    "equation {i}: break dates are 1-based"
                )));
            }
            if k.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::invalid(format!(
                    "equation {i}: break dates must be strictly increasing, got {k:?}"
                )));
            }
        }
        Ok(Self { per_equation })
    }

    pub fn per_equation(&self) -> &[Vec<usize>] {
        &self.per_equation
    }

    pub fn equation(&self, i: usize) -> &[usize] {
        &self.per_equation[i]
    }

    pub fn n(&self) -> usize {
        self.per_equation.len()
    }

    /// Total number of breaks `m`.
    pub fn total(&self) -> usize {
        self.per_equation.iter().map(Vec::len).sum()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.per_equation.iter().map(Vec::len).collect()
    }

    /// Break dates stacked equation by equation.
    pub fn flat(&self) -> Vec<usize> {
        self.per_equation.iter().flatten().copied().collect()
    }

    /// Break fractions `k / T`, stacked.
    pub fn fractions(&self, t: usize) -> Vec<f64> {
        self.flat().iter().map(|&k| k as f64 / t as f64).collect()
    }

    /// Rebuilds a break vector from stacked dates and per-equation counts.
    pub fn from_flat(flat: &[usize], counts: &[usize]) -> Result<Self> {
        if counts.iter().sum::<usize>() != flat.len() {
            return Err(Error::invalid(
                "break counts do not match the number of dates",
            ));
        }
        let mut out = Vec::with_capacity(counts.len());
        let mut pos = 0;
        for &c in counts {
            out.push(flat[pos..pos + c].to_vec());
            pos += c;
        }
        Self::new(out)
    }
}

impl fmt::Display for BreakVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .per_equation
            .iter()
            .map(|k| {
                let d: Vec<String> = k.iter().map(|x| x.to_string()).collect();
                format!("({})", d.join(","))
            })
            .collect();
        write!(f, "{}", parts.join(" "))
    }
}

/// Trend coefficients of one equation.
#[derive(Debug, Clone, PartialEq)]
pub struct EquationParams {
    pub intercept: f64,
    pub slope: f64,
    pub slope_changes: Vec<f64>,
}

impl EquationParams {
    pub fn new(intercept: f64, slope: f64, slope_changes: Vec<f64>) -> Self {
        Self {
            intercept,
            slope,
            slope_changes,
        }
    }

    /// Coefficient vector `(mu, beta, delta_1, ..., delta_m)`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.intercept, self.slope];
        v.extend_from_slice(&self.slope_changes);
        v
    }
}

/// Estimated system at fixed break dates.
#[derive(Debug, Clone)]
pub struct SystemFit {
    pub breaks: BreakVector,
    pub params: Vec<EquationParams>,
    /// Residual covariance `U'U / T`.
    pub sigma: DMatrix<f64>,
    /// `n x T` residual matrix.
    pub residuals: DMatrix<f64>,
    pub loglik: f64,
    /// Set when the residual covariance was singular and had to be floored
    /// (exact fits).
    pub degenerate: bool,
}

impl SystemFit {
    pub fn n(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn t(&self) -> usize {
        self.residuals.ncols()
    }

    /// `log det` of the residual covariance used in the likelihood.
    pub fn log_det_sigma(&self) -> f64 {
        let n = self.n() as f64;
        let t = self.t() as f64;
        -(2.0 / t) * (self.loglik + (n * t / 2.0) * ((2.0 * std::f64::consts::PI).ln() + 1.0))
    }

    /// Slope changes stacked equation by equation.
    pub fn slope_changes(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.slope_changes.iter().copied())
            .collect()
    }

    /// Fitted trend values, `n x T`.
    pub fn fitted(&self) -> Result<DMatrix<f64>> {
        let t = self.t();
        let mut out = DMatrix::zeros(self.n(), t);
        for (i, p) in self.params.iter().enumerate() {
            let tr = evaluate_trend(p, self.breaks.equation(i), t)?;
            for (j, v) in tr.into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        Ok(out)
    }
}

/// Maximized Gaussian log-likelihood given `log det Sigma`.
pub fn loglik_from_logdet(n: usize, t: usize, logdet: f64) -> f64 {
    let (n, t) = (n as f64, t as f64);
    -(n * t / 2.0) * ((2.0 * std::f64::consts::PI).ln() + 1.0) - (t / 2.0) * logdet
}

/// `b_t(k) = (t - k)^+` for `t = 1..T`.
pub fn slope_basis(t_len: usize, k: usize) -> Result<Vec<f64>> {
    if k < 1 || k > t_len {
        return Err(Error::invalid(format!(
            "break date {k} outside 1..={t_len}"
        )));
    }
    Ok((1..=t_len).map(|t| t.saturating_sub(k) as f64).collect())
}

/// Checks that `k` is strictly increasing and inside `[2, T - 2]`.
pub fn check_admissible(t_len: usize, k: &[usize]) -> Result<()> {
    if k.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(format!(
            "break dates must be strictly increasing, got {k:?}"
        )));
    }
    if let Some(&bad) = k.iter().find(|&&d| d < MIN_BREAK || d + 2 > t_len) {
        return Err(Error::invalid(format!(
            "break date {bad} outside the admissible range [{MIN_BREAK}, {}]",
            t_len.saturating_sub(2)
        )));
    }
    Ok(())
}

/// Regressor matrix `[1, t, b(k_1), ..., b(k_m)]`, `T x (2 + m)`.
pub fn build_regressors(t_len: usize, k: &[usize]) -> Result<DMatrix<f64>> {
    check_admissible(t_len, k)?;
    let p = 2 + k.len();
    if t_len < p {
        return Err(Error::invalid(format!(
            "{p} regressors need at least {p} observations, got {t_len}"
        )));
    }
    let x = DMatrix::from_fn(t_len, p, |row, col| {
        let t = (row + 1) as f64;
        match col {
            0 => 1.0,
            1 => t,
            c => (row + 1).saturating_sub(k[c - 2]) as f64,
        }
    });
    if linalg::rank(&x, 1e-12) < p {
        return Err(Error::invalid(format!(
            "regressors for breaks {k:?} are rank deficient"
        )));
    }
    Ok(x)
}

/// Trend `mu + beta t + sum_j delta_j b_t(k_j)` for `t = 1..T`.
pub fn evaluate_trend(params: &EquationParams, k: &[usize], t_len: usize) -> Result<Vec<f64>> {
    if params.slope_changes.len() != k.len() {
        return Err(Error::invalid(format!(
            "{} slope changes for {} break dates",
            params.slope_changes.len(),
            k.len()
        )));
    }
    if let Some(&bad) = k.iter().find(|&&d| d < 1 || d > t_len) {
        return Err(Error::invalid(format!(
            "break date {bad} outside 1..={t_len}"
        )));
    }
    Ok((1..=t_len)
        .map(|t| {
            let mut v = params.intercept + params.slope * t as f64;
            for (&kj, &dj) in k.iter().zip(&params.slope_changes) {
                v += dj * t.saturating_sub(kj) as f64;
            }
            v
        })
        .collect())
}
