//! Sufficient-statistic kernel shared by every break-date search.
//!
//! All equations contain the constant and the linear trend, so both can be
//! partialled out of the data and of the slope bases once per sample. What is
//! left for a candidate date vector is an `m x m` Gram matrix of projected
//! slope bases and an `m x n` matrix of their inner products with the
//! projected data, both looked up from tables. One FGLS iteration then costs
//! `O(m^3 + n^2 m^2)` regardless of `T`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{self, COV_FLOOR};
use crate::trend_model::{loglik_from_logdet, BreakVector, EquationParams, MultiSeries, SystemFit};

/// Data-independent tables for a sample length `T`.
#[derive(Debug)]
pub(crate) struct Geometry {
    t: usize,
    /// `M_C b(k)` for `k = 1..=T`, stored at `(k - 1) * T`.
    proj_basis: Vec<f64>,
    /// `b(a)' M_C b(b)` at `a * (T + 1) + b`.
    gram: Vec<f64>,
}

impl Geometry {
    fn build(t: usize) -> Self {
        let mut proj_basis = vec![0.0; t * t];
        for k in 1..=t {
            let b: Vec<f64> = (1..=t).map(|s| s.saturating_sub(k) as f64).collect();
            let r = detrend(&b);
            proj_basis[(k - 1) * t..k * t].copy_from_slice(&r);
        }
        let w = t + 1;
        let mut gram = vec![0.0; w * w];
        for a in 1..=t {
            let ra = &proj_basis[(a - 1) * t..a * t];
            for b in a..=t {
                let rb = &proj_basis[(b - 1) * t..b * t];
                let v: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
                gram[a * w + b] = v;
                gram[b * w + a] = v;
            }
        }
        Self {
            t,
            proj_basis,
            gram,
        }
    }

    pub(crate) fn for_len(t: usize) -> Arc<Self> {
        static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Geometry>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        if let Some(g) = cache.lock().expect("geometry cache poisoned").get(&t) {
            return Arc::clone(g);
        }
        let g = Arc::new(Geometry::build(t));
        cache
            .lock()
            .expect("geometry cache poisoned")
            .entry(t)
            .or_insert_with(|| Arc::clone(&g))
            .clone()
    }

    #[inline]
    pub(crate) fn gram(&self, a: usize, b: usize) -> f64 {
        self.gram[a * (self.t + 1) + b]
    }

    pub(crate) fn proj_basis(&self, k: usize) -> &[f64] {
        &self.proj_basis[(k - 1) * self.t..k * self.t]
    }
}

/// Residuals of a least-squares regression on `[1, t]`.
pub(crate) fn detrend(y: &[f64]) -> Vec<f64> {
    let (a, b) = trend_coefficients(y);
    y.iter()
        .enumerate()
        .map(|(i, v)| v - a - b * (i + 1) as f64)
        .collect()
}

/// Intercept and slope of a least-squares fit on `[1, t]`, `t = 1..T`.
pub(crate) fn trend_coefficients(y: &[f64]) -> (f64, f64) {
    let t = y.len() as f64;
    let tbar = (t + 1.0) / 2.0;
    let ybar = y.iter().sum::<f64>() / t;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (i, v) in y.iter().enumerate() {
        let d = (i + 1) as f64 - tbar;
        sxy += d * (v - ybar);
        sxx += d * d;
    }
    let slope = sxy / sxx;
    (ybar - slope * tbar, slope)
}

/// How the residual covariance enters the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    /// Iterated feasible GLS; objective `log det Sigma(k)`.
    #[default]
    Fgls,
    /// Equation-by-equation OLS; objective `sum_i log sigma_ii(k)`, which is
    /// minimized by the per-equation least-squares dates.
    Diagonal,
}

/// Outcome of fitting the slope-change coefficients at one date vector.
#[derive(Debug, Clone)]
pub(crate) struct GammaFit {
    pub gamma: Vec<f64>,
    pub logdet: f64,
}

/// Reusable buffers for [`SystemData::fit_gamma`], one set per thread.
#[derive(Debug, Default)]
struct Scratch {
    g: Vec<f64>,
    h: Vec<f64>,
    gamma: Vec<f64>,
    trial: Vec<f64>,
    a: Vec<f64>,
    rhs: Vec<f64>,
    diag: Vec<f64>,
    sigma: Vec<f64>,
    cross: Vec<f64>,
    quad: Vec<f64>,
    work: Vec<f64>,
    inv: Vec<f64>,
    trial_inv: Vec<f64>,
}

impl Scratch {
    fn prepare(&mut self, n: usize, m: usize) {
        let size = |v: &mut Vec<f64>, len: usize| {
            v.clear();
            v.resize(len, 0.0);
        };
        size(&mut self.g, m * m);
        size(&mut self.h, m * n);
        size(&mut self.gamma, m);
        size(&mut self.trial, m);
        size(&mut self.a, m * m);
        size(&mut self.rhs, m);
        size(&mut self.diag, m.max(1));
        size(&mut self.sigma, n * n);
        size(&mut self.cross, (n * n).max(m * n));
        size(&mut self.quad, (n * n).max(m * n));
        size(&mut self.work, n * n + n);
        size(&mut self.inv, n * n);
        size(&mut self.trial_inv, n * n);
    }
}

thread_local! {
    static SCRATCH: RefCell<Scratch> = RefCell::new(Scratch::default());
}

/// Projected sample statistics for one data set.
#[derive(Debug, Clone)]
pub(crate) struct SystemData {
    pub n: usize,
    pub t: usize,
    pub geom: Arc<Geometry>,
    /// Original series.
    pub y: Vec<Vec<f64>>,
    /// Series with constant and trend partialled out.
    pub ytil: Vec<Vec<f64>>,
    /// `ytil_i' ytil_j`, row-major `n x n`.
    pub yy: Vec<f64>,
    /// `b(k)' ytil_j` at `[j][k]`.
    pub by: Vec<Vec<f64>>,
    /// Per-series scale used for covariance flooring.
    pub scale: Vec<f64>,
}

/// Smallest detrended variance, relative to the raw mean square, used as a
/// series scale.
const SCALE_FLOOR: f64 = 1e-16;

impl SystemData {
    pub(crate) fn new(rows: Vec<Vec<f64>>) -> Self {
        let n = rows.len();
        let t = rows[0].len();
        let geom = Geometry::for_len(t);
        let ytil: Vec<Vec<f64>> = rows.iter().map(|r| detrend(r)).collect();
        let mut yy = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v: f64 = ytil[i].iter().zip(&ytil[j]).map(|(a, b)| a * b).sum();
                yy[i * n + j] = v;
                yy[j * n + i] = v;
            }
        }
        let by = ytil
            .iter()
            .map(|yt| {
                let mut out = vec![0.0; t + 1];
                // suffix sums: S0[k] = sum_{s>k} y_s, S1[k] = sum_{s>k} (s-k) y_s
                let mut s0 = 0.0;
                let mut s1 = 0.0;
                for k in (1..=t).rev() {
                    // moving from k+1 to k adds every later term once more
                    s1 += s0;
                    out[k] = s1;
                    s0 += yt[k - 1];
                }
                out
            })
            .collect();
        // a series that is a linear trend up to roundoff keeps a scale tied
        // to its magnitude, so its residuals sit below the floor
        let scale = (0..n)
            .map(|i| {
                let raw = rows[i].iter().map(|v| v * v).sum::<f64>() / t as f64;
                let v = (yy[i * n + i] / t as f64).max(SCALE_FLOOR * raw);
                if v > 0.0 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self {
            n,
            t,
            geom,
            y: rows,
            ytil,
            yy,
            by,
            scale,
        }
    }

    pub(crate) fn from_series(y: &MultiSeries) -> Self {
        Self::new(y.rows())
    }

    /// Fits the slope-change coefficients at stacked dates `k` (with
    /// `slot_eq[s]` the equation of slot `s`) and returns the objective.
    pub(crate) fn fit_gamma(
        &self,
        k: &[usize],
        slot_eq: &[usize],
        weighting: Weighting,
        max_iter: usize,
        tol: f64,
    ) -> Option<GammaFit> {
        SCRATCH.with(|cell| {
            let mut ws = cell.borrow_mut();
            ws.prepare(self.n, k.len());
            self.fit_gamma_in(&mut ws, k, slot_eq, weighting, max_iter, tol)
        })
    }

    fn fit_gamma_in(
        &self,
        ws: &mut Scratch,
        k: &[usize],
        slot_eq: &[usize],
        weighting: Weighting,
        max_iter: usize,
        tol: f64,
    ) -> Option<GammaFit> {
        let n = self.n;
        let m = k.len();
        let geom = &*self.geom;
        let Scratch {
            g,
            h,
            gamma,
            trial,
            a,
            rhs,
            diag,
            sigma,
            cross,
            quad,
            work,
            inv,
            trial_inv,
        } = ws;

        for u in 0..m {
            for v in u..m {
                let val = geom.gram(k[u], k[v]);
                g[u * m + v] = val;
                g[v * m + u] = val;
            }
        }
        // h[s * n + j] = b(k_s)' ytil_j
        for s in 0..m {
            for j in 0..n {
                h[s * n + j] = self.by[j][k[s]];
            }
        }

        // OLS start: the block-diagonal part of the normal equations
        for u in 0..m {
            for v in 0..m {
                a[u * m + v] = if slot_eq[u] == slot_eq[v] {
                    g[u * m + v]
                } else {
                    0.0
                };
            }
            rhs[u] = h[u * n + slot_eq[u]];
        }
        if m > 0 && !linalg::solve_spd_scaled(a, m, rhs, diag) {
            return None;
        }
        gamma.copy_from_slice(&rhs[..m]);
        self.resid_cov(gamma, g, h, slot_eq, cross, quad, sigma);

        if weighting == Weighting::Diagonal && n > 1 {
            let logdet = (0..n)
                .map(|i| {
                    sigma[i * n + i]
                        .max(COV_FLOOR * self.scale[i] * self.scale[i])
                        .ln()
                })
                .sum();
            return Some(GammaFit {
                gamma: gamma.clone(),
                logdet,
            });
        }

        let (mut logdet, mut floored) =
            linalg::factor_cov_into(sigma, n, &self.scale, COV_FLOOR, work, inv);
        if n == 1 || m == 0 {
            return Some(GammaFit {
                gamma: gamma.clone(),
                logdet,
            });
        }
        for _ in 0..max_iter {
            if floored {
                break;
            }
            // Newton step on log det Sigma(gamma); its fixed point is the
            // FGLS fixed point, reached in a handful of steps
            let tf = self.t as f64;
            for u in 0..m {
                for j in 0..n {
                    let mut v = -h[u * n + j];
                    for w in 0..m {
                        if slot_eq[w] == j {
                            v += g[u * m + w] * gamma[w];
                        }
                    }
                    cross[u * n + j] = v / tf;
                }
            }
            // quad holds P W_u, m x n
            for u in 0..m {
                for kk in 0..n {
                    let mut v = 0.0;
                    for j in 0..n {
                        v += inv[kk * n + j] * cross[u * n + j];
                    }
                    quad[u * n + kk] = v;
                }
            }
            for u in 0..m {
                let iu = slot_eq[u];
                rhs[u] = -2.0 * quad[u * n + iu];
                for v in 0..m {
                    let iv = slot_eq[v];
                    let wpw: f64 = (0..n).map(|j| cross[u * n + j] * quad[v * n + j]).sum();
                    a[u * m + v] = 2.0 * g[u * m + v] * inv[iu * n + iv] / tf
                        - 2.0 * quad[u * n + iv] * quad[v * n + iu]
                        - 2.0 * inv[iu * n + iv] * wpw;
                }
            }
            let mut accepted = false;
            if linalg::solve_spd_scaled(a, m, rhs, diag) {
                for u in 0..m {
                    trial[u] = gamma[u] + rhs[u];
                }
                self.resid_cov(trial, g, h, slot_eq, cross, quad, sigma);
                let (next, fl) =
                    linalg::factor_cov_into(sigma, n, &self.scale, COV_FLOOR, work, trial_inv);
                if next <= logdet + tol {
                    let change = (logdet - next).abs();
                    gamma.copy_from_slice(trial);
                    inv.copy_from_slice(trial_inv);
                    logdet = next;
                    floored = fl;
                    accepted = true;
                    if change < tol {
                        break;
                    }
                }
            }
            if accepted {
                continue;
            }
            // plain FGLS step
            for u in 0..m {
                let eu = slot_eq[u];
                for v in 0..m {
                    a[u * m + v] = inv[eu * n + slot_eq[v]] * g[u * m + v];
                }
                let mut c = 0.0;
                for j in 0..n {
                    c += inv[eu * n + j] * h[u * n + j];
                }
                rhs[u] = c;
            }
            if !linalg::solve_spd_scaled(a, m, rhs, diag) {
                return None;
            }
            gamma.copy_from_slice(&rhs[..m]);
            self.resid_cov(gamma, g, h, slot_eq, cross, quad, sigma);
            let (next, fl) = linalg::factor_cov_into(sigma, n, &self.scale, COV_FLOOR, work, inv);
            let change = (next - logdet).abs();
            logdet = next;
            floored = fl;
            if change < tol {
                break;
            }
        }
        Some(GammaFit {
            gamma: gamma.clone(),
            logdet,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn resid_cov(
        &self,
        gamma: &[f64],
        g: &[f64],
        h: &[f64],
        slot_eq: &[usize],
        cross: &mut [f64],
        quad: &mut [f64],
        out: &mut [f64],
    ) {
        let n = self.n;
        let m = gamma.len();
        let t = self.t as f64;
        // cross[i * n + j] = gamma_i' B_i' ytil_j
        cross.iter_mut().for_each(|v| *v = 0.0);
        quad.iter_mut().for_each(|v| *v = 0.0);
        for s in 0..m {
            let e = slot_eq[s];
            for j in 0..n {
                cross[e * n + j] += gamma[s] * h[s * n + j];
            }
        }
        for a in 0..m {
            let ea = slot_eq[a];
            let ga = gamma[a];
            for b in 0..m {
                quad[ea * n + slot_eq[b]] += ga * g[a * m + b] * gamma[b];
            }
        }
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = (self.yy[i * n + j] - cross[i * n + j] - cross[j * n + i]
                    + quad[i * n + j])
                    / t;
            }
        }
    }

    /// Full system fit at the given dates: coefficients, exact residuals and
    /// covariance, and the likelihood.
    pub(crate) fn system_fit(
        &self,
        breaks: &BreakVector,
        weighting: Weighting,
        max_iter: usize,
        tol: f64,
    ) -> Result<SystemFit> {
        let k = breaks.flat();
        let slot_eq = slot_equations(&breaks.counts());
        let gf = self
            .fit_gamma(&k, &slot_eq, weighting, max_iter, tol)
            .ok_or_else(|| {
                Error::numerical(format!("singular normal equations at breaks {breaks}"))
            })?;
        let n = self.n;
        let t = self.t;
        let mut residuals = DMatrix::zeros(n, t);
        let mut params = Vec::with_capacity(n);
        let mut slot = 0;
        for i in 0..n {
            let ki = breaks.equation(i);
            let gi = &gf.gamma[slot..slot + ki.len()];
            slot += ki.len();
            let mut r = self.ytil[i].clone();
            for (&kk, &gg) in ki.iter().zip(gi) {
                for (rv, bv) in r.iter_mut().zip(self.geom.proj_basis(kk)) {
                    *rv -= gg * bv;
                }
            }
            // level and trend from the unprojected data net of the break terms
            let mut net = self.y[i].clone();
            for (&kk, &gg) in ki.iter().zip(gi) {
                for (s, v) in net.iter_mut().enumerate().skip(kk) {
                    *v -= gg * (s + 1 - kk) as f64;
                }
            }
            let (mu, beta) = trend_coefficients(&net);
            params.push(EquationParams::new(mu, beta, gi.to_vec()));
            for (j, v) in r.into_iter().enumerate() {
                residuals[(i, j)] = v;
            }
        }
        let sigma = &residuals * residuals.transpose() / t as f64;
        let flat: Vec<f64> = (0..n * n).map(|idx| sigma[(idx / n, idx % n)]).collect();
        let fac = linalg::factor_cov(&flat, n, &self.scale, COV_FLOOR);
        let sigma = if fac.floored {
            floored_from_inverse(&fac.inv, n)
        } else {
            sigma
        };
        Ok(SystemFit {
            breaks: breaks.clone(),
            params,
            sigma,
            residuals,
            loglik: loglik_from_logdet(n, t, fac.logdet),
            degenerate: fac.floored,
        })
    }
}

fn floored_from_inverse(inv: &[f64], n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_row_slice(n, n, inv);
    linalg::symmetrize(&m.try_inverse().unwrap_or_else(|| DMatrix::zeros(n, n)))
}

/// Equation index of each stacked break slot.
pub(crate) fn slot_equations(counts: &[usize]) -> Vec<usize> {
    counts
        .iter()
        .enumerate()
        .flat_map(|(i, &c)| std::iter::repeat_n(i, c))
        .collect()
}
