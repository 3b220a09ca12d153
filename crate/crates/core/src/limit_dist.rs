//! Closed-form limiting covariances of the break-fraction estimators and the
//! kernels of the additional-break statistic.
//!
//! Every integral over `[0, 1]` that appears is an inner product of two of
//! the piecewise polynomials in [`Basis`], so all of them reduce to
//! [`inner`].

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// Functions on `[0, 1]` from which the regressor limits are built.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Basis {
    /// `1`
    One,
    /// `r`
    Lin,
    /// `(r - a)^+`
    Ramp(f64),
    /// `1(r > a)`
    Step(f64),
}

impl Basis {
    pub fn eval(self, r: f64) -> f64 {
        match self {
            Basis::One => 1.0,
            Basis::Lin => r,
            Basis::Ramp(a) => (r - a).max(0.0),
            Basis::Step(a) => {
                if r > a {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// `int_0^1 a(r) b(r) dr`.
pub fn inner(a: Basis, b: Basis) -> f64 {
    use Basis::*;
    match (a, b) {
        (One, One) => 1.0,
        (One, Lin) | (Lin, One) => 0.5,
        (Lin, Lin) => 1.0 / 3.0,
        (One, Ramp(x)) | (Ramp(x), One) => (1.0 - x).powi(2) / 2.0,
        (One, Step(x)) | (Step(x), One) => 1.0 - x,
        (Lin, Ramp(x)) | (Ramp(x), Lin) => (1.0 - x.powi(3)) / 3.0 - x * (1.0 - x * x) / 2.0,
        (Lin, Step(x)) | (Step(x), Lin) => (1.0 - x * x) / 2.0,
        (Ramp(x), Ramp(y)) => {
            let c = x.max(y);
            (1.0 - c.powi(3)) / 3.0 - (x + y) * (1.0 - c * c) / 2.0 + x * y * (1.0 - c)
        }
        (Ramp(x), Step(y)) | (Step(y), Ramp(x)) => {
            let c = x.max(y);
            (1.0 - c * c) / 2.0 - x * (1.0 - c)
        }
        (Step(x), Step(y)) => 1.0 - x.max(y),
    }
}

/// The scalar integrals behind every moment block, at fractions `l`, `lp`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarMoments {
    /// `int (r - l)^+`
    pub ramp: f64,
    /// `int (r - l)^+ (r - lp)^+`
    pub ramp_ramp: f64,
    /// `int r 1(r > l)`
    pub lin_step: f64,
    /// `int 1(r > l) 1(r > lp)`
    pub step_step: f64,
    /// `int (r - l)^+ 1(r > lp)`
    pub ramp_step: f64,
    /// `int ((r - l)^+)^2`
    pub ramp_sq: f64,
}

pub fn scalar_moments(l: f64, lp: f64) -> ScalarMoments {
    use Basis::*;
    ScalarMoments {
        ramp: inner(One, Ramp(l)),
        ramp_ramp: inner(Ramp(l), Ramp(lp)),
        lin_step: inner(Lin, Step(l)),
        step_step: inner(Step(l), Step(lp)),
        ramp_step: inner(Ramp(l), Step(lp)),
        ramp_sq: inner(Ramp(l), Ramp(l)),
    }
}

/// `f_i(r) = (1, r, (r - l_i1)^+, ...)`.
pub fn f_basis(fractions: &[f64]) -> Vec<Basis> {
    let mut out = vec![Basis::One, Basis::Lin];
    out.extend(fractions.iter().map(|&l| Basis::Ramp(l)));
    out
}

/// `g_i(r) = (1(r > l_i1), ...)`.
pub fn g_basis(fractions: &[f64]) -> Vec<Basis> {
    fractions.iter().map(|&l| Basis::Step(l)).collect()
}

/// Gram matrix `int u(r) v(r)' dr`.
pub fn gram(u: &[Basis], v: &[Basis]) -> DMatrix<f64> {
    DMatrix::from_fn(u.len(), v.len(), |a, b| inner(u[a], v[b]))
}

/// Pairwise `FF_ij`, `FG_ij`, `GF_ij`, `GG_ij`.
#[derive(Debug, Clone)]
pub struct MomentBlocks {
    pub ff: Vec<Vec<DMatrix<f64>>>,
    pub fg: Vec<Vec<DMatrix<f64>>>,
    pub gf: Vec<Vec<DMatrix<f64>>>,
    pub gg: Vec<Vec<DMatrix<f64>>>,
}

fn check_fractions(fractions: &[Vec<f64>]) -> Result<()> {
    for (i, l) in fractions.iter().enumerate() {
        if let Some(bad) = l.iter().find(|&&x| !(x > 0.0 && x < 1.0)) {
            return Err(Error::invalid(format!(
                "equation {i}: fraction {bad} not in (0, 1)"
            )));
        }
    }
    Ok(())
}

pub fn moment_blocks(fractions: &[Vec<f64>]) -> Result<MomentBlocks> {
    check_fractions(fractions)?;
    let f: Vec<_> = fractions.iter().map(|l| f_basis(l)).collect();
    let g: Vec<_> = fractions.iter().map(|l| g_basis(l)).collect();
    let pairs = |u: &[Vec<Basis>], v: &[Vec<Basis>]| -> Vec<Vec<DMatrix<f64>>> {
        u.iter()
            .map(|a| v.iter().map(|b| gram(a, b)).collect())
            .collect()
    };
    Ok(MomentBlocks {
        ff: pairs(&f, &f),
        fg: pairs(&f, &g),
        gf: pairs(&g, &f),
        gg: pairs(&g, &g),
    })
}

/// Limiting covariance of the system (FGLS) break-fraction estimator.
#[derive(Debug, Clone)]
pub struct LimitCov {
    pub xi0: DMatrix<f64>,
    pub xi1: DMatrix<f64>,
    /// `xi1^-1 xi0 xi1^-1'`
    pub xi: DMatrix<f64>,
    pub d_delta: DMatrix<f64>,
}

/// Weighted moment matrices shared by [`assemble_limit_cov`] and
/// [`addbreak_kernels`].
#[derive(Debug, Clone)]
struct SystemMoments {
    f: Vec<Vec<Basis>>,
    g: Vec<Vec<Basis>>,
    f_off: Vec<usize>,
    g_off: Vec<usize>,
    s: DMatrix<f64>,
    kappa: DMatrix<f64>,
    q_ff_inv: DMatrix<f64>,
    g_ff: DMatrix<f64>,
    q_gf: DMatrix<f64>,
    g_gf: DMatrix<f64>,
    q_gg: DMatrix<f64>,
    g_gg: DMatrix<f64>,
    d_delta: DMatrix<f64>,
}

fn offsets(sizes: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut out = vec![0];
    for s in sizes {
        out.push(out.last().unwrap() + s);
    }
    out
}

fn weighted(
    u: &[Vec<Basis>],
    v: &[Vec<Basis>],
    uo: &[usize],
    vo: &[usize],
    w: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = u.len();
    let mut out = DMatrix::zeros(*uo.last().unwrap(), *vo.last().unwrap());
    for i in 0..n {
        for j in 0..n {
            let block = gram(&u[i], &v[j]) * w[(i, j)];
            out.view_mut((uo[i], vo[j]), (block.nrows(), block.ncols()))
                .copy_from(&block);
        }
    }
    out
}

fn check_shapes(fractions: &[Vec<f64>], delta: &[Vec<f64>], mats: &[&DMatrix<f64>]) -> Result<()> {
    let n = fractions.len();
    if delta.len() != n || fractions.iter().zip(delta).any(|(l, d)| l.len() != d.len()) {
        return Err(Error::invalid(
            "fractions and slope changes have different shapes",
        ));
    }
    if mats.iter().any(|m| m.nrows() != n || m.ncols() != n) {
        return Err(Error::invalid(format!(
            "covariance matrices must be {n} x {n}"
        )));
    }
    check_fractions(fractions)
}

impl SystemMoments {
    fn new(
        fractions: &[Vec<f64>],
        delta: &[Vec<f64>],
        sigma: &DMatrix<f64>,
        psi: &DMatrix<f64>,
    ) -> Result<Self> {
        check_shapes(fractions, delta, &[sigma, psi])?;
        let s = linalg::spd_inverse(sigma)
            .ok_or_else(|| Error::numerical("short-run covariance is singular"))?;
        let s = linalg::symmetrize(&s);
        let kappa = linalg::symmetrize(&(&s * psi * &s));
        let f: Vec<_> = fractions.iter().map(|l| f_basis(l)).collect();
        let g: Vec<_> = fractions.iter().map(|l| g_basis(l)).collect();
        let f_off = offsets(f.iter().map(Vec::len));
        let g_off = offsets(g.iter().map(Vec::len));
        let q_ff = weighted(&f, &f, &f_off, &f_off, &s);
        let q_ff_inv = linalg::spd_inverse(&q_ff)
            .ok_or_else(|| Error::numerical("Q_FF is singular (degenerate break fractions)"))?;
        let d: Vec<f64> = delta.iter().flatten().copied().collect();
        Ok(Self {
            g_ff: weighted(&f, &f, &f_off, &f_off, &kappa),
            q_gf: weighted(&g, &f, &g_off, &f_off, &s),
            g_gf: weighted(&g, &f, &g_off, &f_off, &kappa),
            q_gg: weighted(&g, &g, &g_off, &g_off, &s),
            g_gg: weighted(&g, &g, &g_off, &g_off, &kappa),
            d_delta: DMatrix::from_diagonal(&DVector::from_vec(d)),
            f,
            g,
            f_off,
            g_off,
            s,
            kappa,
            q_ff_inv,
        })
    }

    fn limit_cov(&self) -> Result<LimitCov> {
        let a = &self.q_gf * &self.q_ff_inv; // Q_GF Q_FF^-1
        let inner0 = &self.g_gg - &self.g_gf * a.transpose() - &a * self.g_gf.transpose()
            + &a * &self.g_ff * a.transpose();
        let inner1 = &self.q_gg - &a * self.q_gf.transpose();
        let d = &self.d_delta;
        let xi0 = linalg::symmetrize(&(d * inner0 * d));
        let xi1 = linalg::symmetrize(&(d * inner1 * d));
        let xi1_inv = invert(&xi1, "Xi_1")?;
        let xi = linalg::symmetrize(&(&xi1_inv * &xi0 * xi1_inv.transpose()));
        Ok(LimitCov {
            xi0,
            xi1,
            xi,
            d_delta: d.clone(),
        })
    }
}

fn invert(m: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Ok(m.clone());
    }
    linalg::spd_inverse(m).ok_or_else(|| Error::numerical(format!("{name} is singular")))
}

/// `Xi_0`, `Xi_1` and `Xi` from fractions, slope changes, `Sigma` and `Psi`.
pub fn assemble_limit_cov(
    fractions: &[Vec<f64>],
    delta: &[Vec<f64>],
    sigma: &DMatrix<f64>,
    psi: &DMatrix<f64>,
) -> Result<LimitCov> {
    SystemMoments::new(fractions, delta, sigma, psi)?.limit_cov()
}

/// Limiting covariance of the equation-by-equation (OLS) estimator.
#[derive(Debug, Clone)]
pub struct EquationLimitCov {
    pub xi_s: DMatrix<f64>,
    /// `P_ij`
    pub p: Vec<Vec<DMatrix<f64>>>,
}

pub fn assemble_eq_limit_cov(
    fractions: &[Vec<f64>],
    delta: &[Vec<f64>],
    psi: &DMatrix<f64>,
) -> Result<EquationLimitCov> {
    check_shapes(fractions, delta, &[psi])?;
    if delta.iter().flatten().any(|&d| d == 0.0) {
        return Err(Error::numerical(
            "zero slope change makes the limit covariance undefined",
        ));
    }
    let n = fractions.len();
    let f: Vec<_> = fractions.iter().map(|l| f_basis(l)).collect();
    let g: Vec<_> = fractions.iter().map(|l| g_basis(l)).collect();
    // p_i = g_i - A_i f_i with A_i = GF_ii FF_ii^-1
    let mut a = Vec::with_capacity(n);
    for i in 0..n {
        let ff_inv = linalg::spd_inverse(&gram(&f[i], &f[i]))
            .ok_or_else(|| Error::numerical(format!("FF_{i}{i} is singular")))?;
        a.push(gram(&g[i], &f[i]) * ff_inv);
    }
    let pp = |i: usize, j: usize| -> DMatrix<f64> {
        gram(&g[i], &g[j]) - &a[i] * gram(&f[i], &g[j]) - gram(&g[i], &f[j]) * a[j].transpose()
            + &a[i] * gram(&f[i], &f[j]) * a[j].transpose()
    };
    let mut pp_inv = Vec::with_capacity(n);
    for i in 0..n {
        pp_inv.push(invert(
            &linalg::symmetrize(&pp(i, i)),
            &format!("int p_{i} p_{i}'"),
        )?);
    }
    let off = offsets(g.iter().map(Vec::len));
    let m = *off.last().unwrap();
    let mut xi_s = DMatrix::zeros(m, m);
    let mut p = vec![Vec::with_capacity(n); n];
    for i in 0..n {
        for j in 0..n {
            let pij = &pp_inv[i] * pp(i, j) * &pp_inv[j];
            for (u, du) in delta[i].iter().enumerate() {
                for (v, dv) in delta[j].iter().enumerate() {
                    xi_s[(off[i] + u, off[j] + v)] = psi[(i, j)] * pij[(u, v)] / (du * dv);
                }
            }
            p[i].push(pij);
        }
    }
    Ok(EquationLimitCov { xi_s, p })
}

/// Evaluators for the additional-break limit process of one equation.
#[derive(Debug, Clone)]
pub struct AddBreakKernels {
    sys: SystemMoments,
    cov: LimitCov,
    xi1_inv: DMatrix<f64>,
    equation: usize,
}

/// Values of the kernels at one candidate fraction `nu`.
#[derive(Debug, Clone)]
pub struct AddBreakValues {
    pub xi0: f64,
    pub xi1: f64,
    pub varsigma0: DVector<f64>,
    pub varsigma1: DVector<f64>,
    pub var_eta: f64,
}

pub fn addbreak_kernels(
    fractions: &[Vec<f64>],
    delta: &[Vec<f64>],
    sigma: &DMatrix<f64>,
    psi: &DMatrix<f64>,
    equation: usize,
) -> Result<AddBreakKernels> {
    if equation >= fractions.len() {
        return Err(Error::invalid(format!("equation {equation} out of range")));
    }
    let sys = SystemMoments::new(fractions, delta, sigma, psi)?;
    let cov = sys.limit_cov()?;
    let xi1_inv = invert(&cov.xi1, "Xi_1")?;
    Ok(AddBreakKernels {
        sys,
        cov,
        xi1_inv,
        equation,
    })
}

impl AddBreakKernels {
    pub fn limit_cov(&self) -> &LimitCov {
        &self.cov
    }

    pub fn equation(&self) -> usize {
        self.equation
    }

    pub fn at(&self, nu: f64) -> Result<AddBreakValues> {
        if !(nu > 0.0 && nu < 1.0) {
            return Err(Error::invalid(format!("nu = {nu} not in (0, 1)")));
        }
        let sys = &self.sys;
        let i = self.equation;
        let b = Basis::Ramp(nu);
        let n = sys.f.len();
        let p = *sys.f_off.last().unwrap();
        let m = *sys.g_off.last().unwrap();
        let mut q_fb = DVector::zeros(p);
        let mut g_fb = DVector::zeros(p);
        let mut q_gb = DVector::zeros(m);
        let mut g_gb = DVector::zeros(m);
        for j in 0..n {
            for (u, &fu) in sys.f[j].iter().enumerate() {
                let v = inner(fu, b);
                q_fb[sys.f_off[j] + u] = sys.s[(j, i)] * v;
                g_fb[sys.f_off[j] + u] = sys.kappa[(j, i)] * v;
            }
            for (u, &gu) in sys.g[j].iter().enumerate() {
                let v = inner(gu, b);
                q_gb[sys.g_off[j] + u] = sys.s[(j, i)] * v;
                g_gb[sys.g_off[j] + u] = sys.kappa[(j, i)] * v;
            }
        }
        let bb = inner(b, b);
        let q_bb = sys.s[(i, i)] * bb;
        let g_bb = sys.kappa[(i, i)] * bb;

        let w = &sys.q_ff_inv * &q_fb; // Q_FF^-1 Q_FB
        let xi0 = g_bb - 2.0 * w.dot(&g_fb) + w.dot(&(&sys.g_ff * &w));
        let xi1 = q_bb - q_fb.dot(&w);
        let a = &sys.q_gf * &sys.q_ff_inv; // Q_GF Q_FF^-1
        let d = &sys.d_delta;
        let varsigma0 = d * (&g_gb - &a * &g_fb - &sys.g_gf * &w + &a * (&sys.g_ff * &w));
        let varsigma1 = d * (&q_gb - &sys.q_gf * &w);
        let h1 = &self.xi1_inv * &varsigma1;
        let var_eta = xi0 - 2.0 * h1.dot(&varsigma0) + h1.dot(&(&self.cov.xi0 * &h1));
        Ok(AddBreakValues {
            xi0,
            xi1,
            varsigma0,
            varsigma1,
            var_eta,
        })
    }

    pub fn xi0(&self, nu: f64) -> Result<f64> {
        Ok(self.at(nu)?.xi0)
    }

    pub fn xi1(&self, nu: f64) -> Result<f64> {
        Ok(self.at(nu)?.xi1)
    }

    /// Variance of the limit process when the break fractions are
    /// estimated.
    pub fn var_eta(&self, nu: f64) -> Result<f64> {
        Ok(self.at(nu)?.var_eta)
    }

    /// Variance of the limit process when the true fractions are used, so
    /// no estimation term enters. Equals `xi1` when `Sigma = Psi`.
    pub fn var_eta_known_fractions(&self, nu: f64) -> Result<f64> {
        self.xi0(nu)
    }
}
