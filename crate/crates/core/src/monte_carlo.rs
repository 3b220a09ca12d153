//! Size and power experiments for the common-break tests on a bivariate
//! system with one slope break per equation and AR(1) errors whose
//! long-run variance is one.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::bootstrap::{stream_rng, warp_speed_rate, BootstrapConfig, NullModel};
use crate::break_search::{RestrictionSet, SearchConfig, Weighting};
use crate::break_tests::{CommonBreakTester, TestMethod};
use crate::error::{Error, Result};
use crate::trend_model::{evaluate_trend, EquationParams, MultiSeries};

const TAG_DGP: u64 = 0x4d43_4447;
const TAG_BOOT: u64 = 0x4d43_4254;
pub const DGP_BURN_IN: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DgpSpec {
    pub t: usize,
    pub delta: [f64; 2],
    pub alpha: f64,
    pub rho: f64,
    pub break_dates: [usize; 2],
    pub mu: [f64; 2],
    pub beta: [f64; 2],
}

impl DgpSpec {
    /// `T = 100`, both breaks at 50, zero intercepts and slopes.
    pub fn new(alpha: f64, rho: f64, delta: f64) -> Self {
        Self {
            t: 100,
            delta: [delta, delta],
            alpha,
            rho,
            break_dates: [50, 50],
            mu: [0.0; 2],
            beta: [0.0; 2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.abs() < 1.0) || !(self.rho.abs() < 1.0) {
            return Err(Error::invalid(format!(
                "need |alpha| < 1 and |rho| < 1, got {} and {}",
                self.alpha, self.rho
            )));
        }
        if self.t < 10 {
            return Err(Error::invalid("T must be at least 10"));
        }
        Ok(())
    }

    fn trend(&self) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(2, self.t);
        for i in 0..2 {
            let p = EquationParams::new(self.mu[i], self.beta[i], vec![self.delta[i]]);
            let tr = evaluate_trend(&p, &[self.break_dates[i]], self.t)?;
            out.row_mut(i).iter_mut().zip(tr).for_each(|(o, v)| *o = v);
        }
        Ok(out)
    }
}

/// The nine `(alpha, rho)` designs of one panel.
pub fn design_grid(delta: f64) -> Vec<DgpSpec> {
    let mut out = Vec::with_capacity(9);
    for alpha in [0.0, 0.3, 0.7] {
        for rho in [-0.5, 0.0, 0.5] {
            out.push(DgpSpec::new(alpha, rho, delta));
        }
    }
    out
}

/// `u_t = L e_t`, `e_t = alpha e_{t-1} + eps_t`, `eps_t ~ N(0, (1-alpha)^2 I)`.
pub fn dgp_errors(spec: &DgpSpec, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let sd = 1.0 - spec.alpha;
    let l21 = spec.rho;
    let l22 = (1.0 - spec.rho * spec.rho).sqrt();
    let mut e = [0.0f64; 2];
    let mut out = DMatrix::zeros(2, spec.t);
    for s in 0..DGP_BURN_IN + spec.t {
        for v in e.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v = spec.alpha * *v + sd * z;
        }
        if s >= DGP_BURN_IN {
            let j = s - DGP_BURN_IN;
            out[(0, j)] = e[0];
            out[(1, j)] = l21 * e[0] + l22 * e[1];
        }
    }
    Ok(out)
}

pub fn generate_dgp(spec: &DgpSpec, rng: &mut ChaCha8Rng) -> Result<MultiSeries> {
    let values = spec.trend()? + dgp_errors(spec, rng)?;
    MultiSeries::new(values, vec!["y1".into(), "y2".into()], 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Hypothesis {
    /// `R = I`, `r = (0.5, 0.5)'`
    Fixed,
    /// `R = I`, `r = (0.525, 0.475)'`
    FixedShifted,
    /// `R = [1, -1]`, `r = 0`
    Common,
    /// `R = [1, -1]`, `r = 0.05`
    Offset,
}

impl Hypothesis {
    pub const ALL: [Hypothesis; 4] = [
        Hypothesis::Fixed,
        Hypothesis::FixedShifted,
        Hypothesis::Common,
        Hypothesis::Offset,
    ];

    /// Column number in the tables.
    pub fn number(self) -> usize {
        self as usize + 1
    }

    /// True for the hypotheses that hold in the simulated designs.
    pub fn is_null(self) -> bool {
        matches!(self, Hypothesis::Fixed | Hypothesis::Common)
    }

    pub fn restriction(self) -> RestrictionSet {
        let r = match self {
            Hypothesis::Fixed => RestrictionSet::fixed_dates(2, &[(0, 0.5), (1, 0.5)]),
            Hypothesis::FixedShifted => RestrictionSet::fixed_dates(2, &[(0, 0.525), (1, 0.475)]),
            Hypothesis::Common => RestrictionSet::common(2, &[vec![0, 1]]),
            Hypothesis::Offset => RestrictionSet::offsets(2, &[(0, 1, 0.05)]),
        };
        r.expect("static restriction is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McConfig {
    pub reps: usize,
    pub seed: u64,
    pub level: f64,
    /// Add the warp-speed bootstrap column.
    pub bootstrap: bool,
    pub boot: BootstrapConfig,
    pub search: SearchConfig,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            reps: 1000,
            seed: 0,
            level: 0.05,
            bootstrap: true,
            boot: BootstrapConfig {
                warp_speed: true,
                ..Default::default()
            },
            search: SearchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub method: TestMethod,
    pub delta: f64,
    pub alpha: f64,
    pub rho: f64,
    pub hypothesis: Hypothesis,
    pub asymptotic: f64,
    pub bootstrap: Option<f64>,
    /// Replicates where the statistic could not be computed.
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableResult {
    pub reps: usize,
    pub rows: Vec<TableRow>,
}

/// Per (method, hypothesis) outcome of one replicate.
#[derive(Debug, Clone, Copy, Default)]
struct Draw {
    stat: Option<f64>,
    asym_reject: bool,
    boot: Option<f64>,
}

fn null_weighting(method: TestMethod) -> Weighting {
    match method {
        TestMethod::Lr | TestMethod::GlsWald => Weighting::Fgls,
        TestMethod::OlsWald => Weighting::Diagonal,
    }
}

fn replicate(spec: &DgpSpec, methods: &[TestMethod], cfg: &McConfig, index: u64) -> Vec<Draw> {
    let nh = Hypothesis::ALL.len();
    let mut out = vec![Draw::default(); methods.len() * nh];
    let mut rng = stream_rng(cfg.seed, TAG_DGP, index);
    let Ok(y) = generate_dgp(spec, &mut rng) else {
        return out;
    };
    let Ok(tester) = CommonBreakTester::new(&y, &[1, 1], &cfg.search) else {
        return out;
    };
    for (mi, &method) in methods.iter().enumerate() {
        for (hi, h) in Hypothesis::ALL.iter().enumerate() {
            if let Ok(rep) = tester.run(method, &h.restriction()) {
                out[mi * nh + hi].stat = Some(rep.statistic);
                out[mi * nh + hi].asym_reject = rep.p_asymptotic < cfg.level;
            }
        }
    }
    if !cfg.bootstrap {
        return out;
    }
    let mut rng = stream_rng(cfg.seed, TAG_BOOT, index);
    for (hi, h) in Hypothesis::ALL.iter().enumerate() {
        let restriction = h.restriction();
        for weighting in [Weighting::Fgls, Weighting::Diagonal] {
            let users: Vec<usize> = (0..methods.len())
                .filter(|&mi| null_weighting(methods[mi]) == weighting)
                .collect();
            if users.is_empty() {
                continue;
            }
            let pseudo = tester
                .restricted(&restriction, weighting)
                .and_then(|r| NullModel::new(r.fit, &cfg.boot, &mut rng))
                .and_then(|null| null.sample(&y, cfg.boot.burn_in, &mut rng))
                .and_then(|ys| CommonBreakTester::new(&ys, &[1, 1], &cfg.search));
            let Ok(boot_tester) = pseudo else {
                continue;
            };
            for mi in users {
                out[mi * nh + hi].boot = boot_tester
                    .run(methods[mi], &restriction)
                    .ok()
                    .map(|r| r.statistic);
            }
        }
    }
    out
}

/// Rejection frequencies at `cfg.level` for every design, method and
/// hypothesis, replicates run in parallel.
pub fn run_table(
    methods: &[TestMethod],
    designs: &[DgpSpec],
    cfg: &McConfig,
) -> Result<TableResult> {
    if cfg.reps == 0 {
        return Err(Error::invalid("at least one replicate is needed"));
    }
    for d in designs {
        d.validate()?;
    }
    let nh = Hypothesis::ALL.len();
    let mut rows = Vec::new();
    for spec in designs {
        let draws: Vec<Vec<Draw>> = (0..cfg.reps as u64)
            .into_par_iter()
            .map(|r| replicate(spec, methods, cfg, r))
            .collect();
        for (mi, &method) in methods.iter().enumerate() {
            for (hi, &h) in Hypothesis::ALL.iter().enumerate() {
                let cell: Vec<&Draw> = draws.iter().map(|d| &d[mi * nh + hi]).collect();
                let obs: Vec<f64> = cell.iter().filter_map(|d| d.stat).collect();
                let failures = cfg.reps - obs.len();
                let asymptotic = if obs.is_empty() {
                    0.0
                } else {
                    cell.iter().filter(|d| d.asym_reject).count() as f64 / obs.len() as f64
                };
                let bootstrap = cfg.bootstrap.then(|| {
                    let pool: Vec<f64> = cell.iter().filter_map(|d| d.boot).collect();
                    warp_speed_rate(&obs, &pool, cfg.level)
                });
                rows.push(TableRow {
                    method,
                    delta: spec.delta[0],
                    alpha: spec.alpha,
                    rho: spec.rho,
                    hypothesis: h,
                    asymptotic,
                    bootstrap,
                    failures,
                });
            }
        }
    }
    Ok(TableResult {
        reps: cfg.reps,
        rows,
    })
}

impl TableResult {
    pub fn get(
        &self,
        method: TestMethod,
        alpha: f64,
        rho: f64,
        delta: f64,
        h: Hypothesis,
    ) -> Option<&TableRow> {
        self.rows.iter().find(|r| {
            r.method == method
                && r.hypothesis == h
                && r.alpha == alpha
                && r.rho == rho
                && r.delta == delta
        })
    }

    /// One line per row with a header.
    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("method,delta,alpha,rho,hypothesis,asymptotic,bootstrap,failures\n");
        for r in &self.rows {
            let boot = r.bootstrap.map(|b| format!("{b:.4}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.4},{},{}",
                r.method.name(),
                r.delta,
                r.alpha,
                r.rho,
                r.hypothesis.number(),
                r.asymptotic,
                boot,
                r.failures
            );
        }
        s
    }

    /// Fixed-width panels, one per method and break size, with asymptotic
    /// and bootstrap columns for the four hypotheses.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let mut panels: Vec<(TestMethod, f64)> = Vec::new();
        for r in &self.rows {
            if !panels.iter().any(|&(m, d)| m == r.method && d == r.delta) {
                panels.push((r.method, r.delta));
            }
        }
        for (method, delta) in panels {
            let _ = writeln!(
                s,
                "{} test, delta = {delta:.1}, {} replications",
                method.name(),
                self.reps
            );
            let _ = writeln!(
                s,
                "{:>5} {:>5} | {:>5} {:>5} {:>5} {:>5} | {:>5} {:>5} {:>5} {:>5}",
                "alpha", "rho", "(1)", "(2)", "(3)", "(4)", "(1)", "(2)", "(3)", "(4)"
            );
            let mut designs: Vec<(f64, f64)> = Vec::new();
            for r in self
                .rows
                .iter()
                .filter(|r| r.method == method && r.delta == delta)
            {
                if !designs.contains(&(r.alpha, r.rho)) {
                    designs.push((r.alpha, r.rho));
                }
            }
            for (alpha, rho) in designs {
                let _ = write!(s, "{alpha:>5.1} {rho:>5.1} |");
                let cells: Vec<&TableRow> = Hypothesis::ALL
                    .iter()
                    .filter_map(|&h| self.get(method, alpha, rho, delta, h))
                    .collect();
                for c in &cells {
                    let _ = write!(s, " {:>5.2}", c.asymptotic);
                }
                let _ = write!(s, " |");
                for c in &cells {
                    match c.bootstrap {
                        Some(b) => {
                            let _ = write!(s, " {b:>5.2}");
                        }
                        None => {
                            let _ = write!(s, " {:>5}", "-");
                        }
                    }
                }
                s.push('\n');
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn white_errors_have_unit_variance() {
        let mut spec = DgpSpec::new(0.0, 0.0, 0.5);
        spec.t = 10_000;
        let u = dgp_errors(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for i in 0..2 {
            let v = u.row(i).variance();
            assert!((v - 1.0).abs() < 0.1, "{v}");
        }
    }

    #[test]
    fn cross_correlation_matches_rho() {
        let mut spec = DgpSpec::new(0.0, 0.5, 0.5);
        spec.t = 10_000;
        let u = dgp_errors(&spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let a = u.row(0);
        let b = u.row(1);
        let (ma, mb) = (a.mean(), b.mean());
        let cov: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - ma) * (y - mb))
            .sum::<f64>()
            / 10_000.0;
        let corr = cov / (a.variance() * b.variance()).sqrt();
        assert!((corr - 0.5).abs() < 0.05, "{corr}");
    }

    #[test]
    fn ar_errors_have_unit_long_run_variance() {
        // partial sums of e over blocks: Var(S_L / sqrt(L)) -> 1
        let mut spec = DgpSpec::new(0.3, 0.0, 0.5);
        spec.t = 200_000;
        let u = dgp_errors(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let block = 200;
        let row: Vec<f64> = u.row(0).iter().copied().collect();
        let sums: Vec<f64> = row
            .chunks(block)
            .map(|c| c.iter().sum::<f64>() / (block as f64).sqrt())
            .collect();
        let v = sums.iter().map(|s| s * s).sum::<f64>() / sums.len() as f64;
        assert!((v - 1.0).abs() < 0.1, "{v}");
    }

    #[test]
    fn restrictions_match_the_table_hypotheses() {
        assert_eq!(Hypothesis::Fixed.restriction().r_vector(), vec![0.5, 0.5]);
        let r = Hypothesis::Offset.restriction();
        assert_eq!(r.r_vector(), vec![0.05]);
        assert_eq!(r.r_matrix(), DMatrix::from_row_slice(1, 2, &[1.0, -1.0]));
        let r = Hypothesis::FixedShifted.restriction();
        assert_eq!(r.r_vector(), vec![0.525, 0.475]);
        assert!(Hypothesis::Common.is_null() && !Hypothesis::Offset.is_null());
    }

    #[test]
    fn statistics_ignore_intercepts_and_slopes() {
        let base = DgpSpec::new(0.3, 0.5, 0.5);
        let shifted = DgpSpec {
            mu: [5.0, -3.0],
            beta: [0.2, -0.1],
            ..base
        };
        for seed in 0..3 {
            let a = generate_dgp(&base, &mut stream_rng(seed, 1, 0)).unwrap();
            let b = generate_dgp(&shifted, &mut stream_rng(seed, 1, 0)).unwrap();
            let cfg = SearchConfig::default();
            let ta = CommonBreakTester::new(&a, &[1, 1], &cfg).unwrap();
            let tb = CommonBreakTester::new(&b, &[1, 1], &cfg).unwrap();
            for m in TestMethod::ALL {
                for h in Hypothesis::ALL {
                    let x = ta.run(m, &h.restriction()).unwrap().statistic;
                    let y = tb.run(m, &h.restriction()).unwrap().statistic;
                    assert!(
                        (x - y).abs() <= 1e-8 * x.abs().max(1.0),
                        "{m:?} {h:?} {x} {y}"
                    );
                }
            }
        }
    }

    #[test]
    fn small_table_is_deterministic_and_renders() {
        let cfg = McConfig {
            reps: 6,
            seed: 4,
            boot: BootstrapConfig {
                kilian_reps: 20,
                warp_speed: true,
                ..Default::default()
            },
            ..Default::default()
        };
        let designs = [DgpSpec::new(0.0, 0.0, 1.0)];
        let a = run_table(&TestMethod::ALL, &designs, &cfg).unwrap();
        let b = run_table(&TestMethod::ALL, &designs, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 12);
        assert!(a.rows.iter().all(|r| (0.0..=1.0).contains(&r.asymptotic)));
        let text = a.render_text();
        assert_eq!(text.lines().filter(|l| l.contains('|')).count(), 6);
        assert_eq!(a.to_csv().lines().count(), 13);
    }
}
