//! Estimation and testing of structural breaks in systems of joined
//! segmented linear trends.
//!
//! The main entry points are [`system_break_search`] for dating breaks,
//! [`common_break_tests`] for testing linear restrictions on the break
//! fractions, and [`sup_lr_extra_break`] for checking whether one equation needs an
//! additional break. Bootstrap p-values and the Monte Carlo harness build on
//! those.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bootstrap;
pub mod break_search;
pub mod break_tests;
pub mod climate;
mod error;
pub mod extra_break;
pub mod limit_dist;
pub mod linalg;
pub mod lrv;
pub mod monte_carlo;
pub mod trend_model;

pub use bootstrap::{
    bootstrap_pvalue, fit_var1, kilian_correct, make_null_sample, warp_speed_rates,
    BootstrapConfig, BootstrapOutcome, BootstrapTest, CommonBreakBootstrap, ExtraBreakBootstrap,
    VarModel,
};
pub use break_search::{
    fgls_fit, ols_break_search, ols_fit_single, system_break_search, OlsFit, RestrictionSet,
    SearchConfig, SearchResult, SystemSearcher, Weighting,
};
pub use break_tests::{
    chi_square_sf, common_break_tests, gls_wald_test, lr_test, ols_wald_test, CommonBreakTester,
    TestMethod, TestReport,
};
pub use climate::{
    analyze_common_breaks, analyze_hiatus, bic_select_filter, filter_series, load_series,
    AnnualSeries, CommonBreakConfig, CommonBreakRow, FilterSpec, HiatusConfig, HiatusRow, Pairing,
    SeriesTable,
};
pub use error::{Error, Result};
pub use extra_break::{
    admissible_grid, lr_extra_break, sup_lr_extra_break, AddBreakHypothesis, AddBreakReport,
};
pub use lrv::{long_run_variance, HacEstimate};
pub use monte_carlo::{
    design_grid, generate_dgp, run_table, DgpSpec, Hypothesis, McConfig, TableResult, TableRow,
};
pub use trend_model::{BreakVector, EquationParams, MultiSeries, SystemFit};
