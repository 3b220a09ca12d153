use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use segtrend::Error;

mod commands;
mod input;

#[derive(Parser, Debug)]
#[command(
    name = "segtrend",
    version,
    about = "Break tests for systems of joined segmented trends"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalOpts {
    /// Seed for every random draw
    #[arg(long, global = true, default_value_t = 2016)]
    pub seed: u64,

    /// Bootstrap replications; 0 skips the bootstrap
    #[arg(long, global = true, default_value_t = segtrend::climate::APPLICATION_REPLICATIONS)]
    pub boot_reps: usize,

    /// Inclusive year range, e.g. 1900:1992
    #[arg(long, global = true, value_parser = input::parse_range)]
    pub range: Option<(i64, i64)>,

    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,

    /// More log output (repeat for more)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Text,
    Csv,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodArg {
    Lr,
    GlsWald,
    OlsWald,
    All,
}

impl MethodArg {
    pub fn methods(self) -> Vec<segtrend::TestMethod> {
        use segtrend::TestMethod;
        match self {
            MethodArg::Lr => vec![TestMethod::Lr],
            MethodArg::GlsWald => vec![TestMethod::GlsWald],
            MethodArg::OlsWald => vec![TestMethod::OlsWald],
            MethodArg::All => TestMethod::ALL.to_vec(),
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightingArg {
    Fgls,
    Diagonal,
}

/// Series to analyze: one or more CSV files with a `year` column.
#[derive(Args, Debug, Clone)]
pub struct DataOpts {
    /// Input CSV file (repeatable); files must cover the same years
    #[arg(long = "data", required = true)]
    pub files: Vec<PathBuf>,

    /// Value columns to use, in order (default: all)
    #[arg(long, value_delimiter = ',')]
    pub columns: Vec<String>,

    /// Breaks per equation, e.g. 1,1
    #[arg(long, value_delimiter = ',', required = true)]
    pub breaks: Vec<usize>,

    /// Trimming fraction of the break-date search
    #[arg(long, default_value_t = 0.05)]
    pub search_trim: f64,
}

/// Forcing and temperature files for the bivariate climate analyses.
#[derive(Args, Debug, Clone)]
pub struct PairOpts {
    /// CSV with one or more forcing columns
    #[arg(long)]
    pub forcing: PathBuf,

    /// CSV with one or more temperature columns
    #[arg(long)]
    pub temperature: PathBuf,

    /// CSV with oscillation modes; temperatures are filtered when given
    #[arg(long)]
    pub modes: Option<PathBuf>,

    /// Largest lag count for the filter regressions
    #[arg(long, default_value_t = 2)]
    pub kmax: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate break dates and trend coefficients
    Estimate {
        #[command(flatten)]
        data: DataOpts,

        #[arg(long, value_enum, default_value_t = WeightingArg::Fgls)]
        weighting: WeightingArg,
    },
    /// Test a restriction on the break dates
    TestCommon {
        #[command(flatten)]
        data: DataOpts,

        /// `common`, `fixed:<year>,<year>,...` or `offset:<fraction>`
        #[arg(long, default_value = "common")]
        restriction: String,

        #[arg(long, value_enum, default_value_t = MethodArg::All)]
        method: MethodArg,
    },
    /// Test for one additional break
    TestExtra {
        #[command(flatten)]
        data: DataOpts,

        /// Equation (column name or 0-based index); default takes the sup over equations
        #[arg(long)]
        equation: Option<String>,

        /// Minimum distance of the new break from the ends and existing breaks
        #[arg(long, default_value_t = segtrend::extra_break::DEFAULT_TRIM)]
        trim: f64,
    },
    /// Remove oscillation modes from temperature series
    Filter {
        /// CSV with temperature columns
        #[arg(long)]
        temperature: PathBuf,

        /// Temperature columns to filter (default: all)
        #[arg(long, value_delimiter = ',')]
        columns: Vec<String>,

        /// CSV with oscillation modes
        #[arg(long)]
        modes: PathBuf,

        #[arg(long, default_value_t = 2)]
        kmax: usize,

        /// Also write the filtered series to this CSV file
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Rejection-rate tables of the common-break tests
    McTable {
        #[arg(long, value_enum, default_value_t = MethodArg::All)]
        method: MethodArg,

        /// Slope change of the design (repeatable)
        #[arg(long, default_values_t = [0.5])]
        delta: Vec<f64>,

        #[arg(long, default_value_t = 1000)]
        reps: usize,

        #[arg(long, default_value_t = 0.05)]
        level: f64,

        /// Skip the warp-speed bootstrap column
        #[arg(long)]
        no_bootstrap: bool,
    },
    /// Common-break tests for every forcing/temperature pair
    ClimateCommon {
        #[command(flatten)]
        pairs: PairOpts,

        /// Breaks per equation
        #[arg(long, default_value_t = 1)]
        breaks: usize,

        #[arg(long, value_enum, default_value_t = MethodArg::All)]
        method: MethodArg,
    },
    /// Test for a temperature break given the forcing break, every pair
    ClimateHiatus {
        #[command(flatten)]
        pairs: PairOpts,

        #[arg(long, default_value_t = segtrend::extra_break::DEFAULT_TRIM)]
        trim: f64,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parse(_) | Error::Io(_) => 2,
        Error::NumericalFailure(_) => 3,
        Error::InvalidArgument(_) => 4,
    }
}

fn run(cli: Cli) -> segtrend::Result<String> {
    let g = &cli.global;
    match cli.command {
        Command::Estimate { data, weighting } => commands::estimate(g, &data, weighting),
        Command::TestCommon {
            data,
            restriction,
            method,
        } => commands::test_common(g, &data, &restriction, method),
        Command::TestExtra {
            data,
            equation,
            trim,
        } => commands::test_extra(g, &data, equation.as_deref(), trim),
        Command::Filter {
            temperature,
            columns,
            modes,
            kmax,
            output,
        } => commands::filter(g, &temperature, &columns, &modes, kmax, output.as_deref()),
        Command::McTable {
            method,
            delta,
            reps,
            level,
            no_bootstrap,
        } => commands::mc_table(g, method, &delta, reps, level, !no_bootstrap),
        Command::ClimateCommon {
            pairs,
            breaks,
            method,
        } => commands::climate_common(g, &pairs, breaks, method),
        Command::ClimateHiatus { pairs, trim } => commands::climate_hiatus(g, &pairs, trim),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(4)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.global.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();

    match run(cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
