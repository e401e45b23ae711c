//! Command-line front end: fit weighted regressions on CSV data, export
//! selection weights, and run Monte Carlo scenarios.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use cenreg::data::{load_csv, ColumnSchema, Dataset, WeightScheme, WeightVector};
use cenreg::glm::{fit_glm, FitOptions, GlmFit, LinkKind};
use cenreg::sim::{metrics_csv, metrics_table, run_monte_carlo, ScenarioConfig};
use cenreg::weights::{build_weights, stabilize, WeightSpec};
use cenreg::Error;

#[derive(Parser)]
#[command(
    name = "cenreg",
    version,
    about = "Regression with a right-censored covariate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a weighted regression of the outcome on (intercept, v, z).
    Fit(FitArgs),
    /// Export per-record selection probabilities and weights as CSV.
    Weights(WeightsArgs),
    /// Run a Monte Carlo scenario described by a JSON config file.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Cc,
    Ipcw,
    IpcwKm,
    IpcwCox,
}

impl MethodArg {
    fn scheme(self) -> WeightScheme {
        match self {
            MethodArg::Cc => WeightScheme::Cc,
            MethodArg::Ipcw => WeightScheme::IpcwLogistic,
            MethodArg::IpcwKm => WeightScheme::IpcwKm,
            MethodArg::IpcwCox => WeightScheme::IpcwCox,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LinkArg {
    Identity,
    Log,
    Logit,
}

impl LinkArg {
    fn kind(self) -> LinkKind {
        match self {
            LinkArg::Identity => LinkKind::Identity,
            LinkArg::Log => LinkKind::Log,
            LinkArg::Logit => LinkKind::Logit,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Table,
    Json,
    Csv,
}

/// Column roles come either from a JSON schema file or from the individual
/// column flags; the flags override the file.
#[derive(Args)]
struct SchemaArgs {
    /// JSON column-role mapping: {"v": ..., "delta": ..., "y": ..., "z": [...], "h_extra": [...]}.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Column holding the possibly censored value.
    #[arg(long)]
    v_col: Option<String>,
    /// Column holding the observation indicator (1 observed, 0 censored).
    #[arg(long)]
    delta_col: Option<String>,
    /// Outcome column.
    #[arg(long)]
    y_col: Option<String>,
    /// Comma-separated model covariate columns.
    #[arg(long, value_delimiter = ',')]
    z_cols: Vec<String>,
    /// Comma-separated auxiliary covariate columns (selection models only).
    #[arg(long, value_delimiter = ',')]
    h_cols: Vec<String>,
}

impl SchemaArgs {
    fn resolve(&self) -> Result<ColumnSchema, Error> {
        let mut schema = match &self.schema {
            Some(path) => ColumnSchema::from_json_file(path)?,
            None => {
                let (Some(v), Some(delta), Some(y)) = (&self.v_col, &self.delta_col, &self.y_col)
                else {
                    return Err(Error::Schema(
                        "provide --schema or all of --v-col, --delta-col, --y-col".into(),
                    ));
                };
                ColumnSchema {
                    v: v.clone(),
                    delta: delta.clone(),
                    y: y.clone(),
                    z: vec![],
                    h_extra: vec![],
                }
            }
        };
        if let Some(v) = &self.v_col {
            schema.v = v.clone();
        }
        if let Some(delta) = &self.delta_col {
            schema.delta = delta.clone();
        }
        if let Some(y) = &self.y_col {
            schema.y = y.clone();
        }
        if !self.z_cols.is_empty() {
            schema.z = self.z_cols.clone();
        }
        if !self.h_cols.is_empty() {
            schema.h_extra = self.h_cols.clone();
        }
        Ok(schema)
    }
}

#[derive(Args)]
struct FitArgs {
    /// CSV file with a header row.
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    schema: SchemaArgs,
    #[arg(long, value_enum, default_value = "cc")]
    method: MethodArg,
    #[arg(long, value_enum, default_value = "identity")]
    link: LinkArg,
    /// Multiply weights by the marginal probability of remaining uncensored.
    #[arg(long)]
    stabilize: bool,
    /// Minimum selection probability.
    #[arg(long, default_value_t = 1e-6)]
    floor: f64,
    #[arg(long, value_enum, default_value = "table")]
    format: OutputFormat,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct WeightsArgs {
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    schema: SchemaArgs,
    #[arg(long, value_enum, default_value = "cc")]
    method: MethodArg,
    #[arg(long, default_value_t = 1e-6)]
    floor: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario JSON config.
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the replication count.
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long, value_enum, default_value = "table")]
    format: OutputFormat,
    /// Also write the metrics CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

// Exit codes: 2 parse, 3 schema/config, 4 estimation, 5 convergence, 1 other.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::ParseRow { .. } | Error::Csv(_) | Error::EmptyDataset => 2,
        Error::Schema(_) | Error::Config(_) | Error::Json(_) => 3,
        Error::NonConvergence { .. } | Error::Divergence { .. } => 5,
        Error::Io(_) => 1,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Weights(args) => cmd_weights(args),
        Command::Simulate(args) => cmd_simulate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn emit(text: &str, out: &Option<PathBuf>) -> Result<(), Error> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(Error::from),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct CoefficientReport {
    name: String,
    estimate: f64,
    se: f64,
    t_value: f64,
    p_value: f64,
}

#[derive(Serialize)]
struct FitReport {
    method: String,
    link: String,
    n: usize,
    n_complete: usize,
    stabilized: bool,
    n_floored: usize,
    dispersion: f64,
    iterations: usize,
    converged: bool,
    coefficients: Vec<CoefficientReport>,
}

fn two_sided_p(t: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).unwrap();
    2.0 * (1.0 - normal.cdf(t.abs()))
}

fn coefficient_names(schema: &ColumnSchema) -> Vec<String> {
    let mut names = vec!["Intercept".to_string(), schema.v.clone()];
    names.extend(schema.z.iter().cloned());
    names
}

fn build_report(
    fit: &GlmFit,
    d: &Dataset,
    wv: &WeightVector,
    names: Vec<String>,
    link: LinkArg,
) -> FitReport {
    let coefficients = names
        .into_iter()
        .enumerate()
        .map(|(j, name)| {
            let estimate = fit.beta[j];
            let se = fit.se(j);
            let t_value = if se > 0.0 {
                estimate / se
            } else {
                f64::INFINITY * estimate.signum()
            };
            CoefficientReport {
                name,
                estimate,
                se,
                t_value,
                p_value: two_sided_p(t_value),
            }
        })
        .collect();
    FitReport {
        method: wv.scheme.to_string(),
        link: link.kind().to_string(),
        n: d.n(),
        n_complete: d.n_complete(),
        stabilized: wv.stabilized,
        n_floored: wv.n_floored,
        dispersion: fit.dispersion,
        iterations: fit.iterations,
        converged: fit.converged,
        coefficients,
    }
}

fn format_p(p: f64) -> String {
    if p < 0.0001 {
        "<0.0001".to_string()
    } else {
        format!("{:.4}", p)
    }
}

fn render_table(report: &FitReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "method: {}   link: {}\n",
        report.method, report.link
    ));
    out.push_str(&format!(
        "n = {}   complete cases = {} ({:.1}%)   floored probabilities = {}{}\n\n",
        report.n,
        report.n_complete,
        100.0 * report.n_complete as f64 / report.n as f64,
        report.n_floored,
        if report.stabilized {
            "   stabilized weights"
        } else {
            ""
        }
    ));
    out.push_str(&format!(
        "{:<12} {:>10} {:>10} {:>9} {:>9}\n",
        "Variable", "Estimate", "SE", "t-value", "p-value"
    ));
    for c in &report.coefficients {
        out.push_str(&format!(
            "{:<12} {:>10.4} {:>10.4} {:>9.4} {:>9}\n",
            c.name,
            c.estimate,
            c.se,
            c.t_value,
            format_p(c.p_value)
        ));
    }
    out
}

fn render_csv(report: &FitReport) -> String {
    let mut out = String::from("variable,estimate,se,t_value,p_value\n");
    for c in &report.coefficients {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            c.name, c.estimate, c.se, c.t_value, c.p_value
        ));
    }
    out
}

fn cmd_fit(args: FitArgs) -> Result<(), Error> {
    let schema = args.schema.resolve()?;
    let d = load_csv(&args.input, &schema)?;
    let spec = WeightSpec {
        stabilize: args.stabilize,
        floor: args.floor,
        ..WeightSpec::new(args.method.scheme())
    };
    let wv = build_weights(&d, &spec)?;
    let fit = fit_glm(&d, &wv, args.link.kind(), &FitOptions::default())?;
    let report = build_report(&fit, &d, &wv, coefficient_names(&schema), args.link);
    let text = match args.format {
        OutputFormat::Table => render_table(&report),
        OutputFormat::Json => serde_json::to_string_pretty(&report)? + "\n",
        OutputFormat::Csv => render_csv(&report),
    };
    emit(&text, &args.out)
}

fn cmd_weights(args: WeightsArgs) -> Result<(), Error> {
    let schema = args.schema.resolve()?;
    let d = load_csv(&args.input, &schema)?;
    let spec = WeightSpec {
        floor: args.floor,
        ..WeightSpec::new(args.method.scheme())
    };
    let wv = build_weights(&d, &spec)?;
    let sw = stabilize(&wv, &d)?;
    let mut out = String::from("row_id,v,delta,pi,w,stabilized_w,floored_flag\n");
    for (i, r) in d.records().iter().enumerate() {
        let floored = r.delta && wv.pi[i] <= args.floor;
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{}\n",
            i + 1,
            r.v,
            if r.delta { 1 } else { 0 },
            wv.pi[i],
            wv.w[i],
            sw.w[i],
            if floored { 1 } else { 0 }
        ));
    }
    emit(&out, &args.out)
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), Error> {
    let mut cfg = ScenarioConfig::from_json_file(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(reps) = args.reps {
        cfg.n_reps = reps;
    }
    cfg.validate()?;
    let result = run_monte_carlo(&cfg)?;
    let csv = metrics_csv(&result.rows);
    match args.format {
        OutputFormat::Table => print!("{}", metrics_table(&cfg, &result)),
        OutputFormat::Csv => print!("{csv}"),
        OutputFormat::Json => println!("{}", serde_json::to_string_pretty(&result)?),
    }
    if let Some(path) = &args.out {
        std::fs::write(path, &csv)?;
    }
    Ok(())
}
