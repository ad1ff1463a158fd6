//! Command-line interface: `evaluate`, `attack`, `testgen`, `saliency` and
//! `query-bound`, with reproducible, machine-readable output.
//!
//! Exit codes: 0 on success, 2 on usage errors, 1 on runtime errors. Floats
//! on stdout use fixed 6-decimal formatting so runs can be compared byte for
//! byte; timing goes to stderr only.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use saferad_core::bounds::{BoundsError, CheckMode, Engine, EvalConfig};
use saferad_core::io::{
    self, append_csv_row, load_dataset, load_model, write_json, write_report, write_saliency,
};
use saferad_core::sensitivity::{GridConfig, SubspaceMode};
use saferad_core::{apps, worst_case_queries, AnytimeReport};

#[derive(Parser)]
#[command(
    name = "saferad",
    version,
    about = "Anytime L0 safe-radius bounds for small classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full anytime pipeline; a report is written after every iteration
    Evaluate(EvaluateArgs),
    /// Generate one adversarial example per input at t = 1
    Attack(AttackArgs),
    /// Generate tests that raise neuron coverage
    Testgen(TestgenArgs),
    /// Write a per-pixel sensitivity map per input
    Saliency(SaliencyArgs),
    /// Print the worst-case query count for exhaustive certification
    QueryBound {
        /// Number of pixels
        n: usize,
        /// Grid tolerance in (0, 1]
        epsilon: f64,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Strict,
    Paper,
}

#[derive(Args)]
struct CommonArgs {
    /// Model file (JSON)
    #[arg(long)]
    model: PathBuf,
    /// Dataset file (CSV, rows `label,p1,...,pn` or `p1,...,pn`)
    #[arg(long)]
    data: PathBuf,
    /// Grid tolerance in (0, 1]
    #[arg(long, default_value_t = 0.25)]
    epsilon: f64,
    /// Subspace cap: exhaustive enumeration errors beyond it; with --seed it
    /// is the number of sampled subspaces
    #[arg(long, default_value_t = 1_000_000)]
    cap: u64,
    /// Sampling seed; switches subspace selection from exhaustive to sampled
    #[arg(long)]
    seed: Option<u64>,
    /// Candidate rows per forward call
    #[arg(long, default_value_t = 4096)]
    chunk: usize,
}

impl CommonArgs {
    fn subspace_mode(&self) -> SubspaceMode {
        match self.seed {
            Some(seed) => SubspaceMode::Sampled { seed },
            None => SubspaceMode::Exhaustive,
        }
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Largest subspace dimension to iterate to
    #[arg(long = "t-max", default_value_t = 2)]
    t_max: usize,
    /// Lower-bound check: strict certifies against every evaluated candidate,
    /// paper checks the top-ranked perturbation only
    #[arg(long, value_enum, default_value_t = Mode::Strict)]
    mode: Mode,
    /// Directory for per-iteration report files
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Adversarial rows are appended here in the dataset CSV format
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TestgenArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Largest subspace dimension tried per uncovered neuron
    #[arg(long = "t-max", default_value_t = 2)]
    t_max: usize,
    /// A neuron counts as covered when its activation exceeds this
    #[arg(long, default_value_t = 0.0)]
    threshold: f64,
    /// Coverage report (JSON); generated tests go to `<out>.tests.csv`
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SaliencyArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Output graymap (PGM); multi-input datasets get `-<index>` suffixes
    #[arg(long = "saliency-out")]
    saliency_out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Io(io::IoError),
    Bounds(BoundsError),
    Sensitivity(saferad_core::sensitivity::SensitivityError),
    Fs { path: PathBuf, detail: String },
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Io(e) => write!(f, "{e}"),
            Self::Bounds(e) => write!(f, "{e}"),
            Self::Sensitivity(e) => write!(f, "{e}"),
            Self::Fs { path, detail } => write!(f, "{}: {detail}", path.display()),
        }
    }
}

impl From<io::IoError> for CliError {
    fn from(e: io::IoError) -> Self {
        Self::Io(e)
    }
}

impl From<BoundsError> for CliError {
    fn from(e: BoundsError) -> Self {
        Self::Bounds(e)
    }
}

impl From<saferad_core::sensitivity::SensitivityError> for CliError {
    fn from(e: saferad_core::sensitivity::SensitivityError) -> Self {
        Self::Sensitivity(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Evaluate(args) => run_evaluate(args),
        Command::Attack(args) => run_attack(args),
        Command::Testgen(args) => run_testgen(args),
        Command::Saliency(args) => run_saliency(args),
        Command::QueryBound { n, epsilon } => {
            let count = worst_case_queries(n, epsilon)?;
            println!("{count}");
            Ok(())
        }
    }
}

fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

fn fmt6_opt(v: Option<f64>) -> String {
    v.map(fmt6).unwrap_or_else(|| "none".into())
}

fn fmt_opt(v: Option<usize>) -> String {
    v.map(|u| u.to_string()).unwrap_or_else(|| "none".into())
}

fn iteration_line(report: &AnytimeReport) -> String {
    let a = &report.aggregate;
    let converged = report.inputs.iter().filter(|i| i.converged).count();
    format!(
        "t={} mean_lower={} mean_upper={} u_c={} u_r={} queries={} converged={}/{}",
        report.iteration,
        fmt6_opt(a.mean_lower),
        fmt6_opt(a.mean_upper),
        fmt6_opt(a.u_c),
        fmt6_opt(a.u_r),
        a.query_count
            .map(|q| q.to_string())
            .unwrap_or_else(|| "none".into()),
        converged,
        report.inputs.len(),
    )
}

fn run_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let model = load_model(&args.common.model)?;
    let dataset = load_dataset(&args.common.data, model.input_len())?;
    let config = EvalConfig {
        epsilon: args.common.epsilon,
        t_max: args.t_max,
        cap: args.common.cap,
        subspace_mode: args.common.subspace_mode(),
        check_mode: match args.mode {
            Mode::Strict => CheckMode::Strict,
            Mode::Paper => CheckMode::Paper,
        },
        chunk_rows: args.common.chunk,
    };
    let engine = Engine::new(&model, config)?;
    fs::create_dir_all(&args.out).map_err(|e| CliError::Fs {
        path: args.out.clone(),
        detail: e.to_string(),
    })?;

    let out_dir = args.out.clone();
    let (reports, state) = engine.evaluate(&dataset, |report| {
        // timing is not reproducible, so it stays out of the report files
        let mut doc = report.clone();
        doc.aggregate.wall_time_ms = None;
        let path = out_dir.join(format!("report-t{:03}.json", report.iteration));
        write_report(&path, &doc).map_err(|e| std::io::Error::other(e.to_string()))?;
        println!("{}", iteration_line(&doc));
        std::io::stdout().flush()
    })?;

    let n = state.pixel_count;
    for ib in &state.per_input {
        if ib.skipped {
            println!(
                "input {}: skipped (predicted={} label={})",
                ib.id,
                ib.prediction.label,
                fmt_opt(ib.dataset_label)
            );
            continue;
        }
        println!(
            "input {}: predicted={} lower={} upper={} converged={} d_m={} u_c={} u_r={}",
            ib.id,
            ib.prediction.label,
            ib.lower,
            fmt_opt(ib.upper),
            ib.converged,
            fmt_opt(ib.d_m(n)),
            fmt6(ib.u_c(n)),
            fmt6(ib.u_r(n)),
        );
    }
    eprintln!(
        "evaluate: {} iterations, {} queries, {:.1} ms",
        reports.len(),
        state.queries,
        started.elapsed().as_secs_f64() * 1e3
    );
    Ok(())
}

fn run_attack(args: AttackArgs) -> Result<(), CliError> {
    let model = load_model(&args.common.model)?;
    let dataset = load_dataset(&args.common.data, model.input_len())?;
    let grid = GridConfig::new(args.common.epsilon)?;
    if let Some(out) = &args.out {
        // rows are appended per input, so start the file fresh
        let _ = fs::remove_file(out);
    }
    let budget = usize::try_from(args.common.cap).unwrap_or(usize::MAX);
    for (i, input) in dataset.inputs.iter().enumerate() {
        let mode = match args.common.seed {
            Some(seed) => SubspaceMode::Sampled {
                seed: saferad_core::rng::seed_for(seed, i, 1),
            },
            None => SubspaceMode::Exhaustive,
        };
        let result = apps::attack(
            &model,
            input.data(),
            &grid,
            budget,
            args.common.cap,
            mode,
            args.common.chunk,
        )?;
        match result {
            Some(found) => {
                println!(
                    "input {}: distance={} positions={:?}",
                    dataset.ids[i],
                    found.distance,
                    found.perturbation.positions(),
                );
                if let Some(out) = &args.out {
                    io::write_adversarial(out, &found.adversarial)?;
                }
            }
            None => println!("input {}: no adversarial found", dataset.ids[i]),
        }
    }
    Ok(())
}

fn run_testgen(args: TestgenArgs) -> Result<(), CliError> {
    let model = load_model(&args.common.model)?;
    let dataset = load_dataset(&args.common.data, model.input_len())?;
    let grid = GridConfig::new(args.common.epsilon)?;
    let config = apps::TestgenConfig {
        threshold: args.threshold,
        budget: args.t_max,
        cap: args.common.cap,
        chunk_rows: args.common.chunk,
    };
    let report = apps::testgen(&model, &dataset, &grid, &config)?;
    println!(
        "coverage: {}/{} neurons fraction={} tests={}",
        report.covered.len(),
        report.total_neurons,
        fmt6(report.fraction),
        report.tests.len(),
    );
    for test in &report.tests {
        println!(
            "neuron layer={} offset={}: seed={} distance={}",
            test.neuron.layer, test.neuron.offset, test.seed_id, test.distance
        );
    }
    if let Some(out) = &args.out {
        write_json(out, &report)?;
        let mut tests_path = out.as_os_str().to_owned();
        tests_path.push(".tests.csv");
        let tests_path = PathBuf::from(tests_path);
        let _ = fs::remove_file(&tests_path);
        for test in &report.tests {
            append_csv_row(&tests_path, &test.input, None)?;
        }
    }
    Ok(())
}

fn run_saliency(args: SaliencyArgs) -> Result<(), CliError> {
    let model = load_model(&args.common.model)?;
    let dataset = load_dataset(&args.common.data, model.input_len())?;
    let grid = GridConfig::new(args.common.epsilon)?;
    let single = dataset.len() == 1;
    for (i, input) in dataset.inputs.iter().enumerate() {
        let map = apps::saliency(&model, input.data(), &grid, args.common.chunk)?;
        let path = if single {
            args.saliency_out.clone()
        } else {
            suffixed(&args.saliency_out, i)
        };
        write_saliency(&path, &map.values)?;
        let max = map.values.data().iter().fold(0.0f64, |a, &b| a.max(b));
        println!(
            "input {}: max_sensitivity={} wrote {}",
            dataset.ids[i],
            fmt6(max),
            path.display()
        );
    }
    Ok(())
}

fn suffixed(path: &std::path::Path, index: usize) -> PathBuf {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("saliency");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("pgm");
    path.with_file_name(format!("{stem}-{index}.{ext}"))
}
