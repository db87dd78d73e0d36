//! `grm`: simulate graded-response data, fit it with either estimator, run
//! whole simulation studies and emit plot-ready tables.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use grm_core::io::{read_items_file, read_responses_file, write_items_file, write_json_file, write_responses_file};
use grm_core::quadrature::MAX_QUADRATURE_POINTS;
use grm_core::{
    aggregate, emit_likelihood_figure, fit, gauss_hermite_normal, run_study, simulate, starting_values, FitConfig,
    GrmError, Method, SimulationSpec, StudyConfig,
};

#[derive(Parser, Debug)]
#[command(name = "grm", version, about = "Graded response model estimation and simulation studies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample true item parameters and one complete response dataset.
    Simulate(SimulateArgs),
    /// Fit one dataset with one estimator.
    Fit(FitArgs),
    /// Run a full simulation study described by a JSON config.
    Study(StudyArgs),
    /// Re-aggregate the summary tables of an existing study directory.
    Metrics(MetricsArgs),
    /// Likelihood, Laplace and quadrature curves for one response pattern.
    Figure1(FigureArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long = "items")]
    n_items: usize,
    #[arg(long = "subjects")]
    n_subjects: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out_data: PathBuf,
    #[arg(long)]
    out_params: PathBuf,
    /// Whole-dataset redraws allowed before giving up.
    #[arg(long, default_value_t = grm_core::simulation::DEFAULT_MAX_RESIMULATIONS)]
    max_resimulations: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Laplace,
    #[value(name = "ghq-em", alias = "ghq_em")]
    GhqEm,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Laplace => Method::Laplace,
            MethodArg::GhqEm => Method::GhqEm,
        }
    }
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long)]
    data: PathBuf,
    /// Starting values; computed from the data when omitted.
    #[arg(long)]
    params_init: Option<PathBuf>,
    #[arg(long, default_value_t = grm_core::quadrature::DEFAULT_QUADRATURE_POINTS)]
    quadpts: usize,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct StudyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    quadpts: Option<usize>,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Keep fits that stopped without converging.
    #[arg(long)]
    include_nonconverged: bool,
}

#[derive(Args, Debug)]
struct FigureArgs {
    #[arg(long)]
    params: PathBuf,
    /// Comma-separated scores, one per item.
    #[arg(long, value_delimiter = ',', default_value = "1,1,1,1,1")]
    pattern: Vec<u8>,
    #[arg(long, default_value_t = grm_core::quadrature::DEFAULT_QUADRATURE_POINTS)]
    quadpts: usize,
    /// Curve table; quadrature masses go next to it with a `_ghq` suffix.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = -4.0, allow_hyphen_values = true)]
    grid_min: f64,
    #[arg(long, default_value_t = 4.0, allow_hyphen_values = true)]
    grid_max: f64,
    #[arg(long, default_value_t = 161)]
    grid_points: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Study(a) => cmd_study(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Figure1(a) => cmd_figure(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn cmd_simulate(a: SimulateArgs) -> grm_core::Result<()> {
    let spec = SimulationSpec {
        max_resimulations: a.max_resimulations,
        ..SimulationSpec::new(a.n_items, a.n_subjects, a.seed)
    };
    let (items, data) = simulate(&spec)?;
    write_items_file(&a.out_params, &items)?;
    write_responses_file(&a.out_data, &data.responses)?;
    if data.resimulations > 0 {
        eprintln!("redrew the dataset {} time(s) to observe every category", data.resimulations);
    }
    Ok(())
}

fn cmd_fit(a: FitArgs) -> grm_core::Result<()> {
    let data = read_responses_file(&a.data)?;
    let init = match &a.params_init {
        Some(p) => read_items_file(p)?,
        None => starting_values(&data)?,
    };
    let mut config = FitConfig {
        quadrature_points: a.quadpts,
        ..FitConfig::default()
    };
    if let Some(n) = a.max_iterations {
        config.max_outer_iterations = n;
    }
    let result = fit(a.method.into(), &data, &init, &config)?;
    write_json_file(&a.out, &result)?;
    eprintln!(
        "{}: {:?} after {} iterations, loglik {}",
        result.method, result.status, result.outer_iterations, result.loglik
    );
    Ok(())
}

fn cmd_study(a: StudyArgs) -> grm_core::Result<()> {
    let mut config = match &a.config {
        Some(p) => StudyConfig::from_json_file(p)?,
        None => StudyConfig::default(),
    };
    if let Some(j) = a.jobs {
        config.jobs = j;
    }
    if let Some(out) = a.out {
        config.output_dir = out;
    }
    if let Some(r) = a.replicates {
        config.replicates = r;
    }
    if let Some(s) = a.seed {
        config.base_seed = s;
    }
    if let Some(q) = a.quadpts {
        config.quadrature_points = q;
    }
    let manifest = run_study(&config)?;
    eprintln!(
        "{} fits run, {} reused, {:.1}s",
        manifest.fits_run,
        manifest.fits_reused,
        manifest.elapsed_ms / 1000.0
    );
    Ok(())
}

fn cmd_metrics(a: MetricsArgs) -> grm_core::Result<()> {
    std::fs::create_dir_all(&a.out)?;
    aggregate(&a.input, &a.out, a.include_nonconverged)?;
    Ok(())
}

fn masses_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = out.extension().map(|e| e.to_string_lossy().into_owned());
    let name = match ext {
        Some(ext) => format!("{stem}_ghq.{ext}"),
        None => format!("{stem}_ghq"),
    };
    out.with_file_name(name)
}

fn cmd_figure(a: FigureArgs) -> grm_core::Result<()> {
    if a.grid_points < 2 || !(a.grid_min < a.grid_max) {
        return Err(GrmError::Domain("grid needs at least two points and grid-min < grid-max".into()));
    }
    if a.quadpts > MAX_QUADRATURE_POINTS {
        return Err(GrmError::Resource(format!("at most {MAX_QUADRATURE_POINTS} quadrature points")));
    }
    let items = read_items_file(&a.params)?;
    let rule = gauss_hermite_normal(a.quadpts)?;
    let step = (a.grid_max - a.grid_min) / (a.grid_points - 1) as f64;
    let grid: Vec<f64> = (0..a.grid_points).map(|k| a.grid_min + step * k as f64).collect();
    let figure = emit_likelihood_figure(&items, &a.pattern, &rule, &grid)?;
    figure.write_curves(BufWriter::new(File::create(&a.out)?))?;
    figure.write_masses(BufWriter::new(File::create(masses_path(&a.out))?))?;
    Ok(())
}
