use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use gcv_core::harmonize::{prepare, SplitManifest};
use gcv_core::matrix::{normalize, CrossPerformanceMatrix};
use gcv_core::orchestrator::{
    collect, execute, plan, CellResult, ExecuteOptions, ExecutionStats, ExperimentConfig,
    OrchestratorError,
};
use gcv_core::report::{QualityReport, ReportContext, ReportFormat};
use gcv_core::toyworld::{self, ToyDomainSpec};

/// Exit code for validation and domain errors.
const EXIT_INVALID: u8 = 2;
/// Exit code for runner failures and incomplete runs.
const EXIT_RUNNER: u8 = 3;

#[derive(Parser)]
#[command(
    name = "gcv",
    version,
    about = "Score a synthetic dataset against real references by generalized cross-validation"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment config (TOML, or JSON by extension).
    #[arg(long, global = true, env = "GCV_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides splits.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides execution.cache_dir and GCV_CACHE_DIR.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Output format: json, markdown or csv.
    #[arg(long, global = true)]
    format: Option<ReportFormat>,
    /// Print only A_o and S_o.
    #[arg(long, global = true)]
    terse: bool,
    /// Record runner failures and continue with the remaining cells.
    #[arg(long, global = true)]
    keep_going: bool,
    /// Reuse finished cells from the cache (always on; reports reuse).
    #[arg(long, global = true)]
    resume: bool,
    /// -v for progress, -vv for runner output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Harmonize labels and write one split manifest per dataset.
    Prep,
    /// Train and evaluate every cell, then write the matrix.
    Run {
        /// Stop after this many newly finished cells.
        #[arg(long)]
        stop_after: Option<usize>,
        /// Matrix output path (default: execution.matrix_out).
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Convert or normalize matrix files.
    #[command(subcommand)]
    Matrix(MatrixCommand),
    /// Normalize and score a matrix file (JSON or CSV).
    Score { matrix: PathBuf },
    /// Report on the experiment in --config, or on an explicit matrix.
    Report {
        #[arg(long)]
        matrix: Option<PathBuf>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Toy domains for end-to-end trials.
    #[command(subcommand)]
    Toy(ToyCommand),
    /// Built-in runner for toy domains.
    #[command(subcommand)]
    ToyRunner(ToyRunnerCommand),
}

#[derive(Subcommand)]
enum MatrixCommand {
    /// Validate a CSV matrix and write it as JSON.
    Import {
        csv: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Write a JSON matrix as CSV.
    Export {
        matrix: PathBuf,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Divide every row by its diagonal.
    Normalize {
        matrix: PathBuf,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ToyCommand {
    /// Generate every domain listed in a domains file.
    Generate {
        #[arg(long)]
        domains: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ToyRunnerCommand {
    Train {
        #[arg(long)]
        train_manifest: PathBuf,
        #[arg(long)]
        workdir: PathBuf,
        /// Accepted for protocol symmetry; the centroid fit is deterministic.
        #[arg(long)]
        seed: Option<u64>,
    },
    Eval {
        #[arg(long)]
        model_artifact: PathBuf,
        #[arg(long)]
        test_manifest: PathBuf,
        #[arg(long)]
        workdir: Option<PathBuf>,
    },
}

/// Written next to the matrix by `run`; read back by `report`.
#[derive(Debug, Serialize, Deserialize)]
struct RunSummary {
    experiment_dir: PathBuf,
    stats: ExecutionStats,
    cells_completed: Option<(chrono::DateTime<chrono::Utc>, chrono::DateTime<chrono::Utc>)>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DomainsFile {
    domains: BTreeMap<String, ToyDomainSpec>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<OrchestratorError>() {
            if e.is_runner_failure() || matches!(e, OrchestratorError::Interrupted { .. }) {
                return EXIT_RUNNER;
            }
        }
    }
    EXIT_INVALID
}

fn dispatch(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Prep => cmd_prep(g),
        Command::Run { stop_after, out } => cmd_run(g, *stop_after, out.as_deref()),
        Command::Matrix(m) => cmd_matrix(g, m),
        Command::Score { matrix } => {
            let m = read_matrix(matrix)?;
            let context = ReportContext {
                seed: g.seed,
                source: Some(matrix.display().to_string()),
                ..Default::default()
            };
            emit_report(g, QualityReport::build(m, context)?, None)
        }
        Command::Report { matrix, out } => cmd_report(g, matrix.as_deref(), out.as_deref()),
        Command::Toy(ToyCommand::Generate { domains, out }) => cmd_toy_generate(domains, out),
        Command::ToyRunner(r) => cmd_toy_runner(r),
    }
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let Some(path) = &g.config else {
        bail!("this command needs --config <experiment.toml>");
    };
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = g.seed {
        config.splits.seed = seed;
    }
    if g.keep_going {
        config.execution.keep_going = true;
    }
    Ok(config)
}

fn cmd_prep(g: &Global) -> Result<()> {
    let config = load_config(g)?;
    let outcome = prepare(&config.ordered_datasets(), &config.prep_options())?;
    println!("shared labels: {}", outcome.shared_labels);
    for (path, m) in &outcome.manifests {
        println!(
            "{}: {} train, {} test ({} images retained) -> {}",
            m.dataset_id,
            m.train_count,
            m.test_count,
            m.retained_images,
            path.display()
        );
    }
    Ok(())
}

fn summary_path(matrix_out: &Path) -> PathBuf {
    matrix_out.with_extension("run.json")
}

fn completion_span(
    results: &[CellResult],
) -> Option<(chrono::DateTime<chrono::Utc>, chrono::DateTime<chrono::Utc>)> {
    let first = results.iter().map(|c| c.completed_at).min()?;
    let last = results.iter().map(|c| c.completed_at).max()?;
    Some((first, last))
}

fn cmd_run(g: &Global, stop_after: Option<usize>, out: Option<&Path>) -> Result<()> {
    let config = load_config(g)?;
    let mut plan = plan(&config)?;
    if let Some(dir) = &g.cache_dir {
        plan.cache_dir = std::path::absolute(dir)?;
    }
    let exe = std::env::current_exe().context("cannot locate the gcv executable")?;
    let plan = plan.with_template_var("gcv", &exe.to_string_lossy());
    let options = ExecuteOptions {
        stop_after_cells: stop_after,
    };
    let execution = execute(&plan, &options)?;
    let matrix = collect(&execution.results, &plan)?;
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.execution.matrix_out.clone());
    write_file(&out, (matrix.to_json() + "\n").as_bytes())?;
    let summary = RunSummary {
        experiment_dir: execution.experiment_dir.clone(),
        stats: execution.stats,
        cells_completed: completion_span(&execution.results),
    };
    write_file(
        &summary_path(&out),
        (serde_json::to_string_pretty(&summary)? + "\n").as_bytes(),
    )?;

    let s = execution.stats;
    println!(
        "{} cells: {} evaluated, {} from cache; {} model(s) trained, {} reused",
        execution.results.len(),
        s.eval_invocations,
        s.cached_cells,
        s.train_invocations,
        s.cached_rows
    );
    if g.resume && s.cached_cells == 0 {
        println!("nothing to resume: no cached cells matched");
    }
    println!("matrix written to {}", out.display());
    Ok(())
}

fn read_matrix(path: &Path) -> Result<CrossPerformanceMatrix> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let matrix = if is_csv {
        CrossPerformanceMatrix::from_csv(&text)?
    } else {
        CrossPerformanceMatrix::from_json(&text)
            .with_context(|| format!("invalid matrix {}", path.display()))?
    };
    Ok(matrix)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

fn print_or_write(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => write_file(path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_matrix(g: &Global, command: &MatrixCommand) -> Result<()> {
    match command {
        MatrixCommand::Import { csv, out } => {
            let m = read_matrix(csv)?;
            write_file(out, (m.to_json() + "\n").as_bytes())
        }
        MatrixCommand::Export { matrix, out } => {
            print_or_write(out.as_deref(), &read_matrix(matrix)?.to_csv())
        }
        MatrixCommand::Normalize { matrix, out } => {
            let gcv = normalize(&read_matrix(matrix)?)?;
            let text = match g.format.unwrap_or(ReportFormat::Json) {
                ReportFormat::Json => gcv.to_json() + "\n",
                ReportFormat::Markdown => gcv.to_string(),
                ReportFormat::Csv => CrossPerformanceMatrix::new(
                    "ratio",
                    gcv.dataset_ids().to_vec(),
                    gcv.rows().to_vec(),
                )?
                .to_csv(),
            };
            print_or_write(out.as_deref(), &text)
        }
    }
}

fn emit_report(g: &Global, report: QualityReport, out: Option<&Path>) -> Result<()> {
    let text = if g.terse {
        report.terse()
    } else {
        report.render(g.format.unwrap_or_default())
    };
    print_or_write(out, &text)
}

fn cmd_report(g: &Global, matrix: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let config = match (&g.config, matrix) {
        (None, None) => bail!("report needs --config or --matrix"),
        (None, Some(_)) => None,
        (Some(_), _) => Some(load_config(g)?),
    };
    let matrix_path = match (matrix, &config) {
        (Some(m), _) => m.to_path_buf(),
        (None, Some(c)) => c.execution.matrix_out.clone(),
        (None, None) => unreachable!("checked above"),
    };
    let mut context = ReportContext {
        seed: g.seed,
        source: Some(matrix_path.display().to_string()),
        ..Default::default()
    };
    if let Some(config) = &config {
        context.seed = Some(config.splits.seed);
        for d in config.ordered_datasets() {
            let path = config.split_path(&d.dataset_id);
            let Ok(split) = SplitManifest::read(&path) else {
                continue;
            };
            if !split.dropped_missing_images.is_empty() {
                context.warnings.push(format!(
                    "{}: {} annotated image(s) missing on disk were dropped at prep",
                    split.dataset_id,
                    split.dropped_missing_images.len()
                ));
            }
            if split.degenerate_boxes_dropped > 0 {
                context.warnings.push(format!(
                    "{}: {} degenerate box(es) were skipped at prep",
                    split.dataset_id, split.degenerate_boxes_dropped
                ));
            }
        }
    }
    if let Ok(text) = std::fs::read_to_string(summary_path(&matrix_path)) {
        if let Ok(summary) = serde_json::from_str::<RunSummary>(&text) {
            context.cells_completed = summary.cells_completed;
            if summary.stats.cached_cells > 0 {
                context.warnings.push(format!(
                    "{} cell(s) were served from the cache in {}",
                    summary.stats.cached_cells,
                    summary.experiment_dir.display()
                ));
            }
        }
    }
    let m = read_matrix(&matrix_path)?;
    emit_report(g, QualityReport::build(m, context)?, out)
}

fn cmd_toy_generate(domains: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(domains)
        .with_context(|| format!("cannot read {}", domains.display()))?;
    let file: DomainsFile = toml::from_str(&text)
        .with_context(|| format!("invalid domains file {}", domains.display()))?;
    for (id, spec) in &file.domains {
        let dataset = toyworld::generate_toy_dataset(spec)?;
        let path = dataset.write_to(&out.join(id))?;
        println!("{id}: {} samples -> {}", spec.sample_count, path.display());
    }
    Ok(())
}

fn cmd_toy_runner(command: &ToyRunnerCommand) -> Result<()> {
    match command {
        ToyRunnerCommand::Train {
            train_manifest,
            workdir,
            ..
        } => {
            let model = toyworld::runner_train(train_manifest, workdir)?;
            println!("model written to {}", model.display());
        }
        ToyRunnerCommand::Eval {
            model_artifact,
            test_manifest,
            ..
        } => {
            let value = toyworld::runner_eval(model_artifact, test_manifest)?;
            println!("{}", toyworld::protocol_line(value));
        }
    }
    Ok(())
}
