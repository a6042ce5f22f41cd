//! Runs the (N+1) training jobs and (N+1)^2 evaluation cells of an
//! experiment through an external runner, with a content-addressed cache.
//!
//! Cache layout under `cache_dir`:
//!
//! ```text
//! <experiment>/runner.json               runner spec, for inspection
//! <experiment>/failures.json             present after a keep-going run with failures
//! <experiment>/<train_id>/train.json     written once training succeeded
//! <experiment>/<train_id>/artifact/      the trainer's {workdir}, i.e. {model_artifact}
//! <experiment>/<train_id>/cells/<test_id>.json one CellResult per finished cell
//! <experiment>/<train_id>/eval/<test_id>/ the evaluator's {workdir}
//! <experiment>/<train_id>/logs/          stdout and stderr of every invocation
//! ```
//!
//! `<experiment>` hashes the training command and seed. A row is reused when
//! its marker carries the hash of the experiment plus the training split file;
//! a cell is reused when its record carries the hash of the row plus the eval
//! command, the metric name and the test split file. Anything else is rerun.
//! Every file is written atomically by the coordinating thread, so an
//! interrupted run leaves only complete entries behind.

pub mod config;
pub mod runner;

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::harmonize::HarmonizeError;
use crate::matrix::{build_matrix, CrossPerformanceMatrix, MatrixError, MetricValue};

pub use config::{plan, ExperimentConfig, ExperimentPlan, PlannedSplit, CACHE_DIR_ENV};
pub use runner::RunnerSpec;

use runner::{
    absolute, invoke, parse_result, path_str, render, tail, vars, InvokeError, ProcessOutcome,
};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("config field '{field}': {message}")]
    Config { field: String, message: String },
    #[error("no split manifest for dataset '{0}'; run `gcv prep` first")]
    MissingSplit(String),
    #[error(transparent)]
    Harmonize(#[from] HarmonizeError),
    #[error("{job} failed (exit code {}); see {}\n{stderr_tail}",
        exit_code.map_or("none".to_string(), |c| c.to_string()), log_dir.display())]
    RunnerFailure {
        job: String,
        exit_code: Option<i32>,
        stderr_tail: String,
        log_dir: PathBuf,
    },
    #[error("{job} exceeded its {seconds}s timeout and was killed")]
    RunnerTimeout { job: String, seconds: u64 },
    #[error("{job} broke the result protocol: {reason}")]
    ProtocolError { job: String, reason: String },
    #[error("{} job(s) failed; details in {}\n{}", failures.len(), report.display(), failures.join("\n"))]
    CellsFailed {
        failures: Vec<String>,
        report: PathBuf,
    },
    #[error(
        "stopped after {completed} new cell(s); {remaining} cell(s) still pending, rerun to resume"
    )]
    Interrupted { completed: usize, remaining: usize },
    #[error("cache {}: {source}", path.display())]
    Cache {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

impl OrchestratorError {
    /// Failures caused by the runner rather than by configuration or I/O.
    pub fn is_runner_failure(&self) -> bool {
        matches!(
            self,
            Self::RunnerFailure { .. }
                | Self::RunnerTimeout { .. }
                | Self::ProtocolError { .. }
                | Self::CellsFailed { .. }
        )
    }
}

pub type Result<T, E = OrchestratorError> = std::result::Result<T, E>;

/// One invocation of the runner.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum JobRef {
    Train { train_id: String },
    Eval { train_id: String, test_id: String },
}

impl fmt::Display for JobRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Train { train_id } => write!(f, "training on '{train_id}'"),
            Self::Eval { train_id, test_id } => {
                write!(f, "evaluation of the '{train_id}' model on '{test_id}'")
            }
        }
    }
}

/// A finished matrix cell as stored in the cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub train_id: String,
    pub test_id: String,
    pub metric: MetricValue,
    pub runner_fingerprint: String,
    pub wall_time_seconds: f64,
    pub completed_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainMarker {
    train_id: String,
    row_fingerprint: String,
    wall_time_seconds: f64,
    completed_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExecutionStats {
    pub train_invocations: usize,
    pub eval_invocations: usize,
    pub cached_cells: usize,
    /// Rows whose training was skipped.
    pub cached_rows: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ExecuteOptions {
    /// Stop dispatching once this many new cells have finished and report
    /// [`OrchestratorError::Interrupted`]. Finished cells stay cached.
    pub stop_after_cells: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Execution {
    /// Row-major by the plan's dataset order.
    pub results: Vec<CellResult>,
    pub stats: ExecutionStats,
    pub experiment_dir: PathBuf,
}

fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

/// Hash of the training command and seed; names the experiment directory.
pub fn experiment_fingerprint(runner: &RunnerSpec, seed: u64) -> String {
    sha256_hex(&[runner.train_command.as_bytes(), &seed.to_le_bytes()])
}

fn row_fingerprint(experiment: &str, train_split: &[u8]) -> String {
    sha256_hex(&[experiment.as_bytes(), train_split])
}

fn cell_fingerprint(row: &str, runner: &RunnerSpec, test_split: &[u8]) -> String {
    sha256_hex(&[
        row.as_bytes(),
        runner.eval_command.as_bytes(),
        runner.metric_name.as_bytes(),
        test_split,
    ])
}

struct Layout {
    root: PathBuf,
}

impl Layout {
    fn row(&self, train_id: &str) -> PathBuf {
        self.root.join(train_id)
    }
    fn marker(&self, train_id: &str) -> PathBuf {
        self.row(train_id).join("train.json")
    }
    fn artifact(&self, train_id: &str) -> PathBuf {
        self.row(train_id).join("artifact")
    }
    fn cell(&self, train_id: &str, test_id: &str) -> PathBuf {
        self.row(train_id)
            .join("cells")
            .join(format!("{test_id}.json"))
    }
    fn eval_workdir(&self, train_id: &str, test_id: &str) -> PathBuf {
        self.row(train_id).join("eval").join(test_id)
    }
    fn logs(&self, train_id: &str) -> PathBuf {
        self.row(train_id).join("logs")
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Option<T> {
    let bytes = std::fs::read(path).ok()?;
    match serde_json::from_slice(&bytes) {
        Ok(v) => Some(v),
        Err(e) => {
            log::warn!("ignoring unreadable cache entry {}: {e}", path.display());
            None
        }
    }
}

fn store<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("cache records serialize");
    bytes.push(b'\n');
    write_atomic(path, &bytes).map_err(|source| OrchestratorError::Cache {
        path: path.to_path_buf(),
        source,
    })
}

fn cache_io(path: &Path) -> impl FnOnce(std::io::Error) -> OrchestratorError + '_ {
    move |source| OrchestratorError::Cache {
        path: path.to_path_buf(),
        source,
    }
}

struct Job {
    job: JobRef,
    argv: Vec<String>,
    log_dir: PathBuf,
    log_name: String,
}

struct Finished {
    job: JobRef,
    log_dir: PathBuf,
    outcome: std::result::Result<ProcessOutcome, InvokeError>,
}

/// Converts a raw outcome into success or the matching error.
fn judge(
    job: &JobRef,
    log_dir: &Path,
    outcome: std::result::Result<ProcessOutcome, InvokeError>,
    timeout: Duration,
) -> Result<ProcessOutcome> {
    let job_name = job.to_string();
    match outcome {
        Ok(o) if o.success => Ok(o),
        Ok(o) => Err(OrchestratorError::RunnerFailure {
            job: job_name,
            exit_code: o.exit_code,
            stderr_tail: tail(&o.stderr),
            log_dir: log_dir.to_path_buf(),
        }),
        Err(InvokeError::Timeout(_)) => Err(OrchestratorError::RunnerTimeout {
            job: job_name,
            seconds: timeout.as_secs(),
        }),
        Err(InvokeError::Spawn(e)) => Err(OrchestratorError::RunnerFailure {
            job: job_name,
            exit_code: None,
            stderr_tail: format!("cannot start runner: {e}"),
            log_dir: log_dir.to_path_buf(),
        }),
        Err(InvokeError::Io(e)) => Err(OrchestratorError::Cache {
            path: log_dir.to_path_buf(),
            source: e,
        }),
    }
}

struct Row {
    fingerprint: String,
    /// Cells of this row that still need evaluation.
    missing: Vec<String>,
}

/// Runs every job the cache cannot answer and returns all cell results.
pub fn execute(plan: &ExperimentPlan, options: &ExecuteOptions) -> Result<Execution> {
    plan.runner.validate()?;
    let ids = plan.dataset_ids();
    let experiment = experiment_fingerprint(&plan.runner, plan.seed);
    let layout = Layout {
        root: absolute(&plan.cache_dir.join(&experiment[..16])),
    };
    store(&layout.root.join("runner.json"), &plan.runner)?;

    let mut stats = ExecutionStats::default();
    let mut results: BTreeMap<(usize, usize), CellResult> = BTreeMap::new();
    let mut rows: BTreeMap<String, Row> = BTreeMap::new();
    let mut cell_fps: BTreeMap<(String, String), String> = BTreeMap::new();
    let position = |id: &str| ids.iter().position(|x| x == id).expect("planned id");

    for train_id in &ids {
        let train_split = &plan.splits[train_id];
        let row_fp = row_fingerprint(&experiment, &train_split.bytes);
        let mut missing = Vec::new();
        for test_id in &ids {
            let cell_fp = cell_fingerprint(&row_fp, &plan.runner, &plan.splits[test_id].bytes);
            match read_json::<CellResult>(&layout.cell(train_id, test_id)) {
                Some(c)
                    if c.runner_fingerprint == cell_fp
                        && c.metric.metric_name == plan.runner.metric_name =>
                {
                    stats.cached_cells += 1;
                    results.insert((position(train_id), position(test_id)), c);
                }
                _ => missing.push(test_id.clone()),
            }
            cell_fps.insert((train_id.clone(), test_id.clone()), cell_fp);
        }
        rows.insert(
            train_id.clone(),
            Row {
                fingerprint: row_fp,
                missing,
            },
        );
    }

    let mut ready_evals: VecDeque<Job> = VecDeque::new();
    let mut pending_trains: VecDeque<Job> = VecDeque::new();
    let eval_job = |train_id: &str, test_id: &str| -> Result<Job> {
        let workdir = layout.eval_workdir(train_id, test_id);
        std::fs::create_dir_all(&workdir).map_err(cache_io(&workdir))?;
        let argv = render(
            &plan.runner.eval_command,
            &vars(
                &[
                    ("model_artifact", path_str(&layout.artifact(train_id))),
                    (
                        "test_manifest",
                        path_str(&absolute(&plan.splits[test_id].path)),
                    ),
                    ("workdir", path_str(&workdir)),
                ],
                &plan.template_vars,
            ),
        )?;
        Ok(Job {
            job: JobRef::Eval {
                train_id: train_id.to_string(),
                test_id: test_id.to_string(),
            },
            argv,
            log_dir: layout.logs(train_id),
            log_name: format!("eval-{test_id}"),
        })
    };

    for train_id in &ids {
        let row = &rows[train_id];
        if row.missing.is_empty() {
            stats.cached_rows += 1;
            continue;
        }
        let marker: Option<TrainMarker> = read_json(&layout.marker(train_id));
        let trained = marker.is_some_and(|m| m.row_fingerprint == row.fingerprint)
            && layout.artifact(train_id).is_dir();
        if trained {
            stats.cached_rows += 1;
            for test_id in &row.missing {
                ready_evals.push_back(eval_job(train_id, test_id)?);
            }
            continue;
        }
        let artifact = layout.artifact(train_id);
        if artifact.exists() {
            std::fs::remove_dir_all(&artifact).map_err(cache_io(&artifact))?;
        }
        std::fs::create_dir_all(&artifact).map_err(cache_io(&artifact))?;
        let argv = render(
            &plan.runner.train_command,
            &vars(
                &[
                    (
                        "train_manifest",
                        path_str(&absolute(&plan.splits[train_id].path)),
                    ),
                    ("workdir", path_str(&artifact)),
                    ("seed", plan.seed.to_string()),
                ],
                &plan.template_vars,
            ),
        )?;
        pending_trains.push_back(Job {
            job: JobRef::Train {
                train_id: train_id.clone(),
            },
            argv,
            log_dir: layout.logs(train_id),
            log_name: "train".into(),
        });
    }

    let total_missing: usize = rows.values().map(|r| r.missing.len()).sum();
    let workers = plan.max_parallel_cells.max(1);
    let timeout = plan.runner.timeout();
    let cwd = plan.base_dir.clone();
    let mut failures: Vec<(JobRef, String)> = Vec::new();
    let mut fatal: Option<OrchestratorError> = None;
    let mut new_cells = 0usize;
    let mut stopped = false;

    std::thread::scope(|scope| -> Result<()> {
        let (job_tx, job_rx) = mpsc::channel::<Job>();
        let (done_tx, done_rx) = mpsc::channel::<Finished>();
        let job_rx = Arc::new(Mutex::new(job_rx));
        for _ in 0..workers {
            let job_rx = Arc::clone(&job_rx);
            let done_tx = done_tx.clone();
            let cwd = cwd.clone();
            scope.spawn(move || loop {
                let next = job_rx.lock().expect("job queue").recv();
                let Ok(job) = next else { break };
                log::info!("starting {}", job.job);
                let outcome = invoke(&job.argv, &cwd, timeout, &job.log_dir, &job.log_name);
                let sent = done_tx.send(Finished {
                    job: job.job,
                    log_dir: job.log_dir,
                    outcome,
                });
                if sent.is_err() {
                    break;
                }
            });
        }
        drop(done_tx);

        let mut in_flight = 0usize;
        let mut trains_in_flight = 0usize;
        loop {
            let halted = fatal.is_some() || stopped;
            while !halted && in_flight < workers {
                let job = if let Some(j) = ready_evals.pop_front() {
                    j
                } else if (plan.parallel_training || trains_in_flight == 0)
                    && !pending_trains.is_empty()
                {
                    trains_in_flight += 1;
                    pending_trains.pop_front().expect("non-empty")
                } else {
                    break;
                };
                match &job.job {
                    JobRef::Train { .. } => stats.train_invocations += 1,
                    JobRef::Eval { .. } => stats.eval_invocations += 1,
                }
                in_flight += 1;
                job_tx.send(job).expect("workers outlive the dispatcher");
            }
            if in_flight == 0 {
                break;
            }
            let done = done_rx.recv().expect("a job is in flight");
            in_flight -= 1;
            let Finished {
                job,
                log_dir,
                outcome,
            } = done;
            let outcome = judge(&job, &log_dir, outcome, timeout);
            let failure = match (&job, outcome) {
                (JobRef::Train { train_id }, Ok(o)) => {
                    trains_in_flight -= 1;
                    store(
                        &layout.marker(train_id),
                        &TrainMarker {
                            train_id: train_id.clone(),
                            row_fingerprint: rows[train_id].fingerprint.clone(),
                            wall_time_seconds: o.elapsed.as_secs_f64(),
                            completed_at: Utc::now(),
                        },
                    )?;
                    for test_id in &rows[train_id].missing {
                        ready_evals.push_back(eval_job(train_id, test_id)?);
                    }
                    None
                }
                (JobRef::Train { train_id }, Err(e)) => {
                    trains_in_flight -= 1;
                    let skipped = rows[train_id].missing.len();
                    log::error!("{e}; skipping {skipped} cell(s) of row '{train_id}'");
                    Some(e)
                }
                (JobRef::Eval { train_id, test_id }, Ok(o)) => {
                    match parse_result(&o.stdout, &plan.runner.metric_name) {
                        Ok(metric) => {
                            let key = (train_id.clone(), test_id.clone());
                            let cell = CellResult {
                                train_id: train_id.clone(),
                                test_id: test_id.clone(),
                                metric,
                                runner_fingerprint: cell_fps[&key].clone(),
                                wall_time_seconds: o.elapsed.as_secs_f64(),
                                completed_at: Utc::now(),
                            };
                            store(&layout.cell(train_id, test_id), &cell)?;
                            log::info!("cell ({train_id}, {test_id}) = {}", cell.metric.value);
                            results.insert((position(train_id), position(test_id)), cell);
                            new_cells += 1;
                            if options.stop_after_cells.is_some_and(|n| new_cells >= n) {
                                stopped = true;
                            }
                            None
                        }
                        Err(reason) => Some(OrchestratorError::ProtocolError {
                            job: job.to_string(),
                            reason,
                        }),
                    }
                }
                (JobRef::Eval { .. }, Err(e)) => Some(e),
            };
            if let Some(e) = failure {
                if plan.keep_going && e.is_runner_failure() {
                    failures.push((job, e.to_string()));
                } else if fatal.is_none() {
                    fatal = Some(e);
                }
            }
        }
        drop(job_tx);
        Ok(())
    })?;

    if let Some(e) = fatal {
        return Err(e);
    }
    let failures_path = layout.root.join("failures.json");
    if !failures.is_empty() {
        let listed: Vec<String> = failures.iter().map(|(j, e)| format!("{j}: {e}")).collect();
        store(&failures_path, &listed)?;
        return Err(OrchestratorError::CellsFailed {
            failures: listed,
            report: failures_path,
        });
    }
    if failures_path.exists() {
        std::fs::remove_file(&failures_path).map_err(cache_io(&failures_path))?;
    }
    if stopped && new_cells < total_missing {
        return Err(OrchestratorError::Interrupted {
            completed: new_cells,
            remaining: total_missing - new_cells,
        });
    }
    Ok(Execution {
        results: results.into_values().collect(),
        stats,
        experiment_dir: layout.root,
    })
}

/// Assembles the cross-performance matrix from finished cells.
pub fn collect(results: &[CellResult], plan: &ExperimentPlan) -> Result<CrossPerformanceMatrix> {
    let matrix = build_matrix(
        results
            .iter()
            .map(|c| (c.train_id.clone(), c.test_id.clone(), c.metric.clone())),
        &plan.dataset_ids(),
    )?;
    Ok(matrix)
}

#[cfg(all(test, unix))]
mod tests {
    use super::*;
    use crate::harmonize::{prepare, DatasetManifest};
    use std::fs;
    use tempfile::TempDir;

    /// Three interchange datasets with a handful of images each, prepared
    /// into splits, plus a config whose runner is a shell script.
    fn setup(dir: &Path, eval_script: &str, keep_going: bool, parallel: usize) -> ExperimentPlan {
        for id in ["syn", "ref_a", "ref_b"] {
            let mut lines = String::new();
            for i in 0..6 {
                lines.push_str(&format!(
                    "{{\"image_id\":\"{id}_{i}\",\"category\":\"car\",\"bbox\":[0,0,10,10],\"source_format\":\"interchange\"}}\n"
                ));
            }
            fs::write(dir.join(format!("{id}.jsonl")), lines).unwrap();
        }
        fs::write(
            dir.join("train.sh"),
            "#!/bin/sh\necho trained > \"$2/model\"\necho \"$1\" >> calls.log\n",
        )
        .unwrap();
        fs::write(dir.join("eval.sh"), eval_script).unwrap();
        let config_text = format!(
            r#"
[[datasets]]
id = "syn"
role = "synthetic_under_test"
format = "interchange"
annotations = "syn.jsonl"

[[datasets]]
id = "ref_a"
role = "reference"
format = "interchange"
annotations = "ref_a.jsonl"

[[datasets]]
id = "ref_b"
role = "reference"
format = "interchange"
annotations = "ref_b.jsonl"

[splits]
seed = 3
test_fraction = 0.34

[runner]
train = "sh train.sh {{train_manifest}} {{workdir}} {{seed}}"
eval = "sh eval.sh {{model_artifact}} {{test_manifest}} {{workdir}}"
timeout_seconds = 20
metric_name = "score"

[execution]
keep_going = {keep_going}
max_parallel_cells = {parallel}
"#
        );
        let path = dir.join("experiment.toml");
        fs::write(&path, config_text).unwrap();
        let config = ExperimentConfig::load(&path).unwrap();
        let datasets: Vec<DatasetManifest> = config.ordered_datasets();
        prepare(&datasets, &config.prep_options()).unwrap();
        plan(&config).unwrap()
    }

    /// Prints a value derived from the test manifest's file name length.
    const EVAL_OK: &str = "#!/bin/sh\nn=$(basename \"$2\" | wc -c)\necho \"evaluating\"\necho \"{\\\"metric_name\\\": \\\"score\\\", \\\"value\\\": $n}\"\n";

    #[test]
    fn runs_every_cell_once_then_hits_the_cache() {
        let dir = TempDir::new().unwrap();
        let p = setup(dir.path(), EVAL_OK, false, 2);
        let first = execute(&p, &ExecuteOptions::default()).unwrap();
        assert_eq!(first.results.len(), 9);
        assert_eq!(first.stats.train_invocations, 3);
        assert_eq!(first.stats.eval_invocations, 9);
        let m = collect(&first.results, &p).unwrap();
        assert_eq!(m.dataset_ids(), ["syn", "ref_a", "ref_b"]);
        // "syn.split.json\n" is 15 bytes
        assert_eq!(m.get(1, 0), 15.0);

        let second = execute(&p, &ExecuteOptions::default()).unwrap();
        assert_eq!(
            second.stats.train_invocations + second.stats.eval_invocations,
            0
        );
        assert_eq!(second.stats.cached_cells, 9);
        assert_eq!(collect(&second.results, &p).unwrap(), m);

        // Deleting one cell reruns exactly that cell and reuses the model.
        fs::remove_file(first.experiment_dir.join("ref_a/cells/ref_b.json")).unwrap();
        let third = execute(&p, &ExecuteOptions::default()).unwrap();
        assert_eq!(third.stats.train_invocations, 0);
        assert_eq!(third.stats.eval_invocations, 1);
        assert!(first
            .experiment_dir
            .join("ref_a/logs/eval-ref_b.stdout.log")
            .is_file());
    }

    #[test]
    fn changing_the_eval_command_invalidates_cells_but_not_models() {
        let dir = TempDir::new().unwrap();
        let mut p = setup(dir.path(), EVAL_OK, false, 1);
        execute(&p, &ExecuteOptions::default()).unwrap();
        p.runner.eval_command = format!("{} --again", p.runner.eval_command);
        let again = execute(&p, &ExecuteOptions::default()).unwrap();
        assert_eq!(again.stats.train_invocations, 0);
        assert_eq!(again.stats.eval_invocations, 9);
    }

    #[test]
    fn stop_after_then_resume() {
        let dir = TempDir::new().unwrap();
        let p = setup(dir.path(), EVAL_OK, false, 1);
        let opts = ExecuteOptions {
            stop_after_cells: Some(4),
        };
        match execute(&p, &opts) {
            Err(OrchestratorError::Interrupted {
                completed,
                remaining,
            }) => {
                assert_eq!((completed, remaining), (4, 5));
            }
            other => panic!("expected interruption, got {other:?}"),
        }
        let resumed = execute(&p, &ExecuteOptions::default()).unwrap();
        assert_eq!(resumed.stats.cached_cells, 4);
        assert_eq!(resumed.stats.eval_invocations, 5);
        // Rows 0 and 1 were trained before the stop.
        assert_eq!(resumed.stats.train_invocations, 1);
    }

    #[test]
    fn protocol_violation_is_reported() {
        let dir = TempDir::new().unwrap();
        let p = setup(dir.path(), "#!/bin/sh\necho 0.5\n", false, 1);
        let err = execute(&p, &ExecuteOptions::default()).unwrap_err();
        assert!(
            matches!(err, OrchestratorError::ProtocolError { .. }),
            "{err}"
        );
        assert!(err.is_runner_failure());
    }

    #[test]
    fn nonzero_exit_aborts_by_default() {
        let dir = TempDir::new().unwrap();
        let p = setup(dir.path(), "#!/bin/sh\necho broken >&2\nexit 4\n", false, 1);
        match execute(&p, &ExecuteOptions::default()).unwrap_err() {
            OrchestratorError::RunnerFailure {
                exit_code,
                stderr_tail,
                ..
            } => {
                assert_eq!(exit_code, Some(4));
                assert_eq!(stderr_tail, "broken");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn keep_going_records_failures_and_keeps_good_cells() {
        let dir = TempDir::new().unwrap();
        // Fails only when evaluating on ref_b.
        let script = format!(
            "#!/bin/sh\ncase \"$2\" in *ref_b*) exit 1;; esac\n{}",
            EVAL_OK.trim_start_matches("#!/bin/sh\n")
        );
        let p = setup(dir.path(), &script, true, 2);
        match execute(&p, &ExecuteOptions::default()).unwrap_err() {
            OrchestratorError::CellsFailed { failures, report } => {
                assert_eq!(failures.len(), 3);
                assert!(report.is_file());
            }
            other => panic!("unexpected {other}"),
        }
        let again = execute(&p, &ExecuteOptions::default()).unwrap_err();
        assert!(matches!(again, OrchestratorError::CellsFailed { .. }));
    }

    #[test]
    fn fingerprints_separate_commands_and_seeds() {
        let spec = RunnerSpec {
            train_command: "t {train_manifest} {workdir} {seed}".into(),
            eval_command: "e {model_artifact} {test_manifest} {workdir}".into(),
            timeout_seconds: 1,
            metric_name: "m".into(),
        };
        let a = experiment_fingerprint(&spec, 0);
        assert_ne!(a, experiment_fingerprint(&spec, 1));
        let mut other = spec.clone();
        other.train_command.push(' ');
        assert_ne!(a, experiment_fingerprint(&other, 0));
        let row = row_fingerprint(&a, b"split");
        assert_ne!(row, row_fingerprint(&a, b"split2"));
        assert_ne!(
            cell_fingerprint(&row, &spec, b"x"),
            cell_fingerprint(&row, &spec, b"y")
        );
    }
}
