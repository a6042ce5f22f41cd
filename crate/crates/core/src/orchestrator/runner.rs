//! External runner contract.
//!
//! A runner is a pair of command templates. Templates are split into
//! arguments with POSIX shell quoting rules first and placeholders are
//! substituted per argument afterwards, so substituted paths never need
//! quoting. No shell is involved in the invocation.
//!
//! Exit status 0 means success. For evaluation, the last non-empty line of
//! standard output must be a JSON object `{"metric_name": "...", "value": x}`.
//! Everything else the runner prints is kept verbatim in the job's log files.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use super::{OrchestratorError, Result};
use crate::matrix::MetricValue;

pub const TRAIN_PLACEHOLDERS: [&str; 3] = ["train_manifest", "workdir", "seed"];
pub const EVAL_PLACEHOLDERS: [&str; 3] = ["model_artifact", "test_manifest", "workdir"];

const STDERR_TAIL_BYTES: usize = 2000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunnerSpec {
    #[serde(alias = "train")]
    pub train_command: String,
    #[serde(alias = "eval")]
    pub eval_command: String,
    pub timeout_seconds: u64,
    pub metric_name: String,
}

fn is_placeholder_name(name: &str) -> bool {
    !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn placeholders(template: &str) -> Vec<String> {
    let mut found = Vec::new();
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        let after = &rest[start + 1..];
        match after.find('}') {
            Some(end) => {
                let name = &after[..end];
                if is_placeholder_name(name) {
                    found.push(name.to_string());
                }
                rest = &after[end + 1..];
            }
            None => break,
        }
    }
    found
}

impl RunnerSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, message: String| {
            Err(OrchestratorError::Config {
                field: format!("runner.{field}"),
                message,
            })
        };
        for (field, template, required) in [
            ("train_command", &self.train_command, &TRAIN_PLACEHOLDERS),
            ("eval_command", &self.eval_command, &EVAL_PLACEHOLDERS),
        ] {
            let present = placeholders(template);
            let missing: Vec<&str> = required
                .iter()
                .copied()
                .filter(|p| !present.iter().any(|q| q == p))
                .collect();
            if !missing.is_empty() {
                return err(
                    field,
                    format!("template lacks placeholder(s) {{{}}}", missing.join("}, {")),
                );
            }
            match shell_words::split(template) {
                Ok(argv) if !argv.is_empty() => {}
                Ok(_) => return err(field, "template is empty".into()),
                Err(e) => return err(field, format!("cannot split template: {e}")),
            }
        }
        if self.timeout_seconds == 0 {
            return err("timeout_seconds", "must be positive".into());
        }
        if self.metric_name.trim().is_empty() {
            return err("metric_name", "must be non-empty".into());
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_seconds)
    }
}

/// Splits `template` and substitutes `{name}` placeholders from `vars`.
pub fn render(template: &str, vars: &BTreeMap<String, String>) -> Result<Vec<String>> {
    let argv = shell_words::split(template).map_err(|e| OrchestratorError::Config {
        field: "runner".into(),
        message: format!("cannot split template '{template}': {e}"),
    })?;
    argv.into_iter()
        .map(|arg| {
            let mut out = String::with_capacity(arg.len());
            let mut rest = arg.as_str();
            while let Some(start) = rest.find('{') {
                out.push_str(&rest[..start]);
                let after = &rest[start + 1..];
                match after
                    .find('}')
                    .filter(|&end| is_placeholder_name(&after[..end]))
                {
                    Some(end) => {
                        let name = &after[..end];
                        let value = vars.get(name).ok_or_else(|| OrchestratorError::Config {
                            field: "runner".into(),
                            message: format!("unknown placeholder {{{name}}} in '{template}'"),
                        })?;
                        out.push_str(value);
                        rest = &after[end + 1..];
                    }
                    None => {
                        out.push('{');
                        rest = after;
                    }
                }
            }
            out.push_str(rest);
            Ok(out)
        })
        .collect()
}

/// Raw outcome of one subprocess.
#[derive(Debug)]
pub struct ProcessOutcome {
    pub exit_code: Option<i32>,
    pub success: bool,
    pub stdout: String,
    pub stderr: String,
    pub elapsed: Duration,
}

#[derive(Debug)]
pub enum InvokeError {
    Spawn(std::io::Error),
    Timeout(Duration),
    Io(std::io::Error),
}

fn drain<R: Read + Send + 'static>(pipe: Option<R>) -> std::thread::JoinHandle<Vec<u8>> {
    std::thread::spawn(move || {
        let mut buf = Vec::new();
        if let Some(mut p) = pipe {
            let _ = p.read_to_end(&mut buf);
        }
        buf
    })
}

/// Runs `argv` in `cwd`, capturing both streams into `log_dir/<name>.{stdout,stderr}.log`.
pub fn invoke(
    argv: &[String],
    cwd: &Path,
    timeout: Duration,
    log_dir: &Path,
    name: &str,
) -> std::result::Result<ProcessOutcome, InvokeError> {
    let start = Instant::now();
    let mut child = Command::new(&argv[0])
        .args(&argv[1..])
        .current_dir(cwd)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(InvokeError::Spawn)?;
    let out = drain(child.stdout.take());
    let err = drain(child.stderr.take());
    let status = match child.wait_timeout(timeout).map_err(InvokeError::Io)? {
        Some(status) => Some(status),
        None => {
            let _ = child.kill();
            let _ = child.wait();
            None
        }
    };
    let stdout = String::from_utf8_lossy(&out.join().unwrap_or_default()).into_owned();
    let stderr = String::from_utf8_lossy(&err.join().unwrap_or_default()).into_owned();
    let elapsed = start.elapsed();

    std::fs::create_dir_all(log_dir).map_err(InvokeError::Io)?;
    std::fs::write(log_dir.join(format!("{name}.stdout.log")), &stdout).map_err(InvokeError::Io)?;
    std::fs::write(log_dir.join(format!("{name}.stderr.log")), &stderr).map_err(InvokeError::Io)?;
    for line in stdout.lines() {
        log::debug!("[{name}] {line}");
    }
    for line in stderr.lines() {
        log::debug!("[{name}!] {line}");
    }

    let status = status.ok_or(InvokeError::Timeout(timeout))?;
    Ok(ProcessOutcome {
        exit_code: status.code(),
        success: status.success(),
        stdout,
        stderr,
        elapsed,
    })
}

/// Last `STDERR_TAIL_BYTES` of `text`, starting on a char boundary.
pub fn tail(text: &str) -> String {
    if text.len() <= STDERR_TAIL_BYTES {
        return text.trim_end().to_string();
    }
    let mut cut = text.len() - STDERR_TAIL_BYTES;
    while !text.is_char_boundary(cut) {
        cut += 1;
    }
    text[cut..].trim_end().to_string()
}

#[derive(Deserialize)]
struct ResultLine {
    metric_name: String,
    value: f64,
}

/// Extracts the metric from an evaluator's stdout.
pub fn parse_result(
    stdout: &str,
    expected_metric: &str,
) -> std::result::Result<MetricValue, String> {
    let last = stdout
        .lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .ok_or("evaluator printed nothing to stdout")?;
    let parsed: ResultLine = serde_json::from_str(last.trim())
        .map_err(|e| format!("final stdout line is not a result object ({e}): {last}"))?;
    if parsed.metric_name != expected_metric {
        return Err(format!(
            "evaluator reported metric '{}' but the experiment measures '{expected_metric}'",
            parsed.metric_name
        ));
    }
    MetricValue::new(parsed.value, parsed.metric_name).ok_or_else(|| {
        format!(
            "metric value {} must be finite and non-negative",
            parsed.value
        )
    })
}

pub(crate) fn vars(
    pairs: &[(&str, String)],
    extra: &BTreeMap<String, String>,
) -> BTreeMap<String, String> {
    let mut map = extra.clone();
    for (k, v) in pairs {
        map.insert((*k).to_string(), v.clone());
    }
    map
}

pub(crate) fn path_str(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

pub(crate) fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> RunnerSpec {
        RunnerSpec {
            train_command: "trainer --data {train_manifest} --out {workdir} --seed {seed}".into(),
            eval_command: "evaluator {model_artifact} {test_manifest} {workdir}".into(),
            timeout_seconds: 10,
            metric_name: "ap50".into(),
        }
    }

    #[test]
    fn validation() {
        assert!(spec().validate().is_ok());
        let mut s = spec();
        s.train_command = "trainer {train_manifest} {workdir}".into();
        let err = s.validate().unwrap_err().to_string();
        assert!(
            err.contains("runner.train_command") && err.contains("{seed}"),
            "{err}"
        );
        let mut s = spec();
        s.timeout_seconds = 0;
        assert!(s.validate().is_err());
        let mut s = spec();
        s.eval_command = "ev '{model_artifact} {test_manifest} {workdir}".into();
        assert!(s.validate().is_err());
    }

    #[test]
    fn render_substitutes_per_argument() {
        let vars: BTreeMap<String, String> = [
            (
                "train_manifest".to_string(),
                "/data/my splits/a.json".to_string(),
            ),
            ("workdir".to_string(), "/w".to_string()),
            ("seed".to_string(), "7".to_string()),
        ]
        .into();
        let argv = render(
            "'my trainer' --data={train_manifest} -o {workdir} {seed} '{x'",
            &vars,
        )
        .unwrap();
        assert_eq!(
            argv,
            [
                "my trainer",
                "--data=/data/my splits/a.json",
                "-o",
                "/w",
                "7",
                "{x"
            ]
        );
        assert!(render("t {nope}", &vars).is_err());
        assert_eq!(render("t {}", &vars).unwrap(), ["t", "{}"]);
    }

    #[test]
    fn result_line_contract() {
        let out = "epoch 1\nloss 0.3\n{\"metric_name\": \"ap50\", \"value\": 0.618}\n\n";
        assert_eq!(
            parse_result(out, "ap50").unwrap(),
            MetricValue::new(0.618, "ap50").unwrap()
        );
        assert!(parse_result("", "ap50").is_err());
        assert!(parse_result("done\n", "ap50").is_err());
        assert!(parse_result("{\"metric_name\": \"map\", \"value\": 0.5}", "ap50").is_err());
        assert!(parse_result("{\"metric_name\": \"ap50\", \"value\": -1}", "ap50").is_err());
        assert!(parse_result("{\"metric_name\": \"ap50\"}", "ap50").is_err());
        assert!(parse_result(
            "{\"metric_name\": \"ap50\", \"value\": 0.5}\ntrailing",
            "ap50"
        )
        .is_err());
    }

    #[test]
    fn tail_keeps_the_end() {
        let long = "x".repeat(5000) + "END";
        let t = tail(&long);
        assert!(t.ends_with("END"));
        assert!(t.len() <= STDERR_TAIL_BYTES);
        assert_eq!(tail("short\n"), "short");
    }

    #[cfg(unix)]
    #[test]
    fn invoke_captures_and_times_out() {
        let dir = tempfile::TempDir::new().unwrap();
        let argv: Vec<String> = ["sh", "-c", "echo out; echo err >&2; exit 3"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let outcome = invoke(
            &argv,
            dir.path(),
            Duration::from_secs(10),
            dir.path(),
            "job",
        )
        .unwrap();
        assert_eq!(outcome.exit_code, Some(3));
        assert!(!outcome.success);
        assert_eq!(outcome.stdout, "out\n");
        assert_eq!(
            std::fs::read_to_string(dir.path().join("job.stderr.log")).unwrap(),
            "err\n"
        );

        let argv: Vec<String> = ["sleep", "5"].iter().map(|s| s.to_string()).collect();
        assert!(matches!(
            invoke(
                &argv,
                dir.path(),
                Duration::from_millis(100),
                dir.path(),
                "slow"
            ),
            Err(InvokeError::Timeout(_))
        ));
        let argv = vec!["/definitely/not/a/runner".to_string()];
        assert!(matches!(
            invoke(
                &argv,
                dir.path(),
                Duration::from_secs(1),
                dir.path(),
                "missing"
            ),
            Err(InvokeError::Spawn(_))
        ));
    }
}
