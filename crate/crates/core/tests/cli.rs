mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gcv_core::matrix::CrossPerformanceMatrix;
use gcv_core::report::QualityReport;
use gcv_core::toyworld::ToyDomainSpec;
use tempfile::TempDir;

use common::{copy_dir, fixtures, toy_experiment, GCV};

fn gcv(cwd: &Path, args: &[&str]) -> Output {
    Command::new(GCV)
        .args(args)
        .current_dir(cwd)
        .env_remove("GCV_CACHE_DIR")
        .env_remove("GCV_CONFIG")
        .output()
        .expect("gcv runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn score_reproduces_the_published_example() {
    let fixture = fixtures().join("vkitti_reference.json");
    let fixture = fixture.to_str().unwrap();
    let here = Path::new(".");

    let md = gcv(here, &["score", fixture]);
    assert!(md.status.success(), "{}", stderr(&md));
    let text = stdout(&md);
    assert!(
        text.contains("| A_o (simulation quality) | 0.49 |"),
        "{text}"
    );
    assert!(text.contains("| S_o (transfer quality) | 0.45 |"));
    assert!(text.contains("| **vkitti** | 1.00 | 0.66 | 0.39 |"));
    assert!(text.contains("| **kitti** | 0.77 | 1.00 | 0.26 |"));
    assert!(text.contains("| **bdd100k** | 1.24 | 0.90 | 1.00 |"));

    let terse = gcv(here, &["score", fixture, "--terse"]);
    assert_eq!(stdout(&terse), "A_o = 0.49\nS_o = 0.45\n");

    let json = gcv(here, &["score", fixture, "--format", "json"]);
    let report = QualityReport::from_json(&stdout(&json)).unwrap();
    assert_eq!(report.to_json() + "\n", stdout(&json));
    assert_eq!(report.metadata.reference_ids, ["kitti", "bdd100k"]);

    let csv = gcv(here, &["score", fixture, "--format", "csv"]);
    assert!(stdout(&csv).starts_with("section,row,column,value\n"));
}

#[test]
fn score_edge_cases_and_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let one_ref = CrossPerformanceMatrix::new(
        "ap50",
        vec!["syn".into(), "real".into()],
        vec![vec![0.8, 0.6], vec![0.4, 0.9]],
    )
    .unwrap();
    fs::write(tmp.path().join("n1.json"), one_ref.to_json()).unwrap();
    let out = gcv(tmp.path(), &["score", "n1.json", "--terse"]);
    assert!(out.status.success());
    assert_eq!(
        stdout(&out),
        "A_o = 0.75\nS_o = n/a (requires ≥ 2 references)\n"
    );

    let ones = CrossPerformanceMatrix::new(
        "ap50",
        vec!["syn".into(), "a".into(), "b".into()],
        vec![vec![0.5; 3], vec![0.7; 3], vec![0.9; 3]],
    )
    .unwrap();
    fs::write(tmp.path().join("ones.json"), ones.to_json()).unwrap();
    assert_eq!(
        stdout(&gcv(tmp.path(), &["score", "ones.json", "--terse"])),
        "A_o = 1.00\nS_o = 1.00\n"
    );

    let zero = CrossPerformanceMatrix::new(
        "ap50",
        vec!["syn".into(), "real".into()],
        vec![vec![0.8, 0.6], vec![0.4, 0.0]],
    )
    .unwrap();
    fs::write(tmp.path().join("zero.json"), zero.to_json()).unwrap();
    let out = gcv(tmp.path(), &["score", "zero.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).contains("'real' scored zero on its own test set"),
        "{}",
        stderr(&out)
    );

    fs::write(tmp.path().join("bad.json"), "{\"metric_name\": \"ap50\"}").unwrap();
    assert_eq!(
        gcv(tmp.path(), &["score", "bad.json"]).status.code(),
        Some(2)
    );
}

#[test]
fn matrix_import_export_normalize() {
    let tmp = TempDir::new().unwrap();
    let fixture = fixtures().join("vkitti_reference.json");
    let csv = gcv(
        tmp.path(),
        &[
            "matrix",
            "export",
            fixture.to_str().unwrap(),
            "-o",
            "t3.csv",
        ],
    );
    assert!(csv.status.success(), "{}", stderr(&csv));
    let import = gcv(tmp.path(), &["matrix", "import", "t3.csv", "-o", "t3.json"]);
    assert!(import.status.success(), "{}", stderr(&import));
    let original =
        CrossPerformanceMatrix::from_json(&fs::read_to_string(&fixture).unwrap()).unwrap();
    let back =
        CrossPerformanceMatrix::from_json(&fs::read_to_string(tmp.path().join("t3.json")).unwrap())
            .unwrap();
    assert_eq!(back, original);

    let md = gcv(
        tmp.path(),
        &["matrix", "normalize", "t3.json", "--format", "markdown"],
    );
    assert_eq!(
        stdout(&md),
        "1.00  0.66  0.39\n0.77  1.00  0.26\n1.24  0.90  1.00\n"
    );
    let json = gcv(tmp.path(), &["matrix", "normalize", "t3.csv"]);
    assert!(stdout(&json).contains("\"ratios\""));
}

#[test]
fn prep_reports_disjoint_label_spaces() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let record = |id: &str, label: &str| {
        format!("{{\"image_id\":\"{id}\",\"category\":\"{label}\",\"bbox\":[0,0,5,5],\"source_format\":\"interchange\"}}\n")
    };
    fs::write(
        dir.join("a.jsonl"),
        record("a1", "car") + &record("a2", "car"),
    )
    .unwrap();
    fs::write(
        dir.join("b.jsonl"),
        record("b1", "tree") + &record("b2", "tree"),
    )
    .unwrap();
    fs::write(
        dir.join("exp.toml"),
        r#"
[[datasets]]
id = "a"
role = "synthetic_under_test"
format = "interchange"
annotations = "a.jsonl"

[[datasets]]
id = "b"
role = "reference"
format = "interchange"
annotations = "b.jsonl"

[runner]
train = "t {train_manifest} {workdir} {seed}"
eval = "e {model_artifact} {test_manifest} {workdir}"
timeout_seconds = 5
metric_name = "ap50"
"#,
    )
    .unwrap();
    let out = gcv(dir, &["--config", "exp.toml", "prep"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).contains("label spaces share no category: {car} vs {tree}"),
        "{}",
        stderr(&out)
    );

    let out = gcv(dir, &["--config", "exp.toml", "run"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).contains("run `gcv prep` first"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn config_errors_name_the_field() {
    let tmp = TempDir::new().unwrap();
    fs::write(
        tmp.path().join("exp.toml"),
        "[[datasets]]\nid = \"a\"\nrole = \"synthetic\"\nformat = \"interchange\"\nannotations = \"a.jsonl\"\n",
    )
    .unwrap();
    let out = gcv(tmp.path(), &["--config", "exp.toml", "prep"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).contains("datasets[0].role"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn toy_pipeline_through_the_cli() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    copy_dir(&fixtures().join("toy"), dir);
    let gen = gcv(
        dir,
        &[
            "toy",
            "generate",
            "--domains",
            "domains.toml",
            "--out",
            "data",
        ],
    );
    assert!(gen.status.success(), "{}", stderr(&gen));
    let prep = gcv(dir, &["--config", "experiment.toml", "prep"]);
    assert!(prep.status.success(), "{}", stderr(&prep));
    assert_eq!(
        stdout(&prep).matches("833 train, 167 test").count(),
        3,
        "{}",
        stdout(&prep)
    );
    let manifest = fs::read(dir.join("splits/toy_syn.split.json")).unwrap();
    assert!(gcv(dir, &["--config", "experiment.toml", "prep"])
        .status
        .success());
    assert_eq!(
        fs::read(dir.join("splits/toy_syn.split.json")).unwrap(),
        manifest
    );

    let run = gcv(dir, &["--config", "experiment.toml", "run"]);
    assert!(run.status.success(), "{}", stderr(&run));
    assert!(stdout(&run).starts_with("9 cells: 9 evaluated, 0 from cache; 3 model(s) trained"));
    let matrix =
        CrossPerformanceMatrix::from_json(&fs::read_to_string(dir.join("matrix.json")).unwrap())
            .unwrap();
    assert_eq!(matrix.side(), 3);
    assert_eq!(matrix.metric_name(), "toy_accuracy");

    let again = gcv(dir, &["--config", "experiment.toml", "run", "--resume"]);
    assert!(stdout(&again).starts_with("9 cells: 0 evaluated, 9 from cache; 0 model(s) trained"));

    let report = gcv(
        dir,
        &["--config", "experiment.toml", "report", "--format", "json"],
    );
    assert!(report.status.success(), "{}", stderr(&report));
    let parsed = QualityReport::from_json(&stdout(&report)).unwrap();
    assert_eq!(parsed.metadata.seed, Some(0));
    assert!(parsed
        .warnings
        .iter()
        .any(|w| w.contains("served from the cache")));
    assert!((0.95..=1.05).contains(&parsed.scores.a_o));
}

#[test]
fn cache_dir_environment_override() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let domains = [
        ("syn", ToyDomainSpec::two_class(3.0, 60, 1)),
        ("real", ToyDomainSpec::two_class(3.0, 60, 2)),
    ];
    let config = toy_experiment(dir, &domains, 2, None);
    assert!(gcv(dir, &["--config", "experiment.toml", "prep"])
        .status
        .success());
    let run = Command::new(GCV)
        .args(["--config", config.to_str().unwrap(), "run"])
        .current_dir(dir)
        .env("GCV_CACHE_DIR", "elsewhere")
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", stderr(&run));
    assert!(dir.join("elsewhere").is_dir());
    assert!(!dir.join("cache").exists());
}

#[test]
fn runner_failures_exit_3_with_coordinates() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let domains = [
        ("syn", ToyDomainSpec::two_class(3.0, 60, 1)),
        ("real", ToyDomainSpec::two_class(3.0, 60, 2)),
    ];
    let config = toy_experiment(dir, &domains, 1, None);
    assert!(gcv(dir, &["--config", "experiment.toml", "prep"])
        .status
        .success());

    let text = fs::read_to_string(&config).unwrap();
    fs::write(
        &config,
        text.replace("{gcv} toy-runner train", "/no/such/trainer train"),
    )
    .unwrap();
    let out = gcv(dir, &["--config", "experiment.toml", "run"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(
        stderr(&out).contains("training on 'syn' failed"),
        "{}",
        stderr(&out)
    );
    assert!(stderr(&out).contains("cannot start runner"));

    // An evaluator that exits non-zero, tolerated with --keep-going.
    fs::write(&config, text.replace("{gcv} toy-runner eval", "false")).unwrap();
    let out = gcv(dir, &["--config", "experiment.toml", "run", "--keep-going"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("4 job(s) failed"), "{}", stderr(&out));
    assert!(stderr(&out).contains("evaluation of the 'real' model on 'syn'"));

    fs::write(&config, &text).unwrap();
    let out = gcv(
        dir,
        &["--config", "experiment.toml", "run", "--stop-after", "1"],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(
        stderr(&out).contains("stopped after 1 new cell(s); 3 cell(s) still pending"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn toy_runner_rejects_unreadable_manifests() {
    let tmp = TempDir::new().unwrap();
    let out = gcv(
        tmp.path(),
        &[
            "toy-runner",
            "train",
            "--train-manifest",
            "missing.json",
            "--workdir",
            ".",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("missing.json"));
}
