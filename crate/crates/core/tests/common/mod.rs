#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use gcv_core::harmonize::prepare;
use gcv_core::orchestrator::{plan, ExperimentConfig, ExperimentPlan};
use gcv_core::toyworld::{generate_toy_dataset, ToyDomainSpec};

pub const GCV: &str = env!("CARGO_BIN_EXE_gcv");

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            fs::copy(entry.path(), target).unwrap();
        }
    }
}

/// Writes toy domains `(id, spec)` under `dir/data` and an experiment config
/// whose runner is the `gcv` binary, optionally behind `wrapper`.
pub fn toy_experiment(
    dir: &Path,
    domains: &[(&str, ToyDomainSpec)],
    parallel: usize,
    wrapper: Option<&str>,
) -> PathBuf {
    let mut text = String::new();
    for (k, (id, spec)) in domains.iter().enumerate() {
        generate_toy_dataset(spec)
            .unwrap()
            .write_to(&dir.join("data").join(id))
            .unwrap();
        let role = if k == 0 {
            "synthetic_under_test"
        } else {
            "reference"
        };
        text.push_str(&format!(
            "[[datasets]]\nid = \"{id}\"\nrole = \"{role}\"\nformat = \"interchange\"\nannotations = \"data/{id}/annotations.jsonl\"\n\n"
        ));
    }
    let prefix = wrapper.map(|w| format!("sh {w} ")).unwrap_or_default();
    text.push_str(&format!(
        r#"[splits]
seed = 0
test_fraction = 0.2

[runner]
train = "{prefix}{{gcv}} toy-runner train --train-manifest {{train_manifest}} --workdir {{workdir}} --seed {{seed}}"
eval = "{prefix}{{gcv}} toy-runner eval --model-artifact {{model_artifact}} --test-manifest {{test_manifest}} --workdir {{workdir}}"
timeout_seconds = 60
metric_name = "toy_accuracy"

[execution]
max_parallel_cells = {parallel}
"#
    ));
    let path = dir.join("experiment.toml");
    fs::write(&path, text).unwrap();
    path
}

/// Loads the config, runs prep and returns an executable plan.
pub fn prep_and_plan(config_path: &Path) -> ExperimentPlan {
    let config = ExperimentConfig::load(config_path).unwrap();
    prepare(&config.ordered_datasets(), &config.prep_options()).unwrap();
    plan(&config).unwrap().with_template_var("gcv", GCV)
}
