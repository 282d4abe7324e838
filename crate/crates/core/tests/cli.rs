mod support;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use patchdiff::cli::{load_checkpoint, ExperimentConfig};
use patchdiff::diffusion::Denoiser;
use patchdiff::patching::CHANNEL_CONTRACT;
use patchdiff::phantom::DatasetManifest;
use patchdiff::rng::derive_seed;
use patchdiff::segeval::UtilityReport;
use sha2::{Digest, Sha256};
use support::{tiny_config, write_config};

struct Run {
    _dir: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
}

impl Run {
    fn new(cfg: &ExperimentConfig) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("config.json");
        write_config(cfg, &config);
        let out = dir.path().join("nested").join("out");
        Run { _dir: dir, config, out }
    }

    fn cmd(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_patchdiff"))
            .arg("--config")
            .arg(&self.config)
            .arg("--out")
            .arg(&self.out)
            .args(args)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = self.cmd(args);
        assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    }
}

fn sha(path: &Path) -> String {
    hex::encode(Sha256::digest(fs::read(path).unwrap()))
}

#[test]
fn make_data_twice_gives_the_same_manifest_hash() {
    let run = Run::new(&tiny_config());
    assert!(!run.out.exists());
    let a = run.ok(&["make-data"]);
    let b = run.ok(&["make-data"]);
    assert!(a.contains("manifest sha256"));
    assert_eq!(a, b);
    let m = DatasetManifest::load(run.out.join("data/manifest.json")).unwrap();
    assert_eq!(m.cases.len(), 14);
    assert_eq!(m.config_hash, tiny_config().hash());
}

#[test]
fn zero_training_cases_are_rejected_with_the_key_path() {
    let mut cfg = tiny_config();
    cfg.splits.train = 0;
    let run = Run::new(&cfg);
    let o = run.cmd(&["make-data"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("splits.train"));
}

#[test]
fn usage_errors_exit_one() {
    let run = Run::new(&tiny_config());
    assert_eq!(run.cmd(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run.cmd(&["train-seg", "--arm", "both"]).status.code(), Some(1));
    // Training before the dataset exists names the command to run first.
    let o = run.cmd(&["train-diffusion"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("make-data"));
}

#[test]
fn init_config_round_trips_through_the_loader() {
    let run = Run::new(&tiny_config());
    for preset in ["fast", "full"] {
        let text = run.ok(&["init-config", "--preset", preset]);
        ExperimentConfig::from_json(&text, Path::new("stdout")).unwrap();
    }
}

#[test]
fn zero_steps_writes_the_initialization() {
    let mut cfg = tiny_config();
    cfg.diffusion_training.steps = 0;
    let run = Run::new(&cfg);
    run.ok(&["make-data"]);
    run.ok(&["train-diffusion"]);
    let ck = load_checkpoint(run.out.join("diffusion/denoiser.pdck"), CHANNEL_CONTRACT).unwrap();
    let init = Denoiser::new(cfg.denoiser.clone(), derive_seed(cfg.root_seed, "denoiser-init", 0)).unwrap();
    assert_eq!(ck.params, init.params);
    assert_eq!(ck.config_hash, cfg.hash_bytes());
}

#[test]
fn resume_at_the_configured_step_count_is_a_no_op() {
    let run = Run::new(&tiny_config());
    run.ok(&["make-data"]);
    run.ok(&["train-diffusion"]);
    let ck = run.out.join("diffusion/denoiser.pdck");
    let before = sha(&ck);
    let out = run.ok(&["train-diffusion", "--resume"]);
    assert!(out.contains("already"));
    assert_eq!(sha(&ck), before);
    let log = fs::read_to_string(run.out.join("diffusion/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6);
}

#[test]
fn sampling_is_deterministic_and_pairs_each_image_with_its_mask() {
    let run = Run::new(&tiny_config());
    run.ok(&["make-data"]);
    run.ok(&["train-diffusion"]);
    run.ok(&["sample", "--per-mask", "2", "--name", "a"]);
    run.ok(&["sample", "--per-mask", "2", "--name", "b"]);
    let (da, db) = (run.out.join("synthetic/a"), run.out.join("synthetic/b"));
    let ma = DatasetManifest::load(da.join("manifest.json")).unwrap();
    // 6 training masks × 2 seeds.
    assert_eq!(ma.cases.len(), 12);
    for c in &ma.cases {
        assert_eq!(sha(&da.join(&c.image)), sha(&db.join(&c.image)), "{}", c.case_id);
        let src = c.source_case.as_ref().unwrap();
        let mask = da.join(&c.mask).canonicalize().unwrap();
        assert_eq!(mask, run.out.join("data").join(format!("{src}.mask.pdv")).canonicalize().unwrap());
    }
    let seeds: std::collections::HashSet<_> = ma.cases.iter().map(|c| c.seed.unwrap()).collect();
    assert_eq!(seeds.len(), 12);
}

#[test]
fn sampling_masks_of_another_extent_is_an_error_naming_the_file() {
    let run = Run::new(&tiny_config());
    run.ok(&["make-data"]);
    run.ok(&["train-diffusion"]);
    let mut big = tiny_config();
    big.phantom.image_size = vec![48, 48];
    let other = Run::new(&big);
    other.ok(&["make-data"]);
    let manifest = other.out.join("data/manifest.json");
    let o = run.cmd(&["sample", "--masks", manifest.to_str().unwrap(), "--name", "x"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("case0000.mask.pdv") && err.contains("[48, 48]"), "{err}");
}

#[test]
fn targeted_arm_before_the_benchmark_is_a_prerequisite_error() {
    let run = Run::new(&tiny_config());
    run.ok(&["make-data"]);
    run.ok(&["train-diffusion"]);
    let o = run.cmd(&["run-experiment", "--arm", "targeted"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("run-experiment --arm real"));
}

#[test]
fn single_segmenter_commands() {
    let run = Run::new(&tiny_config());
    run.ok(&["make-data"]);
    run.ok(&["train-seg", "--arm", "real", "--run", "1"]);
    let out = run.ok(&["evaluate", "--arm", "real", "--run", "1"]);
    assert!(out.contains("over 4 cases"), "{out}");
    assert_eq!(run.cmd(&["evaluate", "--arm", "real", "--run", "9"]).status.code(), Some(2));
}

fn three_arms(cfg: &ExperimentConfig) -> (Run, Vec<String>) {
    let run = Run::new(cfg);
    run.ok(&["make-data"]);
    run.ok(&["train-diffusion"]);
    for arm in ["real", "synthetic", "targeted"] {
        run.ok(&["run-experiment", "--arm", arm]);
    }
    let reports = ["real", "synthetic", "targeted"]
        .iter()
        .map(|a| fs::read_to_string(run.out.join(format!("reports/{a}.json"))).unwrap())
        .collect();
    (run, reports)
}

#[test]
fn three_arm_pipeline_is_reproducible_from_one_root_seed() {
    let cfg = tiny_config();
    let (run, first) = three_arms(&cfg);
    let (_, second) = three_arms(&cfg);
    assert_eq!(first, second);

    let real: UtilityReport = serde_json::from_str(&first[0]).unwrap();
    assert_eq!(real.stats.runs.len(), 5);
    assert_eq!(real.config_hash, cfg.hash());
    assert_eq!(real.cases.len(), 8);
    let targeted: UtilityReport = serde_json::from_str(&first[2]).unwrap();
    assert_eq!(targeted.training_cases.len(), 6 + 2 * real.worst_val.len());

    let table = run.ok(&["report"]);
    for label in ["Real", "Synthetic", "Real+Synthetic"] {
        assert!(table.contains(label), "{table}");
    }

    // A different root seed changes the data and therefore the reports.
    let mut other = cfg.clone();
    other.root_seed += 1;
    let (_, third) = three_arms(&other);
    assert_ne!(first[0], third[0]);
}
