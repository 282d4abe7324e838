use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Component, Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, SEGMENTER_CONTRACT};
use super::config::ExperimentConfig;
use crate::diffusion::{
    sample_batch, train_diffusion, Clip, CropMode, Denoiser, DiffusionTrainConfig, StepRecord, TrainingCase,
};
use crate::error::{Error, Result};
use crate::patching::{full_condition, CHANNEL_CONTRACT};
use crate::phantom::{
    build_dataset, load_case, load_volume, save_volume, CaseEntry, DatasetManifest, LoadedCase, Split,
};
use crate::rng;
use crate::segeval::{
    run_utility_experiment_logged, score_cases, summary_table, train_segmenter_logged, Arm, ArmInputs, DiceResult,
    SegCase, Segmenter, UtilityReport,
};

/// One `(mask, output, seed)` triple of a sampling run. Paths are relative
/// to the sampling manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingEntry {
    pub mask: PathBuf,
    pub output: PathBuf,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingManifest {
    pub config_hash: String,
    /// Parameter digest of the denoiser that produced the images.
    pub denoiser_digest: String,
    pub entries: Vec<SamplingEntry>,
}

/// What to condition a sampling run on.
#[derive(Debug, Clone)]
pub struct SampleRequest {
    /// Dataset manifest supplying the masks.
    pub masks: PathBuf,
    pub split: Split,
    /// Restrict to these case ids, in this order; `None` takes the whole split.
    pub cases: Option<Vec<String>>,
    pub per_mask: usize,
    /// Root of the per-image seeds.
    pub seed: u64,
    /// Output subdirectory under `synthetic/`.
    pub name: String,
}

/// Per-case Dice results of one trained segmenter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub config_hash: String,
    pub arm: Arm,
    pub seed: u64,
    pub mean_test_dsc: f64,
    pub test: Vec<DiceResult>,
    pub val: Vec<DiceResult>,
}

/// Artifact layout under the output root, plus the command implementations.
///
/// ```text
/// data/manifest.json, data/*.pdv          make-data
/// diffusion/denoiser.pdck, train_log.jsonl train-diffusion
/// synthetic/<name>/{manifest,sampling}.json, *.pdv   sample
/// segmenters/<arm>-<seed>.pdck            train-seg
/// eval/<arm>-<seed>.json                  evaluate
/// reports/<arm>.json, reports/summary.txt run-experiment, report
/// ```
#[derive(Debug, Clone)]
pub struct Workspace {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub out: PathBuf,
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("artifact serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: path.to_path_buf(), source: e })
}

/// `target` expressed relative to the directory `base`.
fn relative_path(target: &Path, base: &Path) -> Result<PathBuf> {
    let t = fs::canonicalize(target).map_err(|e| Error::io(target, e))?;
    let b = fs::canonicalize(base).map_err(|e| Error::io(base, e))?;
    let tc: Vec<Component> = t.components().collect();
    let bc: Vec<Component> = b.components().collect();
    let common = tc.iter().zip(&bc).take_while(|(x, y)| x == y).count();
    let mut out = PathBuf::new();
    for _ in common..bc.len() {
        out.push("..");
    }
    for c in &tc[common..] {
        out.push(c);
    }
    Ok(out)
}

impl Workspace {
    /// `out` overrides `config.paths.out`.
    pub fn new(config: ExperimentConfig, out: Option<PathBuf>) -> Result<Self> {
        config.validate()?;
        let out = out.unwrap_or_else(|| config.paths.out.clone());
        Ok(Self { config_hash: config.hash(), config, out })
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    pub fn data_manifest_path(&self) -> PathBuf {
        self.data_dir().join("manifest.json")
    }

    pub fn denoiser_path(&self) -> PathBuf {
        self.out.join("diffusion").join("denoiser.pdck")
    }

    pub fn diffusion_log_path(&self) -> PathBuf {
        self.out.join("diffusion").join("train_log.jsonl")
    }

    pub fn synthetic_dir(&self, name: &str) -> PathBuf {
        self.out.join("synthetic").join(name)
    }

    pub fn segmenter_path(&self, arm: Arm, seed: u64) -> PathBuf {
        self.out.join("segmenters").join(format!("{}-{seed}.pdck", arm.key()))
    }

    pub fn evaluation_path(&self, arm: Arm, seed: u64) -> PathBuf {
        self.out.join("eval").join(format!("{}-{seed}.json", arm.key()))
    }

    pub fn report_path(&self, arm: Arm) -> PathBuf {
        self.out.join("reports").join(format!("{}.json", arm.key()))
    }

    pub fn summary_path(&self) -> PathBuf {
        self.out.join("reports").join("summary.txt")
    }

    fn hash_bytes(&self) -> [u8; 32] {
        self.config.hash_bytes()
    }

    fn cmd(&self, sub: &str) -> String {
        format!("patchdiff --out {} {sub}", self.out.display())
    }

    pub fn make_data(&self) -> Result<DatasetManifest> {
        let c = &self.config;
        info!("generating {} phantoms into {}", c.splits.total(), self.data_dir().display());
        build_dataset(&c.phantom, c.splits, c.root_seed, self.data_dir(), &self.config_hash)
    }

    pub fn data_manifest(&self) -> Result<DatasetManifest> {
        let p = self.data_manifest_path();
        if !p.exists() {
            return Err(Error::MissingPrerequisite {
                what: format!("dataset manifest {}", p.display()),
                hint: self.cmd("make-data"),
            });
        }
        let m = DatasetManifest::load(&p)?;
        if m.config_hash != self.config_hash {
            return Err(Error::InvalidArgument(format!(
                "{} was produced by config {} but the current config hashes to {}; rerun make-data",
                p.display(),
                m.config_hash,
                self.config_hash
            )));
        }
        Ok(m)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<LoadedCase>> {
        self.data_manifest()?.load_split(&self.data_dir(), split)
    }

    fn fresh_denoiser(&self) -> Result<Denoiser> {
        Denoiser::new(self.config.denoiser.clone(), rng::derive_seed(self.config.root_seed, "denoiser-init", 0))
    }

    fn denoiser_checkpoint(&self, model: &Denoiser) -> Checkpoint {
        Checkpoint { config_hash: self.hash_bytes(), contract: model.contract().into(), params: model.params.clone() }
    }

    pub fn load_denoiser(&self) -> Result<Denoiser> {
        let p = self.denoiser_path();
        if !p.exists() {
            return Err(Error::MissingPrerequisite {
                what: format!("denoiser checkpoint {}", p.display()),
                hint: self.cmd("train-diffusion"),
            });
        }
        let ck = load_checkpoint(&p, CHANNEL_CONTRACT)?;
        self.check_hash(&ck, &p)?;
        Denoiser::from_params(self.config.denoiser.clone(), ck.params, &ck.contract)
    }

    fn check_hash(&self, ck: &Checkpoint, path: &Path) -> Result<()> {
        if ck.config_hash != self.hash_bytes() {
            return Err(Error::InvalidArgument(format!(
                "{} was produced by config {}, not the current {}",
                path.display(),
                hex::encode(ck.config_hash),
                self.config_hash
            )));
        }
        Ok(())
    }

    /// Patch-wise training on the real training split. With `resume`, an
    /// existing checkpoint is continued to the configured step count.
    /// On divergence the last good parameters are written before the error
    /// is returned.
    pub fn train_diffusion(&self, resume: bool) -> Result<Vec<StepRecord>> {
        let train = self.load_split(Split::Train)?;
        let ck_path = self.denoiser_path();
        let log_path = self.diffusion_log_path();
        let mut model = if resume && ck_path.exists() {
            let m = self.load_denoiser()?;
            info!("resuming denoiser from step {}", m.params.step());
            m
        } else {
            if let Some(dir) = log_path.parent() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            fs::write(&log_path, "").map_err(|e| Error::io(&log_path, e))?;
            self.fresh_denoiser()?
        };
        let dt = &self.config.diffusion_training;
        let cfg = DiffusionTrainConfig {
            steps: dt.steps,
            batch_size: dt.batch_size,
            seed: rng::derive_seed(self.config.root_seed, "diffusion-train", 0),
            adam: dt.adam,
        };
        let schedule = self.config.schedule.build()?;
        let cases: Vec<TrainingCase<'_>> =
            train.iter().map(|c| TrainingCase { image: &c.image, mask: &c.mask }).collect();
        let file = OpenOptions::new().append(true).create(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let mut log = BufWriter::new(file);
        let every = dt.checkpoint_every;
        let result =
            train_diffusion(&mut model, &cases, CropMode::Patch(self.config.patch), &schedule, &cfg, |rec, m| {
                let line = serde_json::to_string(rec).expect("record serializes");
                writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
                if rec.step % every == 0 {
                    log.flush().map_err(|e| Error::io(&log_path, e))?;
                    save_checkpoint(&self.denoiser_checkpoint(m), &ck_path)?;
                    info!("step {} loss {:.5}", rec.step, rec.loss);
                }
                Ok(())
            });
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        save_checkpoint(&self.denoiser_checkpoint(&model), &ck_path)?;
        result
    }

    pub fn read_diffusion_log(&self) -> Result<Vec<StepRecord>> {
        let p = self.diffusion_log_path();
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Json { path: p.clone(), source: e }))
            .collect()
    }

    /// The sampling request the synthetic arm uses.
    pub fn synthetic_request(&self) -> SampleRequest {
        SampleRequest {
            masks: self.data_manifest_path(),
            split: Split::Train,
            cases: None,
            per_mask: self.config.sampling.per_mask,
            seed: rng::derive_seed(self.config.root_seed, "sampling", 0),
            name: "train".into(),
        }
    }

    /// The sampling request the targeted arm uses for the selected
    /// validation cases.
    pub fn targeted_request(&self, worst_val: &[String]) -> SampleRequest {
        SampleRequest {
            masks: self.data_manifest_path(),
            split: Split::Val,
            cases: Some(worst_val.to_vec()),
            per_mask: self.config.sampling.targeted_per_mask,
            seed: rng::derive_seed(self.config.root_seed, "sampling", 0),
            name: "targeted".into(),
        }
    }

    /// Generate one whole image per (mask, seed) pair with the trained
    /// denoiser and write a dataset manifest pairing each image with the
    /// exact mask file that conditioned it.
    pub fn sample(&self, req: &SampleRequest) -> Result<DatasetManifest> {
        let model = self.load_denoiser()?;
        let schedule = self.config.schedule.build()?;
        let src = DatasetManifest::load(&req.masks)?;
        let src_root = req.masks.parent().unwrap_or(Path::new(".")).to_path_buf();
        let entries: Vec<&CaseEntry> = match &req.cases {
            None => src.split(req.split).collect(),
            Some(ids) => ids
                .iter()
                .map(|id| {
                    src.cases.iter().find(|c| &c.case_id == id && c.split == req.split).ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "case {id:?} not in the {:?} split of {}",
                            req.split,
                            req.masks.display()
                        ))
                    })
                })
                .collect::<Result<_>>()?,
        };
        let dir = self.synthetic_dir(&req.name);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let m = model.spatial_multiple();
        let mut jobs = Vec::new();
        for e in &entries {
            let mask_path = src_root.join(&e.mask);
            let mask = load_volume(&mask_path)?;
            if mask.extents() != self.config.phantom.image_size.as_slice() || mask.extents().iter().any(|x| x % m != 0)
            {
                return Err(Error::shape(
                    "sample",
                    format!(
                        "mask {} has extents {:?}; the denoiser expects {:?}",
                        mask_path.display(),
                        mask.extents(),
                        self.config.phantom.image_size
                    ),
                ));
            }
            let cond = full_condition(&mask)?;
            for k in 0..req.per_mask {
                let seed = rng::derive_seed(req.seed, &e.case_id, k as u64);
                jobs.push((*e, mask_path.clone(), cond.clone(), k, seed));
            }
        }
        info!("sampling {} images into {}", jobs.len(), dir.display());
        let mut cases = Vec::with_capacity(jobs.len());
        let mut sampling = Vec::with_capacity(jobs.len());
        for chunk in jobs.chunks(self.config.sampling.batch) {
            let conds: Vec<&_> = chunk.iter().map(|j| &j.2).collect();
            let seeds: Vec<u64> = chunk.iter().map(|j| j.4).collect();
            let images = sample_batch(&model, &conds, &seeds, &schedule, Clip::default())?;
            for ((e, mask_path, _, k, seed), image) in chunk.iter().zip(images) {
                let case_id = format!("syn-{}-{k}", e.case_id);
                let output = PathBuf::from(format!("{case_id}.image.pdv"));
                save_volume(&image, dir.join(&output))?;
                let mask = relative_path(mask_path, &dir)?;
                sampling.push(SamplingEntry { mask: mask.clone(), output: output.clone(), seed: *seed });
                cases.push(CaseEntry {
                    case_id,
                    image: output,
                    mask,
                    split: Split::Train,
                    source_case: Some(e.case_id.clone()),
                    seed: Some(*seed),
                });
            }
            info!("  {}/{} images", cases.len(), jobs.len());
        }
        let manifest = DatasetManifest { config_hash: self.config_hash.clone(), root_seed: req.seed, cases };
        manifest.save(dir.join("manifest.json"))?;
        let sm = SamplingManifest {
            config_hash: self.config_hash.clone(),
            denoiser_digest: model.params.digest(),
            entries: sampling,
        };
        write_json(&sm, &dir.join("sampling.json"))?;
        Ok(manifest)
    }

    /// Reuse a synthetic set when it was produced by the current config and
    /// denoiser from the same source cases; regenerate otherwise.
    fn ensure_synthetic(&self, req: &SampleRequest) -> Result<DatasetManifest> {
        let dir = self.synthetic_dir(&req.name);
        let (mp, sp) = (dir.join("manifest.json"), dir.join("sampling.json"));
        if mp.exists() && sp.exists() {
            let m = DatasetManifest::load(&mp)?;
            let s: SamplingManifest = read_json(&sp)?;
            let digest = self.load_denoiser()?.params.digest();
            let sources: Vec<String> =
                m.cases.iter().filter_map(|c| c.source_case.clone()).step_by(req.per_mask.max(1)).collect();
            let wanted_ok = match &req.cases {
                Some(ids) => &sources == ids,
                None => true,
            };
            if s.config_hash == self.config_hash && s.denoiser_digest == digest && m.root_seed == req.seed && wanted_ok
            {
                return Ok(m);
            }
        }
        self.sample(req)
    }

    /// Training cases for `arm`, generating synthetic sets if needed.
    pub fn arm_training_set(&self, arm: Arm) -> Result<Vec<LoadedCase>> {
        let load_synth = |req: &SampleRequest| -> Result<Vec<LoadedCase>> {
            let m = self.ensure_synthetic(req)?;
            let dir = self.synthetic_dir(&req.name);
            m.cases.iter().map(|c| load_case(&dir, c)).collect()
        };
        match arm {
            Arm::Real => self.load_split(Split::Train),
            Arm::Synthetic => load_synth(&self.synthetic_request()),
            Arm::Targeted => {
                let real = self.load_report(Arm::Real)?;
                let mut cases = self.load_split(Split::Train)?;
                if !real.worst_val.is_empty() {
                    cases.extend(load_synth(&self.targeted_request(&real.worst_val))?);
                }
                Ok(cases)
            }
        }
    }

    pub fn train_seg(&self, arm: Arm, seed: u64) -> Result<Segmenter> {
        let train = self.arm_training_set(arm)?;
        let cases: Vec<SegCase<'_>> = train.iter().map(|c| SegCase { image: &c.image, mask: &c.mask }).collect();
        let seg = train_segmenter_logged(&cases, seed, &self.config.segmenter, |it, loss| {
            if (it + 1) % 50 == 0 {
                info!("segmenter {} seed {seed}: iteration {} loss {loss:.4}", arm.key(), it + 1);
            }
        })?;
        let ck = Checkpoint {
            config_hash: self.hash_bytes(),
            contract: SEGMENTER_CONTRACT.into(),
            params: seg.params.clone(),
        };
        save_checkpoint(&ck, self.segmenter_path(arm, seed))?;
        Ok(seg)
    }

    pub fn load_segmenter(&self, arm: Arm, seed: u64) -> Result<Segmenter> {
        let p = self.segmenter_path(arm, seed);
        if !p.exists() {
            return Err(Error::MissingPrerequisite {
                what: format!("segmenter checkpoint {}", p.display()),
                hint: self.cmd(&format!("train-seg --arm {}", arm.key())),
            });
        }
        let ck = load_checkpoint(&p, SEGMENTER_CONTRACT)?;
        self.check_hash(&ck, &p)?;
        Segmenter::from_params(&self.config.segmenter, &self.config.phantom.image_size, ck.params)
    }

    pub fn evaluate(&self, arm: Arm, seed: u64) -> Result<Evaluation> {
        let seg = self.load_segmenter(arm, seed)?;
        let test = score_cases(&seg, &self.load_split(Split::Test)?)?;
        let val = score_cases(&seg, &self.load_split(Split::Val)?)?;
        let mean_test_dsc = test.iter().map(|r| r.dsc).sum::<f64>() / test.len() as f64;
        let ev = Evaluation { config_hash: self.config_hash.clone(), arm, seed, mean_test_dsc, test, val };
        write_json(&ev, &self.evaluation_path(arm, seed))?;
        Ok(ev)
    }

    pub fn load_report(&self, arm: Arm) -> Result<UtilityReport> {
        let p = self.report_path(arm);
        if !p.exists() {
            return Err(Error::MissingPrerequisite {
                what: format!("{} report {}", arm.key(), p.display()),
                hint: self.cmd(&format!("run-experiment --arm {}", arm.key())),
            });
        }
        let r: UtilityReport = read_json(&p)?;
        if r.config_hash != self.config_hash {
            return Err(Error::InvalidArgument(format!("{} was produced by a different config", p.display())));
        }
        Ok(r)
    }

    pub fn run_experiment(&self, arm: Arm) -> Result<UtilityReport> {
        let baseline = match arm {
            Arm::Real => None,
            _ => Some(self.load_report(Arm::Real)?),
        };
        let train = self.arm_training_set(arm)?;
        let val = self.load_split(Split::Val)?;
        let test = self.load_split(Split::Test)?;
        let val_ids: BTreeSet<&str> = val.iter().map(|c| c.case_id.as_str()).collect();
        info!(
            "{} arm: {} training cases ({} derived from validation masks)",
            arm.key(),
            train.len(),
            train.iter().filter(|c| c.source_case.as_deref().is_some_and(|s| val_ids.contains(s))).count()
        );
        let inputs = ArmInputs { train: &train, val: &val, test: &test };
        let report = run_utility_experiment_logged(
            arm,
            &inputs,
            &self.config.run_seeds,
            &self.config.segmenter,
            baseline.as_ref(),
            &self.config_hash,
            |i, run| info!("{} run {} (seed {}): mean test DSC {:.4}", arm.key(), i + 1, run.seed, run.mean_test_dsc),
        )?;
        write_json(&report, &self.report_path(arm))?;
        self.report()?;
        Ok(report)
    }

    /// Summary table over every arm that has a report.
    pub fn report(&self) -> Result<String> {
        let real = self.load_report(Arm::Real)?;
        let mut reports = vec![real];
        for arm in [Arm::Synthetic, Arm::Targeted] {
            if self.report_path(arm).exists() {
                reports.push(self.load_report(arm)?);
            }
        }
        let mut text = summary_table(&reports);
        text.push_str(&format!("config {}\n", self.config_hash));
        let p = self.summary_path();
        fs::write(&p, &text).map_err(|e| Error::io(&p, e))?;
        Ok(text)
    }

    /// make-data, train-diffusion and all three arms in order.
    pub fn run_pipeline(&self) -> Result<Vec<UtilityReport>> {
        self.make_data()?;
        self.train_diffusion(false)?;
        Arm::ALL.into_iter().map(|arm| self.run_experiment(arm)).collect()
    }
}
