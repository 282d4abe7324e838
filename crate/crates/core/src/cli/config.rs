use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::DenoiserConfig;
use crate::error::{ConfigIssue, Error, Result};
use crate::nn::AdamConfig;
use crate::patching::PatchConfig;
use crate::phantom::{PhantomSpec, SplitCounts};
use crate::schedule::ScheduleConfig;
use crate::segeval::{SegmenterConfig, RUNS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionTraining {
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Write a checkpoint every this many steps (and always at the end).
    pub checkpoint_every: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    /// Synthetic images per training-split mask in the synthetic arm.
    pub per_mask: usize,
    /// Synthetic images per selected validation mask in the targeted arm.
    pub targeted_per_mask: usize,
    /// Chains denoised together.
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Root for every artifact; `--out` overrides it.
    pub out: PathBuf,
}

/// Everything a pipeline run depends on. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub root_seed: u64,
    pub phantom: PhantomSpec,
    pub splits: SplitCounts,
    pub schedule: ScheduleConfig,
    pub patch: PatchConfig,
    pub denoiser: DenoiserConfig,
    pub diffusion_training: DiffusionTraining,
    pub sampling: SamplingConfig,
    pub segmenter: SegmenterConfig,
    pub run_seeds: [u64; RUNS],
    pub paths: Paths,
}

impl ExperimentConfig {
    /// Reference-sized setup: T = 1000 and a width-32 denoiser.
    pub fn full() -> Self {
        Self {
            root_seed: 2024,
            phantom: PhantomSpec::default(),
            splits: SplitCounts::default(),
            schedule: ScheduleConfig::default(),
            patch: PatchConfig::default(),
            denoiser: DenoiserConfig::default(),
            diffusion_training: DiffusionTraining {
                steps: 20_000,
                batch_size: 8,
                adam: AdamConfig { lr: 2e-4, ..AdamConfig::default() },
                checkpoint_every: 500,
            },
            sampling: SamplingConfig { per_mask: 1, targeted_per_mask: 4, batch: 16 },
            segmenter: SegmenterConfig { iterations: 1500, ..SegmenterConfig::default() },
            run_seeds: [11, 12, 13, 14, 15],
            paths: Paths { out: PathBuf::from("runs/full") },
        }
    }

    /// Single-core desk budget: same data, T = 100 with rescaled betas,
    /// smaller denoiser and shorter training.
    pub fn fast() -> Self {
        Self {
            schedule: ScheduleConfig::scaled(100),
            denoiser: DenoiserConfig {
                base_width: 16,
                channel_mults: vec![1, 2, 4],
                max_groups: 8,
                group_norm: false,
                time_embedding: 64,
            },
            diffusion_training: DiffusionTraining {
                steps: 1500,
                batch_size: 8,
                adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
                checkpoint_every: 250,
            },
            segmenter: SegmenterConfig { iterations: 300, batch_size: 4, ..SegmenterConfig::default() },
            paths: Paths { out: PathBuf::from("runs/fast") },
            ..Self::full()
        }
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Json { path: path.to_path_buf(), source: e })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 over the canonical JSON with `paths` blanked, so moving the
    /// output directory does not change provenance.
    pub fn hash_bytes(&self) -> [u8; 32] {
        let mut c = self.clone();
        c.paths.out = PathBuf::new();
        Sha256::digest(serde_json::to_vec(&c).expect("config serializes")).into()
    }

    pub fn hash(&self) -> String {
        hex::encode(self.hash_bytes())
    }

    pub fn issues(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let mut bad = |key: &str, message: String| out.push(ConfigIssue { key: key.to_string(), message });
        for (k, m) in self.phantom.issues() {
            bad(&format!("phantom.{k}"), m);
        }
        for (k, n) in [("train", self.splits.train), ("val", self.splits.val), ("test", self.splits.test)] {
            if n == 0 {
                bad(&format!("splits.{k}"), "must be at least 1".into());
            }
        }
        if let Err(e) = self.schedule.build() {
            bad("schedule", e.to_string());
        }
        let dn = self.denoiser.unet_config();
        if let Err(e) = dn.validate() {
            bad("denoiser", e.to_string());
        }
        let sg = self.segmenter.unet_config();
        if let Err(e) = sg.validate() {
            bad("segmenter", e.to_string());
        }
        let extents = &self.phantom.image_size;
        if self.patch.size < 2 || extents.iter().any(|&e| self.patch.size > e) {
            bad("patch.size", format!("{} must lie in 2..=min image extent {extents:?}", self.patch.size));
        }
        if dn.validate().is_ok() && !self.patch.size.is_multiple_of(dn.spatial_multiple()) {
            bad(
                "patch.size",
                format!("{} is not divisible by the denoiser multiple {}", self.patch.size, dn.spatial_multiple()),
            );
        }
        for (key, cfg) in [("denoiser", &dn), ("segmenter", &sg)] {
            if cfg.validate().is_ok() && extents.iter().any(|e| e % cfg.spatial_multiple() != 0) {
                bad(key, format!("image extents {extents:?} are not divisible by {}", cfg.spatial_multiple()));
            }
        }
        if !(0.0..=1.0).contains(&self.patch.oversample_prob) {
            bad("patch.oversample_prob", "must lie in [0, 1]".into());
        }
        let dt = &self.diffusion_training;
        if dt.batch_size == 0 {
            bad("diffusion_training.batch_size", "must be positive".into());
        }
        if dt.checkpoint_every == 0 {
            bad("diffusion_training.checkpoint_every", "must be positive".into());
        }
        for (key, a) in [("diffusion_training.adam", &dt.adam), ("segmenter.adam", &self.segmenter.adam)] {
            if !(a.lr > 0.0 && a.lr.is_finite()) {
                bad(&format!("{key}.lr"), format!("must be a positive finite number, got {}", a.lr));
            }
            if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
                bad(key, "betas must lie in [0, 1)".into());
            }
        }
        if self.segmenter.batch_size == 0 {
            bad("segmenter.batch_size", "must be positive".into());
        }
        if self.sampling.per_mask == 0 {
            bad("sampling.per_mask", "must be positive".into());
        }
        if self.sampling.batch == 0 {
            bad("sampling.batch", "must be positive".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }
}
