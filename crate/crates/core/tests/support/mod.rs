#![allow(dead_code)]

pub mod reference_unet;

use std::path::Path;

use patchdiff::cli::ExperimentConfig;
use patchdiff::diffusion::DenoiserConfig;
use patchdiff::phantom::{PhantomSpec, SplitCounts};
use patchdiff::segeval::SegmenterConfig;

/// A pipeline small enough to run every stage in a few seconds.
pub fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::fast();
    c.phantom = PhantomSpec { image_size: vec![32, 32], nodule_radius_range: [2.0, 3.0], ..PhantomSpec::default() };
    c.splits = SplitCounts { train: 6, val: 4, test: 4 };
    c.patch.size = 16;
    c.denoiser = DenoiserConfig {
        base_width: 8,
        channel_mults: vec![1, 2],
        max_groups: 4,
        group_norm: false,
        time_embedding: 16,
    };
    c.diffusion_training.steps = 6;
    c.diffusion_training.batch_size = 2;
    c.diffusion_training.checkpoint_every = 2;
    c.sampling.per_mask = 1;
    c.sampling.targeted_per_mask = 2;
    c.sampling.batch = 4;
    c.segmenter = SegmenterConfig {
        base_width: 4,
        channel_mults: vec![1, 2],
        max_groups: 2,
        iterations: 4,
        batch_size: 2,
        ..SegmenterConfig::default()
    };
    c
}

pub fn write_config(cfg: &ExperimentConfig, path: &Path) {
    std::fs::write(path, cfg.to_json()).unwrap();
}
