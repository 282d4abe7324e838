//! The full three-arm protocol at toy scale: build a dataset, train the
//! patch-wise denoiser, and compare segmenters trained on real, synthetic,
//! and real plus targeted synthetic images.
//!
//! `cargo run --release --example utility_experiment -- [out_dir]`

use std::path::PathBuf;

use patchdiff::cli::{ExperimentConfig, Workspace};
use patchdiff::diffusion::DenoiserConfig;
use patchdiff::phantom::{PhantomSpec, SplitCounts};
use patchdiff::segeval::SegmenterConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/utility_experiment".into()));
    let mut cfg = ExperimentConfig::fast();
    cfg.phantom = PhantomSpec { image_size: vec![32, 32], nodule_radius_range: [2.0, 3.0], ..PhantomSpec::default() };
    cfg.splits = SplitCounts { train: 32, val: 12, test: 12 };
    cfg.patch.size = 16;
    cfg.denoiser = DenoiserConfig {
        base_width: 16,
        channel_mults: vec![1, 2],
        max_groups: 8,
        group_norm: false,
        time_embedding: 32,
    };
    cfg.diffusion_training.steps = 600;
    cfg.segmenter = SegmenterConfig { base_width: 8, channel_mults: vec![1, 2], iterations: 120, ..cfg.segmenter };

    let ws = Workspace::new(cfg, Some(out.clone()))?;
    ws.run_pipeline()?;
    println!("{}", ws.report()?);
    println!("reports in {}", out.join("reports").display());
    Ok(())
}
