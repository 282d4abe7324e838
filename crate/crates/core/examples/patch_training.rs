//! Train a small mask- and coordinate-conditioned denoiser on random 16×16
//! crops of 32×32 phantoms, then save it for `conditional_sampling`.
//!
//! `cargo run --release --example patch_training -- [out_dir] [steps]`

use std::path::PathBuf;

use patchdiff::cli::{save_checkpoint, Checkpoint};
use patchdiff::diffusion::{train_diffusion, CropMode, Denoiser, DenoiserConfig, DiffusionTrainConfig, TrainingCase};
use patchdiff::nn::AdamConfig;
use patchdiff::patching::{PatchConfig, CHANNEL_CONTRACT};
use patchdiff::phantom::{generate_phantom, PhantomSpec};
use patchdiff::rng::derive_seed;
use patchdiff::schedule::ScheduleConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/patch_training".into()));
    let steps: u64 = args.next().map_or(800, |s| s.parse().expect("steps must be an integer"));
    std::fs::create_dir_all(&out)?;

    let spec = PhantomSpec { image_size: vec![32, 32], nodule_radius_range: [2.0, 3.0], ..PhantomSpec::default() };
    let phantoms =
        (0..48).map(|i| generate_phantom(&spec, derive_seed(5, "case", i))).collect::<Result<Vec<_>, _>>()?;
    let cases: Vec<TrainingCase> = phantoms.iter().map(|p| TrainingCase { image: &p.image, mask: &p.mask }).collect();

    let schedule = ScheduleConfig::scaled(100).build()?;
    let cfg = DenoiserConfig {
        base_width: 16,
        channel_mults: vec![1, 2],
        max_groups: 8,
        group_norm: false,
        time_embedding: 32,
    };
    let mut model = Denoiser::new(cfg.clone(), 1)?;
    let mode = CropMode::Patch(PatchConfig { size: 16, ..PatchConfig::default() });
    let tc =
        DiffusionTrainConfig { steps, batch_size: 8, seed: 2, adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() } };

    let mut window = Vec::new();
    let log = train_diffusion(&mut model, &cases, mode, &schedule, &tc, |rec, _| {
        window.push(rec.loss);
        if rec.step % 100 == 0 {
            println!("step {:>5}: mean loss {:.4}", rec.step, window.iter().sum::<f32>() / window.len() as f32);
            window.clear();
        }
        Ok(())
    })?;
    if let Some(last) = log.last() {
        println!("activation elements per step: {}", last.activation_elements);
    }

    let ck = Checkpoint { config_hash: [0; 32], contract: CHANNEL_CONTRACT.into(), params: model.params };
    save_checkpoint(&ck, out.join("denoiser.pdck"))?;
    std::fs::write(out.join("denoiser.json"), serde_json::to_string_pretty(&cfg)?)?;
    println!("saved {}", out.join("denoiser.pdck").display());
    Ok(())
}
