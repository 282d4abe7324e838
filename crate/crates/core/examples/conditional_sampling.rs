//! Sample whole 32×32 images from the denoiser saved by `patch_training`,
//! conditioned on masks of unseen phantoms, and write them next to the
//! real images as PGMs.
//!
//! `cargo run --release --example conditional_sampling -- [model_dir]`

use std::path::PathBuf;

use patchdiff::cli::load_checkpoint;
use patchdiff::diffusion::{sample_batch, Clip, Denoiser, DenoiserConfig};
use patchdiff::patching::{full_condition, CHANNEL_CONTRACT};
use patchdiff::phantom::io::save_pgm;
use patchdiff::phantom::{generate_phantom, PhantomSpec};
use patchdiff::rng::derive_seed;
use patchdiff::schedule::ScheduleConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/patch_training".into()));
    let cfg: DenoiserConfig = match std::fs::read_to_string(dir.join("denoiser.json")) {
        Ok(text) => serde_json::from_str(&text)?,
        Err(_) => {
            eprintln!("no model in {}; run `cargo run --release --example patch_training` first", dir.display());
            std::process::exit(1);
        }
    };
    let ck = load_checkpoint(dir.join("denoiser.pdck"), CHANNEL_CONTRACT)?;
    let model = Denoiser::from_params(cfg, ck.params, &ck.contract)?;
    let schedule = ScheduleConfig::scaled(100).build()?;

    let spec = PhantomSpec { image_size: vec![32, 32], nodule_radius_range: [2.0, 3.0], ..PhantomSpec::default() };
    let held_out =
        (0..4).map(|i| generate_phantom(&spec, derive_seed(99, "case", i))).collect::<Result<Vec<_>, _>>()?;
    let conditions = held_out.iter().map(|p| full_condition(&p.mask)).collect::<Result<Vec<_>, _>>()?;
    let seeds: Vec<u64> = (0..held_out.len() as u64).collect();
    let samples = sample_batch(&model, &conditions.iter().collect::<Vec<_>>(), &seeds, &schedule, Clip::default())?;

    for (i, (s, p)) in samples.iter().zip(&held_out).enumerate() {
        let (mut inside, mut outside) = ((0.0, 0), (0.0, 0));
        for (&v, &m) in s.data().iter().zip(p.mask.data()) {
            let acc = if m > 0.5 { &mut inside } else { &mut outside };
            acc.0 += v as f64;
            acc.1 += 1;
        }
        println!(
            "sample {i}: mean inside mask {:+.3}, outside {:+.3}",
            inside.0 / inside.1.max(1) as f64,
            outside.0 / outside.1 as f64
        );
        save_pgm(s, -1.0, 1.0, dir.join(format!("sample{i}.pgm")))?;
        save_pgm(&p.image, -1.0, 1.0, dir.join(format!("real{i}.pgm")))?;
        save_pgm(&p.mask, 0.0, 1.0, dir.join(format!("mask{i}.pgm")))?;
    }
    println!("wrote samples to {}", dir.display());
    Ok(())
}
