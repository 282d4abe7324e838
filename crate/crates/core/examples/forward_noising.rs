//! Push one phantom through the forward chain and compare the closed-form
//! marginal with step-by-step noising.
//!
//! `cargo run --example forward_noising -- [out_dir]`

use std::path::PathBuf;

use patchdiff::diffusion::{forward_marginal, forward_step};
use patchdiff::phantom::io::save_pgm;
use patchdiff::phantom::{generate_phantom, PhantomSpec};
use patchdiff::rng;
use patchdiff::schedule::ScheduleConfig;
use patchdiff::Volume;

fn moments(v: &Volume) -> (f64, f64) {
    let n = v.data().len() as f64;
    let m = v.data().iter().map(|&x| x as f64).sum::<f64>() / n;
    (m, (v.data().iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / n).sqrt())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/forward_noising".into()));
    std::fs::create_dir_all(&out)?;
    let schedule = ScheduleConfig::scaled(100).build()?;
    let x0 = generate_phantom(&PhantomSpec::default(), 7)?.image;
    let (m0, s0) = moments(&x0);
    println!("x0: mean {m0:.3} std {s0:.3}");

    let mut r = rng::seeded(1);
    let mut chained = x0.clone();
    let mut t_done = 0;
    println!("{:>4} {:>24} {:>24}", "t", "marginal mean/std", "chained mean/std");
    for t in [1, 5, 10, 25, 50, 100] {
        while t_done < t {
            t_done += 1;
            chained = forward_step(&chained, t_done, &schedule, &mut r)?;
        }
        let eps = Volume::new(1, x0.extents().to_vec(), rng::normal_vec(&mut r, x0.spatial_len()))?;
        let direct = forward_marginal(&x0, t, &eps, &schedule)?;
        let (a, b) = (moments(&direct), moments(&chained));
        println!("{t:>4} {:>11.3} / {:<10.3} {:>11.3} / {:<10.3}", a.0, a.1, b.0, b.1);
        save_pgm(&direct, -1.5, 1.5, out.join(format!("t{t:03}.pgm")))?;
    }
    println!("wrote noisy images to {}", out.display());
    Ok(())
}
