//! Generate a few procedural lung-slice phantoms and write each image and
//! nodule mask as a PGM.
//!
//! `cargo run --example phantom_gallery -- [out_dir] [count]`

use std::path::PathBuf;

use patchdiff::phantom::io::save_pgm;
use patchdiff::phantom::{generate_phantom, PhantomSpec};
use patchdiff::rng::derive_seed;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/phantom_gallery".into()));
    let count: u64 = args.next().map_or(6, |s| s.parse().expect("count must be an integer"));
    std::fs::create_dir_all(&out)?;

    let spec = PhantomSpec::default();
    for i in 0..count {
        let p = generate_phantom(&spec, derive_seed(2024, "case", i))?;
        let area = p.mask.data().iter().filter(|&&v| v > 0.5).count();
        let radii: Vec<String> = p.meta.nodules.iter().map(|n| format!("{:.1}", n.radius)).collect();
        println!(
            "case {i}: {} nodules (radii {}), {} vessels, mask covers {area} px",
            p.meta.nodules.len(),
            radii.join(", "),
            p.meta.vessels.len()
        );
        save_pgm(&p.image, -1.0, 1.0, out.join(format!("case{i}.image.pgm")))?;
        save_pgm(&p.mask, 0.0, 1.0, out.join(format!("case{i}.mask.pgm")))?;
    }
    println!("wrote {} PGM files to {}", 2 * count, out.display());
    Ok(())
}
