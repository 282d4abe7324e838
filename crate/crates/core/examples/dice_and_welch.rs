//! Score predicted masks with Dice, pick the cases below a baseline mean,
//! and compare two groups of per-run scores with Welch's t-test.

use patchdiff::segeval::stats::mean_std;
use patchdiff::segeval::{dice, select_worst, welch_test};
use patchdiff::Volume;

fn square(side: usize, y0: usize, x0: usize, k: usize) -> Volume {
    let mut v = Volume::zeros(1, &[side, side]);
    for y in y0..y0 + k {
        for x in x0..x0 + k {
            v.data_mut()[y * side + x] = 1.0;
        }
    }
    v
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let gt = square(16, 4, 4, 6);
    let preds = [("exact", square(16, 4, 4, 6)), ("shifted", square(16, 5, 6, 6)), ("small", square(16, 6, 6, 2))];
    let mut results = Vec::new();
    for (id, p) in &preds {
        let r = dice(id, p, &gt)?;
        println!("{id:>8}: tp {:>2} fp {:>2} fn {:>2} dsc {:.3}", r.tp, r.fp, r.fn_, r.dsc);
        results.push(r);
    }
    let mean = results.iter().map(|r| r.dsc).sum::<f64>() / results.len() as f64;
    println!("below the mean {mean:.3}: {:?}", select_worst(&results, mean));

    let runs_a = [0.49, 0.47, 0.52, 0.45, 0.53];
    let runs_b = [0.55, 0.51, 0.58, 0.52, 0.55];
    let ((ma, sa), (mb, sb)) = (mean_std(&runs_a), mean_std(&runs_b));
    let w = welch_test(ma, sa, runs_a.len(), mb, sb, runs_b.len())?;
    println!("a {ma:.4} ± {sa:.4}, b {mb:.4} ± {sb:.4}: t {:.3}, df {:.2}, p {:.4}", w.t, w.df, w.p);
    Ok(())
}
