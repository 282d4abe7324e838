//! Print the linear variance schedule and its running products for the
//! reference (T = 1000) and desk-scale (T = 100) settings.

use patchdiff::schedule::ScheduleConfig;

fn main() -> patchdiff::Result<()> {
    for (name, cfg) in [("reference", ScheduleConfig::default()), ("scaled", ScheduleConfig::scaled(100))] {
        let s = cfg.build()?;
        let t_max = s.timesteps();
        println!("{name}: T = {t_max}, beta in [{:.0e}, {:.0e}]", cfg.beta_start, cfg.beta_end);
        println!("{:>6} {:>10} {:>10} {:>12} {:>10}", "t", "beta", "alpha", "alpha_bar", "snr");
        for t in [1, t_max / 10, t_max / 4, t_max / 2, 3 * t_max / 4, t_max] {
            let ab = s.alpha_bar(t)?;
            println!("{t:>6} {:>10.5} {:>10.5} {:>12.4e} {:>10.3e}", s.beta(t)?, s.alpha(t)?, ab, ab / (1.0 - ab));
        }
        println!();
    }
    Ok(())
}
