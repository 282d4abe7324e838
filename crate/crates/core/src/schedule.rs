//! Variance schedule of the forward noising chain.
//!
//! `alpha[t]` is the per-step signal scale (`1 - beta[t]`), `alpha_bar[t]`
//! the running product `alpha[1] * … * alpha[t]`. Timesteps are 1-based in
//! the public API.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { timesteps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleConfig {
    /// The default ramp compressed to `timesteps` steps: betas scaled by
    /// `1000 / timesteps` so the terminal signal level stays comparable.
    pub fn scaled(timesteps: usize) -> Self {
        let s = 1000.0 / timesteps as f64;
        Self { timesteps, beta_start: 1e-4 * s, beta_end: 0.02 * s }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linearly interpolated from `beta_start` (t = 1) to `beta_end`
    /// (t = T).
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one timestep".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..timesteps)
            .map(|i| {
                if timesteps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0f64, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alphas, alpha_bars })
    }

    pub fn timesteps(&self) -> usize {
        self.alphas.len()
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::TimestepOutOfRange { t, max: self.timesteps() });
        }
        Ok(())
    }

    /// `(alpha_t, alpha_bar_t)`.
    pub fn query(&self, t: usize) -> Result<(f64, f64)> {
        self.check(t)?;
        Ok((self.alphas[t - 1], self.alpha_bars[t - 1]))
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.query(t).map(|(a, _)| a)
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.query(t).map(|(_, ab)| ab)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step() {
        let s = NoiseSchedule::linear(1, 0.1, 0.1).unwrap();
        assert!((s.alphas()[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bars()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn default_endpoints() {
        let s = ScheduleConfig::default().build().unwrap();
        assert!((s.alpha(1).unwrap() - 0.9999).abs() < 1e-12);
        assert!((s.alpha(1000).unwrap() - 0.98).abs() < 1e-12);
        assert!(s.alpha_bar(1000).unwrap() < 0.01);
    }

    #[test]
    fn query_bounds() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.1).unwrap();
        assert!(matches!(s.query(0), Err(Error::TimestepOutOfRange { t: 0, max: 10 })));
        assert!(s.query(11).is_err());
        let (a1, ab1) = s.query(1).unwrap();
        assert_eq!(a1, ab1);
        let min = s.alpha_bars().iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(s.alpha_bar(10).unwrap(), min);
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(NoiseSchedule::linear(10, 0.0, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.2, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn scaled_schedule_is_noise_dominated_at_t() {
        let s = ScheduleConfig::scaled(100).build().unwrap();
        assert!(s.alpha_bar(100).unwrap() < 1e-3);
    }
}
