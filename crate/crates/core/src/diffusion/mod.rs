//! Forward noising, the noise-prediction objective, the reverse transition
//! and whole-image ancestral sampling.

mod denoiser;
mod train;

pub use denoiser::{Denoiser, DenoiserConfig, DiffusionConfig, NoisePredictor};
pub use train::{train_diffusion, CropMode, DiffusionTrainConfig, StepRecord, TrainingCase};

use crate::error::{Error, Result};
use crate::nn::{Tape, Tensor, Var};
use crate::patching::PatchSample;
use crate::rng::{self, Rng};
use crate::schedule::NoiseSchedule;
use crate::volume::Volume;

/// One step of the forward chain: `sqrt(alpha_t) x + sqrt(1 - alpha_t) z`.
pub fn forward_step(x_prev: &Volume, t: usize, schedule: &NoiseSchedule, rng: &mut Rng) -> Result<Volume> {
    let alpha = schedule.alpha(t)?;
    let z = rng::normal_vec(rng, x_prev.data().len());
    Ok(scale_add(x_prev, alpha.sqrt(), &z, (1.0 - alpha).sqrt()))
}

/// Closed-form marginal `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_marginal(x0: &Volume, t: usize, eps: &Volume, schedule: &NoiseSchedule) -> Result<Volume> {
    if x0.channels() != eps.channels() || !x0.same_spatial(eps) {
        return Err(Error::shape(
            "forward_marginal",
            format!("x0 {}x{:?} vs eps {}x{:?}", x0.channels(), x0.extents(), eps.channels(), eps.extents()),
        ));
    }
    let ab = schedule.alpha_bar(t)?;
    Ok(scale_add(x0, ab.sqrt(), eps.data(), (1.0 - ab).sqrt()))
}

fn scale_add(x: &Volume, a: f64, z: &[f32], b: f64) -> Volume {
    let data = x.data().iter().zip(z).map(|(&x, &z)| (a * x as f64 + b * z as f64) as f32).collect();
    Volume::new(x.channels(), x.extents().to_vec(), data).expect("shape preserved")
}

/// A differentiable loss recorded on its tape.
pub struct LossOutput {
    pub loss: f32,
    pub tape: Tape,
    pub loss_var: Var,
}

/// Mean squared error between the drawn noise and the model's prediction,
/// averaged over batch and pixels.
pub fn training_loss<M: NoisePredictor + ?Sized>(
    model: &M,
    batch: &[PatchSample],
    schedule: &NoiseSchedule,
) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let conditions = batch.iter().map(PatchSample::condition).collect::<Result<Vec<_>>>()?;
    let mut tape = Tape::new();
    let noisy = tape.input(Tensor::stack_volumes(&batch.iter().map(|s| &s.noisy_patch).collect::<Vec<_>>())?);
    let cond = tape.input(Tensor::stack_volumes(&conditions.iter().collect::<Vec<_>>())?);
    let target = tape.input(Tensor::stack_volumes(&batch.iter().map(|s| &s.target_noise).collect::<Vec<_>>())?);
    let ts: Vec<usize> = batch.iter().map(|s| s.t).collect();
    let pred = model.predict(&mut tape, noisy, cond, &ts, schedule.timesteps())?;
    let loss_var = tape.mse_loss(pred, target)?;
    let loss = tape.value(loss_var).item();
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    Ok(LossOutput { loss, tape, loss_var })
}

/// The posterior mean from a noise estimate:
/// `(x_t - (1 - alpha_t) / sqrt(1 - alpha_bar_t) * eps) / sqrt(alpha_t)`.
pub fn posterior_mean(x_t: &[f32], eps: &[f32], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f32>> {
    let (alpha, alpha_bar) = schedule.query(t)?;
    let coef = (1.0 - alpha) / (1.0 - alpha_bar).sqrt();
    let inv = 1.0 / alpha.sqrt();
    Ok(x_t.iter().zip(eps).map(|(&x, &e)| (inv * (x as f64 - coef * e as f64)) as f32).collect())
}

fn predict_noise<M: NoisePredictor + ?Sized>(
    model: &M,
    xs: &[&Volume],
    conds: &[&Volume],
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::stack_volumes(xs)?);
    let c = tape.input(Tensor::stack_volumes(conds)?);
    let ts = vec![t; xs.len()];
    let out = model.predict(&mut tape, x, c, &ts, schedule.timesteps())?;
    Ok(tape.value(out).clone())
}

/// Reverse transitions for a batch of independent chains at the same `t`.
/// Chain `i` draws its noise from `rngs[i]`; results do not depend on the
/// batch composition.
pub fn reverse_step_batch<M: NoisePredictor + ?Sized>(
    model: &M,
    xs: &[Volume],
    t: usize,
    conditions: &[&Volume],
    schedule: &NoiseSchedule,
    rngs: &mut [Rng],
) -> Result<Vec<Volume>> {
    schedule.check(t)?;
    if xs.len() != conditions.len() || xs.len() != rngs.len() {
        return Err(Error::InvalidArgument("chains, conditions and rng streams must align".into()));
    }
    for (x, c) in xs.iter().zip(conditions) {
        if !x.same_spatial(c) {
            return Err(Error::shape(
                "reverse_step",
                format!("x_t extents {:?} vs condition extents {:?}", x.extents(), c.extents()),
            ));
        }
    }
    let eps = predict_noise(model, &xs.iter().collect::<Vec<_>>(), conditions, t, schedule)?;
    let per = eps.numel() / xs.len();
    let sigma = schedule.beta(t)?.sqrt();
    xs.iter()
        .zip(rngs.iter_mut())
        .enumerate()
        .map(|(i, (x, rng))| {
            let mut mean = posterior_mean(x.data(), &eps.data()[i * per..(i + 1) * per], t, schedule)?;
            if t > 1 {
                let z = rng::normal_vec(rng, mean.len());
                for (m, z) in mean.iter_mut().zip(z) {
                    *m = (*m as f64 + sigma * z as f64) as f32;
                }
            }
            if mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("reverse step output at t={t}")));
            }
            Volume::new(x.channels(), x.extents().to_vec(), mean)
        })
        .collect()
}

/// One reverse transition `x_t -> x_{t-1}` with variance `beta_t`, noise-free
/// at `t = 1`.
pub fn reverse_step<M: NoisePredictor + ?Sized>(
    model: &M,
    x_t: &Volume,
    t: usize,
    condition: &Volume,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Volume> {
    let mut rngs = [rng.clone()];
    let out = reverse_step_batch(model, std::slice::from_ref(x_t), t, &[condition], schedule, &mut rngs)?;
    *rng = rngs[0].clone();
    Ok(out.into_iter().next().expect("one chain"))
}

/// Intensity range applied to finished samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clip {
    pub lo: f32,
    pub hi: f32,
}

impl Default for Clip {
    fn default() -> Self {
        Self { lo: -1.0, hi: 1.0 }
    }
}

/// Run chains for several full-extent conditions together; chain `i` is
/// seeded with `seeds[i]` and is bit-identical to `sample` with that seed.
pub fn sample_batch<M: NoisePredictor + ?Sized>(
    model: &M,
    conditions: &[&Volume],
    seeds: &[u64],
    schedule: &NoiseSchedule,
    clip: Clip,
) -> Result<Vec<Volume>> {
    if conditions.len() != seeds.len() {
        return Err(Error::InvalidArgument("one seed per condition required".into()));
    }
    let mut rngs: Vec<Rng> = seeds.iter().map(|&s| rng::seeded(s)).collect();
    let mut xs: Vec<Volume> = conditions
        .iter()
        .zip(rngs.iter_mut())
        .map(|(c, r)| Volume::new(1, c.extents().to_vec(), rng::normal_vec(r, c.spatial_len())))
        .collect::<Result<_>>()?;
    for t in (1..=schedule.timesteps()).rev() {
        xs = reverse_step_batch(model, &xs, t, conditions, schedule, &mut rngs)?;
    }
    Ok(xs.into_iter().map(|x| x.map(|v| v.clamp(clip.lo, clip.hi))).collect())
}

/// Draw `x_T ~ N(0, I)` at the condition's full extent and denoise it to
/// `x_0`. The condition must cover the whole image: full mask plus full
/// coordinate grid.
pub fn sample<M: NoisePredictor + ?Sized>(
    model: &M,
    condition: &Volume,
    schedule: &NoiseSchedule,
    seed: u64,
    clip: Clip,
) -> Result<Volume> {
    Ok(sample_batch(model, &[condition], &[seed], schedule, clip)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleConfig;

    /// Predicts a fixed noise tensor regardless of input.
    struct Constant(Tensor);

    impl NoisePredictor for Constant {
        fn predict(&self, tape: &mut Tape, _: Var, _: Var, _: &[usize], _: usize) -> Result<Var> {
            Ok(tape.input(self.0.clone()))
        }
    }

    fn ramp(n: usize) -> Volume {
        Volume::new(1, vec![n, n], (0..n * n).map(|i| (i as f32 / (n * n) as f32) * 2.0 - 1.0).collect()).unwrap()
    }

    #[test]
    fn eps_zero_is_pure_scaling() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        let x0 = ramp(4);
        let y = forward_marginal(&x0, 5, &Volume::zeros(1, &[4, 4]), &s).unwrap();
        let k = s.alpha_bar(5).unwrap().sqrt();
        for (a, b) in y.data().iter().zip(x0.data()) {
            assert!((*a as f64 - k * *b as f64).abs() < 1e-6);
        }
        assert!(forward_marginal(&x0, 5, &Volume::zeros(1, &[4, 5]), &s).is_err());
        assert!(forward_step(&x0, 11, &s, &mut rng::seeded(0)).is_err());
    }

    #[test]
    fn true_noise_recovers_x0_at_t1() {
        let s = ScheduleConfig::default().build().unwrap();
        let x0 = ramp(16);
        let eps = Volume::new(1, vec![16, 16], rng::normal_vec(&mut rng::seeded(3), 256)).unwrap();
        let x1 = forward_marginal(&x0, 1, &eps, &s).unwrap();
        let model = Constant(Tensor::new(vec![1, 1, 16, 16], eps.data().to_vec()).unwrap());
        let cond = Volume::zeros(3, &[16, 16]);
        let out = reverse_step(&model, &x1, 1, &cond, &s, &mut rng::seeded(9)).unwrap();
        let dev = out.data().iter().zip(x0.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(dev < 1e-4, "max deviation {dev}");
    }

    #[test]
    fn final_step_is_deterministic_and_consumes_no_noise() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        let model = Constant(Tensor::full(&[1, 1, 4, 4], 0.2));
        let x = ramp(4);
        let cond = Volume::zeros(3, &[4, 4]);
        let mut r1 = rng::seeded(1);
        let a = reverse_step(&model, &x, 1, &cond, &s, &mut r1).unwrap();
        let b = reverse_step(&model, &x, 1, &cond, &s, &mut rng::seeded(2)).unwrap();
        assert_eq!(a, b);
        let mean = posterior_mean(x.data(), &[0.2; 16], 1, &s).unwrap();
        assert_eq!(a.data(), &mean[..]);
        assert_eq!(r1, rng::seeded(1));
    }

    #[test]
    fn condition_extent_must_match() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        let model = Constant(Tensor::zeros(&[1, 1, 4, 4]));
        let err = reverse_step(&model, &ramp(4), 2, &Volume::zeros(3, &[4, 8]), &s, &mut rng::seeded(0));
        assert!(err.is_err());
        assert!(reverse_step(&model, &ramp(4), 0, &Volume::zeros(3, &[4, 4]), &s, &mut rng::seeded(0)).is_err());
    }
}
