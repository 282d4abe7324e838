use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffusion::{training_loss, Denoiser};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, Tensor};
use crate::patching::{full_image_sample, random_patch, CoordinateGrid, PatchConfig};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionTrainConfig {
    /// Total optimizer steps; resuming continues up to this count.
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

/// How training examples are cut from each image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CropMode {
    Patch(PatchConfig),
    /// Whole images, no cropping step.
    FullImage,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainingCase<'a> {
    pub image: &'a Volume,
    pub mask: &'a Volume,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f32,
    pub wall_ms: f64,
    pub activation_elements: usize,
}

/// Build the batch for optimizer step `step`. The stream depends only on
/// `(seed, step)`, so a resumed run sees exactly the batches an
/// uninterrupted run would.
pub(crate) fn step_batch(
    cases: &[TrainingCase<'_>],
    grid: &CoordinateGrid,
    mode: CropMode,
    schedule: &NoiseSchedule,
    cfg: &DiffusionTrainConfig,
    step: u64,
) -> Result<Vec<crate::patching::PatchSample>> {
    let mut r = rng::stream(cfg.seed, "diffusion-step", step);
    (0..cfg.batch_size)
        .map(|_| {
            let case = &cases[r.random_range(0..cases.len())];
            let t = r.random_range(1..=schedule.timesteps());
            match mode {
                CropMode::Patch(p) => random_patch(case.image, case.mask, grid, &p, t, schedule, &mut r),
                CropMode::FullImage => full_image_sample(case.image, case.mask, grid, t, schedule, &mut r),
            }
        })
        .collect()
}

/// Continue training `model` from its current optimizer step up to
/// `cfg.steps`, calling `on_step` after every update. On divergence the
/// model keeps the parameters of the last successful step.
pub fn train_diffusion(
    model: &mut Denoiser,
    cases: &[TrainingCase<'_>],
    mode: CropMode,
    schedule: &NoiseSchedule,
    cfg: &DiffusionTrainConfig,
    mut on_step: impl FnMut(&StepRecord, &Denoiser) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    let first = cases.first().ok_or_else(|| Error::InvalidArgument("no training images".into()))?;
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let extents = first.image.extents().to_vec();
    if let Some(bad) = cases.iter().find(|c| c.image.extents() != extents.as_slice() || !c.image.same_spatial(c.mask)) {
        return Err(Error::shape(
            "train_diffusion",
            format!("image {:?} / mask {:?} differ from {:?}", bad.image.extents(), bad.mask.extents(), extents),
        ));
    }
    let grid = CoordinateGrid::new(&extents)?;
    let mut records = Vec::new();
    while model.params.step() < cfg.steps {
        let step = model.params.step();
        let started = Instant::now();
        let batch = step_batch(cases, &grid, mode, schedule, cfg, step)?;
        let out = training_loss(model, &batch, schedule).map_err(|e| match e {
            Error::NonFinite(_) => Error::Divergence { iteration: step, loss: f32::NAN },
            other => other,
        })?;
        let grads = out.tape.backward(out.loss_var, &Tensor::scalar(1.0))?;
        model.params.adam_step(&grads, &cfg.adam).map_err(|e| match e {
            Error::NonFinite(_) => Error::Divergence { iteration: step, loss: out.loss },
            other => other,
        })?;
        let rec = StepRecord {
            step: step + 1,
            loss: out.loss,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            activation_elements: out.tape.activation_elements(),
        };
        on_step(&rec, model)?;
        records.push(rec);
    }
    Ok(records)
}
