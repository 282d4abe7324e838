use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamConfig, ParamStore, Tape, Tensor, UNet, UNetConfig};
use crate::rng;
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmenterConfig {
    pub base_width: usize,
    pub channel_mults: Vec<usize>,
    pub max_groups: usize,
    pub iterations: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            base_width: 8,
            channel_mults: vec![1, 2, 4],
            max_groups: 4,
            iterations: 400,
            batch_size: 8,
            adam: AdamConfig { lr: 2e-3, ..AdamConfig::default() },
        }
    }
}

impl SegmenterConfig {
    pub fn unet_config(&self) -> UNetConfig {
        UNetConfig {
            in_channels: 1,
            out_channels: 1,
            base_width: self.base_width,
            channel_mults: self.channel_mults.clone(),
            max_groups: self.max_groups,
            group_norm: true,
            time_embedding: None,
        }
    }
}

/// A trained (or freshly initialized) mini U-Net producing one logit per
/// pixel.
#[derive(Debug, Clone)]
pub struct Segmenter {
    net: UNet,
    /// Extents seen during training; prediction refuses anything else.
    extents: Vec<usize>,
    pub params: ParamStore,
}

/// Image/mask pair used for segmentation training.
#[derive(Debug, Clone, Copy)]
pub struct SegCase<'a> {
    pub image: &'a Volume,
    pub mask: &'a Volume,
}

impl Segmenter {
    pub fn new(cfg: &SegmenterConfig, extents: &[usize], seed: u64) -> Result<Self> {
        let net = UNet::new(cfg.unet_config())?;
        let params = net.init_params(seed)?;
        let s = Self { net, extents: extents.to_vec(), params };
        s.check_extents(extents)?;
        Ok(s)
    }

    pub fn from_params(cfg: &SegmenterConfig, extents: &[usize], params: ParamStore) -> Result<Self> {
        let mut s = Self::new(cfg, extents, 0)?;
        for (name, t) in s.params.iter() {
            if params.get(name).map(|p| p.shape()) != Some(t.shape()) {
                return Err(Error::shape("segmenter", format!("stored parameters do not fit at {name:?}")));
            }
        }
        if params.len() != s.params.len() {
            return Err(Error::shape("segmenter", "stored parameters contain extra entries"));
        }
        s.params = params;
        Ok(s)
    }

    pub fn extents(&self) -> &[usize] {
        &self.extents
    }

    fn check_extents(&self, extents: &[usize]) -> Result<()> {
        let m = self.net.config().spatial_multiple();
        if extents != self.extents.as_slice() {
            return Err(Error::shape(
                "segmenter",
                format!("image extents {extents:?} differ from the configured {:?}", self.extents),
            ));
        }
        if extents.len() != 2 || extents.iter().any(|e| e % m != 0) {
            return Err(Error::shape("segmenter", format!("extents {extents:?} must be 2D and divisible by {m}")));
        }
        Ok(())
    }

    /// Per-pixel logits for a batch of single-channel images.
    pub fn logits(&self, images: &[&Volume]) -> Result<Vec<Volume>> {
        for im in images {
            if im.channels() != 1 {
                return Err(Error::shape("segmenter", format!("expected 1 channel, got {}", im.channels())));
            }
            self.check_extents(im.extents())?;
        }
        let mut tape = Tape::new();
        let x = tape.input(Tensor::stack_volumes(images)?);
        let y = self.net.forward(&mut tape, &self.params, x, None)?;
        tape.value(y).unstack_volumes()
    }

    /// One optimizer step on `batch`; returns the loss before the update.
    fn train_step(&mut self, batch: &[SegCase<'_>], adam: &AdamConfig, iteration: u64) -> Result<f32> {
        let images: Vec<&Volume> = batch.iter().map(|c| c.image).collect();
        let masks: Vec<&Volume> = batch.iter().map(|c| c.mask).collect();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::stack_volumes(&images)?);
        let target = tape.input(Tensor::stack_volumes(&masks)?);
        let logits = self.net.forward(&mut tape, &self.params, x, None)?;
        let loss_var = tape.segmentation_loss(logits, target)?;
        let loss = tape.value(loss_var).item();
        if !loss.is_finite() {
            return Err(Error::Divergence { iteration, loss });
        }
        let grads = tape.backward(loss_var, &Tensor::scalar(1.0))?;
        self.params.adam_step(&grads, adam).map_err(|e| match e {
            Error::NonFinite(_) => Error::Divergence { iteration, loss },
            other => other,
        })?;
        Ok(loss)
    }
}

/// Train a segmenter from scratch for `cfg.iterations` steps. Batches are
/// drawn from a stream keyed by `(seed, iteration)`.
pub fn train_segmenter(cases: &[SegCase<'_>], seed: u64, cfg: &SegmenterConfig) -> Result<Segmenter> {
    train_segmenter_logged(cases, seed, cfg, |_, _| {})
}

/// As [`train_segmenter`], reporting `(iteration, loss)` after every step.
pub fn train_segmenter_logged(
    cases: &[SegCase<'_>],
    seed: u64,
    cfg: &SegmenterConfig,
    mut on_step: impl FnMut(u64, f32),
) -> Result<Segmenter> {
    let first = cases.first().ok_or_else(|| Error::InvalidArgument("empty segmentation training set".into()))?;
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("segmenter batch_size must be positive".into()));
    }
    for c in cases {
        if !c.image.same_spatial(c.mask) || !c.mask.is_binary() {
            return Err(Error::InvalidArgument("segmentation cases need binary masks matching their images".into()));
        }
    }
    let mut seg = Segmenter::new(cfg, first.image.extents(), rng::derive_seed(seed, "seg-init", 0))?;
    for it in 0..cfg.iterations {
        let mut r = rng::stream(seed, "seg-step", it);
        let batch: Vec<SegCase<'_>> = (0..cfg.batch_size).map(|_| cases[r.random_range(0..cases.len())]).collect();
        let loss = seg.train_step(&batch, &cfg.adam, it)?;
        on_step(it, loss);
    }
    Ok(seg)
}

/// Threshold `sigmoid(logits)`; a pixel is foreground when its probability
/// exceeds `threshold`.
pub fn threshold_logits(logits: &Volume, threshold: f64) -> Volume {
    logits.map(|z| if crate::nn::ops::sigmoid(z) as f64 > threshold { 1.0 } else { 0.0 })
}

pub fn predict_mask(seg: &Segmenter, image: &Volume, threshold: f64) -> Result<Volume> {
    Ok(threshold_logits(&seg.logits(&[image])?.remove(0), threshold))
}

/// Binary masks for many images, evaluated in fixed-size chunks.
pub fn predict_masks(seg: &Segmenter, images: &[&Volume], threshold: f64) -> Result<Vec<Volume>> {
    const CHUNK: usize = 16;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(CHUNK) {
        out.extend(seg.logits(chunk)?.iter().map(|l| threshold_logits(l, threshold)));
    }
    Ok(out)
}
