//! Random patch crops with matching mask and coordinate crops, and the
//! condition channels fed to the noise predictor.
//!
//! The condition channel order is `[mask, coord_axis_0, …, coord_axis_{D-1}]`
//! and is recorded in checkpoints as [`CHANNEL_CONTRACT`].

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffusion::forward_marginal;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::schedule::NoiseSchedule;
use crate::volume::Volume;

/// Input channel layout of the 2D noise predictor.
pub const CHANNEL_CONTRACT: &str = "x_t,mask,coord0,coord1";

/// Per-axis normalized position channels over a full image extent.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateGrid {
    /// D channels; channel k holds `-1 + 2 i_k / (extent_k - 1)`.
    channels: Volume,
}

impl CoordinateGrid {
    pub fn new(extents: &[usize]) -> Result<Self> {
        if extents.is_empty() {
            return Err(Error::InvalidArgument("coordinate grid needs at least one axis".into()));
        }
        if let Some(k) = extents.iter().position(|&e| e < 2) {
            return Err(Error::InvalidArgument(format!(
                "axis {k} has extent {}; coordinate normalization needs >= 2",
                extents[k]
            )));
        }
        let d = extents.len();
        let spatial: usize = extents.iter().product();
        let strides = crate::volume::strides(extents);
        let mut data = Vec::with_capacity(d * spatial);
        for k in 0..d {
            let denom = (extents[k] - 1) as f64;
            data.extend((0..spatial).map(|flat| {
                let i = (flat / strides[k]) % extents[k];
                (-1.0 + 2.0 * i as f64 / denom) as f32
            }));
        }
        Ok(Self { channels: Volume::new(d, extents.to_vec(), data)? })
    }

    pub fn extents(&self) -> &[usize] {
        self.channels.extents()
    }

    pub fn as_volume(&self) -> &Volume {
        &self.channels
    }

    /// The grid value for axis `k` at index `i` along that axis.
    pub fn value_at(extent: usize, i: usize) -> f32 {
        (-1.0 + 2.0 * i as f64 / (extent - 1) as f64) as f32
    }

    pub fn crop(&self, origin: &[usize], size: &[usize]) -> Result<Volume> {
        self.channels.crop(origin, size)
    }
}

pub fn coordinate_grid(extents: &[usize]) -> Result<CoordinateGrid> {
    CoordinateGrid::new(extents)
}

/// One training example for the noise predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub noisy_patch: Volume,
    pub target_noise: Volume,
    pub mask_patch: Volume,
    pub coord_patch: Volume,
    pub t: usize,
    pub origin: Vec<usize>,
}

impl PatchSample {
    pub fn condition(&self) -> Result<Volume> {
        assemble_condition(&self.mask_patch, &self.coord_patch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchConfig {
    /// Edge length of the square training crop.
    pub size: usize,
    /// Bias crops towards windows that contain mask pixels.
    pub oversample_nodules: bool,
    /// Probability of a mask-containing crop when oversampling is on.
    pub oversample_prob: f64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self { size: 32, oversample_nodules: false, oversample_prob: 0.5 }
    }
}

/// `[mask, coord_0, …, coord_{D-1}]` stacked along the channel axis.
pub fn assemble_condition(mask_patch: &Volume, coord_patch: &Volume) -> Result<Volume> {
    if mask_patch.channels() != 1 {
        return Err(Error::shape("assemble_condition", format!("mask has {} channels", mask_patch.channels())));
    }
    if coord_patch.channels() != coord_patch.dims() {
        return Err(Error::shape(
            "assemble_condition",
            format!("coordinates have {} channels for {} axes", coord_patch.channels(), coord_patch.dims()),
        ));
    }
    if !mask_patch.same_spatial(coord_patch) {
        return Err(Error::shape(
            "assemble_condition",
            format!("mask extents {:?} vs coordinate extents {:?}", mask_patch.extents(), coord_patch.extents()),
        ));
    }
    Volume::concat_channels(&[mask_patch, coord_patch])
}

/// Condition for whole-image sampling: the full mask and the full grid.
pub fn full_condition(mask: &Volume) -> Result<Volume> {
    let grid = CoordinateGrid::new(mask.extents())?;
    assemble_condition(mask, grid.as_volume())
}

fn draw_origin(mask: &Volume, size: &[usize], cfg: Option<&PatchConfig>, rng: &mut Rng) -> Result<Vec<usize>> {
    let ext = mask.extents();
    let ranges: Vec<usize> = ext.iter().zip(size).map(|(&e, &p)| e - p + 1).collect();
    if let Some(cfg) = cfg.filter(|c| c.oversample_nodules) {
        if rng.random::<f64>() < cfg.oversample_prob {
            let candidates = origins_touching_mask(mask, size)?;
            if !candidates.is_empty() {
                return Ok(candidates[rng.random_range(0..candidates.len())].clone());
            }
        }
    }
    // A single valid origin is forced and consumes no randomness, which keeps
    // full-size crops stream-compatible with un-cropped training.
    Ok(ranges.iter().map(|&r| if r == 1 { 0 } else { rng.random_range(0..r) }).collect())
}

fn origins_touching_mask(mask: &Volume, size: &[usize]) -> Result<Vec<Vec<usize>>> {
    let ext = mask.extents();
    let [h, w] = match ext {
        &[h, w] => [h, w],
        _ => return Err(Error::InvalidArgument("nodule oversampling is implemented for 2D masks".into())),
    };
    let (ph, pw) = (size[0], size[1]);
    // 2D prefix sums of the mask for O(1) window occupancy.
    let mut sums = vec![0u32; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            let v = (mask.data()[y * w + x] > 0.5) as u32;
            sums[(y + 1) * (w + 1) + x + 1] =
                v + sums[y * (w + 1) + x + 1] + sums[(y + 1) * (w + 1) + x] - sums[y * (w + 1) + x];
        }
    }
    let mut out = Vec::new();
    for oy in 0..=h - ph {
        for ox in 0..=w - pw {
            let s = sums[(oy + ph) * (w + 1) + ox + pw] + sums[oy * (w + 1) + ox]
                - sums[oy * (w + 1) + ox + pw]
                - sums[(oy + ph) * (w + 1) + ox];
            if s > 0 {
                out.push(vec![oy, ox]);
            }
        }
    }
    Ok(out)
}

/// Crop image, mask and coordinates at one random origin, draw Gaussian noise
/// at patch shape and noise the image crop to timestep `t`.
#[allow(clippy::too_many_arguments)]
pub fn random_patch(
    image: &Volume,
    mask: &Volume,
    grid: &CoordinateGrid,
    patch: &PatchConfig,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<PatchSample> {
    if !image.same_spatial(mask) || image.extents() != grid.extents() {
        return Err(Error::shape(
            "random_patch",
            format!("image {:?}, mask {:?}, grid {:?}", image.extents(), mask.extents(), grid.extents()),
        ));
    }
    let size = vec![patch.size; image.dims()];
    if let Some(k) = (0..image.dims()).find(|&k| size[k] > image.extents()[k] || size[k] == 0) {
        return Err(Error::InvalidArgument(format!(
            "patch size {} does not fit axis {k} of extent {}",
            patch.size,
            image.extents()[k]
        )));
    }
    schedule.check(t)?;
    let origin = draw_origin(mask, &size, Some(patch), rng)?;
    let image_patch = image.crop(&origin, &size)?;
    let mask_patch = mask.crop(&origin, &size)?;
    let coord_patch = grid.crop(&origin, &size)?;
    let eps = Volume::new(1, size.clone(), rng::normal_vec(rng, image_patch.data().len()))?;
    let noisy_patch = forward_marginal(&image_patch, t, &eps, schedule)?;
    Ok(PatchSample { noisy_patch, target_noise: eps, mask_patch, coord_patch, t, origin })
}

/// Training example on the whole image with no cropping step. With a patch
/// size equal to the image extent, [`random_patch`] produces the same sample
/// from the same stream.
pub fn full_image_sample(
    image: &Volume,
    mask: &Volume,
    grid: &CoordinateGrid,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<PatchSample> {
    if !image.same_spatial(mask) || image.extents() != grid.extents() {
        return Err(Error::shape("full_image_sample", "image, mask and grid extents differ"));
    }
    schedule.check(t)?;
    let eps = Volume::new(1, image.extents().to_vec(), rng::normal_vec(rng, image.spatial_len()))?;
    let noisy_patch = forward_marginal(image, t, &eps, schedule)?;
    Ok(PatchSample {
        noisy_patch,
        target_noise: eps,
        mask_patch: mask.clone(),
        coord_patch: grid.as_volume().clone(),
        t,
        origin: vec![0; image.dims()],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_center() {
        let g = CoordinateGrid::new(&[2, 5]).unwrap();
        assert_eq!(g.as_volume().channel(0), &[-1.0, -1.0, -1.0, -1.0, -1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let row: Vec<f32> = g.as_volume().channel(1)[..5].to_vec();
        assert_eq!(row, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert!(CoordinateGrid::new(&[1, 4]).is_err());
    }

    #[test]
    fn sixty_four_wide_index_sixteen() {
        // -1 + 32/63
        let expected = -1.0 + 32.0 / 63.0;
        let g = CoordinateGrid::new(&[64, 64]).unwrap();
        let v = g.as_volume().channel(1)[16];
        assert!((v as f64 - expected).abs() < 1e-6);
        assert!((v + 0.4921).abs() < 1e-4);
        assert_eq!(g.as_volume().channel(0)[16 * 64 + 3], v);
    }

    #[test]
    fn condition_has_one_plus_d_channels() {
        let mask = Volume::zeros(1, &[8, 8]);
        let c = full_condition(&mask).unwrap();
        assert_eq!(c.channels(), 3);
        assert!(c.channel(0).iter().all(|&v| v == 0.0));
        let grid = CoordinateGrid::new(&[8, 8]).unwrap();
        assert_eq!(c.channel(1), grid.as_volume().channel(0));
        assert!(assemble_condition(&Volume::zeros(1, &[8, 7]), grid.as_volume()).is_err());
    }

    #[test]
    fn full_size_patch_forces_origin() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        let img = Volume::filled(1, &[8, 8], 0.3);
        let mask = Volume::zeros(1, &[8, 8]);
        let grid = CoordinateGrid::new(&[8, 8]).unwrap();
        let cfg = PatchConfig { size: 8, ..PatchConfig::default() };
        let p = random_patch(&img, &mask, &grid, &cfg, 3, &s, &mut rng::seeded(1)).unwrap();
        assert_eq!(p.origin, vec![0, 0]);
        let q = full_image_sample(&img, &mask, &grid, 3, &s, &mut rng::seeded(1)).unwrap();
        assert_eq!(p, q);
        let big = PatchConfig { size: 9, ..cfg };
        assert!(random_patch(&img, &mask, &grid, &big, 3, &s, &mut rng::seeded(1)).is_err());
    }

    #[test]
    fn oversampling_finds_the_nodule() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        let img = Volume::zeros(1, &[32, 32]);
        let mut mask = Volume::zeros(1, &[32, 32]);
        mask.data_mut()[30 * 32 + 30] = 1.0;
        let grid = CoordinateGrid::new(&[32, 32]).unwrap();
        let cfg = PatchConfig { size: 8, oversample_nodules: true, oversample_prob: 1.0 };
        let mut r = rng::seeded(4);
        for _ in 0..50 {
            let p = random_patch(&img, &mask, &grid, &cfg, 1, &s, &mut r).unwrap();
            assert!(p.mask_patch.data().contains(&1.0));
        }
    }
}
