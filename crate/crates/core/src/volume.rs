//! Channel-first scalar grids.

use crate::error::{Error, Result};

/// A `channels × extents[0] × … × extents[D-1]` grid of `f32`, row-major with
/// the channel axis outermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    channels: usize,
    extents: Vec<usize>,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(channels: usize, extents: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || extents.is_empty() || extents.contains(&0) {
            return Err(Error::shape(
                "volume",
                format!("channels {channels} and extents {extents:?} must be non-zero"),
            ));
        }
        let expected = channels * extents.iter().product::<usize>();
        if data.len() != expected {
            return Err(Error::shape(
                "volume",
                format!("{channels}x{extents:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self { channels, extents, data })
    }

    pub fn zeros(channels: usize, extents: &[usize]) -> Self {
        Self::filled(channels, extents, 0.0)
    }

    pub fn filled(channels: usize, extents: &[usize], value: f32) -> Self {
        let n = channels * extents.iter().product::<usize>();
        Self { channels, extents: extents.to_vec(), data: vec![value; n] }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn extents(&self) -> &[usize] {
        &self.extents
    }

    pub fn dims(&self) -> usize {
        self.extents.len()
    }

    pub fn spatial_len(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.spatial_len();
        &self.data[c * n..(c + 1) * n]
    }

    /// Extract one channel as a single-channel volume.
    pub fn channel_volume(&self, c: usize) -> Volume {
        Volume { channels: 1, extents: self.extents.clone(), data: self.channel(c).to_vec() }
    }

    /// Whether every value is exactly 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn same_spatial(&self, other: &Volume) -> bool {
        self.extents == other.extents
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(parts: &[&Volume]) -> Result<Volume> {
        let first = parts.first().ok_or_else(|| Error::InvalidArgument("concat of zero volumes".into()))?;
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if p.extents != first.extents {
                return Err(Error::shape("concat_channels", format!("extents {:?} vs {:?}", p.extents, first.extents)));
            }
            channels += p.channels;
            data.extend_from_slice(&p.data);
        }
        Ok(Volume { channels, extents: first.extents.clone(), data })
    }

    /// Crop a hyper-rectangle `[origin, origin + size)` from every channel.
    pub fn crop(&self, origin: &[usize], size: &[usize]) -> Result<Volume> {
        let d = self.dims();
        if origin.len() != d || size.len() != d {
            return Err(Error::shape("crop", format!("origin/size rank must be {d}")));
        }
        for k in 0..d {
            if size[k] == 0 || origin[k] + size[k] > self.extents[k] {
                return Err(Error::shape(
                    "crop",
                    format!("axis {k}: [{}, {}) outside extent {}", origin[k], origin[k] + size[k], self.extents[k]),
                ));
            }
        }
        let out_spatial: usize = size.iter().product();
        let mut data = Vec::with_capacity(self.channels * out_spatial);
        let strides = strides(&self.extents);
        // Innermost axis is contiguous; copy it as a slice per outer index.
        let run = size[d - 1];
        let outer: usize = size[..d - 1].iter().product();
        for c in 0..self.channels {
            let base = c * self.spatial_len();
            for o in 0..outer {
                let mut rem = o;
                let mut off = base + origin[d - 1];
                for k in (0..d - 1).rev() {
                    off += (origin[k] + rem % size[k]) * strides[k];
                    rem /= size[k];
                }
                data.extend_from_slice(&self.data[off..off + run]);
            }
        }
        Ok(Volume { channels: self.channels, extents: size.to_vec(), data })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Volume {
        Volume {
            channels: self.channels,
            extents: self.extents.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

pub(crate) fn strides(extents: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; extents.len()];
    for k in (0..extents.len().saturating_sub(1)).rev() {
        s[k] = s[k + 1] * extents[k + 1];
    }
    s
}
