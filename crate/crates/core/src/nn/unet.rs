//! Small U-Net shared by the noise predictor and the segmenter.
//!
//! Encoder: a stem convolution, then one residual block per level with a
//! stride-2 convolution between levels. Decoder: nearest-neighbour
//! upsampling, concatenation with the matching encoder output, and a
//! residual block. When a time-embedding width is configured, every residual
//! block adds a per-channel projection of the embedding between its two
//! convolutions.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::embed::time_embedding_batch;
use crate::nn::params::ParamStore;
use crate::nn::tape::{Tape, Var};
use crate::nn::tensor::Tensor;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub channel_mults: Vec<usize>,
    /// Upper bound on group-norm groups; each layer uses the largest divisor
    /// of its channel count not exceeding this.
    pub max_groups: usize,
    /// Without normalization every layer is spatially local, so a network
    /// trained on crops behaves identically on the full image.
    pub group_norm: bool,
    /// Sinusoidal embedding width; `None` builds an unconditional network.
    pub time_embedding: Option<usize>,
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    /// Spatial extents must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.levels() - 1)
    }

    fn width(&self, level: usize) -> usize {
        self.base_width * self.channel_mults[level]
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.base_width == 0 {
            return Err(Error::InvalidArgument("U-Net channel counts must be positive".into()));
        }
        if self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return Err(Error::InvalidArgument("channel_mults must be non-empty and positive".into()));
        }
        if self.max_groups == 0 {
            return Err(Error::InvalidArgument("max_groups must be positive".into()));
        }
        if let Some(d) = self.time_embedding {
            if d == 0 || d % 2 != 0 {
                return Err(Error::InvalidArgument(format!("time embedding width must be even, got {d}")));
            }
        }
        Ok(())
    }
}

fn groups_for(channels: usize, max_groups: usize) -> usize {
    (1..=max_groups.min(channels)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

struct ResBlockSpec {
    prefix: String,
    cin: usize,
    cout: usize,
}

#[derive(Debug, Clone)]
pub struct UNet {
    cfg: UNetConfig,
}

impl UNet {
    pub fn new(cfg: UNetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    fn blocks(&self) -> Vec<ResBlockSpec> {
        let l = self.cfg.levels();
        let mut out = Vec::new();
        let mut prev = self.cfg.width(0);
        for i in 0..l {
            out.push(ResBlockSpec { prefix: format!("enc{i}"), cin: prev, cout: self.cfg.width(i) });
            prev = self.cfg.width(i);
        }
        for i in (0..l.saturating_sub(1)).rev() {
            out.push(ResBlockSpec {
                prefix: format!("dec{i}"),
                cin: self.cfg.width(i + 1) + self.cfg.width(i),
                cout: self.cfg.width(i),
            });
        }
        out
    }

    /// Fresh parameters: PyTorch-style uniform(±1/sqrt(fan_in)) weights,
    /// zero biases, unit group-norm scales.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = rng::stream(seed, "unet-init", 0);
        let mut store = ParamStore::new();
        let mut uniform = |shape: &[usize], fan_in: usize| {
            let bound = 1.0 / (fan_in as f32).sqrt();
            let n: usize = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect())
        };
        let c0 = self.cfg.width(0);
        store.insert("stem.w", uniform(&[c0, self.cfg.in_channels, 3, 3], self.cfg.in_channels * 9)?)?;
        store.insert("stem.b", Tensor::zeros(&[c0]))?;
        if let Some(d) = self.cfg.time_embedding {
            store.insert("time.l1.w", uniform(&[d, d], d)?)?;
            store.insert("time.l1.b", Tensor::zeros(&[d]))?;
            store.insert("time.l2.w", uniform(&[d, d], d)?)?;
            store.insert("time.l2.b", Tensor::zeros(&[d]))?;
        }
        for blk in self.blocks() {
            let p = &blk.prefix;
            if self.cfg.group_norm {
                store.insert(format!("{p}.norm1.g"), Tensor::full(&[blk.cin], 1.0))?;
                store.insert(format!("{p}.norm1.b"), Tensor::zeros(&[blk.cin]))?;
                store.insert(format!("{p}.norm2.g"), Tensor::full(&[blk.cout], 1.0))?;
                store.insert(format!("{p}.norm2.b"), Tensor::zeros(&[blk.cout]))?;
            }
            store.insert(format!("{p}.conv1.w"), uniform(&[blk.cout, blk.cin, 3, 3], blk.cin * 9)?)?;
            store.insert(format!("{p}.conv1.b"), Tensor::zeros(&[blk.cout]))?;
            if let Some(d) = self.cfg.time_embedding {
                store.insert(format!("{p}.time.w"), uniform(&[blk.cout, d], d)?)?;
                store.insert(format!("{p}.time.b"), Tensor::zeros(&[blk.cout]))?;
            }
            store.insert(format!("{p}.conv2.w"), uniform(&[blk.cout, blk.cout, 3, 3], blk.cout * 9)?)?;
            store.insert(format!("{p}.conv2.b"), Tensor::zeros(&[blk.cout]))?;
            if blk.cin != blk.cout {
                store.insert(format!("{p}.skip.w"), uniform(&[blk.cout, blk.cin, 1, 1], blk.cin)?)?;
                store.insert(format!("{p}.skip.b"), Tensor::zeros(&[blk.cout]))?;
            }
        }
        for i in 0..self.cfg.levels() - 1 {
            let c = self.cfg.width(i);
            store.insert(format!("down{i}.w"), uniform(&[c, c, 3, 3], c * 9)?)?;
            store.insert(format!("down{i}.b"), Tensor::zeros(&[c]))?;
        }
        if self.cfg.group_norm {
            store.insert("head.norm.g", Tensor::full(&[c0], 1.0))?;
            store.insert("head.norm.b", Tensor::zeros(&[c0]))?;
        }
        store.insert("head.w", uniform(&[self.cfg.out_channels, c0, 3, 3], c0 * 9)?)?;
        store.insert("head.b", Tensor::zeros(&[self.cfg.out_channels]))?;
        Ok(store)
    }

    fn norm_silu(&self, tape: &mut Tape, store: &ParamStore, x: Var, name: &str, channels: usize) -> Result<Var> {
        if !self.cfg.group_norm {
            return Ok(tape.silu(x));
        }
        let g = tape.param_from(store, &format!("{name}.g"))?;
        let b = tape.param_from(store, &format!("{name}.b"))?;
        let h = tape.group_norm(x, g, b, groups_for(channels, self.cfg.max_groups))?;
        Ok(tape.silu(h))
    }

    fn conv(&self, tape: &mut Tape, store: &ParamStore, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = tape.param_from(store, &format!("{name}.w"))?;
        let b = tape.param_from(store, &format!("{name}.b"))?;
        tape.conv2d(x, w, b, stride, pad)
    }

    fn res_block(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        blk: &ResBlockSpec,
        temb: Option<Var>,
    ) -> Result<Var> {
        let p = &blk.prefix;
        let h = self.norm_silu(tape, store, x, &format!("{p}.norm1"), blk.cin)?;
        let mut h = self.conv(tape, store, h, &format!("{p}.conv1"), 1, 1)?;
        if let Some(temb) = temb {
            let w = tape.param_from(store, &format!("{p}.time.w"))?;
            let b = tape.param_from(store, &format!("{p}.time.b"))?;
            let bias = tape.linear(temb, w, b)?;
            h = tape.add_channel_bias(h, bias)?;
        }
        let h = self.norm_silu(tape, store, h, &format!("{p}.norm2"), blk.cout)?;
        let h = self.conv(tape, store, h, &format!("{p}.conv2"), 1, 1)?;
        let skip = if blk.cin == blk.cout { x } else { self.conv(tape, store, x, &format!("{p}.skip"), 1, 0)? };
        tape.add(h, skip)
    }

    /// Run the network on an `N × in_channels × H × W` input. `timesteps`
    /// (with the schedule length `max_t`) is required exactly when the
    /// network was configured with a time embedding.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        timesteps: Option<(&[usize], usize)>,
    ) -> Result<Var> {
        let [n, c, h, w] = tape.value(x).dims4("unet")?;
        if c != self.cfg.in_channels {
            return Err(Error::shape(
                "unet",
                format!("input has {c} channels, network expects {}", self.cfg.in_channels),
            ));
        }
        let m = self.cfg.spatial_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::shape("unet", format!("spatial extent {h}x{w} not divisible by {m}")));
        }
        let temb = match (self.cfg.time_embedding, timesteps) {
            (Some(d), Some((ts, max_t))) => {
                if ts.len() != n {
                    return Err(Error::shape("unet", format!("{} timesteps for batch of {n}", ts.len())));
                }
                let e = tape.input(time_embedding_batch(ts, d, max_t)?);
                let w1 = tape.param_from(store, "time.l1.w")?;
                let b1 = tape.param_from(store, "time.l1.b")?;
                let h1 = tape.linear(e, w1, b1)?;
                let h1 = tape.silu(h1);
                let w2 = tape.param_from(store, "time.l2.w")?;
                let b2 = tape.param_from(store, "time.l2.b")?;
                let h2 = tape.linear(h1, w2, b2)?;
                Some(tape.silu(h2))
            }
            (None, None) => None,
            (Some(_), None) => return Err(Error::InvalidArgument("time-conditioned network needs timesteps".into())),
            (None, Some(_)) => return Err(Error::InvalidArgument("network has no time embedding".into())),
        };

        let blocks = self.blocks();
        let levels = self.cfg.levels();
        let mut h = self.conv(tape, store, x, "stem", 1, 1)?;
        let mut skips = Vec::with_capacity(levels);
        for (i, blk) in blocks.iter().take(levels).enumerate() {
            h = self.res_block(tape, store, h, blk, temb)?;
            skips.push(h);
            if i + 1 < levels {
                h = self.conv(tape, store, h, &format!("down{i}"), 2, 1)?;
            }
        }
        for (blk, skip) in blocks[levels..].iter().zip(skips[..levels - 1].iter().rev()) {
            let up = tape.upsample2x(h)?;
            let cat = tape.concat_channels(up, *skip)?;
            h = self.res_block(tape, store, cat, blk, temb)?;
        }
        let h = self.norm_silu(tape, store, h, "head.norm", self.cfg.width(0))?;
        self.conv(tape, store, h, "head", 1, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(time: Option<usize>) -> UNetConfig {
        UNetConfig {
            in_channels: 4,
            out_channels: 1,
            base_width: 8,
            channel_mults: vec![1, 2, 4],
            max_groups: 8,
            group_norm: true,
            time_embedding: time,
        }
    }

    #[test]
    fn without_group_norm_there_are_no_norm_parameters() {
        let net = UNet::new(UNetConfig { group_norm: false, ..cfg(Some(16)) }).unwrap();
        let store = net.init_params(1).unwrap();
        assert!(store.iter().all(|(k, _)| !k.contains("norm")));
        let mut tape = Tape::new();
        let x = tape.input(Tensor::full(&[1, 4, 16, 16], 0.1));
        let y = net.forward(&mut tape, &store, x, Some((&[3], 10))).unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn output_matches_input_spatial_shape() {
        let net = UNet::new(cfg(Some(16))).unwrap();
        let store = net.init_params(1).unwrap();
        for &(h, w) in &[(16, 16), (32, 16), (64, 64)] {
            let mut tape = Tape::new();
            let x = tape.input(Tensor::full(&[2, 4, h, w], 0.1));
            let y = net.forward(&mut tape, &store, x, Some((&[3, 7], 10))).unwrap();
            assert_eq!(tape.value(y).shape(), &[2, 1, h, w]);
        }
    }

    #[test]
    fn rejects_indivisible_extent_and_wrong_channels() {
        let net = UNet::new(cfg(None)).unwrap();
        let store = net.init_params(1).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[1, 4, 18, 16]));
        assert!(net.forward(&mut tape, &store, x, None).is_err());
        let x = tape.input(Tensor::zeros(&[1, 3, 16, 16]));
        assert!(net.forward(&mut tape, &store, x, None).is_err());
    }

    #[test]
    fn batch_composition_does_not_change_per_sample_output() {
        let net = UNet::new(cfg(Some(16))).unwrap();
        let store = net.init_params(5).unwrap();
        let a: Vec<f32> = (0..4 * 16 * 16).map(|i| ((i * 37) % 11) as f32 / 11.0).collect();
        let b: Vec<f32> = (0..4 * 16 * 16).map(|i| ((i * 13) % 7) as f32 / 7.0).collect();
        let run = |data: Vec<f32>, n: usize, ts: &[usize]| {
            let mut tape = Tape::new();
            let x = tape.input(Tensor::new(vec![n, 4, 16, 16], data).unwrap());
            let y = net.forward(&mut tape, &store, x, Some((ts, 10))).unwrap();
            tape.value(y).data().to_vec()
        };
        let single = run(a.clone(), 1, &[4]);
        let both = run([a, b].concat(), 2, &[4, 9]);
        assert_eq!(single, both[..single.len()]);
    }

    #[test]
    fn init_is_seeded() {
        let net = UNet::new(cfg(Some(16))).unwrap();
        assert_eq!(net.init_params(3).unwrap(), net.init_params(3).unwrap());
        assert_ne!(net.init_params(3).unwrap().digest(), net.init_params(4).unwrap().digest());
    }

    #[test]
    fn group_counts() {
        assert_eq!(groups_for(32, 8), 8);
        assert_eq!(groups_for(12, 8), 6);
        assert_eq!(groups_for(3, 8), 3);
        assert_eq!(groups_for(7, 4), 1);
    }
}
