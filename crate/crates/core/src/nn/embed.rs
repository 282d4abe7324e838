use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

const MAX_PERIOD: f64 = 10_000.0;

/// Sinusoidal timestep embedding: `dim/2` sines followed by `dim/2` cosines
/// over frequencies spaced geometrically from 1 down to `1/MAX_PERIOD`.
pub fn time_embedding(t: usize, dim: usize, max_t: usize) -> Result<Vec<f32>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("time embedding dim must be even and positive, got {dim}")));
    }
    if t == 0 || t > max_t {
        return Err(Error::TimestepOutOfRange { t, max: max_t });
    }
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for i in 0..half {
        let freq = (-(MAX_PERIOD.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin() as f32;
        out[half + i] = arg.cos() as f32;
    }
    Ok(out)
}

/// Embeddings for a batch of timesteps as an `N × dim` tensor.
pub fn time_embedding_batch(ts: &[usize], dim: usize, max_t: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(time_embedding(t, dim, max_t)?);
    }
    Tensor::new(vec![ts.len(), dim], data)
}
