//! Forward and backward kernels for the operator set.
//!
//! All kernels are single-threaded with a fixed reduction order, so every
//! result is a pure function of the inputs. Batched kernels process samples
//! independently: a sample's output does not depend on what else is in the
//! batch.

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// `c = a · b + beta · c` for row-major-or-strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the asserted bounds guarantee every strided access stays inside
    // the slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let [batch, in_channels, height, width] = x.dims4("conv2d")?;
        let [out_channels, wc, kernel_h, kernel_w] = w.dims4("conv2d")?;
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be >= 1"));
        }
        if wc != in_channels {
            return Err(Error::shape("conv2d", format!("input has {in_channels} channels but weight expects {wc}")));
        }
        if height + 2 * pad < kernel_h || width + 2 * pad < kernel_w {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kernel_h}x{kernel_w} larger than padded input {height}x{width} (pad {pad})"),
            ));
        }
        let out_h = (height + 2 * pad - kernel_h) / stride + 1;
        let out_w = (width + 2 * pad - kernel_w) / stride + 1;
        Ok(Self { batch, in_channels, height, width, out_channels, kernel_h, kernel_w, stride, pad, out_h, out_w })
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_spatial(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_sample(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_h, self.out_w]
    }
}

fn im2col(x: &[f32], g: &ConvGeometry, col: &mut [f32]) {
    let hw = g.out_spatial();
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add(col: &[f32], g: &ConvGeometry, dx: &mut [f32]) {
    let hw = g.out_spatial();
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &col[row * hw..(row + 1) * hw];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded 2D cross-correlation. `x: N×Cin×H×W`, `w: Cout×Cin×Kh×Kw`,
/// `b: Cout`.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(x, w, stride, pad)?;
    if b.shape() != [g.out_channels] {
        return Err(Error::shape("conv2d", format!("bias shape {:?}, expected [{}]", b.shape(), g.out_channels)));
    }
    let hw = g.out_spatial();
    let rows = g.col_rows();
    let mut out = vec![0.0f32; g.batch * g.out_channels * hw];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0f32; rows * hw] };
    for n in 0..g.batch {
        let xn = &x.data()[n * g.in_sample()..(n + 1) * g.in_sample()];
        let on = &mut out[n * g.out_channels * hw..(n + 1) * g.out_channels * hw];
        for (co, chunk) in on.chunks_mut(hw).enumerate() {
            chunk.fill(b.data()[co]);
        }
        let colref: &[f32] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, &g, &mut col);
            &col
        };
        gemm(g.out_channels, rows, hw, w.data(), (rows, 1), colref, (hw, 1), 1.0, on);
    }
    Tensor::new(g.output_shape(), out)
}

/// Returns `(dx, dw, db)`.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = ConvGeometry::new(x, w, stride, pad)?;
    if dy.shape() != g.output_shape().as_slice() {
        return Err(Error::shape("conv2d_backward", format!("dy {:?} vs {:?}", dy.shape(), g.output_shape())));
    }
    let hw = g.out_spatial();
    let rows = g.col_rows();
    let mut dx = vec![0.0f32; x.numel()];
    let mut dw = vec![0.0f32; w.numel()];
    let mut db = vec![0.0f64; g.out_channels];
    let mut col = vec![0.0f32; rows * hw];
    let mut dcol = vec![0.0f32; rows * hw];
    for n in 0..g.batch {
        let xn = &x.data()[n * g.in_sample()..(n + 1) * g.in_sample()];
        let dyn_ = &dy.data()[n * g.out_channels * hw..(n + 1) * g.out_channels * hw];
        for (co, chunk) in dyn_.chunks(hw).enumerate() {
            db[co] += chunk.iter().map(|&v| v as f64).sum::<f64>();
        }
        let colref: &[f32] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, &g, &mut col);
            &col
        };
        // dW += dY_n · col_nᵀ
        gemm(g.out_channels, hw, rows, dyn_, (hw, 1), colref, (1, hw), 1.0, &mut dw);
        let dxn = &mut dx[n * g.in_sample()..(n + 1) * g.in_sample()];
        if g.is_pointwise() {
            // dX_n = Wᵀ · dY_n
            gemm(rows, g.out_channels, hw, w.data(), (1, rows), dyn_, (hw, 1), 0.0, dxn);
        } else {
            gemm(rows, g.out_channels, hw, w.data(), (1, rows), dyn_, (hw, 1), 0.0, &mut dcol);
            col2im_add(&dcol, &g, dxn);
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(w.shape().to_vec(), dw)?,
        Tensor::new(vec![g.out_channels], db.into_iter().map(|v| v as f32).collect())?,
    ))
}

/// `y = x · Wᵀ + b` with `x: N×In`, `w: Out×In`, `b: Out`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [n, fin] = x.dims2("linear")?;
    let [fout, wfin] = w.dims2("linear")?;
    if wfin != fin || b.shape() != [fout] {
        return Err(Error::shape("linear", format!("x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape())));
    }
    let mut out: Vec<f32> = (0..n).flat_map(|_| b.data().iter().copied()).collect();
    gemm(n, fin, fout, x.data(), (fin, 1), w.data(), (1, fin), 1.0, &mut out);
    Tensor::new(vec![n, fout], out)
}

pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let [n, fin] = x.dims2("linear_backward")?;
    let [fout, _] = w.dims2("linear_backward")?;
    if dy.shape() != [n, fout] {
        return Err(Error::shape("linear_backward", format!("dy {:?}, expected [{n}, {fout}]", dy.shape())));
    }
    let mut dx = vec![0.0f32; n * fin];
    gemm(n, fout, fin, dy.data(), (fout, 1), w.data(), (fin, 1), 0.0, &mut dx);
    let mut dw = vec![0.0f32; fout * fin];
    gemm(fout, n, fin, dy.data(), (1, fout), x.data(), (fin, 1), 0.0, &mut dw);
    let db: Vec<f32> = (0..fout).map(|o| (0..n).map(|i| dy.data()[i * fout + o] as f64).sum::<f64>() as f32).collect();
    Ok((Tensor::new(vec![n, fin], dx)?, Tensor::new(vec![fout, fin], dw)?, Tensor::new(vec![fout], db)?))
}

/// Per-(sample, group) statistics saved by the group-norm forward pass.
#[derive(Debug, Clone)]
pub struct GroupStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn group_norm_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize) -> Result<(Tensor, GroupStats)> {
    let [n, c, h, w] = x.dims4("group_norm")?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::shape("group_norm", format!("{c} channels not divisible into {groups} groups")));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "group_norm",
            format!("gamma {:?} / beta {:?}, expected [{c}]", gamma.shape(), beta.shape()),
        ));
    }
    let cg = c / groups;
    let span = cg * h * w;
    let mut out = vec![0.0f32; x.numel()];
    let mut stats = GroupStats { mean: Vec::with_capacity(n * groups), rstd: Vec::with_capacity(n * groups) };
    for s in 0..n {
        for g in 0..groups {
            let start = (s * c + g * cg) * h * w;
            let seg = &x.data()[start..start + span];
            let mean = seg.iter().map(|&v| v as f64).sum::<f64>() / span as f64;
            let var = seg.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / span as f64;
            let rstd = 1.0 / (var + GROUP_NORM_EPS).sqrt();
            stats.mean.push(mean);
            stats.rstd.push(rstd);
            for (j, chunk) in seg.chunks(h * w).enumerate() {
                let ch = g * cg + j;
                let (ga, be) = (gamma.data()[ch] as f64, beta.data()[ch] as f64);
                let dst = &mut out[start + j * h * w..start + (j + 1) * h * w];
                for (d, &v) in dst.iter_mut().zip(chunk) {
                    *d = ((v as f64 - mean) * rstd * ga + be) as f32;
                }
            }
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, stats))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn group_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    groups: usize,
    stats: &GroupStats,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let [n, c, h, w] = x.dims4("group_norm_backward")?;
    let cg = c / groups;
    let plane = h * w;
    let m = (cg * plane) as f64;
    let mut dx = vec![0.0f32; x.numel()];
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for s in 0..n {
        for g in 0..groups {
            let idx = s * groups + g;
            let (mean, rstd) = (stats.mean[idx], stats.rstd[idx]);
            let start = (s * c + g * cg) * plane;
            let mut sum_dxhat = 0.0f64;
            let mut sum_dxhat_xhat = 0.0f64;
            for j in 0..cg {
                let ch = g * cg + j;
                let ga = gamma.data()[ch] as f64;
                for p in 0..plane {
                    let i = start + j * plane + p;
                    let xhat = (x.data()[i] as f64 - mean) * rstd;
                    let d = dy.data()[i] as f64;
                    dgamma[ch] += d * xhat;
                    dbeta[ch] += d;
                    sum_dxhat += d * ga;
                    sum_dxhat_xhat += d * ga * xhat;
                }
            }
            for j in 0..cg {
                let ch = g * cg + j;
                let ga = gamma.data()[ch] as f64;
                for p in 0..plane {
                    let i = start + j * plane + p;
                    let xhat = (x.data()[i] as f64 - mean) * rstd;
                    let dxhat = dy.data()[i] as f64 * ga;
                    dx[i] = (rstd / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)) as f32;
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma.into_iter().map(|v| v as f32).collect())?,
        Tensor::new(vec![c], dbeta.into_iter().map(|v| v as f32).collect())?,
    ))
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f32) -> f32 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn upsample2x_forward(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4("upsample2x")?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; n * c * oh * ow];
    for (plane, src) in x.data().chunks(h * w).enumerate() {
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn upsample2x_backward(x_shape: &[usize], dy: &Tensor) -> Result<Tensor> {
    let (h, w) = (x_shape[2], x_shape[3]);
    let ow = 2 * w;
    let mut dx = vec![0.0f32; x_shape.iter().product()];
    for (plane, src) in dy.data().chunks(4 * h * w).enumerate() {
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let r0 = 2 * y * ow + 2 * xx;
                let r1 = r0 + ow;
                dst[y * w + xx] = (src[r0] + src[r0 + 1]) + (src[r1] + src[r1 + 1]);
            }
        }
    }
    Tensor::new(x_shape.to_vec(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct-loop convolution used as an independent reference.
    fn conv_naive(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Vec<f32> {
        let g = ConvGeometry::new(x, w, stride, pad).unwrap();
        let mut out = Vec::new();
        for n in 0..g.batch {
            for co in 0..g.out_channels {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut acc = b.data()[co] as f64;
                        for ci in 0..g.in_channels {
                            for ky in 0..g.kernel_h {
                                for kx in 0..g.kernel_w {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                        continue;
                                    }
                                    let xi =
                                        ((n * g.in_channels + ci) * g.height + iy as usize) * g.width + ix as usize;
                                    let wi = ((co * g.in_channels + ci) * g.kernel_h + ky) * g.kernel_w + kx;
                                    acc += x.data()[xi] as f64 * w.data()[wi] as f64;
                                }
                            }
                        }
                        out.push(acc as f32);
                    }
                }
            }
        }
        out
    }

    fn pseudo(shape: &[usize], salt: u32) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| (((i as u32).wrapping_mul(2654435761) ^ salt) % 1000) as f32 / 500.0 - 1.0).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn identity_kernel_leaves_image_unchanged() {
        let x = pseudo(&[1, 1, 5, 7], 3);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let b = Tensor::zeros(&[1]);
        assert_eq!(conv2d_forward(&x, &w, &b, 1, 0).unwrap(), x);
    }

    #[test]
    fn ones_kernel_on_constant_image() {
        let x = Tensor::full(&[1, 1, 4, 4], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d_forward(&x, &w, &Tensor::zeros(&[1]), 1, 1).unwrap();
        let d = y.data();
        assert_eq!(d[0], 4.0);
        assert_eq!(d[3], 4.0);
        assert_eq!(d[5], 9.0);
        assert_eq!(d[10], 9.0);
        assert_eq!(d[1], 6.0);
    }

    #[test]
    fn gemm_path_matches_direct_loops() {
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3), (1, 2, 5)] {
            let x = pseudo(&[2, 3, 9, 8], 11);
            let w = pseudo(&[4, 3, k, k], 5);
            let b = pseudo(&[4], 7);
            let fast = conv2d_forward(&x, &w, &b, stride, pad).unwrap();
            let slow = conv_naive(&x, &w, &b, stride, pad);
            for (a, e) in fast.data().iter().zip(&slow) {
                assert!((a - e).abs() < 1e-4, "stride {stride} pad {pad}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn conv_reports_offending_dims() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d_forward(&x, &w, &Tensor::zeros(&[1]), 1, 1).unwrap_err().to_string();
        assert!(err.contains("conv2d") && err.contains('2') && err.contains('3'), "{err}");
        assert!(conv2d_forward(&x, &Tensor::zeros(&[1, 2, 3, 3]), &Tensor::zeros(&[1]), 0, 1).is_err());
    }

    #[test]
    fn silu_analytic_properties() {
        assert_eq!(silu(0.0), 0.0);
        assert!((silu(30.0) - 30.0).abs() < 1e-6);
        assert!(silu(-30.0).abs() < 1e-6);
    }

    #[test]
    fn group_norm_normalizes_each_group() {
        let x = pseudo(&[2, 4, 3, 3], 1);
        let (y, _) = group_norm_forward(&x, &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4]), 2).unwrap();
        for seg in y.data().chunks(18) {
            let mean: f64 = seg.iter().map(|&v| v as f64).sum::<f64>() / 18.0;
            let var: f64 = seg.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 18.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
        assert!(group_norm_forward(&x, &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4]), 3).is_err());
    }

    #[test]
    fn upsample_then_backward_sums_blocks() {
        let x = pseudo(&[1, 2, 2, 3], 9);
        let y = upsample2x_forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 4, 6]);
        assert_eq!(y.data()[0], x.data()[0]);
        assert_eq!(y.data()[7], x.data()[0]);
        let dx = upsample2x_backward(x.shape(), &Tensor::full(y.shape(), 1.0)).unwrap();
        assert!(dx.data().iter().all(|&v| v == 4.0));
    }
}
