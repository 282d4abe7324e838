//! Naive double-precision forward pass of the denoiser U-Net.
//!
//! Written from the architecture description alone, with direct loops and
//! no shared code, so finite differences taken through it are not limited
//! by single-precision rounding.

use std::collections::BTreeMap;

use patchdiff::nn::ParamStore;

pub struct Params(BTreeMap<String, Vec<f64>>);

impl Params {
    pub fn from_store(store: &ParamStore) -> Self {
        Params(store.iter().map(|(k, t)| (k.clone(), t.data().iter().map(|&v| v as f64).collect())).collect())
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Vec<f64> {
        self.0.get_mut(name).unwrap()
    }

    fn p(&self, name: &str) -> &[f64] {
        self.0.get(name).unwrap_or_else(|| panic!("missing {name}"))
    }

    fn has(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }
}

/// `N × C × H × W` activations.
#[derive(Clone)]
pub struct Act {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Act {
    fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Act { n, c, h, w, v: vec![0.0; n * c * h * w] }
    }
    fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.v[((n * self.c + c) * self.h + y) * self.w + x]
    }
}

pub struct Net {
    pub widths: Vec<usize>,
    pub max_groups: usize,
    pub temb_dim: usize,
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn conv(p: &Params, name: &str, x: &Act, cout: usize, k: usize, stride: usize, pad: usize) -> Act {
    let w = p.p(&format!("{name}.w"));
    let b = p.p(&format!("{name}.b"));
    let oh = (x.h + 2 * pad - k) / stride + 1;
    let ow = (x.w + 2 * pad - k) / stride + 1;
    let mut out = Act::zeros(x.n, cout, oh, ow);
    for n in 0..x.n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b[co];
                    for ci in 0..x.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                s += w[((co * x.c + ci) * k + ky) * k + kx] * x.at(n, ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.v[((n * cout + co) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    out
}

fn norm_silu(p: &Params, name: &str, x: &Act, max_groups: usize) -> Act {
    if !p.has(&format!("{name}.g")) {
        return Act { v: x.v.iter().map(|&v| silu(v)).collect(), ..x.clone() };
    }
    let g = p.p(&format!("{name}.g"));
    let b = p.p(&format!("{name}.b"));
    let groups = (1..=max_groups.min(x.c)).rev().find(|g| x.c.is_multiple_of(*g)).unwrap();
    let cg = x.c / groups;
    let plane = x.h * x.w;
    let mut out = x.clone();
    for n in 0..x.n {
        for grp in 0..groups {
            let start = (n * x.c + grp * cg) * plane;
            let seg = &x.v[start..start + cg * plane];
            let mean = seg.iter().sum::<f64>() / seg.len() as f64;
            let var = seg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / seg.len() as f64;
            let inv = 1.0 / (var + 1e-5).sqrt();
            for j in 0..cg * plane {
                let c = grp * cg + j / plane;
                out.v[start + j] = silu((seg[j] - mean) * inv * g[c] + b[c]);
            }
        }
    }
    out
}

fn linear(p: &Params, name: &str, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let w = p.p(&format!("{name}.w"));
    let b = p.p(&format!("{name}.b"));
    let fin = x[0].len();
    x.iter()
        .map(|row| (0..b.len()).map(|o| b[o] + (0..fin).map(|i| w[o * fin + i] * row[i]).sum::<f64>()).collect())
        .collect()
}

fn res_block(net: &Net, p: &Params, pre: &str, x: &Act, cout: usize, temb: &[Vec<f64>]) -> Act {
    let h = norm_silu(p, &format!("{pre}.norm1"), x, net.max_groups);
    let mut h = conv(p, &format!("{pre}.conv1"), &h, cout, 3, 1, 1);
    let bias = linear(p, &format!("{pre}.time"), temb);
    let plane = h.h * h.w;
    for n in 0..h.n {
        for c in 0..cout {
            for v in &mut h.v[(n * cout + c) * plane..(n * cout + c + 1) * plane] {
                *v += bias[n][c];
            }
        }
    }
    let h = norm_silu(p, &format!("{pre}.norm2"), &h, net.max_groups);
    let mut h = conv(p, &format!("{pre}.conv2"), &h, cout, 3, 1, 1);
    let skip =
        if p.has(&format!("{pre}.skip.w")) { conv(p, &format!("{pre}.skip"), x, cout, 1, 1, 0) } else { x.clone() };
    for (a, s) in h.v.iter_mut().zip(&skip.v) {
        *a += s;
    }
    h
}

fn upsample(x: &Act) -> Act {
    let mut out = Act::zeros(x.n, x.c, 2 * x.h, 2 * x.w);
    for n in 0..x.n {
        for c in 0..x.c {
            for y in 0..out.h {
                for xx in 0..out.w {
                    out.v[((n * x.c + c) * out.h + y) * out.w + xx] = x.at(n, c, y / 2, xx / 2);
                }
            }
        }
    }
    out
}

fn concat(a: &Act, b: &Act) -> Act {
    let plane = a.h * a.w;
    let mut out = Act::zeros(a.n, a.c + b.c, a.h, a.w);
    for n in 0..a.n {
        let dst = &mut out.v[n * (a.c + b.c) * plane..(n + 1) * (a.c + b.c) * plane];
        dst[..a.c * plane].copy_from_slice(&a.v[n * a.c * plane..(n + 1) * a.c * plane]);
        dst[a.c * plane..].copy_from_slice(&b.v[n * b.c * plane..(n + 1) * b.c * plane]);
    }
    out
}

fn embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp());
    let args: Vec<f64> = freqs.map(|f| t as f64 * f).collect();
    args.iter().map(|a| a.sin()).chain(args.iter().map(|a| a.cos())).collect()
}

impl Net {
    /// Predicted noise for input channels `[x_t, mask, coord0, coord1]`.
    pub fn forward(&self, p: &Params, x: &Act, ts: &[usize]) -> Act {
        let e: Vec<Vec<f64>> = ts.iter().map(|&t| embedding(t, self.temb_dim)).collect();
        let e: Vec<Vec<f64>> =
            linear(p, "time.l1", &e).into_iter().map(|r| r.into_iter().map(silu).collect()).collect();
        let temb: Vec<Vec<f64>> =
            linear(p, "time.l2", &e).into_iter().map(|r| r.into_iter().map(silu).collect()).collect();
        let levels = self.widths.len();
        let mut h = conv(p, "stem", x, self.widths[0], 3, 1, 1);
        let mut skips = Vec::new();
        for i in 0..levels {
            h = res_block(self, p, &format!("enc{i}"), &h, self.widths[i], &temb);
            skips.push(h.clone());
            if i + 1 < levels {
                h = conv(p, &format!("down{i}"), &h, self.widths[i], 3, 2, 1);
            }
        }
        for i in (0..levels - 1).rev() {
            let cat = concat(&upsample(&h), &skips[i]);
            h = res_block(self, p, &format!("dec{i}"), &cat, self.widths[i], &temb);
        }
        let h = norm_silu(p, "head.norm", &h, self.max_groups);
        conv(p, "head", &h, 1, 3, 1, 1)
    }
}
