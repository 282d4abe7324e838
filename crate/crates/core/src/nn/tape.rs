//! Wengert tape: records each forward operation with its output value and
//! replays the list in reverse to accumulate gradients.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::nn::ops::{self, GroupStats};
use crate::nn::params::ParamStore;
use crate::nn::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(String),
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Linear { x: Var, w: Var, b: Var },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: GroupStats },
    Silu(Var),
    Upsample2x(Var),
    ConcatChannels(Var, Var),
    Add(Var, Var),
    AddChannelBias { x: Var, bias: Var },
    MseLoss { pred: Var, target: Var },
    SegmentationLoss { logits: Var, target: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::GroupNorm { .. } => "group_norm",
            Op::Silu(_) => "silu",
            Op::Upsample2x(_) => "upsample2x",
            Op::ConcatChannels(..) => "concat_channels",
            Op::Add(..) => "add",
            Op::AddChannelBias { .. } => "add_channel_bias",
            Op::MseLoss { .. } => "mse_loss",
            Op::SegmentationLoss { .. } => "segmentation_loss",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Smoothing constant of the soft-Dice term in [`Tape::segmentation_loss`].
pub const SOFT_DICE_SMOOTH: f64 = 1.0;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// Result of a backward pass: parameter gradients keyed by name.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
    visit_order: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.grads.insert(name.into(), grad);
    }

    /// Tape indices of the operations the backward pass visited, in order.
    pub fn visit_order(&self) -> &[usize] {
        &self.visit_order
    }

    /// A gradient for every parameter in `store`; parameters the forward
    /// pass never touched get exact zeros.
    pub fn completed_for(mut self, store: &ParamStore) -> Self {
        for (name, p) in store.iter() {
            self.grads.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        }
        self
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Elements held by every non-parameter value on the tape. This is the
    /// activation memory a training step keeps alive until its backward pass.
    pub fn activation_elements(&self) -> usize {
        self.nodes.iter().filter(|n| !matches!(n.op, Op::Param(_))).map(|n| n.value.numel()).sum()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// Register a named parameter. Repeated registration returns the same
    /// handle, so gradients from every use accumulate into one entry.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param(name.to_string()));
        self.params.insert(name.to_string(), v);
        v
    }

    /// Register `name` from a parameter store.
    pub fn param_from(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let t = store.get(name).ok_or_else(|| Error::InvalidArgument(format!("parameter {name:?} not in store")))?;
        Ok(self.param(name, t))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = ops::conv2d_forward(self.value(x), self.value(w), self.value(b), stride, pad)?;
        Ok(self.push(y, Op::Conv2d { x, w, b, stride, pad }))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::linear_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (y, stats) = ops::group_norm_forward(self.value(x), self.value(gamma), self.value(beta), groups)?;
        Ok(self.push(y, Op::GroupNorm { x, gamma, beta, groups, stats }))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let y =
            Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| ops::silu(v)).collect()).expect("same shape");
        self.push(y, Op::Silu(x))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let y = ops::upsample2x_forward(self.value(x))?;
        Ok(self.push(y, Op::Upsample2x(x)))
    }

    /// Concatenate two `N×C×H×W` values along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let [n, ca, h, w] = ta.dims4("concat_channels")?;
        let [nb, cb, hb, wb] = tb.dims4("concat_channels")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} and {:?} differ outside the channel axis", ta.shape(), tb.shape()),
            ));
        }
        let (sa, sb) = (ca * h * w, cb * h * w);
        let mut data = Vec::with_capacity(n * (sa + sb));
        for i in 0..n {
            data.extend_from_slice(&ta.data()[i * sa..(i + 1) * sa]);
            data.extend_from_slice(&tb.data()[i * sb..(i + 1) * sb]);
        }
        let y = Tensor::new(vec![n, ca + cb, h, w], data)?;
        Ok(self.push(y, Op::ConcatChannels(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let y = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    /// `x[n, c, :, :] + bias[n, c]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let [n, c, h, w] = tx.dims4("add_channel_bias")?;
        if tb.shape() != [n, c] {
            return Err(Error::shape("add_channel_bias", format!("bias {:?}, expected [{n}, {c}]", tb.shape())));
        }
        let mut data = tx.data().to_vec();
        for (plane, chunk) in data.chunks_mut(h * w).enumerate() {
            let b = tb.data()[plane];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let y = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(y, Op::AddChannelBias { x, bias }))
    }

    /// Mean over all elements of `(pred - target)^2`.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() {
            return Err(Error::shape("mse_loss", format!("{:?} vs {:?}", tp.shape(), tt.shape())));
        }
        let sum: f64 = tp.data().iter().zip(tt.data()).map(|(&p, &t)| ((p - t) as f64).powi(2)).sum();
        let y = Tensor::scalar((sum / tp.numel() as f64) as f32);
        Ok(self.push(y, Op::MseLoss { pred, target }))
    }

    /// Binary cross-entropy on logits (mean over pixels) plus soft-Dice loss
    /// (mean over samples) for `N×1×H×W` logits against a binary target.
    pub fn segmentation_loss(&mut self, logits: Var, target: Var) -> Result<Var> {
        let (tl, tt) = (self.value(logits), self.value(target));
        if tl.shape() != tt.shape() {
            return Err(Error::shape("segmentation_loss", format!("{:?} vs {:?}", tl.shape(), tt.shape())));
        }
        let [n, _, _, _] = tl.dims4("segmentation_loss")?;
        let per = tl.numel() / n;
        let mut bce = 0.0f64;
        let mut dice = 0.0f64;
        for s in 0..n {
            let (l, t) = (&tl.data()[s * per..(s + 1) * per], &tt.data()[s * per..(s + 1) * per]);
            let (mut inter, mut union) = (0.0f64, 0.0f64);
            for (&z, &y) in l.iter().zip(t) {
                let (z, y) = (z as f64, y as f64);
                // log(1 + exp(-|z|)) + max(z, 0) - z*y
                bce += (-z.abs()).exp().ln_1p() + z.max(0.0) - z * y;
                let p = ops::sigmoid(z as f32) as f64;
                inter += p * y;
                union += p + y;
            }
            dice += 1.0 - (2.0 * inter + SOFT_DICE_SMOOTH) / (union + SOFT_DICE_SMOOTH);
        }
        let y = Tensor::scalar((bce / tl.numel() as f64 + dice / n as f64) as f32);
        Ok(self.push(y, Op::SegmentationLoss { logits, target }))
    }

    /// Reverse-mode pass from the scalar `loss`, seeded with `loss_grad`.
    pub fn backward(&self, loss: Var, loss_grad: &Tensor) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        if !self.value(loss).is_scalar() || !loss_grad.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss {:?} and seed {:?} must be scalars", self.value(loss).shape(), loss_grad.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), loss_grad.data().to_vec())?);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !matches!(node.op, Op::Input | Op::Param(_)) {
                out.visit_order.push(i);
            }
            match &node.op {
                Op::Input => {}
                Op::Param(name) => {
                    out.grads.insert(name.clone(), g);
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) = ops::conv2d_backward(self.value(*x), self.value(*w), &g, *stride, *pad)?;
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = ops::linear_backward(self.value(*x), self.value(*w), &g)?;
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::GroupNorm { x, gamma, beta, groups, stats } => {
                    let (dx, dgamma, dbeta) =
                        ops::group_norm_backward(self.value(*x), self.value(*gamma), *groups, stats, &g)?;
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Op::Silu(x) => {
                    let xv = self.value(*x);
                    let dx = xv.data().iter().zip(g.data()).map(|(&v, &d)| d * ops::silu_grad(v)).collect();
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                Op::Upsample2x(x) => {
                    let dx = ops::upsample2x_backward(self.value(*x).shape(), &g)?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatChannels(a, b) => {
                    let [n, ca, h, w] = self.value(*a).dims4("concat_channels")?;
                    let cb = self.value(*b).shape()[1];
                    let (sa, sb) = (ca * h * w, cb * h * w);
                    let mut da = Vec::with_capacity(n * sa);
                    let mut db = Vec::with_capacity(n * sb);
                    for chunk in g.data().chunks(sa + sb) {
                        da.extend_from_slice(&chunk[..sa]);
                        db.extend_from_slice(&chunk[sa..]);
                    }
                    accumulate(&mut grads, *a, Tensor::new(vec![n, ca, h, w], da)?);
                    accumulate(&mut grads, *b, Tensor::new(vec![n, cb, h, w], db)?);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddChannelBias { x, bias } => {
                    let [n, c, h, w] = g.dims4("add_channel_bias")?;
                    let db: Vec<f32> =
                        g.data().chunks(h * w).map(|p| p.iter().map(|&v| v as f64).sum::<f64>() as f32).collect();
                    accumulate(&mut grads, *bias, Tensor::new(vec![n, c], db)?);
                    accumulate(&mut grads, *x, g);
                }
                Op::MseLoss { pred, target } => {
                    let (tp, tt) = (self.value(*pred), self.value(*target));
                    let scale = 2.0 * g.item() as f64 / tp.numel() as f64;
                    let dp = tp.data().iter().zip(tt.data()).map(|(&p, &t)| ((p - t) as f64 * scale) as f32).collect();
                    accumulate(&mut grads, *pred, Tensor::new(tp.shape().to_vec(), dp)?);
                }
                Op::SegmentationLoss { logits, target } => {
                    let dl = segmentation_loss_grad(self.value(*logits), self.value(*target), g.item() as f64)?;
                    accumulate(&mut grads, *logits, dl);
                }
            }
        }
        Ok(out)
    }

    /// Name of the operation recorded at tape index `i`.
    pub fn op_name(&self, i: usize) -> &'static str {
        self.nodes[i].op.name()
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn segmentation_loss_grad(logits: &Tensor, target: &Tensor, seed: f64) -> Result<Tensor> {
    let [n, _, _, _] = logits.dims4("segmentation_loss")?;
    let total = logits.numel();
    let per = total / n;
    let mut out = Vec::with_capacity(total);
    for s in 0..n {
        let (l, t) = (&logits.data()[s * per..(s + 1) * per], &target.data()[s * per..(s + 1) * per]);
        let probs: Vec<f64> = l.iter().map(|&z| ops::sigmoid(z) as f64).collect();
        let inter: f64 = probs.iter().zip(t).map(|(&p, &y)| p * y as f64).sum();
        let union: f64 = probs.iter().sum::<f64>() + t.iter().map(|&y| y as f64).sum::<f64>();
        let den = union + SOFT_DICE_SMOOTH;
        let num = 2.0 * inter + SOFT_DICE_SMOOTH;
        for (&p, &y) in probs.iter().zip(t) {
            let y = y as f64;
            let d_bce = (p - y) / total as f64;
            let d_dice_dp = -(2.0 * y * den - num) / (den * den) / n as f64;
            out.push(((d_bce + d_dice_dp * p * (1.0 - p)) * seed) as f32);
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_on_empty_tape_is_an_error() {
        let tape = Tape::new();
        assert!(matches!(tape.backward(Var(0), &Tensor::scalar(1.0)), Err(Error::EmptyTape)));
    }

    #[test]
    fn unused_parameter_gets_exact_zero() {
        let mut store = ParamStore::new();
        store.insert("used", Tensor::full(&[1, 2], 0.5)).unwrap();
        store.insert("unused", Tensor::full(&[3], 1.0)).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let w = tape.param_from(&store, "used").unwrap();
        let b = tape.input(Tensor::zeros(&[1]));
        let y = tape.linear(x, w, b).unwrap();
        let t = tape.input(Tensor::zeros(&[1, 1]));
        let loss = tape.mse_loss(y, t).unwrap();
        let g = tape.backward(loss, &Tensor::scalar(1.0)).unwrap().completed_for(&store);
        assert!(g.get("unused").unwrap().data().iter().all(|&v| v == 0.0));
        // d/dw (w·x)^2 = 2 (w·x) x = 2 * 1.5 * [1, 2]
        assert_eq!(g.get("used").unwrap().data(), &[3.0, 6.0]);
    }

    #[test]
    fn backward_visits_ops_in_reverse_order() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::full(&[1, 2, 4, 4], 0.3));
        let a = tape.silu(x);
        let b = tape.upsample2x(a).unwrap();
        let c = tape.add(b, b).unwrap();
        let t = tape.input(Tensor::zeros(&[1, 2, 8, 8]));
        let loss = tape.mse_loss(c, t).unwrap();
        let g = tape.backward(loss, &Tensor::scalar(1.0)).unwrap();
        let order = g.visit_order().to_vec();
        let mut forward: Vec<usize> =
            (0..tape.len()).filter(|&i| !matches!(tape.op_name(i), "input" | "param")).collect();
        forward.reverse();
        assert_eq!(order, forward);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros(&[1, 2, 4, 4]));
        let b = tape.input(Tensor::zeros(&[1, 2, 4, 5]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.starts_with("add:"), "{err}");
        let err = tape.concat_channels(a, b).unwrap_err().to_string();
        assert!(err.starts_with("concat_channels:"), "{err}");
    }
}
