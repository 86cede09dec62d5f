//! Tape-based reverse-mode differentiation.
//!
//! Every op evaluates eagerly and records its inputs plus whatever it needs
//! for the backward pass. `backward` walks the record in reverse order.

use crate::error::{Error, Result};

use super::conv;
use super::tensor::{axis_split, l2_normalize_with_norms, Tensor, NORM_EPS};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax { x: Var, axis: usize },
    L2Normalize { x: Var, axis: usize, norms: Vec<f64> },
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    Reshape(Var),
    Transpose(Var),
    Conv2d { x: Var, w: Var, b: Var, stride: usize },
    SpatialMean(Var),
    SpatialMax { x: Var, argmax: Vec<usize> },
    ChannelScale { x: Var, w: Var },
    GatherRows { x: Var, idx: Vec<usize> },
    StackRows(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive ops.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    signature: Option<u64>,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Reverse-mode gradients keyed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, if `v` requires a gradient.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but a zero tensor when the loss does not
    /// depend on `v`.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that also hashes every non-smooth decision it takes (ReLU
    /// signs, max positions, gather indices, norm guards). Two evaluations
    /// with equal signatures ran on the same smooth piece of the function.
    pub fn tracking_branches() -> Self {
        Self {
            nodes: Vec::new(),
            signature: Some(FNV_OFFSET),
        }
    }

    pub fn branch_signature(&self) -> Option<u64> {
        self.signature
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Records a leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    fn mark(&mut self, bits: impl IntoIterator<Item = u64>) {
        if let Some(sig) = self.signature.as_mut() {
            for b in bits {
                *sig = (*sig ^ b).wrapping_mul(FNV_PRIME);
            }
        }
    }

    fn tracking(&self) -> bool {
        self.signature.is_some()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        if self.tracking() {
            let mask: Vec<u64> = self.value(a).data().iter().map(|&x| u64::from(x > 0.0)).collect();
            self.mark(mask);
        }
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = self.value(a).softmax(axis)?;
        Ok(self.push(out, Op::Softmax { x: a, axis }, &[a]))
    }

    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (out, norms) = l2_normalize_with_norms(self.value(a), axis)?;
        if self.tracking() {
            let guards: Vec<u64> = norms.iter().map(|&n| u64::from(n > NORM_EPS)).collect();
            self.mark(guards);
        }
        Ok(self.push(out, Op::L2Normalize { x: a, axis, norms }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(out, Op::Mean(a), &[a])
    }

    /// Sums along `axis`, keeping it as an extent of 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let (outer, len, inner) = axis_split(x.shape(), axis, "sum_axis")?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += x.data()[(o * len + k) * inner + i];
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = 1;
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::SumAxis { x: a, axis }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    /// Direct 2-D convolution over an `[H, W, C_in]` map with a
    /// `[K, K, C_in, C_out]` kernel, zero padding `K/2`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let out = conv::forward(self.value(x), self.value(w), self.value(b), stride)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, stride }, &[x, w, b]))
    }

    /// `[H, W, C]` to `[1, C]` spatial mean.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let (hw, c) = spatial_dims(self.value(x), "spatial_mean")?;
        let data = self.value(x).data();
        let mut out = vec![0.0; c];
        for p in 0..hw {
            for (o, v) in out.iter_mut().zip(&data[p * c..(p + 1) * c]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= hw as f64);
        Ok(self.push(Tensor::row(out), Op::SpatialMean(x), &[x]))
    }

    /// `[H, W, C]` to `[1, C]` spatial max; ties resolve to the first position.
    pub fn spatial_max(&mut self, x: Var) -> Result<Var> {
        let (hw, c) = spatial_dims(self.value(x), "spatial_max")?;
        let data = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; c];
        let mut argmax = vec![0usize; c];
        for p in 0..hw {
            for ch in 0..c {
                let v = data[p * c + ch];
                if v > out[ch] {
                    out[ch] = v;
                    argmax[ch] = p;
                }
            }
        }
        self.mark(argmax.iter().map(|&p| p as u64));
        Ok(self.push(Tensor::row(out), Op::SpatialMax { x, argmax }, &[x]))
    }

    /// Multiplies every channel of a channel-last map by one weight per channel.
    pub fn channel_scale(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.value(x);
        let ws = self.value(w);
        let c = *xs.shape().last().unwrap();
        if ws.len() != c {
            return Err(Error::dim(
                "channel_scale",
                format!("{} weights for {c} channels", ws.len()),
            ));
        }
        let data: Vec<f64> = xs
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * ws.data()[i % c])
            .collect();
        let out = Tensor::new(xs.shape().to_vec(), data)?;
        Ok(self.push(out, Op::ChannelScale { x, w }, &[x, w]))
    }

    /// Selects rows of a rank-2 value; rows may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xs = self.value(x);
        let (rows, cols) = xs.dims2("gather_rows")?;
        if idx.is_empty() || idx.iter().any(|&i| i >= rows) {
            return Err(Error::dim("gather_rows", format!("bad indices for {rows} rows")));
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(xs.row_slice(i));
        }
        let out = Tensor::new([idx.len(), cols], data)?;
        self.mark(idx.iter().map(|&i| i as u64));
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Stacks equal-length values as the rows of a `[b, n]` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let n = rows
            .first()
            .map(|&r| self.value(r).len())
            .ok_or_else(|| Error::dim("stack_rows", "no rows"))?;
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            let v = self.value(r);
            if v.len() != n {
                return Err(Error::dim("stack_rows", "rows differ in length"));
            }
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new([rows.len(), n], data)?;
        Ok(self.push(out, Op::StackRows(rows.to_vec()), rows))
    }

    /// Reverse pass from a scalar `loss`. Each gradient-requiring leaf gets
    /// exactly one accumulated gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0])?);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        // Only leaves keep their gradient.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let like = |v: Var, data: Vec<f64>| Tensor::new(val(v).shape().to_vec(), data);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let da = g.matmul(&val(*b).transpose()?)?;
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let db = val(*a).transpose()?.matmul(g)?;
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let da = g.zip_map(val(*b), "mul", |x, y| x * y)?;
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let db = g.zip_map(val(*a), "mul", |x, y| x * y)?;
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Square(a) => {
                let d = g.zip_map(val(*a), "square", |x, y| 2.0 * x * y)?;
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(&node.value, "sigmoid", |x, y| x * y * (1.0 - y))?;
                self.accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                let d = g.zip_map(val(*a), "relu", |x, y| if y > 0.0 { x } else { 0.0 })?;
                self.accumulate(grads, *a, d);
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, len, inner) = axis_split(y.shape(), *axis, "softmax")?;
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g.data()[idx(k)] * y.data()[idx(k)]).sum();
                        for k in 0..len {
                            d[idx(k)] = y.data()[idx(k)] * (g.data()[idx(k)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, like(*x, d)?);
            }
            Op::L2Normalize { x, axis, norms } => {
                let y = &node.value;
                let (outer, len, inner) = axis_split(y.shape(), *axis, "l2_normalize")?;
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let norm = norms[o * inner + i];
                        if norm <= NORM_EPS {
                            continue;
                        }
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g.data()[idx(k)] * y.data()[idx(k)]).sum();
                        for k in 0..len {
                            d[idx(k)] = (g.data()[idx(k)] - y.data()[idx(k)] * dot) / norm;
                        }
                    }
                }
                self.accumulate(grads, *x, like(*x, d)?);
            }
            Op::Sum(a) => {
                let s = g.item();
                self.accumulate(grads, *a, val(*a).map(|_| s));
            }
            Op::Mean(a) => {
                let s = g.item() / val(*a).len() as f64;
                self.accumulate(grads, *a, val(*a).map(|_| s));
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = axis_split(val(*x).shape(), *axis, "sum_axis")?;
                let mut d = vec![0.0; val(*x).len()];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            d[(o * len + k) * inner + i] = g.data()[o * inner + i];
                        }
                    }
                }
                self.accumulate(grads, *x, like(*x, d)?);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, like(*a, g.data().to_vec())?),
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()?),
            Op::Conv2d { x, w, b, stride } => {
                let (dx, dw, db) = conv::backward(val(*x), val(*w), g, *stride)?;
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, like(*b, db)?);
            }
            Op::SpatialMean(x) => {
                let (hw, c) = spatial_dims(val(*x), "spatial_mean")?;
                let d: Vec<f64> = (0..hw * c).map(|i| g.data()[i % c] / hw as f64).collect();
                self.accumulate(grads, *x, like(*x, d)?);
            }
            Op::SpatialMax { x, argmax } => {
                let (hw, c) = spatial_dims(val(*x), "spatial_max")?;
                let mut d = vec![0.0; hw * c];
                for (ch, &p) in argmax.iter().enumerate() {
                    d[p * c + ch] = g.data()[ch];
                }
                self.accumulate(grads, *x, like(*x, d)?);
            }
            Op::ChannelScale { x, w } => {
                let c = val(*w).len();
                if self.requires_grad(*x) {
                    let wd = val(*w).data();
                    let d: Vec<f64> = g.data().iter().enumerate().map(|(i, v)| v * wd[i % c]).collect();
                    self.accumulate(grads, *x, like(*x, d)?);
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![0.0; c];
                    for (i, (gv, xv)) in g.data().iter().zip(val(*x).data()).enumerate() {
                        dw[i % c] += gv * xv;
                    }
                    self.accumulate(grads, *w, like(*w, dw)?);
                }
            }
            Op::GatherRows { x, idx } => {
                let (_, cols) = val(*x).dims2("gather_rows")?;
                let mut d = vec![0.0; val(*x).len()];
                for (r, &src) in idx.iter().enumerate() {
                    for c in 0..cols {
                        d[src * cols + c] += g.data()[r * cols + c];
                    }
                }
                self.accumulate(grads, *x, like(*x, d)?);
            }
            Op::StackRows(rows) => {
                let n = g.shape()[1];
                for (r, &v) in rows.iter().enumerate() {
                    let d = g.data()[r * n..(r + 1) * n].to_vec();
                    self.accumulate(grads, v, like(v, d)?);
                }
            }
        }
        Ok(())
    }
}

/// Logit magnitude beyond which `f64` would round the sigmoid to exactly
/// 0 or 1; inputs are clamped to it so outputs stay in the open interval.
pub const SIGMOID_LIMIT: f64 = 36.0;

pub fn sigmoid(x: f64) -> f64 {
    let x = x.clamp(-SIGMOID_LIMIT, SIGMOID_LIMIT);
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn spatial_dims(x: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match x.shape() {
        [h, w, c] => Ok((h * w, *c)),
        s => Err(Error::dim(op, format!("expected [H, W, C], got {s:?}"))),
    }
}
