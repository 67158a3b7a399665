//! Tape-based reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and appends a node to the [`Tape`].
//! [`Tape::backward`] walks the nodes in reverse and accumulates gradients
//! into tracked leaves; a new tape is built for every optimisation step.

use std::rc::Rc;

use crate::conv::{self, ConvGeometry};
use crate::error::{Error, Result};
use crate::tensor::{pairwise_sum, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation implemented outside the tape with a hand-written adjoint.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// Gradients with respect to every input, given the output gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Vec<f64>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Abs(Var),
    Square(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d { x: Var, w: Var, geom: ConvGeometry },
    ConvTranspose2d { x: Var, w: Var, geom: ConvGeometry },
    Reshape(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Expand { x: Var, map: Rc<Vec<usize>> },
    Sum(Var),
    Mean(Var),
    SumPerSample(Var),
    Custom { op: Rc<dyn CustomOp>, inputs: Vec<Var> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Softplus(..) => "softplus",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Tanh(..) => "tanh",
            Op::Abs(..) => "abs",
            Op::Square(..) => "square",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat_channels",
            Op::Slice { .. } => "slice_channels",
            Op::Expand { .. } => "expand",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumPerSample(..) => "sum_per_sample",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

/// Splits `[N, C, rest..]` into `(N, C, prod(rest))`.
fn channel_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::config(format!(
            "channel op needs rank >= 2, got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// For each element of `dst`, the index of the `src` element broadcast into it.
fn broadcast_map(src: &[usize], dst: &[usize]) -> Result<Vec<usize>> {
    if src.len() > dst.len() {
        return Err(Error::config(format!("cannot broadcast {src:?} to {dst:?}")));
    }
    let pad = dst.len() - src.len();
    let mut src_full = vec![1usize; pad];
    src_full.extend_from_slice(src);
    for (s, d) in src_full.iter().zip(dst) {
        if *s != *d && *s != 1 {
            return Err(Error::config(format!("cannot broadcast {src:?} to {dst:?}")));
        }
    }
    let mut strides = vec![0usize; dst.len()];
    let mut acc = 1;
    for i in (0..dst.len()).rev() {
        strides[i] = if src_full[i] == 1 { 0 } else { acc };
        acc *= src_full[i];
    }
    let numel: usize = dst.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; dst.len()];
    for _ in 0..numel {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..dst.len()).rev() {
            idx[d] += 1;
            if idx[d] < dst[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(map)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn add_into(acc: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match acc {
        Some(a) => a.iter_mut().zip(g).for_each(|(a, g)| *a += g),
        None => *acc = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Accumulated gradient of a tracked leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::numeric(op.name(), "non-finite value in forward pass"));
        }
        self.nodes.push(Node { value, op, tracked });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// A leaf whose gradient is recorded.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::config(format!(
                "{op}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let tracked = self.tracked(&[a, b]);
        self.push(value, op, tracked)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| f(*v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let tracked = self.tracked(&[x]);
        self.push(value, op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(x, Op::LeakyRelu(x, slope), |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// `[m,k] x [k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::config(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = conv::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let tracked = self.tracked(&[a, b]);
        self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b), tracked)
    }

    /// Adds `b[c]` to every element of channel `c` of `x: [N, C, ..]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, c, inner) = channel_dims(self.shape(x))?;
        if self.value(b).len() != c {
            return Err(Error::config(format!(
                "add_bias: {} bias values for {c} channels",
                self.value(b).len()
            )));
        }
        let mut data = self.value(x).data().to_vec();
        let bias = self.value(b).data();
        for s in 0..n {
            for (ch, bv) in bias.iter().enumerate() {
                let base = (s * c + ch) * inner;
                data[base..base + inner].iter_mut().for_each(|v| *v += bv);
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let tracked = self.tracked(&[x, b]);
        self.push(value, Op::AddBias(x, b), tracked)
    }

    /// `x: [N,C,H,W]`, `w: [O,C,KH,KW]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::config(format!("conv2d: input {sx:?}, weight {sw:?}")));
        }
        let out_h = conv::conv_out_extent(sx[2], sw[2], stride, pad);
        let out_w = conv::conv_out_extent(sx[3], sw[3], stride, pad);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(Error::config(format!("conv2d: kernel {sw:?} does not fit {sx:?}")));
        };
        let geom = ConvGeometry {
            batch: sx[0],
            in_ch: sx[1],
            in_h: sx[2],
            in_w: sx[3],
            out_ch: sw[0],
            out_h,
            out_w,
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
        };
        let data = conv::conv_forward(&geom, self.value(x).data(), self.value(w).data());
        let value = Tensor::new(vec![geom.batch, geom.out_ch, out_h, out_w], data)?;
        let tracked = self.tracked(&[x, w]);
        self.push(value, Op::Conv2d { x, w, geom }, tracked)
    }

    /// `x: [N,C,H,W]`, `w: [C,O,KH,KW]`; the adjoint of [`Tape::conv2d`] with the same weight.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] {
            return Err(Error::config(format!(
                "conv_transpose2d: input {sx:?}, weight {sw:?}"
            )));
        }
        let out_h = conv::conv_transpose_out_extent(sx[2], sw[2], stride, pad);
        let out_w = conv::conv_transpose_out_extent(sx[3], sw[3], stride, pad);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(Error::config(format!(
                "conv_transpose2d: kernel {sw:?} does not fit {sx:?}"
            )));
        };
        // geometry of the regular convolution this transposes
        let geom = ConvGeometry {
            batch: sx[0],
            in_ch: sw[1],
            in_h: out_h,
            in_w: out_w,
            out_ch: sx[1],
            out_h: sx[2],
            out_w: sx[3],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
        };
        if conv::conv_out_extent(out_h, geom.kh, stride, pad) != Some(sx[2])
            || conv::conv_out_extent(out_w, geom.kw, stride, pad) != Some(sx[3])
        {
            return Err(Error::config("conv_transpose2d: inconsistent geometry"));
        }
        let data = conv::conv_input_grad(&geom, self.value(x).data(), self.value(w).data());
        let value = Tensor::new(vec![geom.batch, geom.in_ch, out_h, out_w], data)?;
        let tracked = self.tracked(&[x, w]);
        self.push(value, Op::ConvTranspose2d { x, w, geom }, tracked)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let tracked = self.tracked(&[x]);
        self.push(value, Op::Reshape(x), tracked)
    }

    /// Concatenates along dimension 1.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::usage("concat_channels of nothing"))?;
        let (n, _, inner) = channel_dims(self.shape(*first))?;
        let rest: Vec<usize> = self.shape(*first)[2..].to_vec();
        let mut total_c = 0;
        for p in parts {
            let (pn, pc, _) = channel_dims(self.shape(*p))?;
            if pn != n || self.shape(*p)[2..] != rest[..] {
                return Err(Error::config(format!(
                    "concat_channels: {:?} vs {:?}",
                    self.shape(*first),
                    self.shape(*p)
                )));
            }
            total_c += pc;
        }
        let mut data = Vec::with_capacity(n * total_c * inner);
        for s in 0..n {
            for p in parts {
                let v = self.value(*p);
                let pc = v.shape()[1];
                data.extend_from_slice(&v.data()[s * pc * inner..(s + 1) * pc * inner]);
            }
        }
        let mut shape = vec![n, total_c];
        shape.extend(rest);
        let tracked = self.tracked(parts);
        self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec()), tracked)
    }

    /// Channels `start..start+len` of `x: [N, C, ..]`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, inner) = channel_dims(self.shape(x))?;
        if start + len > c || len == 0 {
            return Err(Error::config(format!(
                "slice_channels {start}..{} of {c}",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * len * inner);
        for s in 0..n {
            data.extend_from_slice(&src[(s * c + start) * inner..(s * c + start + len) * inner]);
        }
        let mut shape = self.shape(x).to_vec();
        shape[1] = len;
        let tracked = self.tracked(&[x]);
        self.push(Tensor::new(shape, data)?, Op::Slice { x, start }, tracked)
    }

    /// Numpy-style broadcast of `x` to `shape`.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let map = broadcast_map(self.shape(x), shape)?;
        let src = self.value(x).data();
        let data = map.iter().map(|i| src[*i]).collect();
        let tracked = self.tracked(&[x]);
        let op = Op::Expand {
            x,
            map: Rc::new(map),
        };
        self.push(Tensor::new(shape.to_vec(), data)?, op, tracked)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = pairwise_sum(self.value(x).data());
        let tracked = self.tracked(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = pairwise_sum(v.data()) / v.len() as f64;
        let tracked = self.tracked(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), tracked)
    }

    /// `[N, ..] -> [N]`
    pub fn sum_per_sample(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let n = *v
            .shape()
            .first()
            .ok_or_else(|| Error::config("sum_per_sample of a rank-0 tensor"))?;
        let inner = v.len() / n.max(1);
        let data = (0..n)
            .map(|s| pairwise_sum(&v.data()[s * inner..(s + 1) * inner]))
            .collect();
        let tracked = self.tracked(&[x]);
        self.push(Tensor::new(vec![n], data)?, Op::SumPerSample(x), tracked)
    }

    pub fn custom(&mut self, op: Rc<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
        let value = op.forward(&values)?;
        let tracked = self.tracked(inputs);
        self.push(
            value,
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
            tracked,
        )
    }

    /// Accumulates `d loss / d leaf` into every tracked leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].tracked {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::numeric(
                    node.op.name(),
                    format!("non-finite gradient {bad}"),
                ));
            }
            if let Op::Leaf = node.op {
                add_into(&mut self.leaf_grads[i], g);
                continue;
            }
            for (parent, pg) in self.node_backward(i, &g) {
                if self.nodes[parent.0].tracked {
                    add_into(&mut grads[parent.0], pg);
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let map1 = |x: Var, f: &dyn Fn(usize) -> f64| -> Vec<(Var, Vec<f64>)> {
            vec![(x, (0..g.len()).map(|k| g[k] * f(k)).collect())]
        };
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                vec![
                    (*a, g.iter().zip(bv).map(|(g, b)| g * b).collect()),
                    (*b, g.iter().zip(av).map(|(g, a)| g * a).collect()),
                ]
            }
            Op::Scale(x, c) => vec![(*x, g.iter().map(|v| v * c).collect())],
            Op::AddScalar(x) => vec![(*x, g.to_vec())],
            Op::Exp(x) => map1(*x, &|k| out[k]),
            Op::Log(x) => {
                let xv = val(*x);
                map1(*x, &|k| 1.0 / xv[k])
            }
            Op::Softplus(x) => {
                let xv = val(*x);
                map1(*x, &|k| sigmoid(xv[k]))
            }
            Op::LeakyRelu(x, slope) => {
                let xv = val(*x);
                map1(*x, &|k| if xv[k] > 0.0 { 1.0 } else { *slope })
            }
            Op::Tanh(x) => map1(*x, &|k| 1.0 - out[k] * out[k]),
            Op::Abs(x) => {
                let xv = val(*x);
                // signum(0) = 1: a one-sided derivative at the kink
                map1(*x, &|k| xv[k].signum())
            }
            Op::Square(x) => {
                let xv = val(*x);
                map1(*x, &|k| 2.0 * xv[k])
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                vec![
                    (*a, conv::matmul_nt(g, val(*b), m, n, k)),
                    (*b, conv::matmul_tn(val(*a), g, m, k, n)),
                ]
            }
            Op::AddBias(x, b) => {
                let (n, c, inner) = channel_dims(node.value.shape()).expect("checked in forward");
                let mut gb = vec![0.0; c];
                for s in 0..n {
                    for (ch, acc) in gb.iter_mut().enumerate() {
                        let base = (s * c + ch) * inner;
                        *acc += pairwise_sum(&g[base..base + inner]);
                    }
                }
                vec![(*x, g.to_vec()), (*b, gb)]
            }
            Op::Conv2d { x, w, geom } => {
                let mut res = Vec::with_capacity(2);
                if self.nodes[x.0].tracked {
                    res.push((*x, conv::conv_input_grad(geom, g, val(*w))));
                }
                if self.nodes[w.0].tracked {
                    res.push((*w, conv::conv_weight_grad(geom, g, val(*x))));
                }
                res
            }
            Op::ConvTranspose2d { x, w, geom } => {
                let mut res = Vec::with_capacity(2);
                if self.nodes[x.0].tracked {
                    res.push((*x, conv::conv_forward(geom, g, val(*w))));
                }
                if self.nodes[w.0].tracked {
                    res.push((*w, conv::conv_weight_grad(geom, val(*x), g)));
                }
                res
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Concat(parts) => {
                let (n, _, inner) = channel_dims(node.value.shape()).expect("checked in forward");
                let mut grads: Vec<Vec<f64>> = parts
                    .iter()
                    .map(|p| Vec::with_capacity(self.nodes[p.0].value.len()))
                    .collect();
                let mut offset = 0;
                for _ in 0..n {
                    for (p, pg) in parts.iter().zip(grads.iter_mut()) {
                        let len = self.shape(*p)[1] * inner;
                        pg.extend_from_slice(&g[offset..offset + len]);
                        offset += len;
                    }
                }
                parts.iter().copied().zip(grads).collect()
            }
            Op::Slice { x, start } => {
                let (n, c, inner) = channel_dims(self.shape(*x)).expect("checked in forward");
                let len = node.value.shape()[1];
                let mut gx = vec![0.0; self.nodes[x.0].value.len()];
                for s in 0..n {
                    let dst = (s * c + start) * inner;
                    gx[dst..dst + len * inner]
                        .copy_from_slice(&g[s * len * inner..(s + 1) * len * inner]);
                }
                vec![(*x, gx)]
            }
            Op::Expand { x, map } => {
                let mut gx = vec![0.0; self.nodes[x.0].value.len()];
                for (k, src) in map.iter().enumerate() {
                    gx[*src] += g[k];
                }
                vec![(*x, gx)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.nodes[x.0].value.len()])],
            Op::Mean(x) => {
                let len = self.nodes[x.0].value.len();
                vec![(*x, vec![g[0] / len as f64; len])]
            }
            Op::SumPerSample(x) => {
                let len = self.nodes[x.0].value.len();
                let inner = len / g.len().max(1);
                vec![(*x, (0..len).map(|k| g[k / inner]).collect())]
            }
            Op::Custom { op, inputs } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let grads = op.backward(&values, &node.value, g);
                inputs.iter().copied().zip(grads).collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_with_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let y = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn exp_of_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3])).unwrap();
        let y = tape.exp(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn conv_center_of_all_ones() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 4, 4], 1.0)).unwrap();
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
        let y = tape.conv2d(x, w, 1, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 4, 4]);
        assert_eq!(tape.value(y).data()[5], 9.0);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn exp_sum_chain() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![0.0])).unwrap();
        let e = tape.exp(x).unwrap();
        let loss = tape.sum(e).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::from_vec(vec![1.0, -2.0])).unwrap();
        let sq = tape.square(w).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[4.0, -8.0]);
        tape.zero_grad();
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(w), Err(Error::Usage(_))));
    }

    #[test]
    fn non_finite_values_are_faults() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![-1.0])).unwrap();
        match tape.log(x) {
            Err(Error::Numeric { op, .. }) => assert_eq!(op, "log"),
            other => panic!("expected numeric fault, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2])).unwrap();
        let b = tape.constant(Tensor::zeros(&[3])).unwrap();
        assert!(matches!(tape.add(a, b), Err(Error::Config(_))));
    }

    #[test]
    fn expand_broadcasts_and_sums_back() {
        let mut tape = Tape::new();
        let s = tape.param(Tensor::new(vec![1, 2, 1], vec![1.0, 2.0]).unwrap()).unwrap();
        let e = tape.expand(s, &[3, 2, 2]).unwrap();
        assert_eq!(
            tape.value(e).data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]
        );
        let loss = tape.sum(e).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(s).unwrap(), &[6.0, 6.0]);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = tape.param(t(&[2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0])).unwrap();
        let c = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(
            tape.value(c).data(),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
        );
        let back = tape.slice_channels(c, 1, 2).unwrap();
        assert_eq!(tape.value(back), tape.value(b));
    }
}
