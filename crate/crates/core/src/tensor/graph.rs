use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::params::ModelParams;
use super::Tensor;
use crate::error::{shape_err, Result};

pub const LN_EPS: f64 = 1e-5;
pub const BCE_CLAMP: f64 = 1e-7;
const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value {
    Owned(Vec<f32>),
    Param(usize),
}

enum Op {
    Input,
    Leaf,
    Param,
    Conv2d { x: Var, w: Var, b: Var, dilation: usize },
    AvgPool2(Var),
    Upsample2(Var),
    LayerNorm { x: Var, gain: Var, offset: Var, xhat: Vec<f32>, inv_std: Vec<f32> },
    Relu(Var),
    Sigmoid(Var),
    Softmax2(Var),
    SelectChannel { x: Var, channel: usize },
    Concat(Var, Var),
    ChannelDot(Var, Var),
    ChannelScale(Var, Var),
    TileBatch { x: Var, times: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Abs(Var),
    NormalizeChannels { x: Var, norms: Vec<f32> },
    Linear { x: Var, w: Var, b: Var },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    WeightedSum { x: Var, weights: Vec<f32> },
    Bce { pred: Var, label: Vec<f32> },
}

struct Node {
    shape: Vec<usize>,
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Parameter gradients produced by one [`Graph::backward`] call, keyed by
/// the parameter's position in its [`ModelParams`].
#[derive(Debug, Default)]
pub struct Gradients {
    pub(crate) entries: Vec<(usize, Vec<f32>)>,
}

impl Gradients {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Tape of operations. Parameters are borrowed, not copied; gradients for
/// them come back from [`Graph::backward`] and are folded in with
/// [`ModelParams::accumulate`].
pub struct Graph<'p> {
    params: Option<&'p ModelParams>,
    param_vars: HashMap<usize, Var>,
    nodes: Vec<Node>,
    leaf_grads: HashMap<usize, Vec<f32>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims4(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match shape {
        [b, h, w, c] => Ok((*b, *h, *w, *c)),
        _ => Err(shape_err(format!("{what} expects a rank-4 tensor, got {shape:?}"))),
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            params: None,
            param_vars: HashMap::new(),
            nodes: Vec::new(),
            leaf_grads: HashMap::new(),
        }
    }

    pub fn with_params(params: &'p ModelParams) -> Self {
        Self {
            params: Some(params),
            ..Self::new()
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            value: Value::Owned(data),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f32] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(i) => self
                .params
                .expect("param node without params")
                .entry_at(*i)
                .value
                .data(),
        }
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape is consistent")
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// A constant: no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Input, false)
    }

    /// A free variable whose gradient is kept on the graph (see [`Graph::grad`]).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    /// Loads a named parameter. Frozen parameters behave like constants.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let params = self
            .params
            .ok_or_else(|| crate::Error::State("graph has no parameter set".into()))?;
        let idx = params
            .index_of(name)
            .ok_or_else(|| crate::Error::State(format!("unknown parameter {name}")))?;
        if let Some(v) = self.param_vars.get(&idx) {
            return Ok(*v);
        }
        let e = params.entry_at(idx);
        self.nodes.push(Node {
            shape: e.value.shape().to_vec(),
            value: Value::Param(idx),
            op: Op::Param,
            requires_grad: !e.frozen,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(idx, v);
        Ok(v)
    }

    /// Accumulated gradient of a [`Graph::leaf`].
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.leaf_grads.get(&v.0).map(|g| g.as_slice())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var> {
        let (bsz, h, wd, cin) = dims4(self.shape(x), "conv2d")?;
        let (kh, kw, kcin, cout) = dims4(self.shape(w), "conv2d kernel")?;
        if kcin != cin {
            return Err(shape_err(format!("conv2d: input has {cin} channels, kernel expects {kcin}")));
        }
        if self.shape(b) != [cout] {
            return Err(shape_err(format!("conv2d: bias {:?} for {cout} outputs", self.shape(b))));
        }
        if !(1..=3).contains(&kh) || !(1..=3).contains(&kw) || !(1..=2).contains(&dilation) {
            return Err(shape_err(format!("conv2d: unsupported kernel {kh}x{kw} dilation {dilation}")));
        }
        let geom = ConvGeom {
            batch: bsz,
            h,
            w: wd,
            cin,
            kh,
            kw,
            cout,
            dilation,
        };
        let out = kernels::conv2d_forward(self.value(x), self.value(w), self.value(b), &geom);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(vec![bsz, h, wd, cout], out, Op::Conv2d { x, w, b, dilation }, rg))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (b, h, w, c) = dims4(self.shape(x), "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err(format!("avg_pool2: odd spatial size {h}x{w}")));
        }
        let out = kernels::avg_pool2_forward(self.value(x), b, h, w, c);
        let rg = self.rg(x);
        Ok(self.push(vec![b, h / 2, w / 2, c], out, Op::AvgPool2(x), rg))
    }

    pub fn upsample_nn2(&mut self, x: Var) -> Result<Var> {
        let (b, h, w, c) = dims4(self.shape(x), "upsample_nn2")?;
        let out = kernels::upsample2_forward(self.value(x), b, h, w, c);
        let rg = self.rg(x);
        Ok(self.push(vec![b, 2 * h, 2 * w, c], out, Op::Upsample2(x), rg))
    }

    /// Normalizes each sample over all of its elements, then applies a
    /// per-channel (last axis) gain and offset.
    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap_or(&0);
        if shape.len() < 2 || self.shape(gain) != [c] || self.shape(offset) != [c] {
            return Err(shape_err(format!(
                "layer_norm: input {shape:?}, gain {:?}, offset {:?}",
                self.shape(gain),
                self.shape(offset)
            )));
        }
        let b = shape[0];
        let n = self.value(x).len() / b.max(1);
        if n < 2 {
            return Err(shape_err("layer_norm needs at least 2 elements per sample"));
        }
        let xs = self.value(x);
        let (g, o) = (self.value(gain), self.value(offset));
        let mut xhat = vec![0.0f32; xs.len()];
        let mut out = vec![0.0f32; xs.len()];
        let mut inv_std = vec![0.0f32; b];
        for s in 0..b {
            let chunk = &xs[s * n..(s + 1) * n];
            let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = chunk.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[s] = is as f32;
            for (i, &v) in chunk.iter().enumerate() {
                let xh = ((v as f64 - mean) * is) as f32;
                xhat[s * n + i] = xh;
                let ch = i % c;
                out[s * n + i] = xh * g[ch] + o[ch];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(offset);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(x));
        self.push(shape, out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(x));
        self.push(shape, out, Op::Sigmoid(x), rg)
    }

    /// Softmax over a last axis of length 2.
    pub fn softmax2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.last() != Some(&2) {
            return Err(shape_err(format!("softmax2 needs last dimension 2, got {shape:?}")));
        }
        let mut out = vec![0.0f32; self.value(x).len()];
        for (o, v) in out.chunks_mut(2).zip(self.value(x).chunks(2)) {
            // p1 = sigmoid(l1 - l0) is the numerically stable form.
            let p1 = sigmoid(v[1] - v[0]);
            o[0] = 1.0 - p1;
            o[1] = p1;
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax2(x), rg))
    }

    /// Keeps one channel of the last axis (the axis is retained with size 1).
    pub fn select_channel(&mut self, x: Var, channel: usize) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap_or(&0);
        if channel >= c {
            return Err(shape_err(format!("channel {channel} out of range for {shape:?}")));
        }
        let out = self.value(x).chunks(c).map(|p| p[channel]).collect();
        *shape.last_mut().unwrap() = 1;
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::SelectChannel { x, channel }, rg))
    }

    /// Concatenates two rank-4 tensors along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, h, w, ca) = dims4(self.shape(a), "concat")?;
        let (n2, h2, w2, cb) = dims4(self.shape(b), "concat")?;
        if (n, h, w) != (n2, h2, w2) {
            return Err(shape_err(format!(
                "concat: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(n * h * w * (ca + cb));
        for (pa, pb) in va.chunks(ca.max(1)).zip(vb.chunks(cb.max(1))) {
            out.extend_from_slice(&pa[..ca]);
            out.extend_from_slice(&pb[..cb]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![n, h, w, ca + cb], out, Op::Concat(a, b), rg))
    }

    fn check_vec_per_sample(&self, map: Var, vecv: Var, what: &str) -> Result<(usize, usize, usize, usize)> {
        let (b, h, w, c) = dims4(self.shape(map), what)?;
        let vs = self.shape(vecv);
        let ok = matches!(vs, [vb, 1, 1, vc] if *vb == b && *vc == c) || matches!(vs, [vb, vc] if *vb == b && *vc == c);
        if !ok {
            return Err(shape_err(format!("{what}: map {:?} with vector {vs:?}", self.shape(map))));
        }
        Ok((b, h, w, c))
    }

    /// `out[b,y,x] = Σ_c e[b,y,x,c] · t[b,c]`; `t` is `[B,C]` or `[B,1,1,C]`.
    pub fn channel_dot(&mut self, e: Var, t: Var) -> Result<Var> {
        let (b, h, w, c) = self.check_vec_per_sample(e, t, "channel_dot")?;
        let (ev, tv) = (self.value(e), self.value(t));
        let hw = h * w;
        let mut out = vec![0.0f32; b * hw];
        for s in 0..b {
            let tvec = &tv[s * c..(s + 1) * c];
            for p in 0..hw {
                let px = &ev[(s * hw + p) * c..(s * hw + p + 1) * c];
                out[s * hw + p] = px.iter().zip(tvec).map(|(a, b)| a * b).sum();
            }
        }
        let rg = self.rg(e) || self.rg(t);
        Ok(self.push(vec![b, h, w, 1], out, Op::ChannelDot(e, t), rg))
    }

    /// `out[b,y,x,c] = h[b,y,x,0] · t[b,c]`.
    pub fn channel_scale(&mut self, hmap: Var, t: Var) -> Result<Var> {
        let (b, h, w, one) = dims4(self.shape(hmap), "channel_scale")?;
        if one != 1 {
            return Err(shape_err(format!("channel_scale expects one channel, got {one}")));
        }
        let c = *self.shape(t).last().unwrap_or(&0);
        let probe_shape = [b, h, w, c];
        let ts = self.shape(t);
        let ok = matches!(ts, [vb, 1, 1, vc] if *vb == b && *vc == c) || matches!(ts, [vb, vc] if *vb == b && *vc == c);
        if !ok {
            return Err(shape_err(format!("channel_scale: map {probe_shape:?} with vector {ts:?}")));
        }
        let (hv, tv) = (self.value(hmap), self.value(t));
        let hw = h * w;
        let mut out = vec![0.0f32; b * hw * c];
        for s in 0..b {
            let tvec = &tv[s * c..(s + 1) * c];
            for p in 0..hw {
                let hval = hv[s * hw + p];
                for (o, tc) in out[(s * hw + p) * c..(s * hw + p + 1) * c].iter_mut().zip(tvec) {
                    *o = hval * tc;
                }
            }
        }
        let rg = self.rg(hmap) || self.rg(t);
        Ok(self.push(probe_shape.to_vec(), out, Op::ChannelScale(hmap, t), rg))
    }

    /// Repeats every sample `times` times consecutively along the batch axis.
    pub fn tile_batch(&mut self, x: Var, times: usize) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        if shape.is_empty() || times == 0 {
            return Err(shape_err("tile_batch needs a batch axis and times > 0"));
        }
        let per = self.value(x).len() / shape[0].max(1);
        let mut out = Vec::with_capacity(self.value(x).len() * times);
        for s in self.value(x).chunks(per.max(1)) {
            for _ in 0..times {
                out.extend_from_slice(s);
            }
        }
        shape[0] *= times;
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::TileBatch { x, times }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "sub")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Sub(a, b), rg))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.abs()).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(x));
        self.push(shape, out, Op::Abs(x), rg)
    }

    /// Scales each vector along the last axis to unit Euclidean length.
    pub fn normalize_channels(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let c = (*shape.last().unwrap_or(&1)).max(1);
        let mut out = self.value(x).to_vec();
        let mut norms = Vec::with_capacity(out.len() / c);
        for v in out.chunks_mut(c) {
            let n = (v.iter().map(|&a| a as f64 * a as f64).sum::<f64>() + NORM_EPS).sqrt();
            norms.push(n as f32);
            v.iter_mut().for_each(|a| *a = (*a as f64 / n) as f32);
        }
        let rg = self.rg(x);
        self.push(shape, out, Op::NormalizeChannels { x, norms }, rg)
    }

    /// `x: [B, C]`, `w: [C]`, `b: [1]` → `[B, 1]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [n, c] = xs[..] else {
            return Err(shape_err(format!("linear expects [B, C], got {xs:?}")));
        };
        if self.shape(w) != [c] || self.shape(b) != [1] {
            return Err(shape_err(format!(
                "linear: weights {:?}, bias {:?} for {c} features",
                self.shape(w),
                self.shape(b)
            )));
        }
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b)[0]);
        let out = xv
            .chunks(c.max(1))
            .take(n)
            .map(|row| row.iter().zip(wv).map(|(a, b)| a * b).sum::<f32>() + bv)
            .collect();
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(vec![n, 1], out, Op::Linear { x, w, b }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(shape_err(format!("cannot reshape {:?} to {shape:?}", self.shape(x))));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|&v| v as f64).sum::<f64>() as f32;
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = (self.value(x).iter().map(|&v| v as f64).sum::<f64>() / n) as f32;
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Mean(x), rg)
    }

    /// `Σ x_i w_i` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f32>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(shape_err(format!(
                "weighted_sum: {} weights for {:?}",
                weights.len(),
                self.shape(x)
            )));
        }
        let s = self
            .value(x)
            .iter()
            .zip(&weights)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum::<f64>() as f32;
        let rg = self.rg(x);
        Ok(self.push(vec![1], vec![s], Op::WeightedSum { x, weights }, rg))
    }

    /// Mean binary cross-entropy of probabilities `pred` against `label`,
    /// with predictions clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, pred: Var, label: &Tensor) -> Result<Var> {
        if self.shape(pred) != label.shape() {
            return Err(shape_err(format!(
                "bce: prediction {:?} vs label {:?}",
                self.shape(pred),
                label.shape()
            )));
        }
        let loss = bce_value(self.value(pred), label.data());
        let rg = self.rg(pred);
        Ok(self.push(
            vec![1],
            vec![loss as f32],
            Op::Bce {
                pred,
                label: label.data().to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar. Leaf gradients accumulate on the graph;
    /// parameter gradients are returned.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(format!("backward needs a scalar loss, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut param_grads: Vec<(usize, Vec<f32>)> = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match &self.nodes[i].value {
                Value::Param(idx) => {
                    param_grads.push((*idx, gy));
                    continue;
                }
                Value::Owned(_) if matches!(self.nodes[i].op, Op::Leaf) => {
                    match self.leaf_grads.get_mut(&i) {
                        Some(acc) => add_into(acc, &gy),
                        None => {
                            self.leaf_grads.insert(i, gy);
                        }
                    }
                    continue;
                }
                Value::Owned(_) => {}
            }
            self.backprop_node(i, &gy, &mut grads);
        }
        param_grads.sort_by_key(|(idx, _)| *idx);
        Ok(Gradients { entries: param_grads })
    }

    fn backprop_node(&self, i: usize, gy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, g: Vec<f32>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => add_into(existing, &g),
                slot => *slot = Some(g),
            }
        };
        let y = self.value(Var(i));
        match &node.op {
            Op::Input | Op::Leaf | Op::Param => {}
            Op::Conv2d { x, w, b, dilation } => {
                let (bsz, h, wd, cin) = dims4(self.shape(*x), "").unwrap();
                let (kh, kw, _, cout) = dims4(self.shape(*w), "").unwrap();
                let geom = ConvGeom {
                    batch: bsz,
                    h,
                    w: wd,
                    cin,
                    kh,
                    kw,
                    cout,
                    dilation: *dilation,
                };
                let r = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    gy,
                    &geom,
                    self.rg(*x),
                    self.rg(*w),
                    self.rg(*b),
                );
                if let Some(g) = r.dx {
                    acc(*x, g);
                }
                if let Some(g) = r.dkernel {
                    acc(*w, g);
                }
                if let Some(g) = r.dbias {
                    acc(*b, g);
                }
            }
            Op::AvgPool2(x) => {
                let (b, h, w, c) = dims4(self.shape(*x), "").unwrap();
                acc(*x, kernels::avg_pool2_backward(gy, b, h, w, c));
            }
            Op::Upsample2(x) => {
                let (b, h, w, c) = dims4(self.shape(*x), "").unwrap();
                acc(*x, kernels::upsample2_backward(gy, b, h, w, c));
            }
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                inv_std,
            } => {
                let c = *node.shape.last().unwrap();
                let b = node.shape[0];
                let n = xhat.len() / b;
                let g = self.value(*gain);
                if self.rg(*gain) || self.rg(*offset) {
                    let mut dg = vec![0.0f64; c];
                    let mut dof = vec![0.0f64; c];
                    for (k, (&d, &xh)) in gy.iter().zip(xhat).enumerate() {
                        dg[k % c] += d as f64 * xh as f64;
                        dof[k % c] += d as f64;
                    }
                    acc(*gain, dg.into_iter().map(|v| v as f32).collect());
                    acc(*offset, dof.into_iter().map(|v| v as f32).collect());
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0f32; xhat.len()];
                    for s in 0..b {
                        let r = s * n..(s + 1) * n;
                        let mut sum_d = 0.0f64;
                        let mut sum_dx = 0.0f64;
                        for k in r.clone() {
                            let dxh = gy[k] as f64 * g[k % c] as f64;
                            sum_d += dxh;
                            sum_dx += dxh * xhat[k] as f64;
                        }
                        let (md, mdx) = (sum_d / n as f64, sum_dx / n as f64);
                        let is = inv_std[s] as f64;
                        for k in r {
                            let dxh = gy[k] as f64 * g[k % c] as f64;
                            dx[k] = (is * (dxh - md - xhat[k] as f64 * mdx)) as f32;
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                acc(*x, gy.iter().zip(xv).map(|(&d, &v)| if v > 0.0 { d } else { 0.0 }).collect());
            }
            Op::Sigmoid(x) => {
                acc(*x, gy.iter().zip(y).map(|(&d, &s)| d * s * (1.0 - s)).collect());
            }
            Op::Softmax2(x) => {
                let mut dx = vec![0.0f32; gy.len()];
                for ((o, d), p) in dx.chunks_mut(2).zip(gy.chunks(2)).zip(y.chunks(2)) {
                    let dot = d[0] * p[0] + d[1] * p[1];
                    o[0] = p[0] * (d[0] - dot);
                    o[1] = p[1] * (d[1] - dot);
                }
                acc(*x, dx);
            }
            Op::SelectChannel { x, channel } => {
                let c = *self.shape(*x).last().unwrap();
                let mut dx = vec![0.0f32; gy.len() * c];
                for (k, &d) in gy.iter().enumerate() {
                    dx[k * c + channel] = d;
                }
                acc(*x, dx);
            }
            Op::Concat(a, b) => {
                let ca = *self.shape(*a).last().unwrap();
                let cb = *self.shape(*b).last().unwrap();
                let c = ca + cb;
                if self.rg(*a) {
                    acc(*a, gy.chunks(c).flat_map(|p| p[..ca].iter().copied()).collect());
                }
                if self.rg(*b) {
                    acc(*b, gy.chunks(c).flat_map(|p| p[ca..].iter().copied()).collect());
                }
            }
            Op::ChannelDot(e, t) => {
                let (b, h, w, c) = dims4(self.shape(*e), "").unwrap();
                let hw = h * w;
                let (ev, tv) = (self.value(*e), self.value(*t));
                if self.rg(*e) {
                    let mut de = vec![0.0f32; ev.len()];
                    for s in 0..b {
                        let tvec = &tv[s * c..(s + 1) * c];
                        for p in 0..hw {
                            let d = gy[s * hw + p];
                            for (o, tc) in de[(s * hw + p) * c..(s * hw + p + 1) * c].iter_mut().zip(tvec) {
                                *o = d * tc;
                            }
                        }
                    }
                    acc(*e, de);
                }
                if self.rg(*t) {
                    let mut dt = vec![0.0f64; tv.len()];
                    for s in 0..b {
                        for p in 0..hw {
                            let d = gy[s * hw + p] as f64;
                            let px = &ev[(s * hw + p) * c..(s * hw + p + 1) * c];
                            for (o, &v) in dt[s * c..(s + 1) * c].iter_mut().zip(px) {
                                *o += d * v as f64;
                            }
                        }
                    }
                    acc(*t, dt.into_iter().map(|v| v as f32).collect());
                }
            }
            Op::ChannelScale(hmap, t) => {
                let (b, h, w, _) = dims4(self.shape(*hmap), "").unwrap();
                let c = node.shape[3];
                let hw = h * w;
                let (hv, tv) = (self.value(*hmap), self.value(*t));
                if self.rg(*hmap) {
                    let mut dh = vec![0.0f32; hv.len()];
                    for s in 0..b {
                        let tvec = &tv[s * c..(s + 1) * c];
                        for p in 0..hw {
                            let d = &gy[(s * hw + p) * c..(s * hw + p + 1) * c];
                            dh[s * hw + p] = d.iter().zip(tvec).map(|(a, b)| a * b).sum();
                        }
                    }
                    acc(*hmap, dh);
                }
                if self.rg(*t) {
                    let mut dt = vec![0.0f64; tv.len()];
                    for s in 0..b {
                        for p in 0..hw {
                            let hval = hv[s * hw + p] as f64;
                            let d = &gy[(s * hw + p) * c..(s * hw + p + 1) * c];
                            for (o, &v) in dt[s * c..(s + 1) * c].iter_mut().zip(d) {
                                *o += hval * v as f64;
                            }
                        }
                    }
                    acc(*t, dt.into_iter().map(|v| v as f32).collect());
                }
            }
            Op::TileBatch { x, times } => {
                let n = self.value(*x).len();
                let b = self.shape(*x)[0].max(1);
                let per = n / b;
                let mut dx = vec![0.0f32; n];
                for s in 0..b {
                    for r in 0..*times {
                        let src = &gy[(s * times + r) * per..(s * times + r + 1) * per];
                        add_into(&mut dx[s * per..(s + 1) * per], src);
                    }
                }
                acc(*x, dx);
            }
            Op::Add(a, b) => {
                acc(*a, gy.to_vec());
                acc(*b, gy.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, gy.to_vec());
                acc(*b, gy.iter().map(|v| -v).collect());
            }
            Op::Abs(x) => {
                let xv = self.value(*x);
                acc(*x, gy.iter().zip(xv).map(|(&d, &v)| d * sign(v)).collect());
            }
            Op::NormalizeChannels { x, norms } => {
                let c = (*node.shape.last().unwrap()).max(1);
                let mut dx = vec![0.0f32; gy.len()];
                for (((o, d), yv), &n) in dx.chunks_mut(c).zip(gy.chunks(c)).zip(y.chunks(c)).zip(norms) {
                    let dot: f32 = d.iter().zip(yv).map(|(a, b)| a * b).sum();
                    for ((o, &dd), &yy) in o.iter_mut().zip(d).zip(yv) {
                        *o = (dd - yy * dot) / n;
                    }
                }
                acc(*x, dx);
            }
            Op::Linear { x, w, b } => {
                let c = self.shape(*w)[0];
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.rg(*x) {
                    acc(*x, gy.iter().flat_map(|&d| wv.iter().map(move |&wc| d * wc)).collect());
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0f64; c];
                    for (row, &d) in xv.chunks(c.max(1)).zip(gy) {
                        for (o, &v) in dw.iter_mut().zip(row) {
                            *o += d as f64 * v as f64;
                        }
                    }
                    acc(*w, dw.into_iter().map(|v| v as f32).collect());
                }
                acc(*b, vec![gy.iter().map(|&v| v as f64).sum::<f64>() as f32]);
            }
            Op::Reshape(x) => acc(*x, gy.to_vec()),
            Op::Sum(x) => acc(*x, vec![gy[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                acc(*x, vec![gy[0] / n.max(1) as f32; n]);
            }
            Op::WeightedSum { x, weights } => acc(*x, weights.iter().map(|w| w * gy[0]).collect()),
            Op::Bce { pred, label } => {
                let p = self.value(*pred);
                let n = p.len().max(1) as f64;
                let d0 = gy[0] as f64;
                let dp = p
                    .iter()
                    .zip(label)
                    .map(|(&pv, &yv)| {
                        let pv = pv as f64;
                        if pv <= BCE_CLAMP || pv >= 1.0 - BCE_CLAMP {
                            return 0.0;
                        }
                        let yv = yv as f64;
                        (d0 * (-yv / pv + (1.0 - yv) / (1.0 - pv)) / n) as f32
                    })
                    .collect();
                acc(*pred, dp);
            }
        }
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Mean clamped binary cross-entropy, in `f64`.
pub fn bce_value(pred: &[f32], label: &[f32]) -> f64 {
    let n = pred.len().max(1) as f64;
    pred.iter()
        .zip(label)
        .map(|(&p, &y)| {
            let p = (p as f64).clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            let y = y as f64;
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}
