//! Reverse-mode differentiation over a tape of tensor primitives.
//!
//! A [`Graph`] records nodes in construction order, so node ids are already a
//! topological order. Every forward value is kept; [`Graph::backward`] walks
//! the tape once in reverse and accumulates into each input's gradient in
//! descending consumer order, which makes results bitwise reproducible.
//!
//! ```
//! use repfield3d::autodiff::Graph;
//! use repfield3d::Tensor;
//!
//! let mut g = Graph::new();
//! let w = g.param("w", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
//! let m = g.constant(Tensor::from_vec(vec![3.0, -1.0]));
//! let wm = g.mul(w, m).unwrap();
//! let loss = g.sum(wm).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get("w").unwrap().data(), &[3.0, -1.0]);
//! ```

mod gradcheck;

pub use gradcheck::{finite_diff_grad, gradcheck, gradcheck_with_step, relative_error, GradCheckReport, GradCheckRow};

use crate::conv3d::{self, DenseSpec};
use crate::error::{Error, Result};
use crate::tensor::{gelu_derivative, group_stats, NormLayout, Tensor};

/// Handle to a node of one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Sum(Var),
    Sigmoid(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        axes: Vec<usize>,
        channel_axis: usize,
        eps: f64,
    },
    DwConv {
        x: Var,
        w: Var,
        pad: [usize; 3],
    },
    Conv {
        x: Var,
        w: Var,
        spec: DenseSpec,
    },
    ChannelBias {
        x: Var,
        b: Var,
    },
    Reshape(Var, Vec<usize>),
    Broadcast(Var, Vec<usize>),
    ClampMin(Var, f64),
    Upsample(Var, usize),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    param: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients keyed by parameter name, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradMap {
    entries: Vec<(String, Tensor)>,
}

impl GradMap {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::UnregisteredParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, name: &str, grad: Tensor) {
        match self.entries.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = grad,
            None => self.entries.push((name.to_string(), grad)),
        }
    }
}

impl Graph {
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

    /// Registers a named differentiable leaf.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<Var> {
        if self.param_var(name).is_some() {
            return Err(Error::DuplicateParameter(name.to_string()));
        }
        let value = value.check_finite("param")?;
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
            param: Some(name.to_string()),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.nodes
            .iter()
            .position(|n| n.param.as_deref() == Some(name))
            .map(Var)
    }

    pub fn param_names(&self) -> Vec<String> {
        self.nodes.iter().filter_map(|n| n.param.clone()).collect()
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = eval(&op, &self.nodes)?;
        let requires_grad = inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.push(Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.push(Op::AddScalar(a, s))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mul(a, a))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sigmoid(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Gelu(a))
    }

    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        axes: &[usize],
        channel_axis: usize,
        eps: f64,
    ) -> Result<Var> {
        self.push(Op::LayerNorm {
            x,
            gain,
            bias,
            axes: axes.to_vec(),
            channel_axis,
            eps,
        })
    }

    pub fn dwconv3d(&mut self, x: Var, w: Var, pad: [usize; 3]) -> Result<Var> {
        self.push(Op::DwConv { x, w, pad })
    }

    /// Depthwise convolution with "same" padding `(K−1)/2`.
    pub fn dwconv3d_same(&mut self, x: Var, w: Var) -> Result<Var> {
        let k = self.value(w).shape().get(2).copied().unwrap_or(1);
        let p = k.saturating_sub(1) / 2;
        self.dwconv3d(x, w, [p; 3])
    }

    pub fn conv3d(&mut self, x: Var, w: Var, spec: DenseSpec) -> Result<Var> {
        self.push(Op::Conv { x, w, spec })
    }

    /// Adds a per-channel bias (`[C]`) along axis 1.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.push(Op::ChannelBias { x, b })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::Reshape(a, shape.to_vec()))
    }

    /// Broadcasts a single-element tensor to `shape`.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::Broadcast(a, shape.to_vec()))
    }

    /// `max(a, floor)`; the gradient passes only where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.push(Op::ClampMin(a, floor))
    }

    pub fn upsample(&mut self, a: Var, factor: usize) -> Result<Var> {
        self.push(Op::Upsample(a, factor))
    }

    /// Replaces a leaf's value and recomputes every downstream node.
    pub fn set_leaf(&mut self, leaf: Var, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[leaf.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::Config(format!("node {} is not a leaf", leaf.0)));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::shape("set_leaf", node.value.shape(), value.shape()));
        }
        node.value = value;
        for i in leaf.0 + 1..self.nodes.len() {
            if !matches!(self.nodes[i].op, Op::Leaf) {
                let v = eval(&self.nodes[i].op, &self.nodes)?;
                self.nodes[i].value = v;
            }
        }
        Ok(())
    }

    /// Gradients of a single-element output.
    pub fn backward(&self, output: Var) -> Result<GradMap> {
        let seed = Tensor::full(self.value(output).shape(), 1.0);
        if seed.len() != 1 {
            return Err(Error::InvalidShape {
                shape: seed.shape().to_vec(),
                reason: "backward without a seed needs a scalar output".into(),
            });
        }
        self.backward_with_seed(output, seed)
    }

    pub fn backward_with_seed(&self, output: Var, seed: Tensor) -> Result<GradMap> {
        let out_shape = self.value(output).shape();
        if seed.shape() != out_shape {
            return Err(Error::shape("backward seed", seed.shape(), out_shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        let mut map = GradMap::default();
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
            if let Some(name) = &node.param {
                map.entries.push((name.clone(), g));
                continue;
            }
            for (var, contribution) in self.local_grads(&node.op, &g)? {
                accumulate(&mut grads, var, contribution)?;
            }
        }
        // Parameters not reached by the output get zero gradients.
        let mut ordered = GradMap::default();
        for n in &self.nodes {
            if let Some(name) = &n.param {
                let g = match map.entries.iter().position(|(m, _)| m == name) {
                    Some(pos) => map.entries.swap_remove(pos).1,
                    None => Tensor::zeros_like(&n.value),
                };
                ordered.entries.push((name.clone(), g));
            }
        }
        Ok(ordered)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, op: &Op, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::with_capacity(2);
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(a) {
                    out.push((a, g.clone()));
                }
                if self.needs(b) {
                    out.push((b, g.clone()));
                }
            }
            Op::Sub(a, b) => {
                if self.needs(a) {
                    out.push((a, g.clone()));
                }
                if self.needs(b) {
                    out.push((b, g.scale(-1.0)?));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    out.push((a, g.mul(val(b))?));
                }
                if self.needs(b) {
                    out.push((b, g.mul(val(a))?));
                }
            }
            Op::Div(a, b) => {
                if self.needs(a) {
                    out.push((a, g.div(val(b))?));
                }
                if self.needs(b) {
                    let (x, y) = (val(a), val(b));
                    let mut d = g.clone();
                    for ((d, &x), &y) in d.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                        *d = -*d * x / (y * y);
                    }
                    out.push((b, d.check_finite("div_backward")?));
                }
            }
            Op::Scale(a, s) => out.push((a, g.scale(s)?)),
            Op::AddScalar(a, _) => out.push((a, g.clone())),
            Op::Sum(a) => out.push((a, Tensor::full(val(a).shape(), g.item()?))),
            Op::Sigmoid(a) => {
                let s = val(a).sigmoid();
                let mut d = g.clone();
                for (d, &s) in d.data_mut().iter_mut().zip(s.data()) {
                    *d *= s * (1.0 - s);
                }
                out.push((a, d));
            }
            Op::Gelu(a) => {
                let mut d = g.clone();
                for (d, &x) in d.data_mut().iter_mut().zip(val(a).data()) {
                    *d *= gelu_derivative(x);
                }
                out.push((a, d.check_finite("gelu_backward")?));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                ref axes,
                channel_axis,
                eps,
            } => {
                let (dx, dgain, dbias) =
                    layer_norm_backward(val(x), val(gain), axes, channel_axis, eps, g)?;
                if self.needs(x) {
                    out.push((x, dx));
                }
                if self.needs(gain) {
                    out.push((gain, dgain));
                }
                if self.needs(bias) {
                    out.push((bias, dbias));
                }
            }
            Op::DwConv { x, w, pad } => {
                if self.needs(x) {
                    out.push((x, conv3d::depthwise_backward_input(val(x).shape(), val(w), pad, g)?));
                }
                if self.needs(w) {
                    out.push((w, conv3d::depthwise_backward_kernel(val(x), val(w).shape(), pad, g)?));
                }
            }
            Op::Conv { x, w, spec } => {
                if self.needs(x) {
                    out.push((x, conv3d::dense_backward_input(val(x).shape(), val(w), spec, g)?));
                }
                if self.needs(w) {
                    out.push((w, conv3d::dense_backward_kernel(val(x), val(w).shape(), spec, g)?));
                }
            }
            Op::ChannelBias { x, b } => {
                if self.needs(x) {
                    out.push((x, g.clone()));
                }
                if self.needs(b) {
                    let s = g.shape();
                    let (c, inner) = (s[1], s[2..].iter().product::<usize>());
                    let mut db = vec![0.0; c];
                    for (chunk_idx, chunk) in g.data().chunks(inner).enumerate() {
                        db[chunk_idx % c] += chunk.iter().sum::<f64>();
                    }
                    out.push((b, Tensor::new(vec![c], db)?));
                }
            }
            Op::Reshape(a, _) => out.push((a, g.reshape(val(a).shape())?)),
            Op::Broadcast(a, _) => out.push((a, Tensor::full(val(a).shape(), g.sum()))),
            Op::ClampMin(a, floor) => {
                let mut d = g.clone();
                for (d, &x) in d.data_mut().iter_mut().zip(val(a).data()) {
                    if x <= floor {
                        *d = 0.0;
                    }
                }
                out.push((a, d));
            }
            Op::Upsample(a, f) => out.push((a, conv3d::upsample_nearest_backward(val(a).shape(), f, g)?)),
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => acc.axpy(1.0, &g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn inputs(op: &Op) -> Vec<Var> {
    match *op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![a, b],
        Op::Scale(a, _)
        | Op::AddScalar(a, _)
        | Op::Sum(a)
        | Op::Sigmoid(a)
        | Op::Gelu(a)
        | Op::Reshape(a, _)
        | Op::Broadcast(a, _)
        | Op::ClampMin(a, _)
        | Op::Upsample(a, _) => vec![a],
        Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
        Op::DwConv { x, w, .. } | Op::Conv { x, w, .. } => vec![x, w],
        Op::ChannelBias { x, b } => vec![x, b],
    }
}

fn eval(op: &Op, nodes: &[Node]) -> Result<Tensor> {
    let val = |v: Var| -> Result<&Tensor> {
        nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or_else(|| Error::Config(format!("unknown graph node {}", v.0)))
    };
    match *op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::Add(a, b) => val(a)?.add(val(b)?),
        Op::Sub(a, b) => val(a)?.sub(val(b)?),
        Op::Mul(a, b) => val(a)?.mul(val(b)?),
        Op::Div(a, b) => val(a)?.div(val(b)?),
        Op::Scale(a, s) => val(a)?.scale(s),
        Op::AddScalar(a, s) => val(a)?.add_scalar(s),
        Op::Sum(a) => Tensor::scalar(val(a)?.sum()).check_finite("sum"),
        Op::Sigmoid(a) => Ok(val(a)?.sigmoid()),
        Op::Gelu(a) => val(a)?.gelu().check_finite("gelu"),
        Op::LayerNorm {
            x,
            gain,
            bias,
            ref axes,
            channel_axis,
            eps,
        } => val(x)?.layer_norm(axes, channel_axis, val(gain)?, val(bias)?, eps),
        Op::DwConv { x, w, pad } => conv3d::depthwise_forward(val(x)?, val(w)?, pad),
        Op::Conv { x, w, spec } => conv3d::dense_forward(val(x)?, val(w)?, spec),
        Op::ChannelBias { x, b } => {
            let (x, b) = (val(x)?, val(b)?);
            let s = x.shape();
            if s.len() < 2 || b.shape() != [s[1]] {
                return Err(Error::shape("channel_bias", s, b.shape()));
            }
            let (c, inner) = (s[1], s[2..].iter().product::<usize>());
            let mut out = x.clone();
            for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
                let bv = b.data()[i % c];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
            out.check_finite("channel_bias")
        }
        Op::Reshape(a, ref shape) => val(a)?.reshape(shape),
        Op::Broadcast(a, ref shape) => {
            let v = val(a)?.item()?;
            Tensor::new(shape.clone(), vec![v; shape.iter().product()])
        }
        Op::ClampMin(a, floor) => Ok(val(a)?.map(|v| v.max(floor))),
        Op::Upsample(a, f) => conv3d::upsample_nearest(val(a)?, f),
    }
}

/// Returns `(dx, dgain, dbias)`.
fn layer_norm_backward(
    x: &Tensor,
    gain: &Tensor,
    axes: &[usize],
    channel_axis: usize,
    eps: f64,
    g: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let layout = NormLayout::new(x.shape(), axes, channel_axis)?;
    let n = layout.group_len;
    let mut dx = vec![0.0; x.len()];
    let mut dgain = vec![0.0; layout.channels];
    let mut dbias = vec![0.0; layout.channels];
    let mut xhat = vec![0.0; n];
    for grp in 0..layout.groups {
        let range = grp * n..(grp + 1) * n;
        let xs = &x.data()[range.clone()];
        let gs = &g.data()[range.clone()];
        let (mean, inv_std) = group_stats(xs, eps);
        let c = layout.channel_of(grp);
        let gn = gain.data()[c];
        let (mut mean_dxhat, mut mean_dxhat_xhat) = (0.0, 0.0);
        for i in 0..n {
            xhat[i] = (xs[i] - mean) * inv_std;
            dgain[c] += gs[i] * xhat[i];
            dbias[c] += gs[i];
            let dxh = gs[i] * gn;
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat[i];
        }
        mean_dxhat /= n as f64;
        mean_dxhat_xhat /= n as f64;
        for i in 0..n {
            dx[range.start + i] = inv_std * (gs[i] * gn - mean_dxhat - xhat[i] * mean_dxhat_xhat);
        }
    }
    let dx = Tensor::new(x.shape().to_vec(), dx)?.check_finite("layer_norm_backward")?;
    let c = layout.channels;
    Ok((dx, Tensor::new(vec![c], dgain)?, Tensor::new(vec![c], dbias)?))
}
