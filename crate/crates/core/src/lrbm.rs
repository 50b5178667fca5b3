//! Learnable reciprocal-distance prior and the depthwise mask generator that
//! modulates a large kernel element by element.
//!
//! For a kernel of size `K` the prior is `P = β / (f_d + β)` where `f_d` is
//! the Euclidean distance of each tap from the center. A small stack of
//! depthwise conv + layer-norm layers `f_θ` refines it into the mask
//! `M = P + f_θ(P)`, and the block convolves with `W ⊙ M`. After training
//! the product is folded into a plain kernel.
//!
//! All mask computations go through [`Graph`] so the eager helpers and the
//! trainable path share the exact same arithmetic.

use std::fmt::Write as _;

use crate::autodiff::{Graph, Var};
use crate::conv3d::{check_odd, DepthwiseKernel};
use crate::error::{Error, Result};
use crate::export::fmt_e12;
use crate::tensor::{seeded_normal, Rng, Tensor, LAYER_NORM_EPS};

/// Lower bound applied to β before it enters the prior.
pub const BETA_FLOOR: f64 = 1e-6;
pub const DEFAULT_BETA: f64 = 1e-3;
pub const DEFAULT_GENERATOR_KERNEL: usize = 7;
pub const DEFAULT_GENERATOR_DEPTH: usize = 2;

pub fn beta_eff(beta: f64) -> f64 {
    beta.max(BETA_FLOOR)
}

/// Euclidean tap distances from the kernel center, shape `[K, K, K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMap {
    values: Tensor,
}

impl DistanceMap {
    pub fn kernel_size(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn center(&self) -> usize {
        (self.kernel_size() - 1) / 2
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// Replicated to `[C, 1, K, K, K]`.
    pub fn broadcast(&self, channels: usize) -> Tensor {
        let k = self.kernel_size();
        let mut data = Vec::with_capacity(channels * self.values.len());
        for _ in 0..channels {
            data.extend_from_slice(self.values.data());
        }
        Tensor::new(vec![channels, 1, k, k, k], data).expect("consistent shape")
    }
}

pub fn distance_map(k: usize) -> Result<DistanceMap> {
    check_odd(k)?;
    let c = ((k - 1) / 2) as f64;
    let mut values = Tensor::zeros(&[k, k, k]);
    let mut idx = 0;
    for i in 0..k {
        for j in 0..k {
            for l in 0..k {
                let (a, b, d) = (i as f64 - c, j as f64 - c, l as f64 - c);
                values.data_mut()[idx] = (a * a + b * b + d * d).sqrt();
                idx += 1;
            }
        }
    }
    Ok(DistanceMap { values })
}

/// β together with the prior it induces, `[C, 1, K, K, K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorState {
    pub beta: f64,
    pub p: Tensor,
}

pub fn prior_mask(d: &DistanceMap, beta: f64, channels: usize) -> Result<PriorState> {
    let mut g = Graph::new();
    let b = g.constant(Tensor::scalar(beta));
    let p = graph_prior(&mut g, b, d, channels)?;
    Ok(PriorState {
        beta,
        p: g.value(p).clone(),
    })
}

/// One `DConv → LayerNorm` stage of the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorLayer {
    pub weights: Tensor,
    pub gain: Tensor,
    pub bias: Tensor,
}

/// Generator `f_θ`: `depth` stages over the `K³` mask grid, a sigmoid after
/// every stage but the last (after the only stage when `depth == 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub kernel_size: usize,
    pub layers: Vec<GeneratorLayer>,
}

impl GeneratorParams {
    /// Zero-initialized last stage (weights and bias), unit gains, zero
    /// biases, Gaussian earlier stages with std `1/√(K_G³)`. For `depth ≥ 2`
    /// the output is exactly zero, so `M == P`.
    pub fn zero_init(channels: usize, depth: usize, kernel_size: usize, rng: &mut Rng) -> Result<Self> {
        check_odd(kernel_size)?;
        if !(1..=3).contains(&depth) {
            return Err(Error::Config(format!("generator depth must be 1, 2 or 3, got {depth}")));
        }
        if channels == 0 {
            return Err(Error::Config("generator needs at least one channel".into()));
        }
        let kg = kernel_size;
        let shape = [channels, 1, kg, kg, kg];
        let std = 1.0 / ((kg * kg * kg) as f64).sqrt();
        let layers = (0..depth)
            .map(|i| {
                let weights = if i + 1 == depth && depth > 1 {
                    Tensor::zeros(&shape)
                } else {
                    seeded_normal(rng, &shape).scale(std).expect("finite")
                };
                GeneratorLayer {
                    weights,
                    gain: Tensor::ones(&[channels]),
                    bias: Tensor::zeros(&[channels]),
                }
            })
            .collect();
        Ok(Self { kernel_size, layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn channels(&self) -> usize {
        self.layers.first().map_or(0, |l| l.gain.len())
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.gain.len() + l.bias.len())
            .sum()
    }

    fn validate(&self, channels: usize) -> Result<()> {
        let kg = self.kernel_size;
        let shape = [channels, 1, kg, kg, kg];
        for l in &self.layers {
            if l.weights.shape() != shape {
                return Err(Error::shape("generator", l.weights.shape(), &shape));
            }
            if l.gain.shape() != [channels] || l.bias.shape() != [channels] {
                return Err(Error::ChannelMismatch {
                    input: channels,
                    kernel: l.gain.len(),
                });
            }
        }
        Ok(())
    }
}

pub fn generator_forward(p: &Tensor, theta: &GeneratorParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let pv = g.constant(p.clone());
    let vars = GeneratorVars::constants(&mut g, theta);
    let out = graph_generator(&mut g, pv, &vars)?;
    Ok(g.value(out).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Training,
    Folded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModulationMask {
    pub m: Tensor,
    pub mode: MaskMode,
}

/// `M = P + f_θ(P)`; values are not clamped.
pub fn modulation_mask(ps: &PriorState, theta: &GeneratorParams) -> Result<ModulationMask> {
    let mut g = Graph::new();
    let p = g.constant(ps.p.clone());
    let vars = GeneratorVars::constants(&mut g, theta);
    let f = graph_generator(&mut g, p, &vars)?;
    let m = g.add(p, f)?;
    Ok(ModulationMask {
        m: g.value(m).clone(),
        mode: MaskMode::Training,
    })
}

/// `W ⊙ M`.
pub fn effective_kernel(w: &DepthwiseKernel, m: &ModulationMask) -> Result<DepthwiseKernel> {
    if m.m.shape() != w.weights().shape() {
        return Err(Error::shape("effective_kernel", w.weights().shape(), m.m.shape()));
    }
    DepthwiseKernel::with_padding(w.weights().mul(&m.m)?, w.padding())
}

/// Freezes `W ⊙ M` into a plain kernel; the prior and generator are dropped.
pub fn fold_for_inference(w: &DepthwiseKernel, m: &ModulationMask) -> Result<DepthwiseKernel> {
    effective_kernel(w, m)
}

/// Per-block prior/generator parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Lrbm {
    pub beta: f64,
    pub generator: GeneratorParams,
    pub distance: DistanceMap,
    pub channels: usize,
}

impl Lrbm {
    pub fn new(channels: usize, k: usize, depth: usize, generator_kernel: usize, beta: f64, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            beta,
            generator: GeneratorParams::zero_init(channels, depth, generator_kernel, rng)?,
            distance: distance_map(k)?,
            channels,
        })
    }

    pub fn prior(&self) -> Result<PriorState> {
        prior_mask(&self.distance, self.beta, self.channels)
    }

    pub fn mask(&self) -> Result<ModulationMask> {
        modulation_mask(&self.prior()?, &self.generator)
    }

    /// β plus every generator tensor.
    pub fn param_count(&self) -> usize {
        1 + self.generator.param_count()
    }
}

/// Graph handles for a generator's tensors.
#[derive(Debug, Clone)]
pub struct GeneratorVars {
    pub kernel_size: usize,
    pub layers: Vec<[Var; 3]>,
}

impl GeneratorVars {
    pub fn constants(g: &mut Graph, theta: &GeneratorParams) -> Self {
        Self {
            kernel_size: theta.kernel_size,
            layers: theta
                .layers
                .iter()
                .map(|l| {
                    [
                        g.constant(l.weights.clone()),
                        g.constant(l.gain.clone()),
                        g.constant(l.bias.clone()),
                    ]
                })
                .collect(),
        }
    }

    /// Registers `{prefix}gen{i}.w`, `.gain`, `.bias` as parameters.
    pub fn params(g: &mut Graph, prefix: &str, theta: &GeneratorParams) -> Result<Self> {
        let mut layers = Vec::with_capacity(theta.depth());
        for (i, l) in theta.layers.iter().enumerate() {
            layers.push([
                g.param(&format!("{prefix}gen{i}.w"), l.weights.clone())?,
                g.param(&format!("{prefix}gen{i}.gain"), l.gain.clone())?,
                g.param(&format!("{prefix}gen{i}.bias"), l.bias.clone())?,
            ]);
        }
        Ok(Self {
            kernel_size: theta.kernel_size,
            layers,
        })
    }

    /// Parameter names registered by [`GeneratorVars::params`].
    pub fn names(prefix: &str, depth: usize) -> Vec<[String; 3]> {
        (0..depth)
            .map(|i| {
                [
                    format!("{prefix}gen{i}.w"),
                    format!("{prefix}gen{i}.gain"),
                    format!("{prefix}gen{i}.bias"),
                ]
            })
            .collect()
    }
}

/// `β_eff / (f_d + β_eff)` broadcast to `[C, 1, K, K, K]`.
pub fn graph_prior(g: &mut Graph, beta: Var, d: &DistanceMap, channels: usize) -> Result<Var> {
    let k = d.kernel_size();
    let shape = [channels, 1, k, k, k];
    let b = g.clamp_min(beta, BETA_FLOOR)?;
    let bb = g.broadcast(b, &shape)?;
    let dist = g.constant(d.broadcast(channels));
    let den = g.add(dist, bb)?;
    g.div(bb, den)
}

/// `f_θ(P)` for a `[C, 1, K, K, K]` prior.
pub fn graph_generator(g: &mut Graph, p: Var, vars: &GeneratorVars) -> Result<Var> {
    let shape = g.value(p).shape().to_vec();
    if shape.len() != 5 || shape[1] != 1 {
        return Err(Error::InvalidShape {
            shape,
            reason: "mask must be [C, 1, K, K, K]".into(),
        });
    }
    let (c, k) = (shape[0], shape[2]);
    let pad = (vars.kernel_size - 1) / 2;
    // Channels move to axis 1 so the depthwise conv treats the K³ grid as a volume.
    let mut h = g.reshape(p, &[1, c, k, k, k])?;
    let depth = vars.layers.len();
    for (i, &[w, gain, bias]) in vars.layers.iter().enumerate() {
        if g.value(w).shape() != [c, 1, vars.kernel_size, vars.kernel_size, vars.kernel_size] {
            return Err(Error::ChannelMismatch {
                input: c,
                kernel: g.value(w).shape()[0],
            });
        }
        h = g.dwconv3d(h, w, [pad; 3])?;
        h = g.layer_norm(h, gain, bias, &[2, 3, 4], 1, LAYER_NORM_EPS)?;
        if i + 1 < depth || depth == 1 {
            h = g.sigmoid(h)?;
        }
    }
    g.reshape(h, &shape)
}

/// Prior, generator and mask `M` in one graph.
pub fn graph_mask(g: &mut Graph, beta: Var, vars: &GeneratorVars, d: &DistanceMap, channels: usize) -> Result<Var> {
    let p = graph_prior(g, beta, d, channels)?;
    let f = graph_generator(g, p, vars)?;
    g.add(p, f)
}

/// Checks that a generator matches a channel count before it is wired in.
pub fn check_generator(theta: &GeneratorParams, channels: usize) -> Result<()> {
    theta.validate(channels)
}

/// Per-offset `x,y,z,f_d,P,M` rows for one channel, offsets relative to the
/// center.
pub fn mask_csv(d: &DistanceMap, p: &Tensor, m: &Tensor, channel: usize) -> Result<String> {
    let k = d.kernel_size();
    let k3 = k * k * k;
    if p.shape() != m.shape() || p.len() < (channel + 1) * k3 {
        return Err(Error::shape("mask_csv", p.shape(), m.shape()));
    }
    let c = d.center() as isize;
    let base = channel * k3;
    let mut s = String::from("x,y,z,f_d,P,M\n");
    let mut o = 0;
    for i in 0..k {
        for j in 0..k {
            for l in 0..k {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{}",
                    i as isize - c,
                    j as isize - c,
                    l as isize - c,
                    fmt_e12(d.values().data()[o]),
                    fmt_e12(p.data()[base + o]),
                    fmt_e12(m.data()[base + o]),
                );
                o += 1;
            }
        }
    }
    Ok(s)
}
