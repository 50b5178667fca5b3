use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::conv3d::check_odd;
use crate::error::{Error, Result};
use crate::lrbm::{graph_mask, graph_prior, DistanceMap, GeneratorParams, GeneratorVars};
use crate::tensor::{Tensor, LAYER_NORM_EPS};

/// How a block's large kernel is modulated before the convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arm {
    /// Plain `W`.
    Vanilla,
    /// `W ⊙ P` with β frozen.
    Fixed,
    /// `W ⊙ M`, β and the generator learned.
    Lrbm,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Vanilla, Arm::Fixed, Arm::Lrbm];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Vanilla => "vanilla",
            Arm::Fixed => "fixed",
            Arm::Lrbm => "lrbm",
        }
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Arm::Vanilla),
            "fixed" => Ok(Arm::Fixed),
            "lrbm" => Ok(Arm::Lrbm),
            other => Err(Error::Config(format!("unknown arm `{other}` (vanilla, fixed, lrbm)"))),
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockConfig {
    pub channels: usize,
    pub kernel_size: usize,
    pub norm_eps: f64,
    pub arm: Arm,
    pub generator_depth: usize,
    pub generator_kernel: usize,
}

impl BlockConfig {
    pub fn new(channels: usize, kernel_size: usize, arm: Arm) -> Self {
        Self {
            channels,
            kernel_size,
            norm_eps: LAYER_NORM_EPS,
            arm,
            generator_depth: crate::lrbm::DEFAULT_GENERATOR_DEPTH,
            generator_kernel: crate::lrbm::DEFAULT_GENERATOR_KERNEL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_odd(self.kernel_size)?;
        if self.arm == Arm::Lrbm {
            check_odd(self.generator_kernel)?;
            if !(1..=3).contains(&self.generator_depth) {
                return Err(Error::Config(format!(
                    "generator depth must be 1, 2 or 3, got {}",
                    self.generator_depth
                )));
            }
        }
        if self.channels == 0 {
            return Err(Error::Config("block needs at least one channel".into()));
        }
        Ok(())
    }
}

/// Tensors of one block. `beta` is ignored by the vanilla arm; `generator`
/// is present only for the lrbm arm.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub gain: Tensor,
    pub bias: Tensor,
    pub w: Tensor,
    pub beta: f64,
    pub generator: Option<GeneratorParams>,
}

/// Graph handles for a block.
#[derive(Debug, Clone)]
pub struct BlockVars {
    pub gain: Var,
    pub bias: Var,
    pub w: Var,
    pub beta: Option<Var>,
    pub generator: Option<GeneratorVars>,
}

impl BlockVars {
    /// Every tensor as a graph constant.
    pub fn constants(g: &mut Graph, p: &BlockParams, arm: Arm) -> Self {
        Self {
            gain: g.constant(p.gain.clone()),
            bias: g.constant(p.bias.clone()),
            w: g.constant(p.w.clone()),
            beta: (arm != Arm::Vanilla).then(|| g.constant(Tensor::scalar(p.beta))),
            generator: match (arm, &p.generator) {
                (Arm::Lrbm, Some(theta)) => Some(GeneratorVars::constants(g, theta)),
                _ => None,
            },
        }
    }
}

/// The kernel the convolution actually uses: `W`, `W ⊙ P` or `W ⊙ M`.
pub fn block_kernel(g: &mut Graph, cfg: &BlockConfig, vars: &BlockVars, dist: &DistanceMap) -> Result<Var> {
    let missing = |what: &str| Error::Config(format!("{} arm needs {what}", cfg.arm));
    match cfg.arm {
        Arm::Vanilla => Ok(vars.w),
        Arm::Fixed => {
            let beta = vars.beta.ok_or_else(|| missing("beta"))?;
            let p = graph_prior(g, beta, dist, cfg.channels)?;
            g.mul(vars.w, p)
        }
        Arm::Lrbm => {
            let beta = vars.beta.ok_or_else(|| missing("beta"))?;
            let gen = vars.generator.as_ref().ok_or_else(|| missing("a generator"))?;
            let m = graph_mask(g, beta, gen, dist, cfg.channels)?;
            g.mul(vars.w, m)
        }
    }
}

/// `GELU(dwconv(LayerNorm(z), kernel))`, normalization per channel over the
/// spatial axes.
pub fn rep3d_block_graph(g: &mut Graph, z: Var, cfg: &BlockConfig, vars: &BlockVars, dist: &DistanceMap) -> Result<Var> {
    let c = g.value(z).shape().get(1).copied().unwrap_or(0);
    if c != cfg.channels {
        return Err(Error::ChannelMismatch {
            input: c,
            kernel: cfg.channels,
        });
    }
    let n = g.layer_norm(z, vars.gain, vars.bias, &[2, 3, 4], 1, cfg.norm_eps)?;
    let k = block_kernel(g, cfg, vars, dist)?;
    let pad = (cfg.kernel_size - 1) / 2;
    let y = g.dwconv3d(n, k, [pad; 3])?;
    g.gelu(y)
}

pub fn rep3d_block_forward(z: &Tensor, cfg: &BlockConfig, params: &BlockParams) -> Result<Tensor> {
    cfg.validate()?;
    let dist = crate::lrbm::distance_map(cfg.kernel_size)?;
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let vars = BlockVars::constants(&mut g, params, cfg.arm);
    let y = rep3d_block_graph(&mut g, zv, cfg, &vars, &dist)?;
    Ok(g.value(y).clone())
}
