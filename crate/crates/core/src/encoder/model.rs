use crate::autodiff::{Graph, Var};
use crate::conv3d::{check_odd, DenseSpec};
use crate::erf::ErfModel;
use crate::error::{Error, Result};
use crate::kvconfig::KvConfig;
use crate::lrbm::{distance_map, DistanceMap, GeneratorParams, GeneratorVars, DEFAULT_BETA};
use crate::tensor::{seeded_normal, Rng, Tensor, LAYER_NORM_EPS};

use super::block::{block_kernel, rep3d_block_graph, Arm, BlockConfig, BlockVars};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageConfig {
    pub blocks: usize,
    pub channels: usize,
}

/// Stem (stride-2 dense conv) → stages of blocks with stride-2 `2³`
/// downsampling between them → nearest upsample back to the input grid →
/// `1³` conv to a single logit.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub in_size: usize,
    pub stages: Vec<StageConfig>,
    pub kernel_size: usize,
    pub stem_kernel: usize,
    pub arm: Arm,
    pub generator_depth: usize,
    pub generator_kernel: usize,
    pub beta_init: f64,
    pub norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_size: 16,
            stages: vec![
                StageConfig { blocks: 1, channels: 8 },
                StageConfig { blocks: 1, channels: 16 },
            ],
            kernel_size: 7,
            stem_kernel: 3,
            arm: Arm::Vanilla,
            generator_depth: crate::lrbm::DEFAULT_GENERATOR_DEPTH,
            generator_kernel: crate::lrbm::DEFAULT_GENERATOR_KERNEL,
            beta_init: DEFAULT_BETA,
            norm_eps: LAYER_NORM_EPS,
        }
    }
}

fn join(v: impl Iterator<Item = usize>) -> String {
    v.map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn split(key: &str, s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{s}` as a list of sizes")))
        })
        .collect()
}

impl EncoderConfig {
    pub const KEYS: [&'static str; 10] = [
        "in_size",
        "channels",
        "blocks",
        "kernel_size",
        "stem_kernel",
        "arm",
        "generator_depth",
        "generator_kernel",
        "beta_init",
        "norm_eps",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("encoder needs at least one stage".into()));
        }
        check_odd(self.kernel_size)?;
        check_odd(self.stem_kernel)?;
        let factor = 1usize << self.stages.len();
        if self.in_size == 0 || self.in_size % factor != 0 {
            return Err(Error::Config(format!(
                "in_size {} must be a positive multiple of {factor}",
                self.in_size
            )));
        }
        for s in &self.stages {
            if s.channels == 0 {
                return Err(Error::Config("stage channels must be positive".into()));
            }
        }
        for i in 0..self.stages.len() {
            self.block_config(i).validate()?;
        }
        Ok(())
    }

    pub fn block_config(&self, stage: usize) -> BlockConfig {
        BlockConfig {
            channels: self.stages[stage].channels,
            kernel_size: self.kernel_size,
            norm_eps: self.norm_eps,
            arm: self.arm,
            generator_depth: self.generator_depth,
            generator_kernel: self.generator_kernel,
        }
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("in_size", self.in_size);
        kv.set("channels", join(self.stages.iter().map(|s| s.channels)));
        kv.set("blocks", join(self.stages.iter().map(|s| s.blocks)));
        kv.set("kernel_size", self.kernel_size);
        kv.set("stem_kernel", self.stem_kernel);
        kv.set("arm", self.arm);
        kv.set("generator_depth", self.generator_depth);
        kv.set("generator_kernel", self.generator_kernel);
        kv.set("beta_init", self.beta_init);
        kv.set("norm_eps", self.norm_eps);
        kv
    }

    /// Overrides fields present in `kv`; other keys are ignored.
    pub fn apply_kv(&mut self, kv: &KvConfig) -> Result<()> {
        if let Some(v) = kv.get_parsed("in_size")? {
            self.in_size = v;
        }
        let channels = kv.get("channels").map(|s| split("channels", s)).transpose()?;
        let blocks = kv.get("blocks").map(|s| split("blocks", s)).transpose()?;
        if channels.is_some() || blocks.is_some() {
            let channels = channels.unwrap_or_else(|| self.stages.iter().map(|s| s.channels).collect());
            let blocks = blocks.unwrap_or_else(|| vec![1; channels.len()]);
            if channels.len() != blocks.len() {
                return Err(Error::Config(format!(
                    "`channels` has {} stages but `blocks` has {}",
                    channels.len(),
                    blocks.len()
                )));
            }
            self.stages = channels
                .into_iter()
                .zip(blocks)
                .map(|(channels, blocks)| StageConfig { blocks, channels })
                .collect();
        }
        if let Some(v) = kv.get_parsed("kernel_size")? {
            self.kernel_size = v;
        }
        if let Some(v) = kv.get_parsed("stem_kernel")? {
            self.stem_kernel = v;
        }
        if let Some(v) = kv.get("arm") {
            self.arm = v.parse()?;
        }
        if let Some(v) = kv.get_parsed("generator_depth")? {
            self.generator_depth = v;
        }
        if let Some(v) = kv.get_parsed("generator_kernel")? {
            self.generator_kernel = v;
        }
        if let Some(v) = kv.get_parsed("beta_init")? {
            self.beta_init = v;
        }
        if let Some(v) = kv.get_parsed("norm_eps")? {
            self.norm_eps = v;
        }
        Ok(())
    }
}

/// Trainable element count implied by a config.
///
/// Stem `C₀·k³ + C₀`; per block `2C + C·K³` plus, for the lrbm arm,
/// `1 + depth·(C·K_G³ + 2C)`; per downsample `C_{s+1}·C_s·8 + C_{s+1}`;
/// head `C_last + 1`. The fixed arm's β is frozen and not counted.
pub fn expected_param_count(cfg: &EncoderConfig) -> usize {
    let k3 = cfg.kernel_size.pow(3);
    let kg3 = cfg.generator_kernel.pow(3);
    let c0 = cfg.stages[0].channels;
    let mut n = c0 * cfg.stem_kernel.pow(3) + c0;
    for (i, s) in cfg.stages.iter().enumerate() {
        let c = s.channels;
        let mut block = 2 * c + c * k3;
        if cfg.arm == Arm::Lrbm {
            block += 1 + cfg.generator_depth * (c * kg3 + 2 * c);
        }
        n += s.blocks * block;
        if let Some(next) = cfg.stages.get(i + 1) {
            n += next.channels * c * 8 + next.channels;
        }
    }
    n + cfg.stages.last().map_or(0, |s| s.channels) + 1
}

fn block_prefix(stage: usize, block: usize) -> String {
    format!("s{stage}.b{block}.")
}

/// Named, ordered parameter store plus config.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    pub config: EncoderConfig,
    params: Vec<(String, Tensor)>,
}

impl ToyEncoder {
    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::UnregisteredParameter(name.to_string()))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::UnregisteredParameter(name.to_string()))?;
        if slot.1.shape() != value.shape() {
            return Err(Error::shape("ToyEncoder::set", value.shape(), slot.1.shape()));
        }
        slot.1 = value;
        Ok(())
    }

    /// Assembles a model from stored tensors, checking names and shapes
    /// against the config.
    pub fn from_params(config: EncoderConfig, params: Vec<(String, Tensor)>) -> Result<Self> {
        let reference = Self::init(&config, 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for ((rn, rt), (n, t)) in reference.params.iter().zip(&params) {
            if rn != n || rt.shape() != t.shape() {
                return Err(Error::Format(format!("tensor `{n}` does not match expected `{rn}` {:?}", rt.shape())));
            }
        }
        Ok(Self { config, params })
    }

    /// Deterministic initialization.
    ///
    /// Parameters shared by all arms come from one stream so the three arms
    /// start from the same `W`; generator weights use a separate stream.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut root = Rng::new(seed);
        let mut rng = root.fork();
        let mut gen_rng = root.fork();
        let mut params = Vec::new();
        let normal = |rng: &mut Rng, shape: &[usize], fan_in: usize, gain: f64| {
            seeded_normal(rng, shape).scale((gain / fan_in as f64).sqrt()).expect("finite")
        };
        let c0 = config.stages[0].channels;
        let ks = config.stem_kernel;
        params.push(("stem.w".into(), normal(&mut rng, &[c0, 1, ks, ks, ks], ks.pow(3), 2.0)));
        params.push(("stem.b".into(), Tensor::zeros(&[c0])));
        let k = config.kernel_size;
        for (si, stage) in config.stages.iter().enumerate() {
            let c = stage.channels;
            for bi in 0..stage.blocks {
                let p = block_prefix(si, bi);
                params.push((format!("{p}norm.gain"), Tensor::ones(&[c])));
                params.push((format!("{p}norm.bias"), Tensor::zeros(&[c])));
                params.push((format!("{p}w"), normal(&mut rng, &[c, 1, k, k, k], k.pow(3), 1.0)));
                if config.arm != Arm::Vanilla {
                    params.push((format!("{p}beta"), Tensor::scalar(config.beta_init)));
                }
                if config.arm == Arm::Lrbm {
                    let theta = GeneratorParams::zero_init(c, config.generator_depth, config.generator_kernel, &mut gen_rng)?;
                    for (li, layer) in theta.layers.into_iter().enumerate() {
                        params.push((format!("{p}gen{li}.w"), layer.weights));
                        params.push((format!("{p}gen{li}.gain"), layer.gain));
                        params.push((format!("{p}gen{li}.bias"), layer.bias));
                    }
                }
            }
            if let Some(next) = config.stages.get(si + 1) {
                let n = next.channels;
                params.push((format!("down{si}.w"), normal(&mut rng, &[n, c, 2, 2, 2], c * 8, 2.0)));
                params.push((format!("down{si}.b"), Tensor::zeros(&[n])));
            }
        }
        let cl = config.stages.last().expect("validated").channels;
        params.push(("head.w".into(), normal(&mut rng, &[1, cl, 1, 1, 1], cl, 1.0)));
        params.push(("head.b".into(), Tensor::zeros(&[1])));
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    /// Whether the optimizer updates `name`; the fixed arm keeps β frozen.
    pub fn is_trainable(&self, name: &str) -> bool {
        !(self.config.arm == Arm::Fixed && name.ends_with(".beta"))
    }

    /// β and generator tensors (learning rate `generator_lr`).
    pub fn is_generator_param(name: &str) -> bool {
        name.ends_with(".beta") || name.contains(".gen")
    }

    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| self.is_trainable(n))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Elements belonging to priors or generators (trainable or not).
    pub fn prior_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| Self::is_generator_param(n))
            .map(|(_, t)| t.len())
            .sum()
    }

    fn leaves(&self, g: &mut Graph, trainable: bool) -> Result<Vec<Var>> {
        self.params
            .iter()
            .map(|(n, t)| {
                if trainable && self.is_trainable(n) {
                    g.param(n, t.clone())
                } else {
                    Ok(g.constant(t.clone()))
                }
            })
            .collect()
    }

    fn block_vars(&self, leaves: &[Var], prefix: &str) -> Result<BlockVars> {
        let find = |suffix: &str| -> Option<Var> {
            let name = format!("{prefix}{suffix}");
            self.params.iter().position(|(n, _)| *n == name).map(|i| leaves[i])
        };
        let need = |suffix: &str| find(suffix).ok_or_else(|| Error::UnregisteredParameter(format!("{prefix}{suffix}")));
        let generator = if self.config.arm == Arm::Lrbm {
            let mut layers = Vec::new();
            for li in 0..self.config.generator_depth {
                layers.push([
                    need(&format!("gen{li}.w"))?,
                    need(&format!("gen{li}.gain"))?,
                    need(&format!("gen{li}.bias"))?,
                ]);
            }
            Some(GeneratorVars {
                kernel_size: self.config.generator_kernel,
                layers,
            })
        } else {
            None
        };
        Ok(BlockVars {
            gain: need("norm.gain")?,
            bias: need("norm.bias")?,
            w: need("w")?,
            beta: find("beta"),
            generator,
        })
    }

    fn leaf(&self, leaves: &[Var], name: &str) -> Result<Var> {
        self.params
            .iter()
            .position(|(n, _)| n == name)
            .map(|i| leaves[i])
            .ok_or_else(|| Error::UnregisteredParameter(name.to_string()))
    }

    /// Adds the model to `g` and returns the `[1, 1, S, S, S]` logits. With
    /// `trainable`, optimizer-visible tensors are registered as parameters
    /// under their store names.
    pub fn build_graph(&self, g: &mut Graph, x: Var, trainable: bool) -> Result<Var> {
        let cfg = &self.config;
        let shape = g.value(x).shape().to_vec();
        let s = cfg.in_size;
        if shape != [1, 1, s, s, s] {
            return Err(Error::shape("encoder input", &shape, &[1, 1, s, s, s]));
        }
        let leaves = self.leaves(g, trainable)?;
        let dist = distance_map(cfg.kernel_size)?;
        let stem = DenseSpec {
            stride: 2,
            padding: (cfg.stem_kernel - 1) / 2,
        };
        let mut h = g.conv3d(x, self.leaf(&leaves, "stem.w")?, stem)?;
        h = g.channel_bias(h, self.leaf(&leaves, "stem.b")?)?;
        for (si, stage) in cfg.stages.iter().enumerate() {
            let bcfg = cfg.block_config(si);
            for bi in 0..stage.blocks {
                let vars = self.block_vars(&leaves, &block_prefix(si, bi))?;
                h = rep3d_block_graph(g, h, &bcfg, &vars, &dist)?;
            }
            if si + 1 < cfg.stages.len() {
                let down = DenseSpec { stride: 2, padding: 0 };
                h = g.conv3d(h, self.leaf(&leaves, &format!("down{si}.w"))?, down)?;
                h = g.channel_bias(h, self.leaf(&leaves, &format!("down{si}.b"))?)?;
            }
        }
        h = g.upsample(h, 1 << cfg.stages.len())?;
        let head = DenseSpec { stride: 1, padding: 0 };
        h = g.conv3d(h, self.leaf(&leaves, "head.w")?, head)?;
        g.channel_bias(h, self.leaf(&leaves, "head.b")?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = self.build_graph(&mut g, xv, false)?;
        Ok(g.value(y).clone())
    }

    /// Effective kernel of every block (`W`, `W ⊙ P` or `W ⊙ M`), keyed by
    /// the block's `w` name.
    pub fn effective_kernels(&self) -> Result<Vec<(String, Tensor)>> {
        let mut g = Graph::new();
        let leaves = self.leaves(&mut g, false)?;
        let dist = distance_map(self.config.kernel_size)?;
        let mut out = Vec::new();
        for (si, stage) in self.config.stages.iter().enumerate() {
            let bcfg = self.config.block_config(si);
            for bi in 0..stage.blocks {
                let prefix = block_prefix(si, bi);
                let vars = self.block_vars(&leaves, &prefix)?;
                let k = block_kernel(&mut g, &bcfg, &vars, &dist)?;
                out.push((format!("{prefix}w"), g.value(k).clone()));
            }
        }
        Ok(out)
    }

    /// Bakes every mask into its kernel and drops priors and generators; the
    /// result is a vanilla-arm model with the same outputs.
    pub fn fold(&self) -> Result<ToyEncoder> {
        let kernels = self.effective_kernels()?;
        let mut config = self.config.clone();
        config.arm = Arm::Vanilla;
        let params = self
            .params
            .iter()
            .filter(|(n, _)| !Self::is_generator_param(n))
            .map(|(n, t)| {
                let folded = kernels.iter().find(|(k, _)| k == n).map(|(_, w)| w.clone());
                (n.clone(), folded.unwrap_or_else(|| t.clone()))
            })
            .collect();
        Ok(ToyEncoder { config, params })
    }

    /// The blocks of one stage as a standalone probe-able map.
    pub fn stage_probe(&self, stage: usize) -> Result<StageProbe<'_>> {
        if stage >= self.config.stages.len() {
            return Err(Error::Config(format!(
                "stage {stage} out of range (model has {})",
                self.config.stages.len()
            )));
        }
        Ok(StageProbe {
            model: self,
            stage,
            dist: distance_map(self.config.kernel_size)?,
        })
    }
}

/// The blocks of one encoder stage, with frozen weights.
#[derive(Debug, Clone)]
pub struct StageProbe<'a> {
    model: &'a ToyEncoder,
    stage: usize,
    dist: DistanceMap,
}

impl StageProbe<'_> {
    pub fn channels(&self) -> usize {
        self.model.config.stages[self.stage].channels
    }
}

impl ErfModel for StageProbe<'_> {
    fn build(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let leaves = self.model.leaves(g, false)?;
        let bcfg = self.model.config.block_config(self.stage);
        let mut h = x;
        for bi in 0..self.model.config.stages[self.stage].blocks {
            let vars = self.model.block_vars(&leaves, &block_prefix(self.stage, bi))?;
            h = rep3d_block_graph(g, h, &bcfg, &vars, &self.dist)?;
        }
        Ok(h)
    }

    fn describe(&self) -> String {
        format!(
            "encoder stage {} ({} arm, k={}, {} blocks)",
            self.stage, self.model.config.arm, self.model.config.kernel_size, self.model.config.stages[self.stage].blocks
        )
    }
}
