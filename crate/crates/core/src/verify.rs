//! Verification suites shared by the command-line harness and the
//! acceptance run: finite-difference gradient checks grouped by scope, and
//! the forward/trajectory merge check.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{gradcheck, GradCheckReport, Graph, Var};
use crate::conv3d::DenseSpec;
use crate::encoder::{build_toy_encoder, graph_dice_loss, rep3d_block_graph, Arm, BlockConfig, BlockVars, EncoderConfig, StageConfig};
use crate::error::{Error, Result};
use crate::lrbm::{distance_map, graph_mask, GeneratorParams, GeneratorVars};
use crate::reparam::{csla_forward, effective_lr_field, merge_so, random_instance, trajectory_comparison, CslaConfig};
use crate::tensor::{seeded_normal, Rng, Tensor};

/// Threshold on both merge diffs for a passing `merge_verify`.
pub const MERGE_TOL: f64 = 1e-10;
pub const DEFAULT_GRAD_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    Conv,
    Lrbm,
    Block,
    All,
}

impl FromStr for GradScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(Self::Conv),
            "lrbm" => Ok(Self::Lrbm),
            "block" => Ok(Self::Block),
            "all" => Ok(Self::All),
            _ => Err(Error::Config(format!("unknown gradcheck scope `{s}` (conv, lrbm, block, all)"))),
        }
    }
}

impl fmt::Display for GradScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Conv => "conv",
            Self::Lrbm => "lrbm",
            Self::Block => "block",
            Self::All => "all",
        })
    }
}

/// `Σ y ⊙ r` for a fixed random `r`, so every output voxel gets a distinct
/// upstream weight.
fn probe_loss(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let r = seeded_normal(&mut Rng::new(seed), g.value(y).shape());
    let r = g.constant(r);
    let q = g.mul(y, r)?;
    g.sum(q)
}

/// Depthwise and strided dense convolution, input and weight gradients.
pub fn gradcheck_conv(tol: f64) -> Result<GradCheckReport> {
    let mut rng = Rng::new(1);
    let mut report = GradCheckReport::default();

    let mut g = Graph::new();
    let x = g.param("x", seeded_normal(&mut rng, &[1, 2, 4, 4, 4]))?;
    let w = g.param("w", seeded_normal(&mut rng, &[2, 1, 3, 3, 3]))?;
    let y = g.dwconv3d_same(x, w)?;
    let l = probe_loss(&mut g, y, 2)?;
    report.extend(gradcheck(&g, l, tol)?.prefixed("dwconv."));

    let mut g = Graph::new();
    let x = g.param("x", seeded_normal(&mut rng, &[1, 2, 4, 4, 4]))?;
    let w = g.param("w", seeded_normal(&mut rng, &[3, 2, 3, 3, 3]))?;
    let y = g.conv3d(x, w, DenseSpec { stride: 2, padding: 1 })?;
    let l = probe_loss(&mut g, y, 3)?;
    report.extend(gradcheck(&g, l, tol)?.prefixed("dense."));
    Ok(report)
}

fn random_generator(channels: usize, depth: usize, k: usize, seed: u64) -> Result<GeneratorParams> {
    let mut rng = Rng::new(seed);
    let mut theta = GeneratorParams::zero_init(channels, depth, k, &mut rng)?;
    for l in &mut theta.layers {
        l.weights = seeded_normal(&mut rng, l.weights.shape()).scale(0.5)?;
        l.gain = seeded_normal(&mut rng, &[channels]).scale(0.2)?.add_scalar(1.0)?;
        l.bias = seeded_normal(&mut rng, &[channels]).scale(0.2)?;
    }
    Ok(theta)
}

/// Generator path for depths 1 to 3, then the product rule through
/// `x ∗ (W ⊙ M)` with respect to `x`, `W`, `β` and the generator.
pub fn gradcheck_lrbm(tol: f64) -> Result<GradCheckReport> {
    let d = distance_map(3)?;
    let mut report = GradCheckReport::default();
    for depth in 1..=3 {
        let theta = random_generator(2, depth, 3, 10 + depth as u64)?;
        let mut g = Graph::new();
        let beta = g.param("beta", Tensor::scalar(0.7))?;
        let vars = GeneratorVars::params(&mut g, "", &theta)?;
        let m = graph_mask(&mut g, beta, &vars, &d, 2)?;
        let l = probe_loss(&mut g, m, 20 + depth as u64)?;
        report.extend(gradcheck(&g, l, tol)?.prefixed(&format!("generator_d{depth}.")));
    }

    let mut rng = Rng::new(4);
    let theta = random_generator(2, 2, 3, 5)?;
    let mut g = Graph::new();
    let x = g.param("x", seeded_normal(&mut rng, &[1, 2, 4, 4, 4]))?;
    let w = g.param("w", seeded_normal(&mut rng, &[2, 1, 3, 3, 3]))?;
    let beta = g.param("beta", Tensor::scalar(0.4))?;
    let vars = GeneratorVars::params(&mut g, "", &theta)?;
    let m = graph_mask(&mut g, beta, &vars, &d, 2)?;
    let we = g.mul(w, m)?;
    let y = g.dwconv3d_same(x, we)?;
    let l = probe_loss(&mut g, y, 6)?;
    report.extend(gradcheck(&g, l, tol)?.prefixed("effective."));
    Ok(report)
}

/// One Rep3D block per arm, then a whole toy encoder under the Dice loss.
pub fn gradcheck_block(tol: f64) -> Result<GradCheckReport> {
    let d = distance_map(3)?;
    let mut report = GradCheckReport::default();
    for arm in Arm::ALL {
        let mut cfg = BlockConfig::new(2, 3, arm);
        cfg.generator_kernel = 3;
        let mut rng = Rng::new(7);
        let mut g = Graph::new();
        let z = g.param("z", seeded_normal(&mut rng, &[1, 2, 4, 4, 4]))?;
        let gain = g.param("gain", seeded_normal(&mut rng, &[2]).scale(0.2)?.add_scalar(1.0)?)?;
        let bias = g.param("bias", seeded_normal(&mut rng, &[2]).scale(0.2)?)?;
        let w = g.param("w", seeded_normal(&mut rng, &[2, 1, 3, 3, 3]).scale(0.5)?)?;
        let beta = match arm {
            Arm::Vanilla => None,
            _ => Some(g.param("beta", Tensor::scalar(0.5))?),
        };
        let generator = match arm {
            Arm::Lrbm => Some(GeneratorVars::params(&mut g, "", &random_generator(2, 2, 3, 8)?)?),
            _ => None,
        };
        let vars = BlockVars { gain, bias, w, beta, generator };
        let y = rep3d_block_graph(&mut g, z, &cfg, &vars, &d)?;
        let l = probe_loss(&mut g, y, 9)?;
        report.extend(gradcheck(&g, l, tol)?.prefixed(&format!("block_{arm}.")));
    }

    let cfg = EncoderConfig {
        in_size: 4,
        stages: vec![StageConfig { blocks: 1, channels: 2 }, StageConfig { blocks: 1, channels: 2 }],
        kernel_size: 3,
        generator_kernel: 3,
        arm: Arm::Lrbm,
        beta_init: 0.3,
        ..EncoderConfig::default()
    };
    let mut model = build_toy_encoder(&cfg, 1)?;
    let mut rng = Rng::new(2);
    for name in ["s0.b0.gen1.w", "s1.b0.gen1.w"] {
        let t = seeded_normal(&mut rng, model.get(name)?.shape()).scale(0.3)?;
        model.set(name, t)?;
    }
    let x = seeded_normal(&mut rng, &[1, 1, 4, 4, 4]);
    let label = Tensor::new(vec![1, 1, 4, 4, 4], (0..64).map(|_| (rng.uniform() < 0.4) as u8 as f64).collect())?;
    let mut g = Graph::new();
    let xv = g.constant(x);
    let logits = model.build_graph(&mut g, xv, true)?;
    let loss = graph_dice_loss(&mut g, logits, &label)?;
    report.extend(gradcheck(&g, loss, tol)?.prefixed("model."));
    Ok(report)
}

pub fn gradcheck_scope(scope: GradScope, tol: f64) -> Result<GradCheckReport> {
    if !(tol > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {tol}")));
    }
    match scope {
        GradScope::Conv => gradcheck_conv(tol),
        GradScope::Lrbm => gradcheck_lrbm(tol),
        GradScope::Block => gradcheck_block(tol),
        GradScope::All => {
            let mut r = gradcheck_conv(tol)?;
            r.extend(gradcheck_lrbm(tol)?);
            r.extend(gradcheck_block(tol)?);
            Ok(r)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeVerifyReport {
    /// `max |csla_forward − x ∗ W′|`.
    pub forward_max_diff: f64,
    /// Max kernel divergence between branch SGD and the field-scaled single
    /// operator, over every step.
    pub trajectory_max_diff: f64,
    pub per_step: Vec<f64>,
    pub central: f64,
    pub peripheral: f64,
}

impl MergeVerifyReport {
    pub fn passed(&self) -> bool {
        self.forward_max_diff < MERGE_TOL && self.trajectory_max_diff < MERGE_TOL
    }
}

/// Forward merge and `steps`-step SGD trajectory check on a random instance.
pub fn merge_verify(cfg: &CslaConfig, seed: u64, volume: usize, steps: usize) -> Result<MergeVerifyReport> {
    cfg.validate()?;
    let (x, s, loss) = random_instance(cfg, volume, seed)?;
    let two = csla_forward(&x, &s, cfg)?;
    let one = crate::conv3d::dwconv3d(&x, &merge_so(&s, cfg)?)?;
    let forward_max_diff = two.max_abs_diff(&one)?;
    let traj = trajectory_comparison(&x, &s, cfg, &loss, steps)?;
    let field = effective_lr_field(cfg)?;
    Ok(MergeVerifyReport {
        forward_max_diff,
        trajectory_max_diff: traj.max_divergence(),
        per_step: traj.per_step,
        central: field.central(),
        peripheral: field.peripheral(),
    })
}
