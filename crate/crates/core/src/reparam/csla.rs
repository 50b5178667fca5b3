use std::fmt::{self, Write as _};
use std::str::FromStr;

use super::adam::{adamw_step, AdamConfig, AdamState};
use crate::autodiff::{GradMap, Graph, Var};
use crate::conv3d::{check_odd, dwconv3d, embed_kernel, DepthwiseKernel};
use crate::error::{Error, Result};
use crate::export::fmt_e12;
use crate::tensor::{seeded_normal, Rng, Tensor};

/// Default branch step sizes; the small kernel learns 3× faster.
pub const DEFAULT_LAMBDA_L: f64 = 0.0002;
pub const DEFAULT_LAMBDA_S: f64 = 0.0006;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    #[default]
    Sgd,
    AdamW,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adamw" => Ok(Self::AdamW),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// How the per-offset step of the merged kernel is written down.
///
/// Substituting the branch gradients into the merged update gives
/// `λ_L·α_L²` on the periphery and `λ_L·α_L² + λ_S·α_S²` on the small-kernel
/// support ([`FieldConvention::DerivedAlphaSquared`]). The commonly quoted
/// form drops one factor of α ([`FieldConvention::AsWritten`]); the two agree
/// only when both α are 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FieldConvention {
    AsWritten,
    #[default]
    DerivedAlphaSquared,
}

impl FromStr for FieldConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as-written" | "as-written-eq11" => Ok(Self::AsWritten),
            "derived-alpha-squared" | "derived" => Ok(Self::DerivedAlphaSquared),
            other => Err(Error::Config(format!("unknown field convention `{other}`"))),
        }
    }
}

impl fmt::Display for FieldConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AsWritten => "as-written",
            Self::DerivedAlphaSquared => "derived-alpha-squared",
        })
    }
}

/// Two-branch (large + small kernel) block configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct CslaConfig {
    pub alpha_l: f64,
    /// Zero switches the small branch off.
    pub alpha_s: f64,
    pub lambda_l: f64,
    pub lambda_s: f64,
    pub k_l: usize,
    pub k_s: usize,
    pub channels: usize,
    pub optimizer: OptimizerKind,
    pub adam: AdamConfig,
    pub field_convention: FieldConvention,
}

impl Default for CslaConfig {
    fn default() -> Self {
        Self {
            alpha_l: 1.0,
            alpha_s: 1.0,
            lambda_l: DEFAULT_LAMBDA_L,
            lambda_s: DEFAULT_LAMBDA_S,
            k_l: 7,
            k_s: 3,
            channels: 2,
            optimizer: OptimizerKind::Sgd,
            adam: AdamConfig::default(),
            field_convention: FieldConvention::default(),
        }
    }
}

impl CslaConfig {
    pub fn validate(&self) -> Result<()> {
        check_odd(self.k_l)?;
        check_odd(self.k_s)?;
        if self.k_s > self.k_l {
            return Err(Error::KernelTooLarge {
                small: self.k_s,
                large: self.k_l,
            });
        }
        if !(self.alpha_l > 0.0 && self.alpha_l.is_finite()) {
            return Err(Error::Config(format!("alpha_l must be positive, got {}", self.alpha_l)));
        }
        if !(self.alpha_s >= 0.0 && self.alpha_s.is_finite()) {
            return Err(Error::Config(format!("alpha_s must be non-negative, got {}", self.alpha_s)));
        }
        for (name, v) in [("lambda_l", self.lambda_l), ("lambda_s", self.lambda_s)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        Ok(())
    }
}

/// Branch kernels plus their (independent) optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct CslaState {
    pub w_l: DepthwiseKernel,
    pub w_s: DepthwiseKernel,
    pub step: usize,
    pub adam_l: Option<AdamState>,
    pub adam_s: Option<AdamState>,
}

impl CslaState {
    pub fn new(cfg: &CslaConfig, w_l: DepthwiseKernel, w_s: DepthwiseKernel) -> Result<Self> {
        cfg.validate()?;
        let expect = |k: usize| [cfg.channels, 1, k, k, k];
        if w_l.weights().shape() != expect(cfg.k_l) {
            return Err(Error::shape("CslaState", w_l.weights().shape(), &expect(cfg.k_l)));
        }
        if w_s.weights().shape() != expect(cfg.k_s) {
            return Err(Error::shape("CslaState", w_s.weights().shape(), &expect(cfg.k_s)));
        }
        Ok(Self {
            w_l,
            w_s,
            step: 0,
            adam_l: None,
            adam_s: None,
        })
    }

    /// Gaussian kernels with standard deviation `scale`.
    pub fn random(cfg: &CslaConfig, rng: &mut Rng, scale: f64) -> Result<Self> {
        let (c, kl, ks) = (cfg.channels, cfg.k_l, cfg.k_s);
        let w_l = seeded_normal(rng, &[c, 1, kl, kl, kl]).scale(scale)?;
        let w_s = seeded_normal(rng, &[c, 1, ks, ks, ks]).scale(scale)?;
        Self::new(cfg, DepthwiseKernel::new(w_l)?, DepthwiseKernel::new(w_s)?)
    }
}

/// A scalar loss on a block's output, built into a graph.
pub trait OutputLoss {
    fn build(&self, g: &mut Graph, output: Var) -> Result<Var>;
}

impl<F> OutputLoss for F
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    fn build(&self, g: &mut Graph, output: Var) -> Result<Var> {
        self(g, output)
    }
}

/// `½ Σ (y − target)²`.
#[derive(Debug, Clone)]
pub struct RegressionLoss {
    pub target: Tensor,
}

impl OutputLoss for RegressionLoss {
    fn build(&self, g: &mut Graph, output: Var) -> Result<Var> {
        let t = g.constant(self.target.clone());
        let d = g.sub(output, t)?;
        let sq = g.square(d)?;
        let s = g.sum(sq)?;
        g.scale(s, 0.5)
    }
}

/// `α_L·(x ∗ W_L) + α_S·(x ∗ W_S)`, both branches "same"-padded.
pub fn csla_forward(x: &Tensor, s: &CslaState, cfg: &CslaConfig) -> Result<Tensor> {
    let yl = dwconv3d(x, &s.w_l)?;
    let ys = dwconv3d(x, &s.w_s)?;
    yl.scale(cfg.alpha_l)?.add(&ys.scale(cfg.alpha_s)?)
}

/// The single equivalent kernel `W′ = α_L·W_L + α_S·embed(W_S)`.
pub fn merge_so(s: &CslaState, cfg: &CslaConfig) -> Result<DepthwiseKernel> {
    let small = embed_kernel(&s.w_s, cfg.k_l)?;
    let merged = s
        .w_l
        .weights()
        .scale(cfg.alpha_l)?
        .add(&small.weights().scale(cfg.alpha_s)?)?;
    DepthwiseKernel::new(merged)
}

/// Loss value and branch gradients (`"w_l"`, `"w_s"`) of the two-branch block,
/// differentiated through both convolutions.
pub fn csla_branch_grads(x: &Tensor, s: &CslaState, cfg: &CslaConfig, loss: &dyn OutputLoss) -> Result<(f64, GradMap)> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wl = g.param("w_l", s.w_l.weights().clone())?;
    let ws = g.param("w_s", s.w_s.weights().clone())?;
    let yl = g.dwconv3d(xv, wl, s.w_l.padding())?;
    let ys = g.dwconv3d(xv, ws, s.w_s.padding())?;
    let yl = g.scale(yl, cfg.alpha_l)?;
    let ys = g.scale(ys, cfg.alpha_s)?;
    let y = g.add(yl, ys)?;
    let l = loss.build(&mut g, y)?;
    Ok((g.value(l).item()?, g.backward(l)?))
}

/// Loss value and `∂L/∂W′` for a single merged kernel.
pub fn so_grad(x: &Tensor, w: &DepthwiseKernel, loss: &dyn OutputLoss) -> Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.param("w", w.weights().clone())?;
    let y = g.dwconv3d(xv, wv, w.padding())?;
    let l = loss.build(&mut g, y)?;
    let grads = g.backward(l)?;
    Ok((g.value(l).item()?, grads.get("w")?.clone()))
}

fn branch_grads<'a>(grads: &'a GradMap) -> Result<(&'a Tensor, &'a Tensor)> {
    let gl = grads.get("w_l").map_err(|_| Error::MissingGradient("w_l".into()))?;
    let gs = grads.get("w_s").map_err(|_| Error::MissingGradient("w_s".into()))?;
    Ok((gl, gs))
}

/// `W_L ← W_L − λ_L·∂L/∂W_L`, `W_S ← W_S − λ_S·∂L/∂W_S`.
pub fn branch_sgd_step(s: &CslaState, grads: &GradMap, cfg: &CslaConfig) -> Result<CslaState> {
    let (gl, gs) = branch_grads(grads)?;
    let mut wl = s.w_l.weights().clone();
    wl.axpy(-cfg.lambda_l, gl)?;
    let mut ws = s.w_s.weights().clone();
    ws.axpy(-cfg.lambda_s, gs)?;
    Ok(CslaState {
        w_l: DepthwiseKernel::with_padding(wl, s.w_l.padding())?,
        w_s: DepthwiseKernel::with_padding(ws, s.w_s.padding())?,
        step: s.step + 1,
        adam_l: s.adam_l.clone(),
        adam_s: s.adam_s.clone(),
    })
}

/// Per-branch AdamW with independent moments; `λ_L`, `λ_S` act as the
/// branch learning rates.
pub fn branch_adamw_step(s: &CslaState, grads: &GradMap, cfg: &CslaConfig) -> Result<CslaState> {
    let (gl, gs) = branch_grads(grads)?;
    let st_l = s.adam_l.clone().unwrap_or_else(|| AdamState::new(gl.shape(), cfg.adam));
    let st_s = s.adam_s.clone().unwrap_or_else(|| AdamState::new(gs.shape(), cfg.adam));
    let (wl, st_l) = adamw_step(s.w_l.weights(), gl, st_l, cfg.lambda_l)?;
    let (ws, st_s) = adamw_step(s.w_s.weights(), gs, st_s, cfg.lambda_s)?;
    Ok(CslaState {
        w_l: DepthwiseKernel::with_padding(wl, s.w_l.padding())?,
        w_s: DepthwiseKernel::with_padding(ws, s.w_s.padding())?,
        step: s.step + 1,
        adam_l: Some(st_l),
        adam_s: Some(st_s),
    })
}

pub fn branch_step(s: &CslaState, grads: &GradMap, cfg: &CslaConfig) -> Result<CslaState> {
    match cfg.optimizer {
        OptimizerKind::Sgd => branch_sgd_step(s, grads, cfg),
        OptimizerKind::AdamW => branch_adamw_step(s, grads, cfg),
    }
}

/// Ground truth for single-kernel training: one branch-wise SGD step on the
/// two-branch block, then merge. Returns `W′(t+1)`.
pub fn composed_update_oracle(x: &Tensor, s: &CslaState, cfg: &CslaConfig, loss: &dyn OutputLoss) -> Result<DepthwiseKernel> {
    let (_, grads) = csla_branch_grads(x, s, cfg, loss)?;
    merge_so(&branch_sgd_step(s, &grads, cfg)?, cfg)
}

/// Per-offset step sizes of the merged kernel, shape `K_L×K_L×K_L`.
#[derive(Debug, Clone, PartialEq)]
pub struct LrField {
    values: Tensor,
    k_s: usize,
}

impl LrField {
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn kernel_size(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn small_size(&self) -> usize {
        self.k_s
    }

    pub fn central(&self) -> f64 {
        let c = (self.kernel_size() - 1) / 2;
        self.values.at(&[c, c, c])
    }

    /// Value at the `[0,0,0]` corner (equals [`central`](Self::central) when
    /// the small kernel covers the whole grid).
    pub fn peripheral(&self) -> f64 {
        self.values.at(&[0, 0, 0])
    }

    /// Whether offset `(i, j, l)` lies inside the embedded small-kernel support.
    pub fn is_central(&self, i: usize, j: usize, l: usize) -> bool {
        in_support(self.kernel_size(), self.k_s, i, j, l)
    }

    /// `x,y,z,value` rows with offsets relative to the kernel center.
    pub fn to_csv(&self) -> String {
        let k = self.kernel_size();
        let c = ((k - 1) / 2) as isize;
        let mut s = String::from("x,y,z,value\n");
        for i in 0..k {
            for j in 0..k {
                for l in 0..k {
                    let _ = writeln!(
                        s,
                        "{},{},{},{}",
                        i as isize - c,
                        j as isize - c,
                        l as isize - c,
                        fmt_e12(self.values.at(&[i, j, l]))
                    );
                }
            }
        }
        s
    }
}

pub(crate) fn in_support(k_l: usize, k_s: usize, i: usize, j: usize, l: usize) -> bool {
    let lo = (k_l - k_s) / 2;
    let hi = lo + k_s;
    (lo..hi).contains(&i) && (lo..hi).contains(&j) && (lo..hi).contains(&l)
}

pub fn effective_lr_field(cfg: &CslaConfig) -> Result<LrField> {
    cfg.validate()?;
    let (peri, extra) = match cfg.field_convention {
        FieldConvention::DerivedAlphaSquared => (
            cfg.lambda_l * cfg.alpha_l * cfg.alpha_l,
            cfg.lambda_s * cfg.alpha_s * cfg.alpha_s,
        ),
        FieldConvention::AsWritten => (cfg.lambda_l * cfg.alpha_l, cfg.lambda_s * cfg.alpha_s),
    };
    let k = cfg.k_l;
    let mut values = Tensor::full(&[k, k, k], peri);
    for i in 0..k {
        for j in 0..k {
            for l in 0..k {
                if in_support(k, cfg.k_s, i, j, l) {
                    let o = values.offset(&[i, j, l]);
                    values.data_mut()[o] = peri + extra;
                }
            }
        }
    }
    Ok(LrField { values, k_s: cfg.k_s })
}

/// `W′ − field ⊙ grad`, the field broadcast over channels.
pub fn so_grad_reparam_step(w: &DepthwiseKernel, grad: &Tensor, field: &LrField) -> Result<DepthwiseKernel> {
    if grad.shape() != w.weights().shape() {
        return Err(Error::shape("so_grad_reparam_step", grad.shape(), w.weights().shape()));
    }
    let k3 = field.values.len();
    if w.weights().len() % k3 != 0 || w.kernel_size() != field.kernel_size() {
        return Err(Error::shape("so_grad_reparam_step", w.weights().shape(), field.values.shape()));
    }
    let mut out = w.weights().clone();
    for (chunk, gchunk) in out.data_mut().chunks_mut(k3).zip(grad.data().chunks(k3)) {
        for ((o, &g), &f) in chunk.iter_mut().zip(gchunk).zip(field.values.data()) {
            *o -= f * g;
        }
    }
    DepthwiseKernel::with_padding(out.check_finite("so_grad_reparam_step")?, w.padding())
}

/// Side-by-side SGD trajectories of the two-branch block (merged after every
/// step) and the single kernel trained with the effective field.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryReport {
    /// `max |W′_branch(t) − W′_field(t)|` for `t = 1..=steps`.
    pub per_step: Vec<f64>,
    pub final_branch_kernel: DepthwiseKernel,
    pub final_field_kernel: DepthwiseKernel,
}

impl TrajectoryReport {
    pub fn max_divergence(&self) -> f64 {
        self.per_step.iter().cloned().fold(0.0, f64::max)
    }
}

pub fn trajectory_comparison(
    x: &Tensor,
    s0: &CslaState,
    cfg: &CslaConfig,
    loss: &dyn OutputLoss,
    steps: usize,
) -> Result<TrajectoryReport> {
    let field = effective_lr_field(cfg)?;
    let mut branch = s0.clone();
    let mut single = merge_so(s0, cfg)?;
    let mut per_step = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (_, grads) = csla_branch_grads(x, &branch, cfg, loss)?;
        branch = branch_sgd_step(&branch, &grads, cfg)?;
        let (_, g) = so_grad(x, &single, loss)?;
        single = so_grad_reparam_step(&single, &g, &field)?;
        per_step.push(merge_so(&branch, cfg)?.weights().max_abs_diff(single.weights())?);
    }
    Ok(TrajectoryReport {
        per_step,
        final_branch_kernel: merge_so(&branch, cfg)?,
        final_field_kernel: single,
    })
}

/// Random `(x, state, regression loss)` instance for merge/trajectory checks.
pub fn random_instance(cfg: &CslaConfig, volume: usize, seed: u64) -> Result<(Tensor, CslaState, RegressionLoss)> {
    let mut rng = Rng::new(seed);
    let shape = [1, cfg.channels, volume, volume, volume];
    let x = seeded_normal(&mut rng, &shape);
    let s = CslaState::random(cfg, &mut rng, 0.1)?;
    let target = seeded_normal(&mut rng, &shape);
    Ok((x, s, RegressionLoss { target }))
}

/// The symbolic merged update `W′ − λ_L·α_L·∂L/∂W_L − λ_S·α_S·embed(∂L/∂W_S)`.
pub fn assembled_update(s: &CslaState, grads: &GradMap, cfg: &CslaConfig) -> Result<DepthwiseKernel> {
    let (gl, gs) = branch_grads(grads)?;
    let mut w = merge_so(s, cfg)?.into_weights();
    w.axpy(-cfg.lambda_l * cfg.alpha_l, gl)?;
    let gs_embedded = embed_kernel(&DepthwiseKernel::new(gs.clone())?, cfg.k_l)?;
    w.axpy(-cfg.lambda_s * cfg.alpha_s, gs_embedded.weights())?;
    DepthwiseKernel::new(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(kl: usize, ks: usize, al: f64, a_s: f64) -> CslaConfig {
        CslaConfig {
            k_l: kl,
            k_s: ks,
            alpha_l: al,
            alpha_s: a_s,
            ..CslaConfig::default()
        }
    }

    #[test]
    fn branch_off_and_identity() {
        let c = cfg(5, 3, 1.5, 0.0);
        let (x, s, _) = random_instance(&c, 6, 1).unwrap();
        let y = csla_forward(&x, &s, &c).unwrap();
        let yl = dwconv3d(&x, &s.w_l).unwrap().scale(1.5).unwrap();
        assert_eq!(y, yl);

        let c = cfg(5, 3, 1.0, 1.0);
        let s = CslaState::new(
            &c,
            DepthwiseKernel::new(Tensor::zeros(&[2, 1, 5, 5, 5])).unwrap(),
            DepthwiseKernel::delta(2, 3).unwrap(),
        )
        .unwrap();
        assert_eq!(csla_forward(&x, &s, &c).unwrap(), x);
    }

    #[test]
    fn merge_support_decomposition() {
        let c = cfg(5, 3, 0.5, 2.0);
        let (_, s, _) = random_instance(&c, 4, 2).unwrap();
        let m = merge_so(&s, &c).unwrap();
        let w = m.weights();
        for ch in 0..2 {
            let center = 0.5 * s.w_l.weights().at(&[ch, 0, 2, 2, 2]) + 2.0 * s.w_s.weights().at(&[ch, 0, 1, 1, 1]);
            assert!((w.at(&[ch, 0, 2, 2, 2]) - center).abs() < 1e-15);
            assert_eq!(w.at(&[ch, 0, 0, 0, 0]), 0.5 * s.w_l.weights().at(&[ch, 0, 0, 0, 0]));
        }
        let c = cfg(5, 3, 1.0, 1.0);
        let zero_s = CslaState::new(&c, s.w_l.clone(), DepthwiseKernel::new(Tensor::zeros(&[2, 1, 3, 3, 3])).unwrap()).unwrap();
        assert_eq!(merge_so(&zero_s, &c).unwrap(), s.w_l);
    }

    #[test]
    fn forward_merge_equivalence() {
        for seed in 0..6 {
            for (kl, ks) in [(5, 1), (7, 3), (5, 5)] {
                let c = cfg(kl, ks, 0.5 + seed as f64 * 0.3, 2.0 - seed as f64 * 0.2);
                let (x, s, _) = random_instance(&c, 8, seed).unwrap();
                let y = csla_forward(&x, &s, &c).unwrap();
                let y_so = dwconv3d(&x, &merge_so(&s, &c).unwrap()).unwrap();
                assert!(y.max_abs_diff(&y_so).unwrap() < 1e-12);
            }
        }
    }

    #[test]
    fn sgd_step_zero_grad_and_missing() {
        let c = CslaConfig::default();
        let (_, s, _) = random_instance(&c, 4, 3).unwrap();
        let mut grads = GradMap::default();
        grads.insert("w_l", Tensor::zeros_like(s.w_l.weights()));
        grads.insert("w_s", Tensor::zeros_like(s.w_s.weights()));
        let s1 = branch_sgd_step(&s, &grads, &c).unwrap();
        assert_eq!((&s1.w_l, &s1.w_s), (&s.w_l, &s.w_s));
        let mut partial = GradMap::default();
        partial.insert("w_l", Tensor::zeros_like(s.w_l.weights()));
        assert!(matches!(branch_sgd_step(&s, &partial, &c), Err(Error::MissingGradient(_))));
    }

    #[test]
    fn small_branch_gradient_is_cropped_large_gradient() {
        // ∂L/∂W_S = α_S · crop(G) and ∂L/∂W_L = α_L · G with G = ∂L/∂W′.
        let c = cfg(7, 3, 1.3, 0.7);
        let (x, s, loss) = random_instance(&c, 6, 4).unwrap();
        let (_, grads) = csla_branch_grads(&x, &s, &c, &loss).unwrap();
        let (_, g) = so_grad(&x, &merge_so(&s, &c).unwrap(), &loss).unwrap();
        let gl = g.scale(1.3).unwrap();
        let gs = crate::conv3d::crop_kernel(&DepthwiseKernel::new(g).unwrap(), 3).unwrap().into_weights().scale(0.7).unwrap();
        let scale = gl.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(grads.get("w_l").unwrap().max_abs_diff(&gl).unwrap() < 1e-12 * scale);
        assert!(grads.get("w_s").unwrap().max_abs_diff(&gs).unwrap() < 1e-12 * scale);
    }

    #[test]
    fn small_branch_gradient_brute_force() {
        // Direct expansion: ∂L/∂W_S[c,k] = α_S Σ_o up[c,o] · x[c, o + k − p].
        let c = CslaConfig {
            channels: 1,
            ..cfg(5, 3, 1.0, 0.8)
        };
        let (x, s, loss) = random_instance(&c, 5, 8).unwrap();
        let (_, grads) = csla_branch_grads(&x, &s, &c, &loss).unwrap();
        let y = csla_forward(&x, &s, &c).unwrap();
        let up = y.sub(&loss.target).unwrap();
        let n = 5isize;
        for (kd, kh, kw) in [(0, 0, 0), (1, 1, 1), (2, 0, 1)] {
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    for l in 0..n {
                        let (a, b, cc) = (i + kd - 1, j + kh - 1, l + kw - 1);
                        if a < 0 || b < 0 || cc < 0 || a >= n || b >= n || cc >= n {
                            continue;
                        }
                        acc += up.at(&[0, 0, i as usize, j as usize, l as usize])
                            * x.at(&[0, 0, a as usize, b as usize, cc as usize]);
                    }
                }
            }
            let got = grads.get("w_s").unwrap().at(&[0, 0, kd as usize, kh as usize, kw as usize]);
            assert!((got - 0.8 * acc).abs() < 1e-12 * acc.abs().max(1.0));
        }
    }

    #[test]
    fn oracle_matches_symbolic_assembly() {
        for (lambda_l, lambda_s) in [(DEFAULT_LAMBDA_L, DEFAULT_LAMBDA_S), (0.0004, 0.0004)] {
            let c = CslaConfig {
                lambda_l,
                lambda_s,
                ..cfg(7, 3, 1.7, 0.6)
            };
            let (x, s, loss) = random_instance(&c, 6, 5).unwrap();
            let oracle = composed_update_oracle(&x, &s, &c, &loss).unwrap();
            let (_, grads) = csla_branch_grads(&x, &s, &c, &loss).unwrap();
            let assembled = assembled_update(&s, &grads, &c).unwrap();
            assert!(oracle.weights().max_abs_diff(assembled.weights()).unwrap() < 1e-12);
        }
    }

    #[test]
    fn full_overlap_is_plain_sgd_with_summed_rate() {
        let c = cfg(3, 3, 1.0, 1.0);
        let (x, s, loss) = random_instance(&c, 5, 6).unwrap();
        let oracle = composed_update_oracle(&x, &s, &c, &loss).unwrap();
        let w0 = merge_so(&s, &c).unwrap();
        let (_, g) = so_grad(&x, &w0, &loss).unwrap();
        let mut expect = w0.into_weights();
        expect.axpy(-(c.lambda_l + c.lambda_s), &g).unwrap();
        assert!(oracle.weights().max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn field_values() {
        let f = effective_lr_field(&CslaConfig::default()).unwrap();
        assert!((f.peripheral() - 0.0002).abs() < 1e-18);
        assert!((f.central() - 0.0008).abs() < 1e-18);
        assert_eq!(f.values().shape(), &[7, 7, 7]);
        let on = f.values().data().iter().filter(|&&v| v == f.central()).count();
        assert_eq!(on, 27);

        let f = effective_lr_field(&cfg(7, 3, 1.5, 0.0)).unwrap();
        assert!(f.values().data().iter().all(|&v| v == 0.0002 * 1.5 * 1.5));

        let mut c = cfg(5, 3, 2.0, 3.0);
        c.field_convention = FieldConvention::AsWritten;
        let f = effective_lr_field(&c).unwrap();
        assert!((f.peripheral() - 0.0004).abs() < 1e-18);
        assert!((f.central() - (0.0004 + 0.0018)).abs() < 1e-18);
    }

    #[test]
    fn equal_rates_case_split() {
        let lambda = 0.0003;
        let c = CslaConfig {
            lambda_l: lambda,
            lambda_s: lambda,
            ..cfg(7, 3, 0.8, 1.9)
        };
        let f = effective_lr_field(&c).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                for l in 0..7 {
                    let ind = if f.is_central(i, j, l) { 1.0 } else { 0.0 };
                    let expect = lambda * (0.8 * 0.8 + 1.9 * 1.9 * ind);
                    assert!((f.values().at(&[i, j, l]) - expect).abs() < 1e-18);
                }
            }
        }
    }

    #[test]
    fn reparam_step_basics() {
        let c = cfg(3, 1, 1.0, 0.0);
        let f = effective_lr_field(&CslaConfig { lambda_l: 0.1, ..c }).unwrap();
        let w = DepthwiseKernel::new(Tensor::ones(&[2, 1, 3, 3, 3])).unwrap();
        let g = Tensor::full(&[2, 1, 3, 3, 3], 2.0);
        let w1 = so_grad_reparam_step(&w, &g, &f).unwrap();
        assert!(w1.weights().data().iter().all(|&v| (v - 0.8).abs() < 1e-15));
        assert_eq!(so_grad_reparam_step(&w, &Tensor::zeros(&[2, 1, 3, 3, 3]), &f).unwrap(), w);
        assert!(so_grad_reparam_step(&w, &Tensor::zeros(&[2, 1, 3, 3, 1]), &f).is_err());
    }

    #[test]
    fn trajectory_equivalence_and_as_written_mismatch() {
        let c = CslaConfig::default();
        let (x, s, loss) = random_instance(&c, 8, 7).unwrap();
        let r = trajectory_comparison(&x, &s, &c, &loss, 10).unwrap();
        assert!(r.max_divergence() < 1e-10, "{}", r.max_divergence());

        let c2 = CslaConfig {
            alpha_l: 2.0,
            ..CslaConfig::default()
        };
        let r = trajectory_comparison(&x, &s, &c2, &loss, 10).unwrap();
        assert!(r.max_divergence() < 1e-10);
        let c3 = CslaConfig {
            field_convention: FieldConvention::AsWritten,
            ..c2
        };
        let r = trajectory_comparison(&x, &s, &c3, &loss, 10).unwrap();
        assert!(r.max_divergence() > 1e-6, "{}", r.max_divergence());
    }

    #[test]
    fn common_gradient_scale_keeps_field_ratio() {
        let c = CslaConfig::default();
        let (x, s, loss) = random_instance(&c, 6, 9).unwrap();
        let (_, grads) = csla_branch_grads(&x, &s, &c, &loss).unwrap();
        let mut scaled = GradMap::default();
        for (n, g) in grads.iter() {
            scaled.insert(n, g.scale(3.5).unwrap());
        }
        let w0 = merge_so(&s, &c).unwrap().into_weights();
        let d1 = merge_so(&branch_sgd_step(&s, &grads, &c).unwrap(), &c).unwrap().into_weights().sub(&w0).unwrap();
        let d2 = merge_so(&branch_sgd_step(&s, &scaled, &c).unwrap(), &c).unwrap().into_weights().sub(&w0).unwrap();
        let scale = d1.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(d2.max_abs_diff(&d1.scale(3.5).unwrap()).unwrap() < 1e-12 * scale.max(1e-300) * 10.0);
        let f = effective_lr_field(&c).unwrap();
        assert!((f.central() / f.peripheral() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(cfg(7, 9, 1.0, 1.0).validate().is_err());
        assert!(cfg(6, 3, 1.0, 1.0).validate().is_err());
        assert!(cfg(7, 3, 0.0, 1.0).validate().is_err());
        assert!(cfg(7, 3, 1.0, -1.0).validate().is_err());
        assert!("as-written-eq11".parse::<FieldConvention>().unwrap() == FieldConvention::AsWritten);
        assert!("bogus".parse::<FieldConvention>().is_err());
    }
}
