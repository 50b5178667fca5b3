//! AdamW with bias correction, plus the two adaptive-optimizer analyses:
//! gradient-scale cancellation and the central/peripheral step ratio.

use super::csla::{branch_adamw_step, csla_branch_grads, in_support, merge_so, CslaConfig, CslaState, OutputLoss};
use crate::error::{Error, Result};
use crate::tensor::{seeded_normal, Rng, Tensor};

pub const DEFAULT_LR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled: applied as `η·wd·p`, never folded into the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.08,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(shape: &[usize], config: AdamConfig) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
            config,
        }
    }
}

/// One AdamW step; returns the new parameter and state.
pub fn adamw_step(p: &Tensor, grad: &Tensor, st: AdamState, lr: f64) -> Result<(Tensor, AdamState)> {
    if grad.shape() != p.shape() {
        return Err(Error::shape("adamw_step", grad.shape(), p.shape()));
    }
    if st.m.shape() != p.shape() || st.v.shape() != p.shape() {
        return Err(Error::shape("adamw_step", st.m.shape(), p.shape()));
    }
    let AdamConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = st.config;
    let t = st.t + 1;
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    let mut m = st.m;
    let mut v = st.v;
    let mut out = p.clone();
    for (((o, mi), vi), &g) in out
        .data_mut()
        .iter_mut()
        .zip(m.data_mut())
        .zip(v.data_mut())
        .zip(grad.data())
    {
        *mi = beta1 * *mi + (1.0 - beta1) * g;
        *vi = beta2 * *vi + (1.0 - beta2) * g * g;
        let m_hat = *mi / c1;
        let v_hat = *vi / c2;
        *o -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *o);
    }
    let out = out.check_finite("adamw_step")?;
    Ok((
        out,
        AdamState {
            m,
            v,
            t,
            config: st.config,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleInvarianceReport {
    pub alpha: f64,
    pub eps: f64,
    pub steps: usize,
    pub max_rel_deviation: f64,
    /// Elements whose unscaled update was exactly zero and were left out.
    pub skipped: usize,
}

/// Runs Adam (no weight decay) on `g_t` and on `α·g_t` from the same start and
/// reports `max_t |Δw_scaled − Δw| / |Δw|` over all elements.
pub fn adam_scale_invariance_check(grads: &[Tensor], alpha: f64, eps: f64, lr: f64) -> Result<ScaleInvarianceReport> {
    let first = grads.first().ok_or_else(|| Error::Config("empty gradient sequence".into()))?;
    let cfg = AdamConfig {
        eps,
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    let mut pa = Tensor::zeros(first.shape());
    let mut pb = pa.clone();
    let mut sa = AdamState::new(first.shape(), cfg);
    let mut sb = sa.clone();
    let mut max_dev = 0.0f64;
    let mut skipped = 0;
    for g in grads {
        let (na, a) = adamw_step(&pa, g, sa, lr)?;
        let (nb, b) = adamw_step(&pb, &g.scale(alpha)?, sb, lr)?;
        for (((&xa, &ya), &xb), &yb) in pa.data().iter().zip(na.data()).zip(pb.data()).zip(nb.data()) {
            let (da, db) = (ya - xa, yb - xb);
            if da == 0.0 || !da.is_normal() {
                skipped += 1;
                continue;
            }
            max_dev = max_dev.max((db - da).abs() / da.abs());
        }
        (pa, pb, sa, sb) = (na, nb, a, b);
    }
    Ok(ScaleInvarianceReport {
        alpha,
        eps,
        steps: grads.len(),
        max_rel_deviation: max_dev,
        skipped,
    })
}

/// `count` i.i.d. standard-normal gradients of length `len`.
pub fn normal_gradient_stream(seed: u64, count: usize, len: usize) -> Vec<Tensor> {
    let mut rng = Rng::new(seed);
    (0..count).map(|_| seeded_normal(&mut rng, &[len])).collect()
}

/// Merged-kernel increments `ΔW′(t) = W′(t+1) − W′(t)` of a two-branch block
/// trained with per-branch AdamW.
#[derive(Debug, Clone, PartialEq)]
pub struct CslaAdamRun {
    pub k_l: usize,
    pub k_s: usize,
    pub deltas: Vec<Tensor>,
    pub losses: Vec<f64>,
}

pub fn run_csla_adamw(x: &Tensor, s0: &CslaState, cfg: &CslaConfig, loss: &dyn OutputLoss, steps: usize) -> Result<CslaAdamRun> {
    let mut s = s0.clone();
    let mut w = merge_so(&s, cfg)?.into_weights();
    let mut deltas = Vec::with_capacity(steps);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (l, grads) = csla_branch_grads(x, &s, cfg, loss)?;
        s = branch_adamw_step(&s, &grads, cfg)?;
        let next = merge_so(&s, cfg)?.into_weights();
        deltas.push(next.sub(&w)?);
        losses.push(l);
        w = next;
    }
    Ok(CslaAdamRun {
        k_l: cfg.k_l,
        k_s: cfg.k_s,
        deltas,
        losses,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepRatio {
    Ratio {
        central_mean: f64,
        peripheral_mean: f64,
        ratio: f64,
    },
    /// The small kernel covers the whole grid; no periphery exists.
    FullSupport { mean: f64 },
}

impl StepRatio {
    pub fn ratio(&self) -> Option<f64> {
        match self {
            Self::Ratio { ratio, .. } => Some(*ratio),
            Self::FullSupport { .. } => None,
        }
    }
}

/// Mean per-step `|ΔW′|` on the embedded small-kernel support versus its
/// complement, pooled over channels and steps.
pub fn central_peripheral_step_ratio(run: &CslaAdamRun) -> Result<StepRatio> {
    let k = run.k_l;
    let k3 = k * k * k;
    let (mut cen, mut nc, mut per, mut np) = (0.0, 0usize, 0.0, 0usize);
    for d in &run.deltas {
        if d.len() % k3 != 0 {
            return Err(Error::InvalidShape {
                shape: d.shape().to_vec(),
                reason: format!("not a stack of {k}³ kernels"),
            });
        }
        for (idx, v) in d.data().iter().enumerate() {
            let o = idx % k3;
            let (i, j, l) = (o / (k * k), (o / k) % k, o % k);
            if in_support(k, run.k_s, i, j, l) {
                cen += v.abs();
                nc += 1;
            } else {
                per += v.abs();
                np += 1;
            }
        }
    }
    let central_mean = cen / nc.max(1) as f64;
    if np == 0 {
        return Ok(StepRatio::FullSupport { mean: central_mean });
    }
    let peripheral_mean = per / np as f64;
    Ok(StepRatio::Ratio {
        central_mean,
        peripheral_mean,
        ratio: central_mean / peripheral_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reparam::csla::{random_instance, OptimizerKind};

    #[test]
    fn first_step_is_unit_ratio() {
        let p = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
        let g = Tensor::from_vec(vec![3.0, -1e-3, 40.0]);
        let cfg = AdamConfig {
            eps: 0.0,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let (p1, st) = adamw_step(&p, &g, AdamState::new(&[3], cfg), 0.01).unwrap();
        for ((a, b), gi) in p.data().iter().zip(p1.data()).zip(g.data()) {
            assert!(((a - b) - 0.01 * gi.signum()).abs() < 1e-15);
        }
        assert_eq!(st.t, 1);
        assert!(st.v.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_gradient_only_decays() {
        let p = Tensor::from_vec(vec![1.0, -2.0]);
        let (p1, _) = adamw_step(&p, &Tensor::zeros(&[2]), AdamState::new(&[2], AdamConfig::default()), 1e-4).unwrap();
        assert!((p1.data()[0] - (1.0 - 1e-4 * 0.08)).abs() < 1e-16);
        assert!((p1.data()[1] - (-2.0 + 2e-4 * 0.08)).abs() < 1e-16);
        assert!(adamw_step(&p, &Tensor::zeros(&[3]), AdamState::new(&[2], AdamConfig::default()), 1e-4).is_err());
    }

    /// Closed form: Δ_scaled/Δ = (√v̂ + ε)/(√v̂ + ε/α), independent of m.
    #[test]
    fn scale_check_matches_closed_form() {
        let grads = normal_gradient_stream(3, 20, 8);
        assert_eq!(adam_scale_invariance_check(&grads, 1.0, 1e-8, 1e-4).unwrap().max_rel_deviation, 0.0);
        let (alpha, eps) = (10.0, 1e-2);
        let r = adam_scale_invariance_check(&grads, alpha, eps, 1e-4).unwrap();
        let mut v = vec![0.0; 8];
        let mut expect = 0.0f64;
        for (t, g) in grads.iter().enumerate() {
            let c2 = 1.0 - 0.999f64.powi(t as i32 + 1);
            for (vi, gi) in v.iter_mut().zip(g.data()) {
                *vi = 0.999 * *vi + 0.001 * gi * gi;
                let s = (*vi / c2).sqrt();
                expect = expect.max((1.0 - (s + eps) / (s + eps / alpha)).abs());
            }
        }
        assert!((r.max_rel_deviation - expect).abs() < 1e-9 * expect, "{} vs {expect}", r.max_rel_deviation);
    }

    #[test]
    fn scale_cancellation_regimes() {
        let grads = normal_gradient_stream(11, 100, 64);
        let small = adam_scale_invariance_check(&grads, 10.0, 1e-8, 1e-4).unwrap();
        assert!(small.max_rel_deviation < 1e-6, "{small:?}");
        let large = adam_scale_invariance_check(&grads, 10.0, 1e-2, 1e-4).unwrap();
        assert!(large.max_rel_deviation > 1e-3, "{large:?}");
    }

    fn adam_cfg(alpha_s: f64, k_s: usize) -> CslaConfig {
        CslaConfig {
            alpha_s,
            k_s,
            optimizer: OptimizerKind::AdamW,
            ..CslaConfig::default()
        }
    }

    #[test]
    fn step_ratio_cases() {
        let c = adam_cfg(0.0, 3);
        let (x, s, loss) = random_instance(&c, 6, 1).unwrap();
        let run = run_csla_adamw(&x, &s, &c, &loss, 5).unwrap();
        let r = central_peripheral_step_ratio(&run).unwrap().ratio().unwrap();
        assert!((r - 1.0).abs() < 0.1, "{r}");

        let c = adam_cfg(1.0, 7);
        let (x, s, loss) = random_instance(&c, 6, 1).unwrap();
        let run = run_csla_adamw(&x, &s, &c, &loss, 2).unwrap();
        assert!(matches!(central_peripheral_step_ratio(&run).unwrap(), StepRatio::FullSupport { .. }));
    }

    #[test]
    fn aligned_branches_move_center_faster() {
        let c = adam_cfg(1.0, 3);
        let wins = (0..10)
            .filter(|&seed| {
                let (x, s, loss) = random_instance(&c, 6, 100 + seed).unwrap();
                let run = run_csla_adamw(&x, &s, &c, &loss, 10).unwrap();
                central_peripheral_step_ratio(&run).unwrap().ratio().unwrap() > 1.0
            })
            .count();
        assert!(wins >= 9, "{wins}/10");
    }
}
