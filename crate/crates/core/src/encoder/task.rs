use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Rng, Tensor};

pub const DICE_SMOOTH: f64 = 1e-5;

/// Synthetic binary segmentation: noisy soft-edged spheres.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTask {
    pub size: usize,
    pub min_spheres: usize,
    pub max_spheres: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    /// Width of the sigmoid edge of each sphere's intensity.
    pub softness: f64,
    pub seed: u64,
}

impl Default for ToyTask {
    fn default() -> Self {
        Self {
            size: 16,
            min_spheres: 1,
            max_spheres: 3,
            radius_min: 2.5,
            radius_max: 5.0,
            noise: 0.5,
            softness: 0.5,
            seed: 0,
        }
    }
}

impl ToyTask {
    pub fn validate(&self) -> Result<()> {
        if self.min_spheres == 0 || self.min_spheres > self.max_spheres {
            return Err(Error::Config("sphere counts must satisfy 1 ≤ min ≤ max".into()));
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return Err(Error::Config("radii must satisfy 0 < min ≤ max".into()));
        }
        if 2.0 * self.radius_max >= self.size as f64 - 1.0 {
            return Err(Error::Config(format!(
                "radius {} does not fit in a {}³ volume",
                self.radius_max, self.size
            )));
        }
        if !(self.noise >= 0.0 && self.softness > 0.0) {
            return Err(Error::Config("noise must be ≥ 0 and softness > 0".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// One `(volume, label)` pair, each `[1, 1, S, S, S]`.
///
/// The noiseless intensity at distance `d` from a sphere of radius `r` is
/// `σ((r − d)/softness)` (max over spheres); the label is `d ≤ r` for any
/// sphere, so thresholding the noiseless volume at 0.5 recovers it.
pub fn synth_task_generate(t: &ToyTask) -> Result<(Tensor, Tensor)> {
    t.validate()?;
    let mut rng = Rng::new(t.seed);
    let n = t.min_spheres + (rng.uniform() * (t.max_spheres - t.min_spheres + 1) as f64) as usize;
    let n = n.min(t.max_spheres);
    let s = t.size;
    let spheres: Vec<([f64; 3], f64)> = (0..n)
        .map(|_| {
            let r = rng.uniform_range(t.radius_min, t.radius_max);
            let c = [0; 3].map(|_| rng.uniform_range(r, s as f64 - 1.0 - r));
            (c, r)
        })
        .collect();
    let mut vol = Tensor::zeros(&[1, 1, s, s, s]);
    let mut label = Tensor::zeros(&[1, 1, s, s, s]);
    let mut idx = 0;
    for i in 0..s {
        for j in 0..s {
            for l in 0..s {
                let mut v = 0.0f64;
                let mut inside = false;
                for (c, r) in &spheres {
                    let d = ((i as f64 - c[0]).powi(2) + (j as f64 - c[1]).powi(2) + (l as f64 - c[2]).powi(2)).sqrt();
                    v = v.max(sigmoid((r - d) / t.softness));
                    inside |= d <= *r;
                }
                vol.data_mut()[idx] = v;
                label.data_mut()[idx] = if inside { 1.0 } else { 0.0 };
                idx += 1;
            }
        }
    }
    if t.noise > 0.0 {
        for v in vol.data_mut() {
            *v += t.noise * rng.normal();
        }
    }
    Ok((vol, label))
}

/// `count` pairs with per-sample seeds derived from `t.seed`.
pub fn synth_task_set(t: &ToyTask, count: usize) -> Result<Vec<(Tensor, Tensor)>> {
    let mut root = Rng::new(t.seed);
    (0..count)
        .map(|_| synth_task_generate(&t.with_seed(root.fork().seed())))
        .collect()
}

/// `(2·Σ p·l + s) / (Σ p + Σ l + s)` with `s = 1e-5`.
pub fn soft_dice(pred: &Tensor, label: &Tensor) -> Result<f64> {
    if pred.shape() != label.shape() {
        return Err(Error::shape("soft_dice", pred.shape(), label.shape()));
    }
    let inter = pred.mul(label)?.sum();
    Ok((2.0 * inter + DICE_SMOOTH) / (pred.sum() + label.sum() + DICE_SMOOTH))
}

/// `1 − soft_dice(σ(logits), label)` as a graph scalar.
pub fn graph_dice_loss(g: &mut Graph, logits: Var, label: &Tensor) -> Result<Var> {
    let p = g.sigmoid(logits)?;
    let l = g.constant(label.clone());
    let pl = g.mul(p, l)?;
    let inter = g.sum(pl)?;
    let num = g.scale(inter, 2.0)?;
    let num = g.add_scalar(num, DICE_SMOOTH)?;
    let ps = g.sum(p)?;
    let den = g.add_scalar(ps, label.sum() + DICE_SMOOTH)?;
    let dice = g.div(num, den)?;
    let neg = g.scale(dice, -1.0)?;
    g.add_scalar(neg, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_values() {
        let l = Tensor::from_vec(vec![1.0, 0.0, 1.0, 0.0]);
        assert_eq!(soft_dice(&l, &l).unwrap(), 1.0);
        let inv = l.map(|v| 1.0 - v);
        assert!(soft_dice(&inv, &l).unwrap() < 1e-5);
        let half = Tensor::full(&[4], 0.5);
        assert!((soft_dice(&half, &l).unwrap() - 0.5).abs() < 1e-5);
        assert!(soft_dice(&half, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn graph_loss_matches_eager() {
        let mut rng = Rng::new(1);
        let logits = crate::tensor::seeded_normal(&mut rng, &[1, 1, 4, 4, 4]);
        let label = Tensor::new(vec![1, 1, 4, 4, 4], (0..64).map(|_| (rng.uniform() < 0.4) as u8 as f64).collect()).unwrap();
        let mut g = Graph::new();
        let x = g.param("logits", logits.clone()).unwrap();
        let loss = graph_dice_loss(&mut g, x, &label).unwrap();
        let eager = 1.0 - soft_dice(&logits.sigmoid(), &label).unwrap();
        assert!((g.value(loss).item().unwrap() - eager).abs() < 1e-15);
        let report = crate::autodiff::gradcheck(&g, loss, 1e-6).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn noiseless_threshold_recovers_label() {
        for seed in 0..5 {
            let t = ToyTask {
                noise: 0.0,
                min_spheres: 1,
                max_spheres: 1,
                seed,
                ..ToyTask::default()
            };
            let (vol, label) = synth_task_generate(&t).unwrap();
            assert_eq!(vol.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }), label);
        }
    }

    #[test]
    fn determinism_and_validation() {
        let t = ToyTask { seed: 42, ..ToyTask::default() };
        assert_eq!(synth_task_generate(&t).unwrap(), synth_task_generate(&t).unwrap());
        assert_ne!(synth_task_generate(&t).unwrap(), synth_task_generate(&t.with_seed(43)).unwrap());
        assert!(synth_task_generate(&ToyTask {
            radius_max: 8.0,
            ..ToyTask::default()
        })
        .is_err());
        let set = synth_task_set(&t, 3).unwrap();
        assert_eq!(set, synth_task_set(&t, 3).unwrap());
        assert_ne!(set[0], set[1]);
    }

    /// Foreground fraction stays inside [1%, 50%] for every one of 100 seeds.
    #[test]
    fn class_balance() {
        let mut total = 0.0;
        for seed in 0..100 {
            let (_, label) = synth_task_generate(&ToyTask {
                seed,
                ..ToyTask::default()
            })
            .unwrap();
            let frac = label.sum() / label.len() as f64;
            assert!((0.01..=0.5).contains(&frac), "seed {seed}: {frac}");
            total += frac;
        }
        let mean = total / 100.0;
        assert!((0.02..=0.3).contains(&mean), "{mean}");
    }
}
