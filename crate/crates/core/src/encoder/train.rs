use std::fmt::Write as _;
use std::time::Instant;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::export::fmt_e12;
use crate::reparam::{adamw_step, AdamConfig, AdamState};
use crate::tensor::Tensor;

use super::block::Arm;
use super::model::{EncoderConfig, ToyEncoder};
use super::task::{graph_dice_loss, synth_task_set, ToyTask};

/// Learning rate of the toy runs. The toy budget is a few hundred steps, so
/// this sits well above the large-scale AdamW default.
pub const DEFAULT_TOY_LR: f64 = 1e-2;
pub const DEFAULT_TOY_STEPS: usize = 600;
pub const DEFAULT_TRAIN_SAMPLES: usize = 4;
pub const DEFAULT_CHECKPOINTS: [usize; 4] = [100, 200, 400, 600];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// The arm field is overridden by the `arm` argument of [`train_toy`].
    pub encoder: EncoderConfig,
    /// The task seed is replaced by `seed`.
    pub task: ToyTask,
    pub train_samples: usize,
    pub steps: usize,
    pub lr: f64,
    /// Learning rate for β and generator tensors; `None` uses `lr`.
    pub generator_lr: Option<f64>,
    pub adam: AdamConfig,
    pub checkpoints: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            task: ToyTask::default(),
            train_samples: DEFAULT_TRAIN_SAMPLES,
            steps: DEFAULT_TOY_STEPS,
            lr: DEFAULT_TOY_LR,
            generator_lr: None,
            adam: AdamConfig::default(),
            checkpoints: DEFAULT_CHECKPOINTS.to_vec(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRecord {
    pub step: usize,
    pub loss: f64,
    pub dice: f64,
}

/// Row 0 is the whole training set before any update; row `t ≥ 1` is the
/// sample used at step `t`, measured before that step's update. Checkpoint
/// and final metrics are whole-set means.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainCurve {
    pub arm: Arm,
    pub seed: u64,
    pub records: Vec<CurveRecord>,
    pub checkpoints: Vec<CurveRecord>,
    pub final_loss: f64,
    pub final_dice: f64,
    /// Elapsed milliseconds at each record; excluded from comparisons of runs.
    pub wall_ms: Vec<f64>,
}

impl TrainCurve {
    /// Same records and metrics, ignoring wall time.
    pub fn same_trajectory(&self, other: &TrainCurve) -> bool {
        self.arm == other.arm
            && self.seed == other.seed
            && self.records == other.records
            && self.checkpoints == other.checkpoints
            && self.final_loss.to_bits() == other.final_loss.to_bits()
            && self.final_dice.to_bits() == other.final_dice.to_bits()
    }

    /// `step,loss,dice,wall_ms`; wall time is written as 0 unless requested so
    /// repeated runs produce identical files.
    pub fn to_csv(&self, include_wall: bool) -> String {
        let mut s = String::from("step,loss,dice,wall_ms\n");
        for (i, r) in self.records.iter().enumerate() {
            let wall = if include_wall { self.wall_ms.get(i).copied().unwrap_or(0.0) } else { 0.0 };
            let _ = writeln!(s, "{},{},{},{}", r.step, fmt_e12(r.loss), fmt_e12(r.dice), fmt_e12(wall));
        }
        s
    }

    pub fn total_wall_ms(&self) -> f64 {
        self.wall_ms.last().copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub curve: TrainCurve,
    pub model: ToyEncoder,
    /// Model copies at each reached checkpoint step.
    pub snapshots: Vec<(usize, ToyEncoder)>,
}

/// Mean soft-Dice loss and mean soft-Dice over `set`.
pub fn evaluate(model: &ToyEncoder, set: &[(Tensor, Tensor)]) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    let mut total = 0.0;
    for (x, label) in set {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let logits = model.build_graph(&mut g, xv, false)?;
        let loss = graph_dice_loss(&mut g, logits, label)?;
        total += g.value(loss).item()?;
    }
    let loss = total / set.len() as f64;
    Ok((loss, 1.0 - loss))
}

/// Trains one arm with per-tensor AdamW on a fixed synthetic training set,
/// cycling through it one sample per step.
pub fn train_toy(cfg: &TrainConfig, arm: Arm) -> Result<TrainOutcome> {
    if cfg.train_samples == 0 {
        return Err(Error::Config("train_samples must be positive".into()));
    }
    let start = Instant::now();
    let mut enc_cfg = cfg.encoder.clone();
    enc_cfg.arm = arm;
    let task = cfg.task.with_seed(cfg.seed);
    if task.size != enc_cfg.in_size {
        return Err(Error::Config(format!(
            "task size {} differs from encoder in_size {}",
            task.size, enc_cfg.in_size
        )));
    }
    let set = synth_task_set(&task, cfg.train_samples)?;
    let mut model = ToyEncoder::init(&enc_cfg, cfg.seed)?;
    let generator_lr = cfg.generator_lr.unwrap_or(cfg.lr);

    let trainable: Vec<String> = model
        .params()
        .iter()
        .map(|(n, _)| n.clone())
        .filter(|n| model.is_trainable(n))
        .collect();
    let mut states: Vec<AdamState> = trainable
        .iter()
        .map(|n| AdamState::new(model.get(n).expect("listed").shape(), cfg.adam))
        .collect();

    let (l0, d0) = evaluate(&model, &set)?;
    let mut records = vec![CurveRecord { step: 0, loss: l0, dice: d0 }];
    let mut wall_ms = vec![start.elapsed().as_secs_f64() * 1e3];
    let mut checkpoints = Vec::new();
    let mut snapshots = Vec::new();

    for step in 1..=cfg.steps {
        let (x, label) = &set[(step - 1) % set.len()];
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let logits = model.build_graph(&mut g, xv, true)?;
        let loss_var = graph_dice_loss(&mut g, logits, label)?;
        let loss = g.value(loss_var).item()?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        let grads = g.backward(loss_var).map_err(|e| match e {
            Error::NonFinite { .. } => Error::Diverged { step },
            other => other,
        })?;
        for (name, st) in trainable.iter().zip(states.iter_mut()) {
            let lr = if ToyEncoder::is_generator_param(name) { generator_lr } else { cfg.lr };
            let p = model.get(name)?;
            let (next, nst) = adamw_step(p, grads.get(name)?, st.clone(), lr).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged { step },
                other => other,
            })?;
            *st = nst;
            model.set(name, next)?;
        }
        records.push(CurveRecord {
            step,
            loss,
            dice: 1.0 - loss,
        });
        if cfg.checkpoints.contains(&step) {
            let (l, d) = evaluate(&model, &set)?;
            checkpoints.push(CurveRecord { step, loss: l, dice: d });
            snapshots.push((step, model.clone()));
        }
        wall_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let (final_loss, final_dice) = evaluate(&model, &set)?;
    if let Some(last) = wall_ms.last_mut() {
        *last = start.elapsed().as_secs_f64() * 1e3;
    }
    Ok(TrainOutcome {
        curve: TrainCurve {
            arm,
            seed: cfg.seed,
            records,
            checkpoints,
            final_loss,
            final_dice,
            wall_ms,
        },
        model,
        snapshots,
    })
}

/// Final metrics of the three arms for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub vanilla: (f64, f64),
    pub fixed: (f64, f64),
    pub lrbm: (f64, f64),
}

/// Summary of an all-arms sweep: the lrbm arm should end with a training
/// loss no higher than vanilla on most seeds, and a mean Dice within 0.01 of
/// the fixed arm or better.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmComparison {
    pub seeds: Vec<SeedResult>,
    pub lrbm_le_vanilla: usize,
    pub mean_dice_vanilla: f64,
    pub mean_dice_fixed: f64,
    pub mean_dice_lrbm: f64,
}

impl ArmComparison {
    pub fn required_wins(&self) -> usize {
        // 4 of 5 seeds, scaled to the sweep size.
        (self.seeds.len() * 4).div_ceil(5)
    }

    pub fn ordering_holds(&self) -> bool {
        self.lrbm_le_vanilla >= self.required_wins() && self.mean_dice_lrbm >= self.mean_dice_fixed - 0.01
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "seed,vanilla_loss,fixed_loss,lrbm_loss,vanilla_dice,fixed_dice,lrbm_dice,lrbm_le_vanilla\n",
        );
        for r in &self.seeds {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.seed,
                fmt_e12(r.vanilla.0),
                fmt_e12(r.fixed.0),
                fmt_e12(r.lrbm.0),
                fmt_e12(r.vanilla.1),
                fmt_e12(r.fixed.1),
                fmt_e12(r.lrbm.1),
                r.lrbm.0 <= r.vanilla.0
            );
        }
        s
    }
}

/// Groups curves by seed; every seed needs all three arms.
pub fn compare_arms(curves: &[TrainCurve]) -> Result<ArmComparison> {
    let mut seeds: Vec<u64> = curves.iter().map(|c| c.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    if seeds.is_empty() {
        return Err(Error::Config("no curves to compare".into()));
    }
    let mut rows = Vec::new();
    for seed in seeds {
        let pick = |arm: Arm| {
            curves
                .iter()
                .find(|c| c.seed == seed && c.arm == arm)
                .map(|c| (c.final_loss, c.final_dice))
                .ok_or_else(|| Error::Config(format!("seed {seed} is missing the {arm} arm")))
        };
        rows.push(SeedResult {
            seed,
            vanilla: pick(Arm::Vanilla)?,
            fixed: pick(Arm::Fixed)?,
            lrbm: pick(Arm::Lrbm)?,
        });
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&SeedResult) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Ok(ArmComparison {
        lrbm_le_vanilla: rows.iter().filter(|r| r.lrbm.0 <= r.vanilla.0).count(),
        mean_dice_vanilla: mean(|r| r.vanilla.1),
        mean_dice_fixed: mean(|r| r.fixed.1),
        mean_dice_lrbm: mean(|r| r.lrbm.1),
        seeds: rows,
    })
}
