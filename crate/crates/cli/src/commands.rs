use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use repfield3d::encoder::{
    compare_arms, load_checkpoint, save_checkpoint, train_toy as train_arm, Arm, EncoderConfig,
    ToyEncoder, ToyTask, TrainConfig,
};
use repfield3d::erf::{erf_accumulate, erf_support, export_slices, mass_radius, DwStack, ErfModel};
use repfield3d::export::fmt_e12;
use repfield3d::kvconfig::KvConfig;
use repfield3d::lrbm::{distance_map, mask_csv, prior_mask, Lrbm};
use repfield3d::reparam::{effective_lr_field, CslaConfig};
use repfield3d::verify::{gradcheck_scope, merge_verify as verify_merge, GradScope, MERGE_TOL};
use repfield3d::{seeded_normal, Error, Result, Rng};

use crate::run::Run;
use crate::{CslaArgs, ErfArgs, FoldArgs, GradcheckArgs, MaskArgs, PriorArgs, TrainArgs};

type Out = Option<PathBuf>;

fn s<T: ToString>(v: Option<T>) -> Option<String> {
    v.map(|v| v.to_string())
}

fn switch(on: bool) -> Option<String> {
    on.then(|| "true".to_string())
}

fn d<T: ToString>(k: &'static str, v: T) -> (&'static str, String) {
    (k, v.to_string())
}

pub fn gradcheck(out: Out, config: Option<&Path>, a: GradcheckArgs) -> Result<bool> {
    let mut run = Run::new(
        "gradcheck",
        out,
        config,
        &[d("scope", "all"), d("tol", 1e-6)],
        &[("scope", a.scope), ("tol", s(a.tol))],
    )?;
    let scope: GradScope = run.get("scope")?;
    let tol: f64 = run.get("tol")?;
    let report = gradcheck_scope(scope, tol)?;
    run.write_text("gradcheck.csv", &report.to_csv())?;
    for r in &report.rows {
        println!("{:<28} {:.3e} {}", r.parameter, r.max_rel_err, if r.pass { "ok" } else { "FAIL" });
    }
    let passed = report.passed();
    println!(
        "gradcheck {scope}: {} tensors, max rel err {:.3e} (tol {tol:e}): {}",
        report.rows.len(),
        report.max_rel_err(),
        if passed { "pass" } else { "FAIL" }
    );
    let mut res = KvConfig::new();
    res.set("tensors", report.rows.len());
    res.set("max_rel_err", fmt_e12(report.max_rel_err()));
    run.finish(passed, &res)?;
    Ok(passed)
}

fn csla_defaults() -> Vec<(&'static str, String)> {
    let c = CslaConfig::default();
    vec![
        d("k_l", c.k_l),
        d("k_s", c.k_s),
        d("alpha_l", c.alpha_l),
        d("alpha_s", c.alpha_s),
        d("lambda_l", c.lambda_l),
        d("lambda_s", c.lambda_s),
        d("field_convention", c.field_convention),
        d("channels", c.channels),
        d("seed", 0),
        d("volume", 8),
        d("steps", 10),
    ]
}

fn csla_run(command: &'static str, out: Out, config: Option<&Path>, a: CslaArgs) -> Result<(Run, CslaConfig)> {
    let run = Run::new(
        command,
        out,
        config,
        &csla_defaults(),
        &[
            ("k_l", s(a.k_l)),
            ("k_s", s(a.k_s)),
            ("alpha_l", s(a.alpha_l)),
            ("alpha_s", s(a.alpha_s)),
            ("lambda_l", s(a.lambda_l)),
            ("lambda_s", s(a.lambda_s)),
            ("field_convention", a.field_convention),
            ("channels", s(a.channels)),
            ("seed", s(a.seed)),
            ("volume", s(a.volume)),
            ("steps", s(a.steps)),
        ],
    )?;
    let cfg = CslaConfig {
        k_l: run.get("k_l")?,
        k_s: run.get("k_s")?,
        alpha_l: run.get("alpha_l")?,
        alpha_s: run.get("alpha_s")?,
        lambda_l: run.get("lambda_l")?,
        lambda_s: run.get("lambda_s")?,
        field_convention: run.get("field_convention")?,
        channels: run.get("channels")?,
        ..CslaConfig::default()
    };
    cfg.validate()?;
    Ok((run, cfg))
}

pub fn merge_verify(out: Out, config: Option<&Path>, a: CslaArgs) -> Result<bool> {
    let (mut run, cfg) = csla_run("merge-verify", out, config, a)?;
    let r = verify_merge(&cfg, run.get("seed")?, run.get("volume")?, run.get("steps")?)?;
    let mut csv = String::from("step,max_kernel_divergence\n");
    for (i, v) in r.per_step.iter().enumerate() {
        let _ = writeln!(csv, "{},{}", i + 1, fmt_e12(*v));
    }
    run.write_text("merge_verify.csv", &csv)?;
    let passed = r.passed();
    println!("field ({}): central {:e}, peripheral {:e}", cfg.field_convention, r.central, r.peripheral);
    println!("forward max diff    {:.3e}", r.forward_max_diff);
    println!("trajectory max diff {:.3e} over {} steps", r.trajectory_max_diff, r.per_step.len());
    println!("merge-verify (tol {MERGE_TOL:e}): {}", if passed { "pass" } else { "FAIL" });
    let mut res = KvConfig::new();
    res.set("forward_max_diff", fmt_e12(r.forward_max_diff));
    res.set("trajectory_max_diff", fmt_e12(r.trajectory_max_diff));
    res.set("field_central", fmt_e12(r.central));
    res.set("field_peripheral", fmt_e12(r.peripheral));
    run.finish(passed, &res)?;
    Ok(passed)
}

pub fn lr_field(out: Out, config: Option<&Path>, a: CslaArgs) -> Result<bool> {
    let (mut run, cfg) = csla_run("lr-field", out, config, a)?;
    let field = effective_lr_field(&cfg)?;
    run.write_tensor("lr_field.rt3d", field.values())?;
    run.write_text("lr_field.csv", &field.to_csv())?;
    println!(
        "lr field {}³ ({}³ core, {}): central {:e}, peripheral {:e}",
        field.kernel_size(),
        field.small_size(),
        cfg.field_convention,
        field.central(),
        field.peripheral()
    );
    let mut res = KvConfig::new();
    res.set("field_central", fmt_e12(field.central()));
    res.set("field_peripheral", fmt_e12(field.peripheral()));
    run.finish(true, &res)?;
    Ok(true)
}

pub fn prior(out: Out, config: Option<&Path>, a: PriorArgs) -> Result<bool> {
    let mut run = Run::new(
        "prior",
        out,
        config,
        &[d("k", 7), d("beta", repfield3d::lrbm::DEFAULT_BETA)],
        &[("k", s(a.k)), ("beta", s(a.beta))],
    )?;
    let k: usize = run.get("k")?;
    let beta: f64 = run.get("beta")?;
    let dist = distance_map(k)?;
    let p = prior_mask(&dist, beta, 1)?.p;
    run.write_tensor("prior.rt3d", &p)?;
    let c = dist.center() as isize;
    let mut csv = String::from("x,y,z,f_d,P\n");
    let mut o = 0;
    for i in 0..k as isize {
        for j in 0..k as isize {
            for l in 0..k as isize {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{}",
                    i - c,
                    j - c,
                    l - c,
                    fmt_e12(dist.values().data()[o]),
                    fmt_e12(p.data()[o])
                );
                o += 1;
            }
        }
    }
    run.write_text("prior.csv", &csv)?;
    let center = p.data()[p.len() / 2];
    let corner = p.data()[0];
    println!("prior k={k} beta={beta:e}: center {center}, corner {corner:e}");
    let mut res = KvConfig::new();
    res.set("center", fmt_e12(center));
    res.set("corner", fmt_e12(corner));
    run.finish(true, &res)?;
    Ok(true)
}

pub fn mask(out: Out, config: Option<&Path>, a: MaskArgs) -> Result<bool> {
    let mut run = Run::new(
        "mask",
        out,
        config,
        &[
            d("k", 7),
            d("beta", repfield3d::lrbm::DEFAULT_BETA),
            d("channels", 1),
            d("generator_depth", repfield3d::lrbm::DEFAULT_GENERATOR_DEPTH),
            d("generator_kernel", repfield3d::lrbm::DEFAULT_GENERATOR_KERNEL),
            d("init", "zero-generator"),
            d("seed", 0),
        ],
        &[
            ("k", s(a.k)),
            ("beta", s(a.beta)),
            ("channels", s(a.channels)),
            ("generator_depth", s(a.generator_depth)),
            ("generator_kernel", s(a.generator_kernel)),
            ("init", a.init),
            ("seed", s(a.seed)),
        ],
    )?;
    let mut rng = Rng::new(run.get("seed")?);
    let mut lrbm = Lrbm::new(
        run.get("channels")?,
        run.get("k")?,
        run.get("generator_depth")?,
        run.get("generator_kernel")?,
        run.get("beta")?,
        &mut rng,
    )?;
    match run.get::<String>("init")?.as_str() {
        "zero-generator" => {}
        "random" => {
            for l in &mut lrbm.generator.layers {
                l.weights = seeded_normal(&mut rng, l.weights.shape()).scale(0.5)?;
                l.bias = seeded_normal(&mut rng, l.bias.shape()).scale(0.2)?;
            }
        }
        other => return Err(Error::Config(format!("key `init`: unknown value `{other}` (zero-generator, random)"))),
    }
    let p = lrbm.prior()?.p;
    let m = lrbm.mask()?.m;
    run.write_tensor("mask.rt3d", &m)?;
    run.write_tensor("prior.rt3d", &p)?;
    run.write_text("mask.csv", &mask_csv(&lrbm.distance, &p, &m, 0)?)?;
    let diff = m.max_abs_diff(&p)?;
    println!("mask: {} generator params, max |M − P| = {diff:e}", lrbm.generator.param_count());
    let mut res = KvConfig::new();
    res.set("max_abs_mask_minus_prior", fmt_e12(diff));
    run.finish(true, &res)?;
    Ok(true)
}

pub fn erf(out: Out, config: Option<&Path>, a: ErfArgs) -> Result<bool> {
    let mut run = Run::new(
        "erf",
        out,
        config,
        &[
            d("spec", "ones3,ones3"),
            d("checkpoint", ""),
            d("stage", 0),
            d("channels", 1),
            d("volume", 9),
            d("samples", repfield3d::erf::DEFAULT_SAMPLES),
            d("seed", 0),
            d("threshold", 0.0),
            d("axis", 0),
            d("gelu", false),
            d("expect_extent", ""),
        ],
        &[
            ("spec", a.spec),
            ("checkpoint", a.checkpoint.map(|p| p.display().to_string())),
            ("stage", s(a.stage)),
            ("channels", s(a.channels)),
            ("volume", s(a.volume)),
            ("samples", s(a.samples)),
            ("seed", s(a.seed)),
            ("threshold", s(a.threshold)),
            ("axis", s(a.axis)),
            ("gelu", switch(a.gelu)),
            ("expect_extent", s(a.expect_extent)),
        ],
    )?;
    let volume: usize = run.get("volume")?;
    let samples: usize = run.get("samples")?;
    let seed: u64 = run.get("seed")?;
    let map = match run.opt::<PathBuf>("checkpoint")? {
        Some(dir) => {
            let (model, _) = load_checkpoint(&dir)?;
            let probe = model.stage_probe(run.get("stage")?)?;
            erf_accumulate(&probe, &[1, probe.channels(), volume, volume, volume], samples, seed)?
        }
        None => {
            let channels: usize = run.get("channels")?;
            let mut model = DwStack::from_spec(&run.get::<String>("spec")?, channels, seed)?;
            model.gelu = run.get("gelu")?;
            println!("model: {}", model.describe());
            erf_accumulate(&model, &[1, channels, volume, volume, volume], samples, seed)?
        }
    };
    let axis: usize = run.get("axis")?;
    for p in export_slices(&map, axis, &run.path("erf"))? {
        if let Some(name) = p.file_name() {
            run.record(&name.to_string_lossy());
        }
    }
    let support = erf_support(&map, run.get("threshold")?)?;
    let extent = support.bbox_extent();
    let r50 = mass_radius(&map, 0.5)?;
    println!(
        "erf of {} ({} samples): support {} voxels, extent {}x{}x{}, 50% mass radius {r50:.4}",
        map.description,
        map.n_samples,
        support.voxels.len(),
        extent[0],
        extent[1],
        extent[2]
    );
    let passed = match run.opt::<usize>("expect_extent")? {
        Some(n) => {
            let ok = extent == [n; 3] && support.voxels.len() == n * n * n;
            println!("expected a full {n}³ support: {}", if ok { "pass" } else { "FAIL" });
            ok
        }
        None => true,
    };
    let mut res = KvConfig::new();
    res.set("description", &map.description);
    res.set("support_voxels", support.voxels.len());
    res.set("support_extent", format!("{},{},{}", extent[0], extent[1], extent[2]));
    res.set("mass_radius_50", fmt_e12(r50));
    run.finish(passed, &res)?;
    Ok(passed)
}

fn encoder_defaults(arm: &str) -> Vec<(&'static str, String)> {
    let kv = EncoderConfig::default().to_kv();
    EncoderConfig::KEYS
        .iter()
        .map(|&k| if k == "arm" { d(k, arm) } else { d(k, kv.get(k).unwrap_or("")) })
        .collect()
}

/// Encoder settings from the resolved run config, leaving `arm` to the caller.
fn encoder_config(run: &Run) -> Result<EncoderConfig> {
    let mut kv = KvConfig::new();
    for k in EncoderConfig::KEYS.iter().filter(|&&k| k != "arm") {
        if let Some(v) = run.cfg.get(k) {
            kv.set(k, v);
        }
    }
    let mut cfg = EncoderConfig::default();
    cfg.apply_kv(&kv)?;
    Ok(cfg)
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{v}` as a list of steps"))))
        .collect()
}

pub fn train_toy(out: Out, config: Option<&Path>, a: TrainArgs) -> Result<bool> {
    let task = ToyTask::default();
    let mut defaults = vec![
        d("steps", repfield3d::encoder::DEFAULT_TOY_STEPS),
        d("seed", 0),
        d("seeds", 1),
        d("lr", repfield3d::encoder::DEFAULT_TOY_LR),
        d("generator_lr", ""),
        d("train_samples", repfield3d::encoder::DEFAULT_TRAIN_SAMPLES),
        d(
            "checkpoints",
            repfield3d::encoder::DEFAULT_CHECKPOINTS.map(|c| c.to_string()).join(","),
        ),
        d("min_spheres", task.min_spheres),
        d("max_spheres", task.max_spheres),
        d("radius_min", task.radius_min),
        d("radius_max", task.radius_max),
        d("noise", task.noise),
        d("softness", task.softness),
        d("include_wall", false),
        d("check_ordering", false),
    ];
    defaults.extend(encoder_defaults("all"));
    let mut run = Run::new(
        "train-toy",
        out,
        config,
        &defaults,
        &[
            ("arm", a.arm),
            ("steps", s(a.steps)),
            ("seed", s(a.seed)),
            ("seeds", s(a.seeds)),
            ("lr", s(a.lr)),
            ("generator_lr", s(a.generator_lr)),
            ("kernel_size", s(a.kernel_size)),
            ("include_wall", switch(a.include_wall)),
            ("check_ordering", switch(a.check_ordering)),
        ],
    )?;
    let arms: Vec<Arm> = match run.get::<String>("arm")?.as_str() {
        "all" => Arm::ALL.to_vec(),
        one => vec![one
            .parse()
            .map_err(|_| Error::Config(format!("key `arm`: unknown value `{one}` (vanilla, fixed, lrbm, all)")))?],
    };
    let encoder = encoder_config(&run)?;
    let task = ToyTask {
        size: encoder.in_size,
        min_spheres: run.get("min_spheres")?,
        max_spheres: run.get("max_spheres")?,
        radius_min: run.get("radius_min")?,
        radius_max: run.get("radius_max")?,
        noise: run.get("noise")?,
        softness: run.get("softness")?,
        seed: 0,
    };
    task.validate()?;
    let base = TrainConfig {
        encoder,
        task,
        train_samples: run.get("train_samples")?,
        steps: run.get("steps")?,
        lr: run.get("lr")?,
        generator_lr: run.opt("generator_lr")?,
        checkpoints: parse_list("checkpoints", &run.get::<String>("checkpoints").unwrap_or_default())?,
        ..TrainConfig::default()
    };
    let first: u64 = run.get("seed")?;
    let n_seeds: u64 = run.get("seeds")?;
    if n_seeds == 0 {
        return Err(Error::Config("key `seeds`: must be at least 1".into()));
    }
    let include_wall: bool = run.get("include_wall")?;

    let mut curves = Vec::new();
    for seed in first..first + n_seeds {
        for &arm in &arms {
            let cfg = TrainConfig { seed, ..base.clone() };
            let outcome = train_arm(&cfg, arm)?;
            let c = &outcome.curve;
            let tag = format!("{arm}_seed{seed}");
            run.write_text(&format!("curve_{tag}.csv"), &c.to_csv(include_wall))?;
            let mut ck = String::from("step,loss,dice\n");
            for r in &c.checkpoints {
                let _ = writeln!(ck, "{},{},{}", r.step, fmt_e12(r.loss), fmt_e12(r.dice));
            }
            run.write_text(&format!("checkpoints_{tag}.csv"), &ck)?;
            let mut meta = KvConfig::new();
            meta.set("seed", seed);
            meta.set("steps", cfg.steps);
            meta.set("final_loss", fmt_e12(c.final_loss));
            let dir = format!("checkpoint_{tag}");
            save_checkpoint(&run.path(&dir), &outcome.model, &meta)?;
            run.record(&dir);
            println!(
                "{arm:<7} seed {seed}: loss {:.6} -> {:.6}, dice {:.4}, {} params, {:.1} s",
                c.records[0].loss,
                c.final_loss,
                c.final_dice,
                outcome.model.param_count(),
                c.total_wall_ms() / 1e3
            );
            curves.push(outcome.curve);
        }
    }

    let mut res = KvConfig::new();
    res.set("runs", curves.len());
    let mut passed = true;
    if arms.len() == Arm::ALL.len() {
        let cmp = compare_arms(&curves)?;
        run.write_text("comparison.csv", &cmp.to_csv())?;
        let holds = cmp.ordering_holds();
        println!(
            "lrbm <= vanilla final loss on {}/{} seeds (need {}); mean dice vanilla {:.4}, fixed {:.4}, lrbm {:.4}; ordering {}",
            cmp.lrbm_le_vanilla,
            cmp.seeds.len(),
            cmp.required_wins(),
            cmp.mean_dice_vanilla,
            cmp.mean_dice_fixed,
            cmp.mean_dice_lrbm,
            if holds { "holds" } else { "does not hold" }
        );
        res.set("lrbm_le_vanilla", cmp.lrbm_le_vanilla);
        res.set("mean_dice_vanilla", fmt_e12(cmp.mean_dice_vanilla));
        res.set("mean_dice_fixed", fmt_e12(cmp.mean_dice_fixed));
        res.set("mean_dice_lrbm", fmt_e12(cmp.mean_dice_lrbm));
        res.set("ordering_holds", holds);
        if run.get::<bool>("check_ordering")? {
            passed = holds;
        }
    }
    run.finish(passed, &res)?;
    Ok(passed)
}

pub fn fold(out: Out, config: Option<&Path>, a: FoldArgs) -> Result<bool> {
    let mut defaults = vec![d("checkpoint", ""), d("seed", 0)];
    defaults.extend(encoder_defaults("lrbm"));
    let mut run = Run::new(
        "fold",
        out,
        config,
        &defaults,
        &[("checkpoint", a.checkpoint.map(|p| p.display().to_string())), ("seed", s(a.seed))],
    )?;
    let seed: u64 = run.get("seed")?;
    let model = match run.opt::<PathBuf>("checkpoint")? {
        Some(dir) => load_checkpoint(&dir)?.0,
        None => {
            let mut cfg = encoder_config(&run)?;
            cfg.arm = run.get("arm")?;
            ToyEncoder::init(&cfg, seed)?
        }
    };
    let n = model.config.in_size;
    let x = seeded_normal(&mut Rng::new(seed), &[1, 1, n, n, n]);
    let folded = model.fold()?;
    let diff = model.forward(&x)?.max_abs_diff(&folded.forward(&x)?)?;
    let mut meta = KvConfig::new();
    meta.set("folded_from", model.config.arm);
    save_checkpoint(&run.path("folded"), &folded, &meta)?;
    run.record("folded");
    let passed = diff == 0.0;
    println!(
        "fold {} arm: {} -> {} params, max |train − folded| = {diff:e}: {}",
        model.config.arm,
        model.param_count(),
        folded.param_count(),
        if passed { "pass" } else { "FAIL" }
    );
    let mut res = KvConfig::new();
    res.set("max_abs_diff", fmt_e12(diff));
    run.finish(passed, &res)?;
    Ok(passed)
}
