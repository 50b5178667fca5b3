//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Every criterion also emits artifacts (CSV text, RT3D tensors); the whole
//! suite runs twice and the last criterion checks that both passes wrote
//! byte-identical files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use repfield3d::encoder::{compare_arms, train_toy, Arm, EncoderConfig, ToyEncoder, TrainConfig};
use repfield3d::erf::{brute_force_support, erf_accumulate, erf_support, mass_radius, DwStack};
use repfield3d::export::fmt_e12;
use repfield3d::lrbm::{distance_map, modulation_mask, prior_mask, GeneratorParams};
use repfield3d::reparam::{
    adam_scale_invariance_check, csla_forward, merge_so, normal_gradient_stream, random_instance,
    trajectory_comparison, CslaConfig, FieldConvention,
};
use repfield3d::verify::{gradcheck_scope, GradScope};
use repfield3d::{dwconv3d, rt3d, seeded_normal, Rng, Tensor};

type Artifacts = Vec<(String, Vec<u8>)>;

struct Outcome {
    pass: bool,
    detail: String,
    artifacts: Artifacts,
}

struct Criterion {
    name: &'static str,
    limit_s: Option<f64>,
    run: fn() -> Outcome,
}

fn csv(name: &str, text: String) -> (String, Vec<u8>) {
    (name.to_string(), text.into_bytes())
}

fn tensor(name: &str, t: &Tensor) -> (String, Vec<u8>) {
    (name.to_string(), rt3d::encode(t))
}

fn forward_merge() -> Outcome {
    let mut out = String::from("seed,k_l,k_s,alpha_l,alpha_s,max_abs_diff\n");
    let mut worst = 0.0f64;
    let mut n = 0;
    for seed in 0..20 {
        for k_l in [5, 7] {
            for k_s in [1, 3] {
                for alpha_l in [0.5, 1.0, 2.0] {
                    for alpha_s in [0.5, 1.0, 2.0] {
                        let cfg = CslaConfig { k_l, k_s, alpha_l, alpha_s, ..CslaConfig::default() };
                        let (x, s, _) = random_instance(&cfg, 8, seed).unwrap();
                        let two = csla_forward(&x, &s, &cfg).unwrap();
                        let one = dwconv3d(&x, &merge_so(&s, &cfg).unwrap()).unwrap();
                        let d = two.max_abs_diff(&one).unwrap();
                        worst = worst.max(d);
                        n += 1;
                        let _ = writeln!(out, "{seed},{k_l},{k_s},{alpha_l},{alpha_s},{}", fmt_e12(d));
                    }
                }
            }
        }
    }
    Outcome {
        pass: worst < 1e-12,
        detail: format!("{n} instances on 8³, max diff {worst:.3e} (< 1e-12)"),
        artifacts: vec![csv("forward_merge.csv", out)],
    }
}

fn trajectory() -> Outcome {
    let mut out = String::from("seed,k_l,k_s,alpha_l,alpha_s,max_divergence\n");
    let mut worst = 0.0f64;
    let mut n = 0;
    for seed in 0..20 {
        for k_l in [5, 7] {
            for k_s in [1, 3] {
                for (alpha_l, alpha_s) in [(1.0, 1.0), (0.5, 2.0)] {
                    let cfg = CslaConfig { k_l, k_s, alpha_l, alpha_s, ..CslaConfig::default() };
                    let (x, s, loss) = random_instance(&cfg, 8, seed).unwrap();
                    let r = trajectory_comparison(&x, &s, &cfg, &loss, 10).unwrap();
                    let d = r.max_divergence();
                    worst = worst.max(d);
                    n += 1;
                    let _ = writeln!(out, "{seed},{k_l},{k_s},{alpha_l},{alpha_s},{}", fmt_e12(d));
                }
            }
        }
    }
    let cfg = CslaConfig {
        alpha_l: 2.0,
        field_convention: FieldConvention::AsWritten,
        ..CslaConfig::default()
    };
    let (x, s, loss) = random_instance(&cfg, 8, 0).unwrap();
    let control = trajectory_comparison(&x, &s, &cfg, &loss, 10).unwrap().max_divergence();
    let _ = writeln!(out, "# as-written field with alpha_l = 2: {}", fmt_e12(control));
    Outcome {
        pass: worst < 1e-10,
        detail: format!(
            "{n} runs × 10 SGD steps, λ = (2e-4, 6e-4), max divergence {worst:.3e} (< 1e-10); \
             as-written field at α_L = 2 diverges by {control:.3e}"
        ),
        artifacts: vec![csv("trajectory.csv", out)],
    }
}

fn gradient_checks() -> Outcome {
    let report = gradcheck_scope(GradScope::All, 1e-6).unwrap();
    Outcome {
        pass: report.passed(),
        detail: format!(
            "{} tensors (conv, generator, effective kernel, blocks, encoder), max rel err {:.3e} (< 1e-6)",
            report.rows.len(),
            report.max_rel_err()
        ),
        artifacts: vec![csv("gradcheck.csv", report.to_csv())],
    }
}

fn adam_cancellation() -> Outcome {
    let grads = normal_gradient_stream(0, 100, 64);
    let tight = adam_scale_invariance_check(&grads, 10.0, 1e-8, 1e-3).unwrap();
    let loose = adam_scale_invariance_check(&grads, 10.0, 1e-2, 1e-3).unwrap();
    let mut out = String::from("alpha,eps,steps,max_rel_deviation\n");
    for r in [&tight, &loose] {
        let _ = writeln!(out, "{},{},{},{}", r.alpha, r.eps, r.steps, fmt_e12(r.max_rel_deviation));
    }
    Outcome {
        pass: tight.max_rel_deviation < 1e-6 && loose.max_rel_deviation > 1e-3 && tight.steps == 100,
        detail: format!(
            "α = 10 over 100 steps: ε = 1e-8 deviation {:.3e} (< 1e-6), ε = 1e-2 deviation {:.3e} (> 1e-3)",
            tight.max_rel_deviation, loose.max_rel_deviation
        ),
        artifacts: vec![csv("adam_scale.csv", out)],
    }
}

fn prior_properties() -> Outcome {
    let mut failures = Vec::new();
    let mut artifacts = Vec::new();
    let mut cases = 0;
    for k in [1, 3, 5, 7, 9, 21] {
        let d = distance_map(k).unwrap();
        for beta in [0.0, 1e-3, 0.1, 1.0, 10.0] {
            cases += 1;
            let p = prior_mask(&d, beta, 1).unwrap().p;
            let c = (k - 1) / 2;
            if p.at(&[0, 0, c, c, c]) != 1.0 {
                failures.push(format!("center k={k} β={beta}"));
            }
            let mut pairs: Vec<(f64, f64)> = d.values().data().iter().copied().zip(p.data().iter().copied()).collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            for w in pairs.windows(2) {
                let ok = if w[0].0 == w[1].0 { w[0].1 == w[1].1 } else { w[0].1 >= w[1].1 };
                if !ok {
                    failures.push(format!("monotone k={k} β={beta}"));
                    break;
                }
            }
            for i in 0..k {
                for j in 0..k {
                    for l in 0..k {
                        let v = p.at(&[0, 0, i, j, l]);
                        let mirrors = [[k - 1 - i, j, l], [i, k - 1 - j, l], [i, j, k - 1 - l]];
                        if mirrors.iter().any(|m| p.at(&[0, 0, m[0], m[1], m[2]]).to_bits() != v.to_bits()) {
                            failures.push(format!("symmetry k={k} β={beta} at {i},{j},{l}"));
                        }
                    }
                }
            }
            artifacts.push(tensor(&format!("prior_k{k}_beta{beta}.rt3d"), &p));
        }
    }
    let p = prior_mask(&distance_map(3).unwrap(), 1.0, 1).unwrap().p;
    let corner = p.at(&[0, 0, 0, 0, 0]);
    let expected = 1.0 / (1.0 + 3f64.sqrt());
    let corner_err = (corner - expected).abs();
    if corner_err >= 1e-12 {
        failures.push(format!("corner {corner} vs {expected}"));
    }
    Outcome {
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            format!(
                "{cases} (K, β) cases: center 1, radial non-increase, exact reflection symmetry; K=3 β=1 corner off by {corner_err:.1e}"
            )
        } else {
            failures.join("; ")
        },
        artifacts,
    }
}

fn init_contract() -> Outcome {
    let mut failures = Vec::new();
    let mut artifacts = Vec::new();
    for depth in [2, 3] {
        for (c, k, kg) in [(1, 3, 3), (8, 7, 7), (16, 7, 3)] {
            let d = distance_map(k).unwrap();
            let ps = prior_mask(&d, 1e-3, c).unwrap();
            let theta = GeneratorParams::zero_init(c, depth, kg, &mut Rng::new(depth as u64)).unwrap();
            let m = modulation_mask(&ps, &theta).unwrap().m;
            if m.data().iter().zip(ps.p.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
                failures.push(format!("M != P at depth {depth}, C={c}, K={k}"));
            }
        }
    }
    for seed in 0..5 {
        let fixed = ToyEncoder::init(&EncoderConfig { arm: Arm::Fixed, ..EncoderConfig::default() }, seed).unwrap();
        let lrbm = ToyEncoder::init(&EncoderConfig { arm: Arm::Lrbm, ..EncoderConfig::default() }, seed).unwrap();
        let x = seeded_normal(&mut Rng::new(100 + seed), &[1, 1, 16, 16, 16]);
        let (yf, yl) = (fixed.forward(&x).unwrap(), lrbm.forward(&x).unwrap());
        if yf.data().iter().zip(yl.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            failures.push(format!("forward differs at seed {seed}"));
        }
        let cfg = TrainConfig { steps: 0, seed, ..TrainConfig::default() };
        let (cf, cl) = (train_toy(&cfg, Arm::Fixed).unwrap().curve, train_toy(&cfg, Arm::Lrbm).unwrap().curve);
        if cf.records[0].loss.to_bits() != cl.records[0].loss.to_bits() {
            failures.push(format!("step-0 loss differs at seed {seed}"));
        }
        artifacts.push(tensor(&format!("init_logits_seed{seed}.rt3d"), &yl));
    }
    Outcome {
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            "zero-init generator (depth 2, 3) gives M == P bitwise; lrbm == fixed logits and step-0 loss bitwise on 5 seeds"
                .to_string()
        } else {
            failures.join("; ")
        },
        artifacts,
    }
}

fn fold_equivalence() -> Outcome {
    let cfg = TrainConfig { steps: 30, checkpoints: vec![], ..TrainConfig::default() };
    let trained = train_toy(&cfg, Arm::Lrbm).unwrap().model;
    let moved = trained
        .params()
        .iter()
        .any(|(n, t)| n.contains(".gen") && n.ends_with(".w") && t.data().iter().any(|&v| v != 0.0));
    let folded = trained.fold().unwrap();
    let leftover: Vec<&str> = folded
        .params()
        .iter()
        .map(|(n, _)| n.as_str())
        .filter(|n| ToyEncoder::is_generator_param(n) || n.ends_with(".beta"))
        .collect();
    let mut worst = 0.0f64;
    let mut rng = Rng::new(7);
    let mut artifacts = Vec::new();
    for i in 0..10 {
        let x = seeded_normal(&mut rng, &[1, 1, 16, 16, 16]);
        let y = folded.forward(&x).unwrap();
        worst = worst.max(trained.forward(&x).unwrap().max_abs_diff(&y).unwrap());
        if i == 0 {
            artifacts.push(tensor("fold_logits.rt3d", &y));
        }
    }
    for (n, t) in folded.params() {
        artifacts.push(tensor(&format!("folded_{n}.rt3d"), t));
    }
    Outcome {
        pass: worst == 0.0 && leftover.is_empty() && moved && folded.config.arm == Arm::Vanilla,
        detail: format!(
            "lrbm model after 30 steps (generator moved: {moved}): max diff {worst:e} on 10 inputs; \
             folded model has {} params, {} prior/generator tensors",
            folded.param_count(),
            leftover.len()
        ),
        artifacts,
    }
}

fn erf_ground_truth() -> Outcome {
    let mut failures = Vec::new();
    let mut artifacts = Vec::new();
    let shape = [1, 1, 9, 9, 9];
    for (spec, gelu, n) in [("ones3", false, 3), ("ones3,ones3", true, 5)] {
        let mut model = DwStack::from_spec(spec, 1, 0).unwrap();
        model.gelu = gelu;
        let map = erf_accumulate(&model, &shape, 8, 1).unwrap();
        let support = erf_support(&map, 0.0).unwrap();
        let x = seeded_normal(&mut Rng::new(2), &shape).map(|v| 0.1 * v);
        let brute = brute_force_support(&model, &x, 0.5).unwrap();
        if support.voxels.len() != n * n * n || support.bbox_extent() != [n; 3] {
            failures.push(format!("{spec}: {} voxels", support.voxels.len()));
        }
        if brute != support.mask {
            failures.push(format!("{spec}: brute-force support differs"));
        }
        artifacts.push(tensor(&format!("erf_{spec}.rt3d"), &map.values));
    }
    let mut radii = String::from("seed,plain_r50,masked_r50\n");
    let mut wins = 0;
    for seed in 0..5 {
        let plain = DwStack::from_spec("uniform7", 1, seed).unwrap();
        let masked = DwStack::from_spec("uniform7@0.1", 1, seed).unwrap();
        let rp = mass_radius(&erf_accumulate(&plain, &shape, 8, seed).unwrap(), 0.5).unwrap();
        let rm = mass_radius(&erf_accumulate(&masked, &shape, 8, seed).unwrap(), 0.5).unwrap();
        wins += (rm < rp) as usize;
        let _ = writeln!(radii, "{seed},{},{}", fmt_e12(rp), fmt_e12(rm));
    }
    artifacts.push(csv("erf_mass_radius.csv", radii));
    if wins < 5 {
        failures.push(format!("masked radius smaller on only {wins}/5 seeds"));
    }
    Outcome {
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            "K=3 support 3³, two layers 5³ on 9³, both equal to brute force; masked (β = 0.1) 50%-mass radius smaller on 5/5 seeds"
                .to_string()
        } else {
            failures.join("; ")
        },
        artifacts,
    }
}

fn arm_ordering() -> Outcome {
    let mut curves = Vec::new();
    let mut artifacts = Vec::new();
    for seed in 0..5 {
        for arm in Arm::ALL {
            let cfg = TrainConfig { seed, ..TrainConfig::default() };
            let outcome = train_toy(&cfg, arm).unwrap();
            artifacts.push(csv(&format!("curve_{arm}_seed{seed}.csv"), outcome.curve.to_csv(false)));
            for (n, t) in outcome.model.params() {
                artifacts.push(tensor(&format!("model_{arm}_seed{seed}_{n}.rt3d"), t));
            }
            curves.push(outcome.curve);
        }
    }
    let cmp = compare_arms(&curves).unwrap();
    artifacts.push(csv("comparison.csv", cmp.to_csv()));
    Outcome {
        pass: cmp.ordering_holds(),
        detail: format!(
            "600 steps × 5 seeds: lrbm ≤ vanilla final loss on {}/5 (need {}); mean Dice lrbm {:.4} vs fixed {:.4} (need ≥ fixed − 0.01), vanilla {:.4}",
            cmp.lrbm_le_vanilla,
            cmp.required_wins(),
            cmp.mean_dice_lrbm,
            cmp.mean_dice_fixed,
            cmp.mean_dice_vanilla
        ),
        artifacts,
    }
}

const CRITERIA: [Criterion; 9] = [
    Criterion { name: "forward merge equivalence", limit_s: Some(10.0), run: forward_merge },
    Criterion { name: "trajectory equivalence", limit_s: Some(30.0), run: trajectory },
    Criterion { name: "gradient checks", limit_s: Some(60.0), run: gradient_checks },
    Criterion { name: "adam scale cancellation", limit_s: Some(5.0), run: adam_cancellation },
    Criterion { name: "prior properties", limit_s: None, run: prior_properties },
    Criterion { name: "lrbm init contract", limit_s: None, run: init_contract },
    Criterion { name: "fold equivalence", limit_s: None, run: fold_equivalence },
    Criterion { name: "erf support ground truth", limit_s: Some(60.0), run: erf_ground_truth },
    Criterion { name: "three-arm ordering", limit_s: Some(900.0), run: arm_ordering },
];

fn write_all(dir: &Path, artifacts: &Artifacts) {
    std::fs::create_dir_all(dir).unwrap();
    for (name, bytes) in artifacts {
        std::fs::write(dir.join(name), bytes).unwrap();
    }
}

fn report(pass: bool, name: &str, detail: &str, secs: f64, limit: Option<f64>) {
    let limit = limit.map(|l| format!(", limit {l:.0} s")).unwrap_or_default();
    println!("{} {name}: {detail} [{secs:.1} s{limit}]", if pass { "PASS" } else { "FAIL" });
}

fn main() -> ExitCode {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&root);
    let mut all_pass = true;
    let mut first: Vec<Artifacts> = Vec::new();
    for c in &CRITERIA {
        let start = Instant::now();
        let o = (c.run)();
        let secs = start.elapsed().as_secs_f64();
        let pass = o.pass && c.limit_s.is_none_or(|l| secs < l);
        all_pass &= pass;
        report(pass, c.name, &o.detail, secs, c.limit_s);
        write_all(&root.join("run1"), &o.artifacts);
        first.push(o.artifacts);
    }

    let start = Instant::now();
    let mut files = 0;
    let mut bytes = 0;
    let mut mismatched = Vec::new();
    for (c, a) in CRITERIA.iter().zip(&first) {
        let b = (c.run)().artifacts;
        write_all(&root.join("run2"), &b);
        if a.len() != b.len() {
            mismatched.push(format!("{}: artifact count", c.name));
        }
        for ((na, ba), (nb, bb)) in a.iter().zip(&b) {
            let on_disk = std::fs::read(root.join("run1").join(na)).unwrap() == std::fs::read(root.join("run2").join(nb)).unwrap();
            if na != nb || ba != bb || !on_disk {
                mismatched.push(na.clone());
            }
            files += 1;
            bytes += ba.len();
        }
    }
    let pass = mismatched.is_empty();
    all_pass &= pass;
    let detail = if pass {
        format!("second pass rewrote {files} artifacts ({bytes} bytes) byte-identically")
    } else {
        format!("{} artifacts differ, first: {}", mismatched.len(), mismatched[0])
    };
    report(pass, "determinism", &detail, start.elapsed().as_secs_f64(), None);

    if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
