use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use repfield3d::kvconfig::KvConfig;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_repfield3d"));
    c.env_remove("REPFIELD3D_OUT");
    c
}

fn run(out: &Path, args: &[&str]) -> Output {
    bin().args(args).arg("--out").arg(out).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn manifest(dir: &Path) -> KvConfig {
    KvConfig::load(dir.join("manifest.txt")).unwrap()
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn help_lists_every_subcommand() {
    let o = bin().arg("--help").output().unwrap();
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    for sub in ["gradcheck", "merge-verify", "lr-field", "prior", "mask", "erf", "train-toy", "fold"] {
        assert!(text.contains(sub), "{sub}");
    }
    let o = bin().args(["erf", "--help"]).output().unwrap();
    let text = String::from_utf8(o.stdout).unwrap();
    for flag in ["--samples", "--seed", "--threshold", "--axis", "--checkpoint"] {
        assert!(text.contains(flag), "{flag}");
    }
}

#[test]
fn gradcheck_conv_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["gradcheck", "--scope", "conv"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap();
    let params: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(params, ["dwconv.x", "dwconv.w", "dense.x", "dense.w"]);
    let m = manifest(dir.path());
    assert_eq!(m.get("command"), Some("gradcheck"));
    assert_eq!(m.get("status"), Some("pass"));
    assert_eq!(m.get("config.scope"), Some("conv"));
}

#[test]
fn gradcheck_all_with_loose_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["gradcheck", "--scope", "all", "--tol", "1e-4"]);
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap();
    assert!(csv.contains("model.head.w"));
    assert!(csv.contains("generator_d3."));
}

#[test]
fn config_file_rules() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");

    std::fs::write(&cfg, "scope = conv\ntolerance = 1e-6  # misspelt\n").unwrap();
    let o = run(&dir.path().join("a"), &["gradcheck", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("tolerance"));

    // An unreachable tolerance from the file fails; the flag overrides it.
    std::fs::write(&cfg, "# conv only\nscope = conv\ntol = 1e-30\n").unwrap();
    let o = run(&dir.path().join("b"), &["gradcheck", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert_eq!(manifest(&dir.path().join("b")).get("status"), Some("fail"));
    let o = run(&dir.path().join("c"), &["gradcheck", "--config", cfg.to_str().unwrap(), "--tol", "1e-6"]);
    assert_eq!(code(&o), 0);
    assert_eq!(manifest(&dir.path().join("c")).get("config.tol"), Some("0.000001"));

    std::fs::write(&cfg, "k_l = seven\n").unwrap();
    let o = run(&dir.path().join("d"), &["merge-verify", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("k_l"));

    let o = run(&dir.path().join("e"), &["gradcheck", "--scope", "everything"]);
    assert_eq!(code(&o), 2);
    let o = run(&dir.path().join("f"), &["merge-verify", "--k-l", "6"]);
    assert_eq!(code(&o), 2);
    let o = bin().args(["gradcheck", "--no-such-flag"]).output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn merge_verify_cases() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&dir.path().join("default"), &["merge-verify"]);
    assert_eq!(code(&o), 0);
    let m = manifest(&dir.path().join("default"));
    assert!(m.get_parsed::<f64>("result.trajectory_max_diff").unwrap().unwrap() < 1e-10);

    let o = run(
        &dir.path().join("as_written"),
        &["merge-verify", "--field-convention", "as-written-eq11", "--alpha-l", "2"],
    );
    assert_eq!(code(&o), 1);
    let m = manifest(&dir.path().join("as_written"));
    assert!(m.get_parsed::<f64>("result.forward_max_diff").unwrap().unwrap() < 1e-10);
    assert!(m.get_parsed::<f64>("result.trajectory_max_diff").unwrap().unwrap() > 1e-6);

    let o = run(&dir.path().join("uniform"), &["merge-verify", "--alpha-s", "0"]);
    assert_eq!(code(&o), 0);
    let m = manifest(&dir.path().join("uniform"));
    assert_eq!(m.get("result.field_central"), m.get("result.field_peripheral"));
}

#[test]
fn lr_field_matches_merge_verify() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["--alpha-l", "0.5", "--alpha-s", "2"];
    assert_eq!(code(&run(&dir.path().join("f"), &[&["lr-field"][..], &args].concat())), 0);
    assert_eq!(code(&run(&dir.path().join("v"), &[&["merge-verify"][..], &args].concat())), 0);
    let f = manifest(&dir.path().join("f"));
    let v = manifest(&dir.path().join("v"));
    for key in ["result.field_central", "result.field_peripheral"] {
        assert_eq!(f.get(key), v.get(key));
    }
    let t = repfield3d::rt3d::read(dir.path().join("f/lr_field.rt3d")).unwrap();
    assert_eq!(t.shape(), &[7, 7, 7]);
    let csv = std::fs::read_to_string(dir.path().join("f/lr_field.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("x,y,z,value"));
    assert_eq!(csv.lines().count(), 1 + 343);
}

#[test]
fn prior_and_mask_exports() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&dir.path().join("p"), &["prior", "--k", "21", "--beta", "1"]);
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(dir.path().join("p/prior.csv")).unwrap();
    let center = csv.lines().find(|l| l.starts_with("0,0,0,")).unwrap();
    assert_eq!(center.rsplit(',').next(), Some("1.000000000000e+00"));
    assert_eq!(csv.lines().count(), 1 + 21 * 21 * 21);

    let o = run(&dir.path().join("m"), &["mask", "--init", "zero-generator", "--k", "5"]);
    assert_eq!(code(&o), 0);
    let mask = std::fs::read(dir.path().join("m/mask.rt3d")).unwrap();
    assert_eq!(mask, std::fs::read(dir.path().join("m/prior.rt3d")).unwrap());

    let o = run(&dir.path().join("r"), &["mask", "--init", "random", "--k", "5", "--generator-kernel", "3"]);
    assert_eq!(code(&o), 0);
    assert_ne!(std::fs::read(dir.path().join("r/mask.rt3d")).unwrap(), std::fs::read(dir.path().join("r/prior.rt3d")).unwrap());
    let o = run(&dir.path().join("bad"), &["mask", "--init", "ones"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn erf_supports() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&dir.path().join("delta"), &["erf", "--spec", "delta3", "--samples", "4", "--expect-extent", "1"]);
    assert_eq!(code(&o), 0);
    assert_eq!(manifest(&dir.path().join("delta")).get("result.support_voxels"), Some("1"));

    let o = run(
        &dir.path().join("two"),
        &["erf", "--spec", "ones3,ones3", "--gelu", "--samples", "4", "--expect-extent", "5"],
    );
    assert_eq!(code(&o), 0);
    let pgm = std::fs::read(dir.path().join("two/erf_slice0.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n9 9\n255\n"));
    let radial = std::fs::read_to_string(dir.path().join("two/erf_radial.csv")).unwrap();
    assert_eq!(radial.lines().next(), Some("radius,mean,count"));

    let o = run(&dir.path().join("wrong"), &["erf", "--spec", "ones3", "--samples", "2", "--expect-extent", "5"]);
    assert_eq!(code(&o), 1);
    let o = run(&dir.path().join("even"), &["erf", "--spec", "ones3", "--volume", "8"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_fold_and_probe_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("train");
    let o = run(&t, &["train-toy", "--steps", "5", "--seeds", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for arm in ["vanilla", "fixed", "lrbm"] {
        for seed in [0, 1] {
            let csv = std::fs::read_to_string(t.join(format!("curve_{arm}_seed{seed}.csv"))).unwrap();
            assert_eq!(csv.lines().next(), Some("step,loss,dice,wall_ms"));
            assert_eq!(csv.lines().count(), 1 + 6);
            assert!(t.join(format!("checkpoint_{arm}_seed{seed}/manifest.txt")).exists());
        }
    }
    let cmp = std::fs::read_to_string(t.join("comparison.csv")).unwrap();
    assert_eq!(cmp.lines().count(), 3);
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("ordering"));

    let f = dir.path().join("fold");
    let o = run(&f, &["fold", "--checkpoint", t.join("checkpoint_lrbm_seed1").to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(manifest(&f).get("result.max_abs_diff"), Some("0.000000000000e+00"));
    let (folded, _) = repfield3d::encoder::load_checkpoint(&f.join("folded")).unwrap();
    assert_eq!(folded.param_count(), 9561);

    let e = dir.path().join("erf");
    let o = run(
        &e,
        &["erf", "--checkpoint", t.join("checkpoint_lrbm_seed0").to_str().unwrap(), "--samples", "2", "--axis", "2"],
    );
    assert_eq!(code(&o), 0);
    assert!(e.join("erf_slice2.pgm").exists());
    assert!(manifest(&e).get("result.description").unwrap().contains("lrbm"));

    let o = run(&dir.path().join("one"), &["train-toy", "--arm", "fixed", "--steps", "2"]);
    assert_eq!(code(&o), 0);
    assert!(!dir.path().join("one/comparison.csv").exists());
    let o = run(&dir.path().join("bad"), &["train-toy", "--arm", "big", "--steps", "2"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn divergence_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["train-toy", "--arm", "vanilla", "--steps", "3", "--lr", "inf"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("step"));
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("env_out");
    let o = bin().env("REPFIELD3D_OUT", &out).args(["prior", "--k", "3"]).output().unwrap();
    assert_eq!(code(&o), 0);
    assert!(out.join("prior.rt3d").exists());
    assert!(out.join("manifest.txt").exists());
}

/// Same config and seed give byte-identical artifacts; only the manifest's
/// timestamp line may differ.
#[test]
fn reproducible_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [&[&str]; 4] = [
        &["train-toy", "--steps", "4", "--seed", "3"],
        &["erf", "--spec", "normal3,normal3", "--samples", "3", "--seed", "5"],
        &["merge-verify", "--seed", "4"],
        &["mask", "--init", "random", "--k", "5", "--generator-kernel", "3", "--seed", "2"],
    ];
    for (i, args) in cases.iter().enumerate() {
        let a = dir.path().join(format!("{i}a"));
        let b = dir.path().join(format!("{i}b"));
        assert_eq!(code(&run(&a, args)), 0);
        assert_eq!(code(&run(&b, args)), 0);
        let (fa, fb) = (files(&a), files(&b));
        assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
        for (name, bytes) in &fa {
            if name == "manifest.txt" {
                let strip = |v: &[u8]| {
                    String::from_utf8(v.to_vec())
                        .unwrap()
                        .lines()
                        .filter(|l| !l.starts_with("timestamp_unix"))
                        .collect::<Vec<_>>()
                        .join("\n")
                };
                assert_eq!(strip(bytes), strip(&fb[name]), "{args:?}");
            } else {
                assert_eq!(bytes, &fb[name], "{args:?}: {name}");
            }
        }
    }
}
