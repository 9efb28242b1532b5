use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY_ARCH: &[&str] = &[
    "--arch-unet-dims",
    "4,4,4,4",
    "--arch-rec-channels",
    "4",
    "--arch-mhfg-channels",
    "4",
    "--arch-time-embed-dim",
    "8",
    "--arch-time-hidden",
    "8",
];

fn ptd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ptd")).current_dir(dir).args(args).output().expect("spawn ptd")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = ptd(dir, args);
    assert!(
        out.status.success(),
        "ptd {:?} failed: {}\n{}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn gen(dir: &Path, out: &str, n: &str, views: &str) {
    ok(dir, &["gen-data", "--n", n, "--views", views, "--image-n", "16", "--out", out]);
}

fn train_tiny(dir: &Path, extra: &[&str]) -> String {
    let mut args = vec!["train", "--data", "d", "--out", "m.ptdc", "--batch", "2"];
    args.extend_from_slice(TINY_ARCH);
    args.extend_from_slice(extra);
    ok(dir, &args)
}

fn value<'a>(stdout: &'a str, key: &str) -> &'a str {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("{} not in output:\n{}", key, stdout))
}

#[test]
fn gen_data_is_deterministic_and_records_views() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    for out in ["a", "b"] {
        ok(dir, &["gen-data", "--n", "3", "--views", "32", "--seed", "7", "--image-n", "16", "--out", out]);
    }
    let ma = fs::read(dir.join("a/manifest.txt")).unwrap();
    assert_eq!(ma, fs::read(dir.join("b/manifest.txt")).unwrap());
    assert_eq!(fs::read(dir.join("a/y_0002.sinf")).unwrap(), fs::read(dir.join("b/y_0002.sinf")).unwrap());

    gen(dir, "c", "1", "64");
    let manifest = fs::read_to_string(dir.join("c/manifest.txt")).unwrap();
    assert_eq!(value(&manifest, "geometry.n_views"), "64");
    assert_eq!(value(&manifest, "geometry.angles").split(',').count(), 64);
}

#[test]
fn gen_data_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ptd(tmp.path(), &["gen-data", "--n", "0", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
    gen(tmp.path(), "d", "1", "8");
    assert_eq!(ptd(tmp.path(), &["gen-data", "--n", "1", "--out", "d"]).status.code(), Some(1));
    ok(tmp.path(), &["gen-data", "--n", "1", "--views", "8", "--image-n", "16", "--out", "d", "--force"]);
    assert_eq!(ptd(tmp.path(), &["gen-data", "--set", "nonsense=1", "--out", "z"]).status.code(), Some(1));
    assert_eq!(ptd(tmp.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(ptd(tmp.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn echoed_config_reproduces_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let stdout = ok(dir, &["gen-data", "--n", "2", "--views", "8", "--image-n", "16", "--seed", "3", "--out", "a"]);
    let echoed: String = stdout
        .lines()
        .skip_while(|l| *l != "# effective config")
        .take_while(|l| *l != "# end config")
        .map(|l| format!("{}\n", l))
        .collect();
    fs::write(dir.join("run.cfg"), echoed).unwrap();
    ok(dir, &["gen-data", "--config", "run.cfg", "--out", "b"]);
    for f in ["manifest.txt", "x0_0001.imgf", "y_0001.sinf", "fbp_0001.imgf"] {
        assert_eq!(fs::read(dir.join("a").join(f)).unwrap(), fs::read(dir.join("b").join(f)).unwrap(), "{}", f);
    }
}

#[test]
fn train_defaults_log_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen(dir, "d", "3", "8");
    let stdout = train_tiny(dir, &["--iters", "3", "--save-every", "2"]);
    assert_eq!(value(&stdout, "lr"), "0.0005");
    assert_eq!(value(&stdout, "n_train_steps"), "10");
    let log = fs::read_to_string(dir.join("m.ptdc.loss.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "iter,l_content,l_guidance,l_diff,l_total");
    assert_eq!(lines.len(), 4);

    let stdout = train_tiny(dir, &["--iters", "5", "--resume", "m.ptdc"]);
    assert!(stdout.contains("from iteration 3 to 5"), "{}", stdout);
    let log = fs::read_to_string(dir.join("m.ptdc.loss.csv")).unwrap();
    let iters: Vec<&str> = log.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(iters, ["1", "2", "3", "4", "5"]);

    let missing = ptd(dir, &["train", "--data", "nowhere", "--iters", "1"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn reconstruct_steps_determinism_and_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen(dir, "d", "2", "8");
    train_tiny(dir, &["--iters", "2"]);
    for steps in ["1", "8"] {
        ok(dir, &["reconstruct", "--checkpoint", "m.ptdc", "--data", "d", "--out", &format!("r{}", steps), "--steps", steps]);
    }
    for out in ["a", "b"] {
        ok(dir, &["reconstruct", "--checkpoint", "m.ptdc", "--data", "d", "--out", out, "--steps", "5", "--deterministic", "--seed", "3", "--pgm"]);
    }
    for f in ["out_0001.imgf", "init_0000.imgf", "out_0000.pgm"] {
        assert_eq!(fs::read(dir.join("a").join(f)).unwrap(), fs::read(dir.join("b").join(f)).unwrap(), "{}", f);
    }
    ok(dir, &["reconstruct", "--checkpoint", "m.ptdc", "--sino", "d/y_0000.sinf", "--out", "single"]);
    assert!(dir.join("single/out_0000.imgf").exists());

    let missing = ptd(dir, &["reconstruct", "--checkpoint", "nope.ptdc", "--data", "d", "--out", "x"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.ptdc"));

    gen(dir, "d16", "1", "16");
    let mismatch = ptd(dir, &["reconstruct", "--checkpoint", "m.ptdc", "--data", "d16", "--out", "x"]);
    assert_eq!(mismatch.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("views"));
}

#[test]
fn eval_identity_means_and_count_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen(dir, "d", "3", "8");
    let stdout = ok(dir, &["eval", "--truth", "d", "--recon", "d", "--methods", "x0,fbp", "--csv", "m.csv"]);
    assert_eq!(value(&stdout, "x0.psnr"), "inf");
    assert_eq!(value(&stdout, "x0.ssim"), "1.000000");
    let per: Vec<f64> = (0..3).map(|i| value(&stdout, &format!("fbp.{:04}.psnr", i)).parse().unwrap()).collect();
    let mean: f64 = value(&stdout, "fbp.psnr").parse().unwrap();
    assert!((mean - per.iter().sum::<f64>() / 3.0).abs() < 1e-5);
    assert!(fs::read_to_string(dir.join("m.csv")).unwrap().starts_with("method,index,psnr,ssim\n"));

    fs::create_dir(dir.join("short")).unwrap();
    fs::copy(dir.join("d/fbp_0000.imgf"), dir.join("short/fbp_0000.imgf")).unwrap();
    let out = ptd(dir, &["eval", "--truth", "d", "--recon", "short", "--methods", "fbp"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn fbp_improves_with_more_views() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut psnr = Vec::new();
    for views in ["32", "64"] {
        let out = format!("v{}", views);
        ok(dir, &["gen-data", "--n", "4", "--views", views, "--image-n", "32", "--split", "test", "--out", &out]);
        let stdout = ok(dir, &["eval", "--truth", &out, "--recon", &out, "--methods", "fbp"]);
        psnr.push(value(&stdout, "fbp.psnr").parse::<f64>().unwrap());
    }
    assert!(psnr[0] < psnr[1], "{:?}", psnr);
}

#[test]
fn verify_single_suite() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(tmp.path(), &["verify", "--suite", "adjoint"]);
    let checks: Vec<&str> = stdout.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).collect();
    assert!(!checks.is_empty());
    assert!(checks.iter().all(|l| l.starts_with("PASS adjoint ") && l.contains("measured") && l.contains("tolerance")));
    assert!(stdout.contains("verify: PASS"));
    assert_eq!(ptd(tmp.path(), &["verify", "--suite", "nope"]).status.code(), Some(1));
    ok(tmp.path(), &["verify", "--suite", "schedule"]);
}
