//! End-to-end runs of the `sugarct` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn sugarct(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sugarct"))
        .args(args)
        .env_remove("SUGARCT_OUT_DIR")
        .output()
        .expect("spawn sugarct")
}

fn ok(args: &[&str]) -> Output {
    let out = sugarct(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn json(p: PathBuf) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))).unwrap()
}

const SMALL: [&str; 4] = ["--set", "geometry.image_n=32", "--set", "phantom.kind=random_ellipses"];

fn simulate(dir: &Path) -> (String, String) {
    let mut a = vec!["simulate", "--seed", "4", "--out-dir"];
    let d = s(dir);
    a.push(&d);
    a.extend(SMALL);
    ok(&a);
    (s(&dir.join("sinogram.sino")), s(&dir.join("phantom.img")))
}

#[test]
fn reconstruction_pipeline_writes_reports_and_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let (sino, phantom) = simulate(&tmp.path().join("sim"));
    let sim = json(tmp.path().join("sim/metrics.json"));
    assert_eq!(sim["image_n"], 32);
    assert_eq!(sim["n_views"], 36);

    let mut psnr = Vec::new();
    for (cmd, extra) in [("fbp", None), ("sb", Some("sb.n_iters=60")), ("cppd", Some("cppd.n_iters=60"))] {
        let dir = s(&tmp.path().join(cmd));
        let mut a = vec![cmd, "--sinogram", &sino, "--truth", &phantom, "--out-dir", &dir];
        if let Some(e) = extra {
            a.extend(["--set", e]);
        }
        ok(&a);
        let d = tmp.path().join(cmd);
        for f in ["recon.img", "recon.img.json", "recon.png", "metrics.json", "manifest.json", "config.toml"] {
            assert!(d.join(f).exists(), "{cmd}: missing {f}");
        }
        let manifest = json(d.join("manifest.json"));
        assert_eq!(manifest["command"], cmd);
        assert!(manifest["outputs"].as_array().unwrap().iter().any(|o| o == "recon.img"));
        psnr.push(json(d.join("metrics.json"))["psnr_db"].as_f64().unwrap());
    }
    assert!(psnr.iter().all(|p| p.is_finite() && *p > 5.0), "{psnr:?}");

    // The metrics subcommand reproduces the report written by fbp.
    let dir = s(&tmp.path().join("m"));
    let recon = s(&tmp.path().join("fbp/recon.img"));
    ok(&["metrics", "--image", &recon, "--reference", &phantom, "--out-dir", &dir]);
    assert_eq!(json(tmp.path().join("m/metrics.json")), json(tmp.path().join("fbp/metrics.json")));
}

#[test]
fn trained_parameters_drive_reconstruction_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let (sino, phantom) = simulate(&tmp.path().join("sim"));
    let train = |mode: &str, dir: &Path| {
        let d = s(dir);
        let mut a = vec!["sugar-train", "--seed", "2", "--out-dir", &d];
        a.extend(SMALL);
        let sets = [
            format!("sugar.mode={mode}"),
            "sugar.le_n=16".into(),
            "sugar.n_train=2".into(),
            "sugar.train.epochs=1".into(),
            "sugar.le.n_blocks=2".into(),
            "sugar.hr.n_blocks=2".into(),
            "sugar.le.transform.kind=learned".into(),
            "sugar.le.transform.channels=[2,4]".into(),
            "sugar.hr.transform.kind=learned".into(),
            "sugar.hr.transform.channels=[2,4]".into(),
        ];
        for x in &sets {
            a.extend(["--set", x]);
        }
        ok(&a);
    };
    let staged = tmp.path().join("staged");
    train("two_stage", &staged);
    let hist = json(staged.join("metrics.json"));
    assert_eq!(hist["loss_history"]["le"].as_array().unwrap().len(), 1);

    let out = s(&tmp.path().join("two"));
    ok(&[
        "two-stage", "--sinogram", &sino, "--truth", &phantom, "--le", &s(&staged.join("le.sugr")),
        "--hr", &s(&staged.join("hr.sugr")), "--out-dir", &out, "--set", "sugar.le_n=16",
    ]);
    let two = json(tmp.path().join("two/metrics.json"));
    assert!(two["hr"]["psnr_db"].as_f64().unwrap().is_finite());
    assert!(two["upsampled_le"]["mse"].as_f64().unwrap() > 0.0);

    let single = tmp.path().join("single");
    train("single", &single);
    let out = s(&tmp.path().join("one"));
    ok(&["sugar-recon", "--sinogram", &sino, "--params", &s(&single.join("sugar.sugr")), "--out-dir", &out]);
    assert!(tmp.path().join("one/recon.img").exists());
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let d = s(tmp.path());
    // Missing seed and unknown configuration keys are configuration errors.
    assert_eq!(sugarct(&["simulate", "--out-dir", &d]).status.code(), Some(2));
    assert_eq!(sugarct(&["simulate", "--seed", "1", "--out-dir", &d, "--set", "sb.nope=1"]).status.code(), Some(2));
    assert_eq!(sugarct(&["no-such-command"]).status.code(), Some(2));
    // Unreadable inputs.
    let missing = s(&tmp.path().join("missing.sino"));
    assert_eq!(sugarct(&["fbp", "--sinogram", &missing, "--out-dir", &d]).status.code(), Some(1));
    // A diverging solve writes its partial trace.
    let (sino, _) = simulate(&tmp.path().join("sim"));
    let fail = tmp.path().join("fail");
    let out = sugarct(&["sb", "--sinogram", &sino, "--out-dir", &s(&fail), "--set", "sb.eta=1e300"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(fail.join("failure_trace.csv").exists());
}

#[test]
fn output_directory_falls_back_to_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_sugarct"))
        .args(["simulate", "--seed", "1", "--set", "geometry.image_n=16"])
        .env("SUGARCT_OUT_DIR", tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("sinogram.sino").exists());
}
