use std::path::Path;
use std::process::{Command, Output};

fn cofm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cofm")).args(args).output().expect("run cofm")
}

fn ok(args: &[&str]) -> String {
    let out = cofm(args);
    assert!(
        out.status.success(),
        "`cofm {}` failed with {:?}:\n{}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_flags_exit_with_usage_error() {
    let out = cofm(&["synth", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--bogus") && err.contains("Usage"), "{err}");
    assert_eq!(cofm(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_inputs_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.cmfc");
    let out = cofm(&["train-flow", "--corpus", s(&missing), "--out", s(&dir.path().join("f.ckpt"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = cofm(&["--threads", "0", "synth", "--episodes", "1", "--out", s(&dir.path().join("c.cmfc"))]);
    assert_eq!(out.status.code(), Some(2));
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[generate]\nsteps = 0\n").unwrap();
    let out = cofm(&["--config", s(&cfg), "synth", "--episodes", "1", "--out", s(&dir.path().join("c.cmfc"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["selftest", "--work", s(dir.path())]);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS ")).count(), 7, "{stdout}");
    assert!(!stdout.lines().any(|l| l.starts_with("FAIL ")), "{stdout}");
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let train = p("train.cmfc");
    let test = p("test.cmfc");
    let scenes = p("scenes");
    ok(&["synth", "--episodes", "16", "--seed", "1", "--out", s(&train)]);
    ok(&["synth", "--episodes", "3", "--seed", "2", "--out", s(&test), "--scenes", s(&scenes)]);
    assert!(p("train.cmfc.run.toml").exists());
    assert!(scenes.join("scene_0000.object.json").exists());

    let flow = p("flow.ckpt");
    let strategy = p("strategy.ckpt");
    ok(&["train-flow", "--corpus", s(&train), "--val", s(&test), "--epochs", "2", "--out", s(&flow)]);
    ok(&["train-strategy", "--corpus", s(&train), "--epochs", "2", "--out", s(&strategy)]);

    let fakes = p("fakes");
    ok(&[
        "generate", "--ckpt", s(&flow), "--strategy", s(&strategy), "--corpus", s(&train), "--variants", "+Contact",
        "--out", s(&fakes),
    ]);
    let prior = p("prior.ckpt");
    ok(&[
        "train-prior", "--body-real", s(&train), "--int-real", s(&train), "--fake", s(&fakes), "--fake-ref",
        s(&train), "--epochs", "2", "--out", s(&prior),
    ]);

    let gen = p("gen");
    ok(&[
        "generate", "--ckpt", s(&flow), "--strategy", s(&strategy), "--prior", s(&prior), "--corpus", s(&test),
        "--variants", "all", "--budget", "16", "--out", s(&gen),
    ]);
    let report = p("report.csv");
    let table = ok(&["eval", "--gen", s(&gen), "--ref", s(&test), "--out", s(&report)]);
    assert!(table.contains("+Simulation"), "{table}");
    let csv = std::fs::read_to_string(&report).unwrap();
    assert_eq!(csv.lines().count(), 7, "{csv}");

    let object = scenes.join("scene_0000.object.json");
    let traj = scenes.join("scene_0000.traj.bin");
    let motion = p("scene.cmfm");
    ok(&[
        "generate", "--ckpt", s(&flow), "--strategy", s(&strategy), "--object", s(&object), "--traj", s(&traj),
        "--out", s(&motion),
    ]);
    let refined = p("refined.cmfm");
    let trace = p("trace");
    ok(&[
        "refine", "--motion", s(&motion), "--object", s(&object), "--traj", s(&traj), "--budget", "32", "--out",
        s(&refined), "--trace", s(&trace),
    ]);
    assert!(refined.exists() && trace.join("search.csv").exists() && trace.join("loads.csv").exists());

    let csv = ok(&["export", "--input", s(&refined), "--format", "csv"]);
    assert!(csv.lines().count() > 1);
    let json = ok(&["export", "--input", s(&test), "--format", "json"]);
    let doc: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(doc.as_array().map(Vec::len), Some(3));
}
