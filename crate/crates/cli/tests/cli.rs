use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn mskl(args: &[&str]) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mskl"));
    c.args(args).env("MSKL_WORKERS", "1");
    c
}

fn output(c: &mut Command) -> Output {
    c.output().unwrap()
}

fn code(c: &mut Command) -> i32 {
    output(c).status.code().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) -> String {
    let out = dir.join("data");
    let mut c = mskl(&[
        "synth",
        "--tasks",
        "3",
        "--trials",
        "4",
        "--min-len",
        "10",
        "--max-len",
        "20",
        "--out",
    ]);
    c.arg(&out).args(extra);
    assert_eq!(code(&mut c), 0);
    out.join("manifest.json").to_string_lossy().into_owned()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&mut mskl(&[])), 1);
    assert_eq!(code(&mut mskl(&["run"])), 1);
    assert_eq!(code(&mut mskl(&["bogus"])), 1);
    assert_eq!(code(&mut mskl(&["--help"])), 0);
    assert_eq!(code(&mut mskl(&["run", "--help"])), 0);
}

#[test]
fn validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o").to_string_lossy().into_owned();
    assert_eq!(
        code(&mut mskl(&[
            "run",
            "--manifest",
            "/nonexistent/m.json",
            "--out",
            &out
        ])),
        1
    );
    let manifest = synth(dir.path(), &[]);
    assert_eq!(
        code(&mut mskl(&[
            "run",
            "--manifest",
            &manifest,
            "--out",
            &out,
            "--reps",
            "0"
        ])),
        1
    );
    assert_eq!(
        code(&mut mskl(&[
            "run",
            "--manifest",
            &manifest,
            "--out",
            &out,
            "--ssf",
            "3"
        ])),
        1
    );
    let mut bad_workers = mskl(&["run", "--manifest", &manifest, "--out", &out]);
    bad_workers.env("MSKL_WORKERS", "many");
    assert_eq!(code(&mut bad_workers), 1);
}

#[test]
fn synth_run_adapt_trust_round() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), &[]);
    let out = dir.path().join("run");
    let mut c = mskl(&[
        "run",
        "--manifest",
        &manifest,
        "--reps",
        "2",
        "--max-epochs",
        "1",
        "--k",
        "1,2",
        "--save-checkpoints",
        "--out",
    ]);
    c.arg(&out);
    let o = output(&mut c);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["report.json", "tables.csv", "runs.json", "run.log"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let report: Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["schema"], "report_v1");
    assert_eq!(report["rounds"].as_array().unwrap().len(), 3);
    let table = fs::read_to_string(out.join("tables.csv")).unwrap();
    assert!(table.starts_with("task,role,ssf,k=1,k=2,best\n"));

    let ckpt = fs::read_dir(out.join("checkpoints"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let preds = dir.path().join("preds.json");
    let mut c = mskl(&[
        "adapt",
        "--manifest",
        &manifest,
        "--task",
        "task_0",
        "--k",
        "2",
        "--checkpoint",
    ]);
    c.arg(&ckpt).arg("--out").arg(&preds);
    let o = output(&mut c);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc: Value = serde_json::from_str(&fs::read_to_string(&preds).unwrap()).unwrap();
    assert_eq!(doc["k"], 2);
    assert_eq!(doc["classes"].as_array().unwrap().len(), 3);

    let trust_out = dir.path().join("trust");
    let mut c = mskl(&["trust", "--predictions"]);
    c.arg(&preds).arg("--out").arg(&trust_out);
    let o = output(&mut c);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let t: Value =
        serde_json::from_str(&fs::read_to_string(trust_out.join("trust.json")).unwrap()).unwrap();
    assert!(t["conditions"]
        .as_object()
        .unwrap()
        .keys()
        .any(|k| k.starts_with("true_")));
}

#[test]
fn trust_rejects_bad_records() {
    let dir = tempfile::tempdir().unwrap();
    let preds = dir.path().join("p.json");
    let out = dir.path().join("t").to_string_lossy().into_owned();
    fs::write(
        &preds,
        r#"[{"softmax": [0.7, 0.7], "predicted": 0, "actual": 0}]"#,
    )
    .unwrap();
    assert_eq!(
        code(mskl(&["trust", "--out", &out, "--predictions"]).arg(&preds)),
        1
    );
    fs::write(
        &preds,
        r#"[{"softmax": [0.2, 0.8], "predicted": 0, "actual": 0}]"#,
    )
    .unwrap();
    assert_eq!(
        code(mskl(&["trust", "--out", &out, "--predictions"]).arg(&preds)),
        1
    );
    fs::write(&preds, "not json").unwrap();
    assert_eq!(
        code(mskl(&["trust", "--out", &out, "--predictions"]).arg(&preds)),
        1
    );

    fs::write(
        &preds,
        r#"{"classes": ["novice", "expert"], "records": [
            {"softmax": [0.9, 0.1], "predicted": 0, "actual": 0},
            {"softmax": [0.3, 0.7], "predicted": 1, "actual": 0}]}"#,
    )
    .unwrap();
    let o = output(mskl(&["trust", "--out", &out, "--predictions"]).arg(&preds));
    assert!(o.status.success());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("true_novice: 0.9000"), "{stdout}");
    assert!(stdout.contains("false_novice: 0.7000"), "{stdout}");
    assert!(Path::new(&out)
        .join("spectra/trust_true_novice.csv")
        .is_file());
}

#[test]
fn gradcheck_passes() {
    let o = output(&mut mskl(&["gradcheck", "--configs", "3", "--seed", "1"]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("model"));
}
