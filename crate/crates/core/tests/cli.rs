use std::path::Path;
use std::process::Command;

fn bicovg(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_bicovg")).args(args).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "bicovg {args:?} failed\nstdout: {stdout}\nstderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_eval_fuse_diagnose_report() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    bicovg(&["synth", "--out", s(&data), "--train", "200", "--test", "100", "--seed", "3"]);
    for f in ["train-images.idx", "train-labels.idx", "test-images.idx", "test-labels.idx"] {
        assert!(data.join(f).exists(), "{f} missing");
    }

    bicovg(&[
        "train", "--preset", "desk8", "--set", "train.epochs=1", "--set", "train.hgb_m=2",
        "--data", s(&data), "--out", s(&run), "--measure-mem",
    ]);
    for f in ["config.toml", "metrics.csv", "fusion.csv", "model.ckpt", "report.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    let text = report.to_string();
    assert!(text.contains("fused_top1"), "{text}");
    assert!(text.contains("peak_bytes"), "{text}");

    let ckpt = run.join("model.ckpt");
    let eval = bicovg(&["eval", "--ckpt", s(&ckpt), "--data", s(&data)]);
    assert!(eval.contains("fused"), "{eval}");
    let again = bicovg(&["eval", "--ckpt", s(&ckpt), "--data", s(&data)]);
    assert_eq!(eval, again);

    bicovg(&["fuse", "--ckpt", s(&ckpt), "--data", s(&data)]);

    let curve = tmp.path().join("curve.csv");
    bicovg(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--curve", s(&curve)]);
    let diag = tmp.path().join("diag.json");
    bicovg(&["diagnose", "--curves", s(&curve), s(&run.join("fusion.csv")), "--out", s(&diag)]);
    let d: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&diag).unwrap()).unwrap();
    assert_eq!(d["curves"].as_array().unwrap().len(), 2);
    assert_eq!(d["pairs"].as_array().unwrap().len(), 1);

    bicovg(&["export-report", "--run-dir", s(&run)]);
    assert!(run.join("report.md").exists());
    assert!(run.join("diagnostics.json").exists());
}

#[test]
fn memplan_sweep_lists_every_block_size() {
    let out = bicovg(&["memplan", "--preset", "desk16", "--batch", "50", "--sweep-m", "1,2,4,8,16"]);
    let rows: Vec<&str> = out.lines().filter(|l| l.chars().next().is_some_and(|c| c.is_ascii_digit())).collect();
    assert_eq!(rows.len(), 10, "{out}");
    for m in ["1", "2", "4", "8", "16"] {
        for exec in ["standard", "interleaved"] {
            assert!(rows.iter().any(|r| r.starts_with(&format!("{m},{exec},50,"))), "{m} {exec}\n{out}");
        }
    }
}

#[test]
fn bad_override_is_rejected() {
    let out = Command::new(env!("CARGO_BIN_EXE_bicovg"))
        .args(["memplan", "--preset", "desk8", "--batch", "8", "--set", "train.hgb_m=3"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("hgb_m"));
}
