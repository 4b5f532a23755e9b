use std::path::Path;
use std::process::Command;

const TINY: &str = r#"
seeds = [1]
eval_every = 1

[ssl]
method = "simclr"
encoder = { arch = "conv_net", widths = [4, 8] }
projector = { hidden = 16, output = 8 }

[affine]
regressor_hidden = 8

[optimizer]
epochs = 2
batch_size = 8

[data]
dataset = "synthetic"
resolution = 8
train_limit = 16

[probe]
trials = 2
train_limit = 40
eval_limit = 20
"#;

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_affine-ssl")).args(args).env("RUST_LOG", "warn").env_remove("AFFINE_SSL_DATA_ROOT").output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_eval_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("runs");

    let r = cli(&["run", "--config", s(&cfg), "--out", s(&out)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stdout).contains("ran 1, skipped 0, failed 0"));
    let again = cli(&["run", "--config", s(&cfg), "--out", s(&out)]);
    assert!(String::from_utf8_lossy(&again.stdout).contains("ran 0, skipped 1, failed 0"));

    let cell = std::fs::read_dir(out.join("cells")).unwrap().next().unwrap().unwrap().path();
    let ckpt = cell.join("checkpoints").join("epoch_0002.ckpt");
    let e = cli(&["eval", s(&ckpt), "--config", s(&cfg), "--out", s(&out.join("eval"))]);
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    assert!(String::from_utf8_lossy(&e.stdout).contains("\"kind\":\"probe\""));

    let rep = cli(&["report", "--out", s(&out)]);
    assert!(rep.status.success(), "{}", String::from_utf8_lossy(&rep.stderr));
    assert!(String::from_utf8_lossy(&rep.stdout).contains("| simclr | +affine |"));
    assert!(out.join("report.json").exists());
    assert!(out.join("curves").join("curve_simclr_synthetic.svg").exists());
}

#[test]
fn grid_runs_each_cell_once() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("grid.toml");
    std::fs::write(&spec, format!("{TINY}\n[grid]\naffine = [false, true]\n")).unwrap();
    let out = dir.path().join("runs");
    let r = cli(&["grid", s(&spec), "--out", s(&out)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stdout).contains("ran 2, skipped 0, failed 0"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, TINY.replace("epochs = 2", "epochs = 2\nlearning_rate = 1.0")).unwrap();
    assert_eq!(cli(&["run", "--config", s(&bad), "--out", s(dir.path())]).status.code(), Some(2));
    assert_eq!(cli(&["run", "--profile", "nonexistent", "--out", s(dir.path())]).status.code(), Some(2));
    // The smoke profile needs CIFAR10 files.
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let r = cli(&["run", "--profile", "smoke", "--data-root", s(&empty), "--out", s(&dir.path().join("o"))]);
    assert_eq!(r.status.code(), Some(3), "{}", String::from_utf8_lossy(&r.stderr));
    // A checkpoint that does not exist is a run failure.
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    assert_eq!(cli(&["eval", "missing.ckpt", "--config", s(&cfg), "--out", s(dir.path())]).status.code(), Some(4));
    assert_eq!(cli(&["report", "--out", s(&dir.path().join("nothing"))]).status.code(), Some(4));
}
