use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"seed = 1
[env]
n_traj = 20
n_train = 3
n_target = 1
max_steps = 120
[pretrain]
steps = 20
hidden = 16
[gqvae]
context_codes = 4
skill_codes = 4
[meta]
hidden = 16
tuple_features = 16
n_c = 8
n_mini = 20
task_batch = 2
rl_batch = 8
bc_batch = 2
episodes_per_task = 2
updates_per_episode = 2
[adapt]
n_cond = 2
budget = 3
updates_per_episode = 1
rl_batch = 8
bc_batch = 2
final_window = 2
"#;

fn dcmrl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcmrl"))
        .args(args)
        .arg("--out")
        .arg(dir.join("out"))
        .arg("--config")
        .arg(dir.join("run.toml"))
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = dcmrl(dir, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), config).unwrap();
    dir
}

fn train(dir: &Path) {
    for stage in ["gen-data", "pretrain", "meta-train"] {
        ok(dir, &[stage]);
    }
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let d = setup(TINY);
    let dir = d.path();
    train(dir);
    assert!(ok(dir, &["meta-test"]).contains("mean final success"));
    assert!(ok(dir, &["eval"]).contains("scratch"));
    ok(dir, &["eval", "--budget", "0"]);
    ok(dir, &["dump-codebook"]);
    let out = dir.join("out");
    for f in [
        "data/dataset.dcmd",
        "checkpoints/skills.dcck",
        "checkpoints/meta.dcck",
        "metrics/pretrain.csv",
        "metrics/meta_train.csv",
        "metrics/codebook_context.csv",
        "metrics/codebook_skill.csv",
        "reports/meta_test.json",
        "reports/eval.json",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(out.join("metrics/meta_train.csv")).unwrap();
    assert!(metrics.starts_with("# config_hash="));
    let rows = metrics.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(rows, 1 + 2 * 3);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("reports/eval.json")).unwrap()).unwrap();
    assert_eq!(report["budget"], 0);
    assert!(report["mean_scratch_final_success_rate"].is_null());
    let csv = std::fs::read_dir(out.join("reports")).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "csv").count();
    assert!(csv >= 3);
}

#[test]
fn reruns_are_byte_identical() {
    let a = setup(TINY);
    let b = setup(TINY);
    train(a.path());
    train(b.path());
    for f in ["data/dataset.dcmd", "checkpoints/skills.dcck", "checkpoints/meta.dcck", "metrics/pretrain.csv", "metrics/meta_train.csv"] {
        let x = std::fs::read(a.path().join("out").join(f)).unwrap();
        let y = std::fs::read(b.path().join("out").join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
}

#[test]
fn missing_inputs_and_bad_config_exit_3() {
    let d = setup(TINY);
    let o = dcmrl(d.path(), &["pretrain"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: "));

    let bad = setup("seed = 1\n[meta]\nn_c = -1\n");
    let o = dcmrl(bad.path(), &["gen-data"]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("meta.n_c") && err.contains('3'), "{err}");

    let o = dcmrl(d.path(), &["no-such-stage"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn stages_refuse_mismatched_inputs() {
    let d = setup(TINY);
    train(d.path());
    std::fs::write(d.path().join("run.toml"), TINY.replace("steps = 20", "steps = 21")).unwrap();
    let o = dcmrl(d.path(), &["meta-test"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));

    std::fs::write(d.path().join("run.toml"), TINY.replace("max_steps = 120", "max_steps = 110")).unwrap();
    let o = dcmrl(d.path(), &["pretrain"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));

    std::fs::write(d.path().join("run.toml"), TINY.replace("budget = 3", "budget = 2")).unwrap();
    ok(d.path(), &["meta-test"]);
}

#[test]
fn seed_flag_overrides_config() {
    let a = setup(TINY);
    let b = setup(TINY);
    ok(a.path(), &["gen-data"]);
    ok(b.path(), &["gen-data", "--seed", "2"]);
    let x = std::fs::read(a.path().join("out/data/dataset.dcmd")).unwrap();
    let y = std::fs::read(b.path().join("out/data/dataset.dcmd")).unwrap();
    assert_ne!(x, y);
}
