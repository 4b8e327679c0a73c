use std::path::Path;
use std::process::{Command, Output};

fn gmenet(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gmenet"));
    cmd.args(args).env("RUST_LOG", "warn").env_remove("GMENET_DEVICE");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(o: &Output) -> serde_json::Value {
    assert!(o.status.success(), "{}", stderr(o));
    serde_json::from_slice(&o.stdout).unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("run.toml");
    let text = format!(
        r#"seed = 5
output_dir = "{out}"
precision = 64

[network]
initial_channels = 8
stage_widths = [8, 16]
blocks_per_stage = [1, 1]
reduction_ratio = 4
input_size = [16, 16]

[schedule]
epochs = 2
batch_size = 16
lr0 = 0.05

[data]
source_dir = "{src}"

[data.degradation]
target_size = 8

[data.synthetic]
per_class = 6
size = 24
"#,
        out = dir.join("runs").display(),
        src = dir.join("faces").display()
    );
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn missing_source_directory_fails_with_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no_such_faces");
    let o = gmenet(&["prepare-data", "--set", &format!("data.source_dir=\"{}\"", missing.display())], &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("no_such_faces"), "{}", stderr(&o));
}

#[test]
fn configuration_errors_exit_with_two() {
    let o = gmenet(&["prepare-data", "--set", "schedule.epoch=3"], &[]);
    assert_eq!(o.status.code(), Some(2));
    let o = gmenet(&["prepare-data", "--set", "distill.lambda_kd=-1"], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lambda_kd"));
    let o = gmenet(&["prepare-data"], &[("GMENET_DEVICE", "gpu")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("GMENET_DEVICE"));
}

#[test]
fn unreadable_checkpoint_exits_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    assert!(gmenet(&["prepare-data", "--config", &config], &[]).status.success());
    let ckpt = dir.path().join("junk.ckpt");
    std::fs::write(&ckpt, b"definitely not a checkpoint").unwrap();
    let o = gmenet(&["evaluate", "--config", &config, "--checkpoint", &ckpt.to_string_lossy()], &[]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn end_to_end_run_is_device_independent() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let prep = json(&gmenet(&["prepare-data", "--config", &config], &[]));
    assert_eq!(prep["records"], 42);

    let teacher = json(&gmenet(&["train-teacher", "--config", &config], &[]));
    assert_eq!(teacher["epochs"].as_array().unwrap().len(), 2);
    let ckpt = dir.path().join("runs/teacher/best.ckpt");
    assert!(ckpt.is_file());

    let student = json(&gmenet(&["distill", "--config", &config, "--teacher", &ckpt.to_string_lossy()], &[]));
    let first = &student["first_step"];
    assert!(first["l_kd"].as_f64().unwrap() > 0.0);

    // Same run on the sequential path, with the seed passed as a flag.
    let seq_out = dir.path().join("seq");
    let seq_out_arg = seq_out.to_string_lossy().into_owned();
    json(&gmenet(&["prepare-data", "--config", &config, "--out", &seq_out_arg], &[]));
    let seq = json(&gmenet(
        &[
            "distill",
            "--config",
            &config,
            "--seed",
            "5",
            "--out",
            &seq_out_arg,
            "--teacher",
            &ckpt.to_string_lossy(),
        ],
        &[("GMENET_DEVICE", "cpu-seq")],
    ));
    assert_eq!(seq["epochs"], student["epochs"]);
    assert_eq!(seq["last_step"], student["last_step"]);

    let student_ckpt = dir.path().join("runs/student/last.ckpt");
    let a = json(&gmenet(&["evaluate", "--config", &config, "--checkpoint", &student_ckpt.to_string_lossy()], &[]));
    let b = json(&gmenet(
        &["evaluate", "--config", &config, "--checkpoint", &student_ckpt.to_string_lossy(), "--input", "lr"],
        &[],
    ));
    assert_eq!(a["overall_accuracy"], b["overall_accuracy"]);
    assert_eq!(a["confusion_matrix"], b["confusion_matrix"]);
    assert_eq!(a["sample_count"], 7);

    let other = gmenet(
        &["distill", "--config", &config, "--set", "network.reduction_ratio=2", "--teacher", &ckpt.to_string_lossy()],
        &[],
    );
    assert_eq!(other.status.code(), Some(2));
    assert!(stderr(&other).contains("reduction_ratio"), "{}", stderr(&other));
}
