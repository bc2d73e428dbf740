use std::path::Path;
use std::process::{Command, Output};

fn lowrank(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lowrank"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

const TINY: &str = r#"
seed = 3
method = "ieht"

[task]
dim = 8
classes = 3
samples = 96
test_samples = 48

[model]
hidden = [8]

[training]
max_steps = 40
steps_per_epoch = 10
pretrain_steps = 40
finetune_steps = 20

[oialr]
oialr_delay = 1
oialr_frequency = 1
"#;

fn write(dir: &Path, name: &str, text: &str) -> String {
    std::fs::write(dir.join(name), text).unwrap();
    name.to_string()
}

#[test]
fn train_writes_trace_checkpoint_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.toml", TINY);
    let out = lowrank(
        &["train", "--config", &cfg, "--out", "run", "--seed", "5"],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in ["trace.csv", "checkpoint.lrck", "report.csv"] {
        assert!(dir.path().join("run").join(f).exists(), "{f}");
    }
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("method       ieht"), "{stdout}");
    let checkpoint = std::fs::read(dir.path().join("run/checkpoint.lrck")).unwrap();
    assert_eq!(&checkpoint[..5], b"LRCK\x01");
}

#[test]
fn compress_runs_one_shot_methods_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "svd.toml",
        &TINY.replace("\"ieht\"", "\"svd\"").replace(
            "[oialr]",
            "[svd]\nrank_fraction = 0.5\nkeep_head = true\n\n[oialr]",
        ),
    );
    let out = lowrank(&["compress", "--config", &cfg, "--out", "c"], dir.path());
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8(out.stdout).unwrap().contains("zero_shot"));

    let ieht = write(dir.path(), "ieht.toml", TINY);
    let out = lowrank(&["compress", "--config", &ieht], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = lowrank(&["train", "--config", "nope.toml"], dir.path());
    assert_eq!(missing.status.code(), Some(2));
    let bad = write(
        dir.path(),
        "bad.toml",
        &TINY.replace("[model]", "[model]\nwidth = 3"),
    );
    let unknown = lowrank(&["train", "--config", &bad], dir.path());
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("width"));
    let no_seed = write(dir.path(), "noseed.toml", &TINY.replace("seed = 3", ""));
    assert_eq!(
        lowrank(&["train", "--config", &no_seed], dir.path())
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn divergence_exits_with_three_and_names_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY
        .replace("\"ieht\"", "\"sgd\"")
        .replace("[model]", "[model]\nactivation = \"identity\"")
        .replace("[training]", "[training]\nlearning_rate = 1e300");
    let cfg = write(dir.path(), "boom.toml", &text);
    let out = lowrank(&["train", "--config", &cfg, "--out", "x"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("at step"));
}

#[test]
fn sweep_report_is_identical_across_job_counts() {
    let dir = tempfile::tempdir().unwrap();
    let grid = format!(
        "{TINY}\n[grid]\n\"oialr.oialr_threshold\" = [0.5, 0.9]\nmethod = [\"oialr\", \"ieht\"]\n"
    );
    let cfg = write(dir.path(), "grid.toml", &grid);
    let mut reports = Vec::new();
    for (jobs, out) in [("1", "a"), ("4", "b")] {
        let res = lowrank(
            &[
                "sweep",
                "--config",
                &cfg,
                "--out",
                out,
                "--jobs",
                jobs,
                "--no-wall-time",
            ],
            dir.path(),
        );
        assert!(
            res.status.success(),
            "{}",
            String::from_utf8_lossy(&res.stderr)
        );
        reports.push(std::fs::read(dir.path().join(out).join("report.csv")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    let text = String::from_utf8(reports.swap_remove(0)).unwrap();
    assert!(text.starts_with(
        "method,config_id,param_fraction,zero_shot_acc,finetuned_acc,epoch,wall_ms,pareto\n"
    ));
    assert!(text.lines().skip(1).any(|l| l.ends_with(",true")));
}

#[test]
fn verify_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = lowrank(&["verify", "--seed", "1"], dir.path());
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 7);
}

#[test]
fn demo_recovers_teacher_rank() {
    let dir = tempfile::tempdir().unwrap();
    let out = lowrank(&["demo-deep-linear", "--seed", "0"], dir.path());
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8(out.stdout)
        .unwrap()
        .contains("learned ranks [3, 3, 3]"));
}
