use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lifthead::training::{average_checkpoints, epoch_checkpoint_name, load_checkpoint, save_checkpoint};
use lifthead::ParamStore;

fn lifthead(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lifthead"))
        .args(args)
        .env_remove("LIFT_LOG_LEVEL")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

/// Small, fast training run on the tiny profile.
fn train_args(out: &Path, seed: &str) -> Vec<String> {
    [
        "train",
        "--profile",
        "tiny",
        "--epochs",
        "3",
        "--samples",
        "8",
        "--batch-size",
        "4",
        "--avg-last-epochs",
        "2",
        "--seed",
        seed,
        "--out",
        out.to_str().unwrap(),
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn run_train(out: &Path, seed: &str) -> Output {
    let args = train_args(out, seed);
    let o = lifthead(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(o.status.success(), "{}", stderr(&o));
    o
}

fn metric(out: &str, key: &str) -> f64 {
    out.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}\t")))
        .unwrap_or_else(|| panic!("no {key} in {out}"))
        .parse()
        .unwrap()
}

#[test]
fn zero_epochs_echoes_config_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = lifthead(&["train", "--profile", "tiny", "--epochs", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(!text.is_empty());
    assert!(text.lines().all(|l| l.starts_with("config.")), "{text}");
    assert!(text.contains("config.train.epochs\t0\n"));
    assert!(!out.exists());
}

#[test]
fn same_seed_gives_identical_metrics_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_train(&a, "7");
    run_train(&b, "7");
    let metrics_a = fs::read(a.join("metrics.tsv")).unwrap();
    assert_eq!(metrics_a, fs::read(b.join("metrics.tsv")).unwrap());
    assert_eq!(String::from_utf8_lossy(&metrics_a).lines().count(), 1 + 3 * 2);
    for name in [epoch_checkpoint_name(3).as_str(), "averaged.ckpt"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }

    let c = dir.path().join("c");
    run_train(&c, "8");
    assert_ne!(metrics_a, fs::read(c.join("metrics.tsv")).unwrap());
}

#[test]
fn eval_of_averaged_model_matches_external_average() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    run_train(&out, "3");

    let last_two: Vec<ParamStore<f32>> = [2, 3]
        .iter()
        .map(|&e| load_checkpoint::<f32>(&out.join(epoch_checkpoint_name(e))).unwrap().0)
        .collect();
    let external = dir.path().join("external.ckpt");
    save_checkpoint(&external, &average_checkpoints(&last_two).unwrap(), None).unwrap();

    let eval = |ckpt: &Path| {
        let o = lifthead(&["eval", "--profile", "tiny", "--checkpoint", ckpt.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        stdout(&o)
    };
    let ours = eval(&out.join("averaged.ckpt"));
    let theirs = eval(&external);
    for key in ["eval.keypoint_mse", "eval.twist_deg", "eval.beta_mse"] {
        let (x, y) = (metric(&ours, key), metric(&theirs, key));
        assert!(x.is_finite());
        assert!((x - y).abs() < 1e-7, "{key}: {x} vs {y}");
    }
}

#[test]
fn corrupted_checkpoint_exits_one_with_checksum_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    run_train(&out, "1");
    let path = out.join("averaged.ckpt");
    let mut bytes = fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(&path, bytes).unwrap();
    let o = lifthead(&["eval", "--profile", "tiny", "--checkpoint", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("checksum"), "{}", stderr(&o));
}

#[test]
fn missing_checkpoint_exits_one() {
    let o = lifthead(&["eval", "--profile", "tiny", "--checkpoint", "/nonexistent/x.ckpt"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn checkpoint_for_another_head_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    run_train(&out, "1");
    let ckpt = out.join("averaged.ckpt");
    let o = lifthead(&["eval", "--profile", "tiny", "--layers", "3", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn diverging_run_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = lifthead(&[
        "train",
        "--profile",
        "tiny",
        "--max-lr",
        "1e30",
        "--warmup-steps",
        "1",
        "--epochs",
        "3",
        "--samples",
        "8",
        "--batch-size",
        "4",
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("non-finite loss"), "{}", stderr(&o));
}

#[test]
fn schedule_reaches_peak_at_warmup_end() {
    let o = lifthead(&["schedule", "--steps", "4000"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().last().unwrap(), "4000\t0.0005");
    assert_eq!(text.lines().filter(|l| !l.starts_with("config.")).count(), 4001);
}

#[test]
fn params_output_is_stable() {
    let a = lifthead(&["params"]);
    let b = lifthead(&["params"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let text = stdout(&a);
    assert!(metric(&text, "transformer_head_params") > 0.0);
    assert!(text.contains("config.profile\tpaper\n"));
}

#[test]
fn gradcheck_passes_and_reports_each_check() {
    let o = lifthead(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    for name in ["matmul", "softmax_rows", "layer_norm", "lifting_head"] {
        assert!(text.lines().any(|l| l.starts_with(&format!("{name}\t")) && l.ends_with("\tok")), "{name}");
    }
}

#[test]
fn broken_gradient_exits_three_naming_the_primitive() {
    let o = lifthead(&["gradcheck", "--inject-fault", "layer_norm"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("layer_norm"), "{}", stderr(&o));
    assert!(stdout(&o).lines().any(|l| l.starts_with("layer_norm\t") && l.ends_with("\tFAIL")));
}

#[test]
fn config_errors_exit_one_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(&path, "[head]\nheads = 3\nwidth = 32\n").unwrap();
    let o = lifthead(&["params", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("heads"), "{}", stderr(&o));

    fs::write(&path, "[train]\nwarmup = 10\n").unwrap();
    let o = lifthead(&["schedule", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("warmup"), "{}", stderr(&o));

    let o = lifthead(&["train", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn file_values_apply_and_flags_override_them() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(&path, "[train]\nmax_lr = 0.001\nwarmup_steps = 10\n").unwrap();
    let o = lifthead(&["schedule", "--config", path.to_str().unwrap(), "--steps", "10"]);
    assert_eq!(stdout(&o).lines().last().unwrap(), "10\t0.001");
    let o = lifthead(&["schedule", "--config", path.to_str().unwrap(), "--max-lr", "0.002", "--steps", "10"]);
    assert_eq!(stdout(&o).lines().last().unwrap(), "10\t0.002");
}
