use std::path::Path;
use std::process::{Command, Output};

fn focalcount(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_focalcount"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("config.txt");
    std::fs::write(
        &path,
        format!(
            "n = 16\nepochs = 3\nswitch_epoch_t = 2\nbatch_size = 8\noutput_dir = {}\n{extra}",
            dir.join("run").display()
        ),
    )
    .unwrap();
    path.display().to_string()
}

#[test]
fn gen_corpus_writes_one_row_per_scene() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("corpus.csv");
    let res = focalcount(&["gen-corpus", "--n", "25", "--fraction", "0.8", "--seed", "4", "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", stderr(&res));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 26);
    let singles = text.lines().skip(1).filter(|l| l.split(',').nth(3) == Some("1")).count();
    assert_eq!(singles, 20);
}

#[test]
fn gen_corpus_rejects_bad_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.csv");
    let res = focalcount(&["gen-corpus", "--n", "5", "--fraction", "1.5", "--seed", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn train_writes_log_snapshot_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let res = focalcount(&["train", "--config", &config]);
    assert!(res.status.success(), "{}", stderr(&res));
    let run = dir.path().join("run");
    let log = std::fs::read_to_string(run.join("trainlog.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.starts_with("epoch,loss_kind,train_loss,mean_uc,val_mae,val_rmse,val_leakage\n"));
    assert!(run.join("checkpoint.bin").exists());
    let snapshot = std::fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(snapshot.contains("epochs = 3"));
    assert!(snapshot.contains("optimizer = adamw"));
}

#[test]
fn train_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let res = focalcount(&["train", "--config", &config, "--set", "epochs=2", "--set", "switch_epoch_t=1"]);
    assert!(res.status.success(), "{}", stderr(&res));
    let log = std::fs::read_to_string(dir.path().join("run/trainlog.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn seed_flag_changes_only_seed_keys() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for (out, seed) in [(&a, "5"), (&b, "6")] {
        let set = format!("output_dir={}", out.display());
        let res = focalcount(&["train", "--config", &config, "--set", &set, "--seed", seed]);
        assert!(res.status.success(), "{}", stderr(&res));
    }
    let ta = std::fs::read_to_string(a.join("config.txt")).unwrap();
    let tb = std::fs::read_to_string(b.join("config.txt")).unwrap();
    let differing: Vec<&str> = ta
        .lines()
        .zip(tb.lines())
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.split(" = ").next().unwrap())
        .collect();
    assert_eq!(differing, ["corpus_seed", "init_seed", "dirichlet_seed", "output_dir"]);
    assert_ne!(
        std::fs::read(a.join("trainlog.csv")).unwrap(),
        std::fs::read(b.join("trainlog.csv")).unwrap()
    );
}

#[test]
fn missing_config_exits_2_naming_the_path() {
    let res = focalcount(&["train", "--config", "/nonexistent/focal.cfg"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("/nonexistent/focal.cfg"), "{}", stderr(&res));
}

#[test]
fn bad_config_value_exits_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "learning_rate = fast\n");
    let res = focalcount(&["train", "--config", &config]);
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("learning_rate"), "{}", stderr(&res));
    let config = write_config(dir.path(), "momentum = 0.9\n");
    let res = focalcount(&["train", "--config", &config]);
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("momentum"), "{}", stderr(&res));
}

#[test]
fn runaway_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "optimizer = sgd\nlearning_rate = 1e300\n");
    let res = focalcount(&["train", "--config", &config]);
    assert_eq!(res.status.code(), Some(3), "{}", stderr(&res));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let res = focalcount(&["train", "--config", "x", "--bogus"]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let res = Command::new(env!("CARGO_BIN_EXE_focalcount"))
        .args(["gen-corpus", "--n", "2", "--fraction", "1", "--seed", "1", "--out", "/dev/null"])
        .env("FOCALCOUNT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn plot_overlays_runs_with_a_legend() {
    let dir = tempfile::tempdir().unwrap();
    let mut logs = Vec::new();
    for name in ["mse", "full"] {
        let run = dir.path().join(name);
        std::fs::create_dir_all(&run).unwrap();
        let mut text = String::from("epoch,loss_kind,train_loss,mean_uc,val_mae,val_rmse,val_leakage\n");
        for e in 0..60 {
            text += &format!("{e},MSE,0.5,1.0,{},{},0.25\n", 60 - e, 61 - e);
        }
        std::fs::write(run.join("trainlog.csv"), text).unwrap();
        logs.push(run.join("trainlog.csv").display().to_string());
    }
    let out = dir.path().join("plots");
    let res = focalcount(&["plot", "--log", &logs[0], "--log", &logs[1], "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", stderr(&res));
    for file in ["mae.svg", "leakage.svg"] {
        let svg = std::fs::read_to_string(out.join(file)).unwrap();
        assert!(svg.contains(">mse</text>") && svg.contains(">full</text>"));
        let first = svg.lines().find(|l| l.starts_with("<polyline")).unwrap();
        assert_eq!(first.split("points=\"").nth(1).unwrap().split(' ').count(), 60);
    }
}

#[test]
fn plot_rejects_empty_and_malformed_logs() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("trainlog.csv");
    let out = dir.path().join("plots");
    std::fs::write(&log, "epoch,loss_kind,train_loss,mean_uc,val_mae,val_rmse,val_leakage\n").unwrap();
    let res = focalcount(&["plot", "--log", log.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    std::fs::write(
        &log,
        "epoch,loss_kind,train_loss,mean_uc,val_mae,val_rmse,val_leakage\n0,MSE,1,1,1,1,1\n1,MSE,x,1,1,1,1\n",
    )
    .unwrap();
    let res = focalcount(&["plot", "--log", log.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains(":3:"), "{}", stderr(&res));
    let res = focalcount(&["plot", "--log", "/nonexistent/log.csv", "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn ablate_writes_summary_table() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let res = focalcount(&["ablate", "--config", &config, "--seeds", "1", "--set", "epochs=1", "--set", "switch_epoch_t=1"]);
    assert!(res.status.success(), "{}", stderr(&res));
    let table = std::fs::read_to_string(dir.path().join("run/ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 10);
    assert!(table.lines().nth(4).unwrap().starts_with("full,"));
}

#[test]
fn verify_fails_on_injected_fault() {
    let res = focalcount(&["verify", "--inject-fault", "drop-es-gradient"]);
    assert!(!res.status.success());
    let text = String::from_utf8_lossy(&res.stdout);
    assert!(text.contains("FAIL dominance"), "{text}");
    assert!(text.contains("PASS dirichlet"), "{text}");
}

#[test]
fn verify_passes_on_a_clean_build() {
    let res = focalcount(&["verify"]);
    let text = String::from_utf8_lossy(&res.stdout);
    assert!(res.status.success(), "{text}");
    assert_eq!(text.matches("PASS").count(), 4, "{text}");
}
