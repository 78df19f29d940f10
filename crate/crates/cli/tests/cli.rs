use std::path::Path;
use std::process::{Command, Output};

fn rankcut(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rankcut"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const QUICK: &str = "\
# tiny run
train_epochs = 3
finetune_epochs_stage1 = 1
proxy_epochs = 1
final_epochs = 1
backoff_rounds = 1
anneal_steps = 2
als_restarts = 1
als_max_iters = 30
timing_warmup = 0
timing_runs = 1
delta = 5.0
";

#[test]
fn train_optimize_eval_inspect_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("quick.cfg"), QUICK).unwrap();
    let synth = ["--config", "quick.cfg", "--synth", "20,4,16,2"];

    let o = rankcut(&[&["train", "--out", "base.ckpt"][..], &synth].concat(), d);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("test accuracy: "));

    let o = rankcut(
        &[&["optimize", "--model", "base.ckpt", "--out", "opt.ckpt", "--report", "r.json", "--stage", "1"][..], &synth].concat(),
        d,
    );
    assert!(matches!(o.status.code(), Some(0 | 3)), "{}", stderr(&o));
    let table = stdout(&o);
    assert!(table.starts_with("Model    | Accuracy (%) |"));
    assert!(table.lines().any(|l| l.starts_with("Stage1")));
    let optimize_code = o.status.code();

    let o = rankcut(&[&["eval", "--model", "opt.ckpt"][..], &synth].concat(), d);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("validation accuracy: "));

    let o = rankcut(&["inspect", "--model", "base.ckpt"], d);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("params: 70980"));

    let o = rankcut(&["report", "--report", "r.json"], d);
    assert_eq!(o.status.code(), optimize_code);
    assert!(stdout(&o).contains("composed list: ["));
}

#[test]
fn usage_and_config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(rankcut(&["frobnicate"], d).status.code(), Some(1));
    assert_eq!(rankcut(&["train", "--bogus"], d).status.code(), Some(1));

    let o = rankcut(&["optimize", "--stage", "3", "--synth", "4,2,8,0", "--out", "x"], d);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--stage"), "{}", stderr(&o));

    let o = rankcut(&["train", "--device", "cuda:0", "--synth", "4,2,8,0", "--out", "x"], d);
    assert_eq!(o.status.code(), Some(1));

    std::fs::write(d.join("bad.cfg"), "delta = 1\nno_such_key = 2\n").unwrap();
    let o = rankcut(&["train", "--config", "bad.cfg", "--synth", "4,2,8,0", "--out", "x"], d);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));

    std::fs::write(d.join("dup.cfg"), "seed = 1\nseed = 2\n").unwrap();
    let o = rankcut(&["train", "--config", "dup.cfg", "--synth", "4,2,8,0", "--out", "x"], d);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));

    let o = rankcut(&["train", "--out", "x"], d);
    assert_eq!(o.status.code(), Some(1), "missing dataset is a usage error");
}

#[test]
fn runtime_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = rankcut(&["inspect", "--model", "missing.ckpt"], d);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing.ckpt"));

    std::fs::write(d.join("garbage.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(rankcut(&["inspect", "--model", "garbage.ckpt"], d).status.code(), Some(2));
}
