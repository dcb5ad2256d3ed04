use std::path::Path;
use std::process::{Command, Output};

use flowgest::config::{RunConfig, RUN_CONFIG_FILE};
use flowgest::eval::parse_csv;
use flowgest::ingest::read_manifest;

fn flowgest(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowgest"))
        .args(args)
        .output()
        .expect("spawn flowgest")
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_flow_input_exits_two_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let out = flowgest(&["flow", "--in", &s(&missing)]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains(&s(&missing)), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(flowgest(&["bogus"]).status.code(), Some(1));
    assert_eq!(flowgest(&["train", "--flow", "x"]).status.code(), Some(1));
    assert_eq!(flowgest(&["train", "--flow", "x", "--out", "y", "--preset", "huge"]).status.code(), Some(1));
}

#[test]
fn help_and_version() {
    let help = flowgest(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    for cmd in ["preprocess", "flow", "synth", "init-weights", "train", "evaluate", "report", "lr-show"] {
        assert!(stdout(&help).contains(cmd), "help lacks {cmd}");
    }
    let flow_help = flowgest(&["flow", "--help"]);
    for flag in ["--scale", "--levels", "--win", "--iters", "--poly-n", "--poly-sigma", "--format", "--mag-cap", "--jpeg-quality"] {
        assert!(stdout(&flow_help).contains(flag), "flow help lacks {flag}");
    }
    let v = flowgest(&["--version"]);
    assert_eq!(v.status.code(), Some(0));
    assert!(stdout(&v).starts_with(&format!("flowgest {}", env!("CARGO_PKG_VERSION"))));
}

#[test]
fn lr_show_prints_step_schedule() {
    let out = flowgest(&["lr-show", "--epochs", "30"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,lr");
    assert_eq!(lines.len(), 31);
    let lr = |e: usize| lines[e + 1].split(',').nth(1).unwrap().parse::<f64>().unwrap();
    assert_eq!((lr(0), lr(9)), (1e-3, 1e-3));
    assert_eq!((lr(10), lr(19)), (2.5e-4, 2.5e-4));
    assert_eq!((lr(20), lr(29)), (6.25e-5, 6.25e-5));
}

#[test]
fn config_precedence_and_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[train]\nlr_base = 1e-3\nstep_size = 2\n").unwrap();
    let out = flowgest(&["--config", &s(&cfg), "lr-show", "--epochs", "3", "--lr", "5e-4"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    // the flag wins for lr, the file still sets step_size
    assert_eq!(stdout(&out), "epoch,lr\n0,5e-4\n1,5e-4\n2,1.25e-4\n");

    std::fs::write(&cfg, "[train]\nlearning_rate = 1.0\n").unwrap();
    let out = flowgest(&["--config", &s(&cfg), "lr-show", "--epochs", "3"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("learning_rate") && err.contains("lr_base"), "{err}");
}

#[test]
fn init_weights_averages_rgb_kernel() {
    use flowgest::net::checkpoint::{load_tensor_file, save_tensor_file};
    use flowgest::net::Tensor4;
    let dir = tempfile::tempdir().unwrap();
    let (rgb, out) = (dir.path().join("rgb.bin"), dir.path().join("flow.bin"));
    let kernel = Tensor4::<f32>::from_fn([2, 3, 1, 1], |i| i as f32);
    save_tensor_file(&rgb, &kernel).unwrap();
    let res = flowgest(&["init-weights", "--rgb", &s(&rgb), "--out", &s(&out)]);
    assert_eq!(res.status.code(), Some(0), "{}", stderr(&res));
    let t = load_tensor_file(&out).unwrap();
    assert_eq!(t.dims(), [2, 20, 1, 1]);
    assert!(t.data()[..20].iter().all(|&v| v == 1.0));
    assert!(t.data()[20..].iter().all(|&v| v == 4.0));
    let res = flowgest(&["init-weights", "--rgb", &s(&dir.path().join("none.bin")), "--out", &s(&out)]);
    assert_eq!(res.status.code(), Some(2));
}

/// Tiny end-to-end loop through every stage of the CLI.
#[test]
fn desk_loop_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| s(&dir.path().join(n));
    let run = |args: &[&str]| {
        let o = flowgest(args);
        assert_eq!(o.status.code(), Some(0), "flowgest {}: {}", args.join(" "), stderr(&o));
        o
    };
    run(&["-q", "synth", "--per-class", "3", "--size", "64", "--frames", "12", "--seed", "3", "--out", &p("synth")]);
    assert_eq!(read_manifest(&dir.path().join("synth/manifest.csv")).unwrap().len(), 24);

    run(&["-q", "flow", "--in", &p("synth"), "--out", &p("flow"), "--format", "jpeg", "--raw"]);
    let clip_dir = std::fs::read_dir(dir.path().join("flow/flow")).unwrap().next().unwrap().unwrap().path();
    assert!(clip_dir.join("mag_0000.jpg").is_file());
    assert!(clip_dir.join("dir_0010.jpg").is_file());
    assert!(clip_dir.join("flow_0000.raw").is_file());
    assert!(!clip_dir.join("mag_0011.jpg").exists());
    let echoed = RunConfig::load(Some(&dir.path().join("flow").join(RUN_CONFIG_FILE))).unwrap();
    assert!(echoed.encode.raw);
    assert_eq!(echoed.paths["in"], dir.path().join("synth"));

    run(&[
        "-q", "train", "--flow", &p("flow"), "--out", &p("ckpt"), "--epochs", "1", "--batch-size", "8", "--fold", "1",
    ]);
    assert!(dir.path().join("ckpt/fold_1/best.ckpt").is_file());
    let log = std::fs::read_to_string(dir.path().join("ckpt/fold_1/log.csv")).unwrap();
    assert!(log.starts_with("epoch,lr,train_loss,train_acc,val_loss,val_acc\n0,1e-3,"), "{log}");
    assert!(!dir.path().join("ckpt/fold_2").exists());

    let report = p("report.csv");
    let out = run(&[
        "-q", "evaluate", "--manifest", &p("flow/manifest.csv"), "--checkpoints", &p("ckpt"), "--fold", "1", "--out", &report,
    ]);
    assert!(stdout(&out).contains("Suturing"));
    let rows = parse_csv(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rows[0].reports[0].folds.len(), 1);
    assert!(dir.path().join("report.csv.run_config.toml").is_file());

    // evaluating a fold without a checkpoint is a runtime error
    let o = flowgest(&["evaluate", "--manifest", &p("flow/manifest.csv"), "--checkpoints", &p("ckpt"), "--out", &report]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("fold_2"), "{}", stderr(&o));

    let txt = p("merged.txt");
    run(&["report", "--inputs", &report, &report, "--out", &txt]);
    let table = std::fs::read_to_string(&txt).unwrap();
    assert!(table.starts_with("Method"));
    assert!(table.contains("—"));
}
