use std::path::Path;
use std::process::Command;

use cmformer::harness::{
    ablate, evaluate, run_dir_name, source_splits, train, HarnessError, TrainConfig, CHECKPOINT_FILE,
    LOG_FILE,
};
use cmformer::segmodel::Enhancement;

fn small(extra: &str) -> TrainConfig {
    TrainConfig::parse(&format!("train_scenes = 12\nval_scenes = 4\nepochs = 2\nbatch_size = 4\n{extra}")).unwrap()
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn identical_seeds_give_identical_files() {
    let cfg = small("seed = 3");
    let (tr, va) = source_splits(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = train(&cfg, &tr, &va, &dir.path().join("a")).unwrap();
    let b = train(&cfg, &tr, &va, &dir.path().join("b")).unwrap();
    assert_eq!(read(&a.log_path), read(&b.log_path));
    assert_eq!(read(&a.checkpoint_path), read(&b.checkpoint_path));
    let c = train(&small("seed = 4"), &tr, &va, &dir.path().join("c")).unwrap();
    assert_ne!(read(&a.checkpoint_path), read(&c.checkpoint_path));

    let log = String::from_utf8(read(&a.log_path)).unwrap();
    assert!(log.starts_with("# lambda_ce=5.0\n# lambda_dice=5.0\n# lambda_cls=2.0\n"));
    assert!(log.contains("epoch,loss,ce,dice,cls,val_miou\n"));
}

#[test]
fn evaluation_reproduces_the_logged_miou() {
    let cfg = small("seed = 1\nepochs = 3");
    let (tr, va) = source_splits(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cfg, &tr, &va, dir.path()).unwrap();
    let val_path = dir.path().join("val.cmsb");
    cmformer::synthbench::write_dataset(&va, &val_path).unwrap();
    let report_path = dir.path().join("report.csv");
    let r = evaluate(&out.checkpoint_path, &val_path, "clear", Some(&report_path)).unwrap();
    let logged = out.log.last().unwrap().val_miou.unwrap();
    assert!((r.miou.unwrap() - logged).abs() <= 1e-9, "{:?} vs {logged}", r.miou);

    evaluate(&out.checkpoint_path, &val_path, "clear", Some(&report_path)).unwrap();
    let csv = std::fs::read_to_string(&report_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3, "one header, two rows");
    assert_eq!(lines[0], "domain,iou_0,iou_1,iou_2,iou_3,iou_4,iou_5,miou,checkpoint,seed");
    assert!(lines[1].starts_with("clear,") && lines[1].ends_with(",1"));
    assert_eq!(lines[1], lines[2]);

    let bad = dir.path().join("missing.cmck");
    assert!(matches!(evaluate(&bad, &val_path, "clear", None), Err(HarnessError::Checkpoint(_))));
    assert!(matches!(evaluate(&out.checkpoint_path, &bad, "clear", None), Err(HarnessError::Dataset(_))));
}

#[test]
fn divergence_keeps_the_last_good_checkpoint() {
    let cfg = TrainConfig::parse("train_scenes = 8\nval_scenes = 2\nepochs = 4\nlr = 1e20").unwrap();
    let (tr, va) = source_splits(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let err = train(&cfg, &tr, &va, &dir.path().join("bad")).unwrap_err();
    let HarnessError::NonFiniteLoss { epoch } = err else {
        panic!("unexpected error {err}");
    };
    assert!(epoch >= 2, "diverged in epoch {epoch}");
    let good = TrainConfig { epochs: epoch - 1, ..cfg.clone() };
    let reference = train(&good, &tr, &va, &dir.path().join("good")).unwrap();
    assert_eq!(read(&dir.path().join("bad").join(CHECKPOINT_FILE)), read(&reference.checkpoint_path));
    assert_eq!(read(&dir.path().join("bad").join(LOG_FILE)), read(&reference.log_path));
}

#[test]
fn loss_falls_over_ten_epochs() {
    for seed in 0..3 {
        let cfg = TrainConfig::parse(&format!("seed = {seed}\nepochs = 10\nval_scenes = 2")).unwrap();
        let (tr, va) = source_splits(&cfg).unwrap();
        assert_eq!(tr.len(), 200);
        let dir = tempfile::tempdir().unwrap();
        let out = train(&cfg, &tr, &va, dir.path()).unwrap();
        let (first, tenth) = (out.log[0].loss, out.log[9].loss);
        assert!(tenth < first, "seed {seed}: {first} -> {tenth}");
    }
}

#[test]
fn ablation_baseline_row_is_the_plain_model() {
    let mut cfg = small("seed = 9\nepochs = 1\nablation_seeds = 5\ntarget_domains = fog,dusk");
    let dir = tempfile::tempdir().unwrap();
    let table = ablate(&cfg, dir.path()).unwrap();
    assert_eq!(table.runs.len(), 4);
    let csv = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(csv.lines().next().unwrap(), "config,fog,dusk,mean");

    cfg.seed = 5;
    cfg.enhancement = Enhancement::NONE;
    let (tr, va) = source_splits(&cfg).unwrap();
    let own = train(&cfg, &tr, &va, &dir.path().join("own")).unwrap();
    let run = dir.path().join("runs").join(run_dir_name(Enhancement::NONE, 5));
    assert_eq!(read(&run.join(CHECKPOINT_FILE)), read(&own.checkpoint_path));
    assert_eq!(read(&run.join(LOG_FILE)), read(&own.log_path));
    let none = &table.runs[0];
    assert_eq!(none.enhancement, Enhancement::NONE);
    assert_eq!(none.source_miou, own.log.last().unwrap().val_miou);
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cmformer"))
}

#[test]
fn command_line_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let status = cli()
        .args(["gen-data", "--out"])
        .arg(d.join("data"))
        .args(["--domains", "clear,fog", "--scenes", "8", "--seed", "40"])
        .status()
        .unwrap();
    assert!(status.success());
    for f in ["clear_train.cmsb", "clear_val.cmsb", "fog_train.cmsb", "fog_val.cmsb"] {
        assert!(d.join("data").join(f).exists(), "{f}");
    }
    let val = cmformer::synthbench::read_dataset(&d.join("data/clear_val.cmsb")).unwrap();
    assert_eq!(val.len(), 2);

    let config = d.join("run.cfg");
    std::fs::write(&config, "seed = 1\nepochs = 1\nbatch_size = 4\n").unwrap();
    let train_with = |out: &str, env: Option<&str>, seed: Option<&str>| {
        let mut c = cli();
        c.args(["train", "--config"]).arg(&config).arg("--data").arg(d.join("data")).arg("--out").arg(d.join(out));
        c.env_remove("CMA_SEED");
        if let Some(e) = env {
            c.env("CMA_SEED", e);
        }
        if let Some(s) = seed {
            c.args(["--seed", s]);
        }
        assert!(c.output().unwrap().status.success());
        std::fs::read_to_string(d.join(out).join(LOG_FILE)).unwrap()
    };
    assert!(train_with("file", None, None).contains("# seed=1 "));
    assert!(train_with("env", Some("6"), None).contains("# seed=6 "));
    assert!(train_with("cli", Some("6"), Some("8")).contains("# seed=8 "));

    let report = d.join("report.csv");
    let out = cli()
        .args(["eval", "--ckpt"])
        .arg(d.join("env").join(CHECKPOINT_FILE))
        .arg("--data")
        .arg(d.join("data/fog_val.cmsb"))
        .args(["--domain", "fog", "--report"])
        .arg(&report)
        .output()
        .unwrap();
    assert!(out.status.success());
    let csv = std::fs::read_to_string(&report).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("fog,"));
    assert!(csv.lines().nth(1).unwrap().ends_with(",6"));

    let out = cli().args(["eval", "--ckpt"]).arg(d.join("nope")).arg("--data").arg(d.join("data/fog_val.cmsb")).args(["--domain", "fog", "--report"]).arg(&report).output().unwrap();
    assert!(!out.status.success());

    let out = cli().arg("gradcheck").output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("matmul"));
}
