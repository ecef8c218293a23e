use sbp_core::analysis::{predict_space_ratio_stt, relative_deviation};
use sbp_harness::train::write_run;
use sbp_harness::{
    compare_runs, gen_synthetic_dataset, run_on, DatasetSpec, ExperimentConfig, HarnessError, Mode,
    RunRecord,
};

fn stt_cfg() -> ExperimentConfig {
    ExperimentConfig::from_json(
        r#"{
        "model": {"family": "stt", "frames": 8, "height": 2, "width": 2, "chunk": 1, "hidden": 8, "heads": 2, "head_dim": 4},
        "data": {"train": 32, "test": 16, "classes": 3, "noise": 0.3},
        "sbp": {"keep_ratio": 0.25, "boundary": 1},
        "mode": "e2e",
        "lr": 0.05,
        "epochs": 2,
        "batch_size": 8,
        "seed": 4
    }"#,
    )
    .unwrap()
}

fn transformer_cfg() -> ExperimentConfig {
    ExperimentConfig::from_json(
        r#"{
        "model": {"family": "mini_transformer", "frames": 8, "height": 2, "width": 2, "heads": 2, "head_dim": 4, "layers": 4},
        "data": {"train": 32, "test": 16, "classes": 4, "noise": 0.3},
        "mode": "e2e",
        "lr": 0.03,
        "grad_clip": 1.0,
        "epochs": 2,
        "batch_size": 8,
        "seed": 5
    }"#,
    )
    .unwrap()
}

fn run(cfg: &ExperimentConfig, mode: Mode, r: f64) -> RunRecord {
    let mut cfg = cfg.clone();
    cfg.mode = mode;
    cfg.sbp.keep_ratio = r;
    let ds = gen_synthetic_dataset(&DatasetSpec::from_config(&cfg)).unwrap();
    let (rec, _) = run_on(&cfg, &ds).unwrap();
    assert!(rec.aborted.is_none());
    rec
}

#[test]
fn full_keep_ratio_reproduces_end_to_end() {
    for cfg in [stt_cfg(), transformer_cfg()] {
        let e2e = run(&cfg, Mode::E2e, 1.0);
        let sbp = run(&cfg, Mode::Sbp, 1.0);
        for (a, b) in e2e.epochs.iter().zip(&sbp.epochs) {
            assert!((a.train_loss - b.train_loss).abs() < 1e-12);
            assert_eq!(a.train_accuracy, b.train_accuracy);
            assert_eq!(a.test_accuracy, b.test_accuracy);
        }
    }
}

#[test]
fn checkpointing_keeps_accuracy_and_lowers_memory() {
    let cfg = transformer_cfg();
    let sbp = run(&cfg, Mode::Sbp, 0.25);
    let ck = run(&cfg, Mode::SbpCheckpoint, 0.25);
    assert_eq!(sbp.test_accuracy, ck.test_accuracy);
    assert!((sbp.final_train_loss - ck.final_train_loss).abs() < 1e-12);
    assert!(ck.cached_elements_total < sbp.cached_elements_total);
}

#[test]
fn frame_dropout_caches_less_than_sbp() {
    let cfg = transformer_cfg();
    let sbp = run(&cfg, Mode::Sbp, 0.25);
    let fd = run(&cfg, Mode::FrameDropout, 0.25);
    assert!(fd.cached_elements_total < sbp.cached_elements_total);
}

#[test]
fn stt_space_column_matches_prediction() {
    let cfg = stt_cfg();
    let e2e = run(&cfg, Mode::E2e, 1.0);
    let m_s = e2e.layers.iter().filter(|l| l.layer == Some(0)).map(|l| l.cached_elements).sum::<u64>() as f64;
    let m_c = e2e.cached_elements_total as f64 - m_s;
    let mut records = vec![e2e];
    for r in [0.25, 0.5] {
        records.push(run(&cfg, Mode::Sbp, r));
    }
    let rows = compare_runs(&records, None).unwrap();
    assert_eq!(rows.len(), 3);
    for row in &rows[1..] {
        let predicted = predict_space_ratio_stt(m_s, m_c, row.keep_ratio).unwrap();
        assert!(relative_deviation(row.measured_space, predicted) < 0.10, "{row:?} vs {predicted}");
        assert_eq!(row.space_conforms, Some(true));
    }
}

#[test]
fn identical_runs_have_zero_deltas() {
    let rec = run(&transformer_cfg(), Mode::E2e, 1.0);
    let rows = compare_runs(&[rec.clone(), rec], None).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].runs, 2);
    assert_eq!(rows[0].accuracy_delta, 0.0);
    assert_eq!(rows[0].measured_space, 1.0);
    assert_eq!(rows[0].measured_time, 1.0);
}

#[test]
fn different_datasets_are_rejected() {
    let cfg = transformer_cfg();
    let a = run(&cfg, Mode::E2e, 1.0);
    let mut other = cfg.clone();
    other.data.seed = Some(99);
    let b = run(&other, Mode::Sbp, 0.25);
    assert!(matches!(compare_runs(&[a.clone(), b], None), Err(HarnessError::Contract(_))));
    assert!(matches!(compare_runs(&[a], None), Err(HarnessError::Contract(_))));
}

#[test]
fn one_row_per_mode_and_ratio() {
    let cfg = transformer_cfg();
    let mut records = vec![run(&cfg, Mode::E2e, 1.0)];
    for (mode, r) in [(Mode::Sbp, 0.25), (Mode::Sbp, 0.5), (Mode::FrameDropout, 0.25), (Mode::Checkpoint, 1.0)] {
        records.push(run(&cfg, mode, r));
    }
    let mut again = cfg.clone();
    again.seed = 6;
    again.data.seed = Some(cfg.seed);
    records.push(run(&again, Mode::Sbp, 0.25));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("comparison.csv");
    let rows = compare_runs(&records, Some(&path)).unwrap();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows.iter().find(|r| r.mode == "sbp" && r.keep_ratio == 0.25).unwrap().runs, 2);
    assert!(rows.iter().find(|r| r.mode == "frame_dropout").unwrap().predicted_space.is_none());
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("mode,keep_ratio,runs,test_accuracy,accuracy_delta,"));
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn run_outputs_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = stt_cfg();
    cfg.mode = Mode::Sbp;
    cfg.output = Some(dir.path().join("run"));
    let ds = gen_synthetic_dataset(&DatasetSpec::from_config(&cfg)).unwrap();
    let (rec, _) = run_on(&cfg, &ds).unwrap();
    let out = dir.path().join("run");
    assert_eq!(RunRecord::load(&out.join("record.json")).unwrap(), rec);
    let header = |f: &str| std::fs::read_to_string(out.join(f)).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header("epochs.csv"), "epoch,train_loss,train_accuracy,test_accuracy,mean_step_ms");
    assert_eq!(header("layers.csv"), "layer,cached_elements,forward_ops,backward_ops");
    assert!(header("summary.csv").starts_with("mode,keep_ratio,sampler,boundary,seed,test_accuracy"));
    let reloaded = ExperimentConfig::load(&out.join("config.json")).unwrap();
    assert_eq!(reloaded.hash(), cfg.hash());

    let again = dir.path().join("again");
    write_run(&again, &cfg, &rec).unwrap();
    assert_eq!(
        std::fs::read_to_string(again.join("layers.csv")).unwrap(),
        std::fs::read_to_string(out.join("layers.csv")).unwrap()
    );
}

#[test]
fn cli_runs_and_compares() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, transformer_cfg().to_json().unwrap()).unwrap();
    let bin = env!("CARGO_BIN_EXE_sbp");
    let mut records = Vec::new();
    for mode in ["e2e", "sbp"] {
        let out = dir.path().join(mode);
        let status = std::process::Command::new(bin)
            .args(["run", "--config"])
            .arg(&cfg_path)
            .args(["--mode", mode, "--out"])
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
        records.push(out.join("record.json"));
    }
    let table = dir.path().join("comparison.csv");
    let status = std::process::Command::new(bin)
        .arg("compare")
        .args(&records)
        .arg("--out")
        .arg(&table)
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(std::fs::read_to_string(table).unwrap().lines().count(), 3);
}
