use mccl::checkpoint::Checkpoint;
use mccl::config::RunConfig;
use mccl::data::{generate_synthetic, SyntheticSpec};
use mccl::harness::{analyze_prototypes, evaluate, initial_checkpoint, render_table, sweep, train, train_epochs, train_from, write_analysis};

fn spec() -> SyntheticSpec {
    SyntheticSpec {
        samples_per_split: [96, 32, 32],
        imbalance_exponent: 0.0,
        ..SyntheticSpec::default()
    }
}

fn config() -> RunConfig {
    RunConfig {
        k: 12,
        d_model: 32,
        epochs: 2,
        batch_size: 16,
        max_lr: 1e-3,
        ema_warmup: true,
        ..RunConfig::default()
    }
}

#[test]
fn zero_epochs_return_the_initial_state() {
    let data = generate_synthetic(&spec()).unwrap();
    let cfg = RunConfig { epochs: 0, ..config() };
    let init = initial_checkpoint(&cfg, &data.train, None).unwrap();
    let out = train_from(init.clone(), &data.train, None).unwrap();
    assert_eq!(out.checkpoint, init);
    assert!(out.lr_log.is_empty());
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let data = generate_synthetic(&spec()).unwrap();
    let cfg = config();
    let whole = train(&cfg, &data.train, None, None).unwrap();

    let init = initial_checkpoint(&cfg, &data.train, None).unwrap();
    let first = train_epochs(init, &data.train, None, 1).unwrap();
    assert_eq!(first.checkpoint.epoch, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt");
    first.checkpoint.save(&path).unwrap();
    let resumed = Checkpoint::load(&path).unwrap();
    let rest = train_from(resumed, &data.train, None).unwrap();
    assert_eq!(rest.checkpoint.bank, whole.checkpoint.bank);
    assert_eq!(rest.checkpoint.model.store, whole.checkpoint.model.store);
    assert_eq!(rest.checkpoint.ema.shadow, whole.checkpoint.ema.shadow);
    assert_eq!([first.lr_log, rest.lr_log].concat(), whole.lr_log);
}

#[test]
fn evaluation_is_pure_and_untrained_auc_is_near_chance() {
    let data = generate_synthetic(&spec()).unwrap();
    let init = initial_checkpoint(&config(), &data.train, None).unwrap();
    let a = evaluate(&init, &data.test, 0.5).unwrap();
    let b = evaluate(&init, &data.test, 0.5).unwrap();
    assert_eq!(a, b);
    let auc = a.macro_auc.unwrap();
    assert!((auc - 0.5).abs() <= 0.1, "{auc}");
}

#[test]
fn frozen_bank_survives_training() {
    let data = generate_synthetic(&spec()).unwrap();
    let cfg = RunConfig { lambda: 1.0, ..config() };
    let init = initial_checkpoint(&cfg, &data.train, None).unwrap();
    let out = train_from(init.clone(), &data.train, None).unwrap();
    assert_eq!(out.checkpoint.bank.stages(), init.bank.stages());
}

#[test]
fn sweep_rows_and_single_value_equivalence() {
    let data = generate_synthetic(&spec()).unwrap();
    let cfg = RunConfig { epochs: 1, ..config() };
    let rows = sweep(&cfg, "lambda", &["0.5".into(), "1.0".into()], &data.train, &data.val).unwrap();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert!(r.report.macro_f1.is_finite() && r.report.map.is_finite());
    }
    let table = render_table("lambda", &rows);
    assert_eq!(table.lines().count(), 3);

    let one = sweep(&cfg, "tau", &["0.1".into()], &data.train, &data.val).unwrap();
    let plain = train(&cfg, &data.train, None, None).unwrap();
    assert_eq!(one[0].report, evaluate(&plain.checkpoint, &data.val, cfg.threshold).unwrap());
}

#[test]
fn analysis_rows_are_normalised_and_files_written() {
    let data = generate_synthetic(&spec()).unwrap();
    let cfg = RunConfig { epochs: 1, ..config() };
    let out = train(&cfg, &data.train, None, None).unwrap();
    let analyses = analyze_prototypes(&out.checkpoint, &data.test).unwrap();
    assert_eq!(analyses.len(), 2);
    for a in &analyses {
        for row in a.correlation.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let files = write_analysis(&analyses, &data.test.manifest.label_names, dir.path()).unwrap();
    assert_eq!(files.len(), 7);
    assert!(files.iter().all(|f| f.exists()));
}
