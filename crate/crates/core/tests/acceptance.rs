//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed.

mod common;

use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mccl::checkpoint::Checkpoint;
use mccl::config::RunConfig;
use mccl::cpi::{allocate_prototypes, PrototypeBank};
use mccl::data::{generate_synthetic, load_dataset, write_dataset, LabelMode, PatchFeatureMap, SyntheticSpec};
use mccl::graph::{asymmetric_term, Graph};
use mccl::harness::{analyze_prototypes, evaluate, initial_checkpoint, train, train_from};
use mccl::mcc::{momentum_update_batch, reconstruct_feature_map, soft_assignment, stage_on_graph};
use mccl::metrics::{average_precision, compute_metrics, roc_auc};

type Outcome = Result<String, String>;

fn check(ok: bool, pass: String, fail: String) -> Outcome {
    if ok {
        Ok(pass)
    } else {
        Err(fail)
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

fn allocation_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut tested, mut drawn, mut worst) = (0, 0, 0.0f64);
    while tested < 1000 {
        drawn += 1;
        let c = rng.random_range(2..=30);
        let counts: Vec<usize> = (0..c).map(|_| rng.random_range(1..=1000)).collect();
        let k = rng.random_range(c..=2048);
        let quotas = common::quota_oracle(&counts, k);
        if !common::allocation_feasible(&quotas, k) {
            continue;
        }
        tested += 1;
        let plan = allocate_prototypes(&counts, k).map_err(|e| e.to_string())?;
        let b = plan.budgets();
        if b.iter().sum::<usize>() != k || b.contains(&0) {
            return Err(format!("counts {counts:?}, K {k}: budgets {b:?}"));
        }
        for (kc, q) in b.iter().zip(&quotas) {
            worst = worst.max((*kc as f64 - q).abs());
        }
    }
    let example = allocate_prototypes(&[50, 30, 20], 10).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    check(
        worst < 1.0 && example.budgets() == [2, 3, 5] && secs < 5.0,
        format!("1000 instances ({} infeasible draws skipped), max |K_c - q_c| {worst:.4}, [50,30,20]/10 -> [2,3,5], {secs:.2}s", drawn - tested),
        format!("max |K_c - q_c| {worst}, example {:?}, {secs:.2}s", example.budgets()),
    )
}

/// Pooled output of the clustering layer, for finite differences.
fn pooled(x: &Array2<f64>, protos: &Array2<f64>, tau: f64) -> Array2<f64> {
    let mut g = Graph::no_grad();
    let xv = g.input(x.clone());
    let nodes = stage_on_graph(&mut g, xv, protos, 1e-8, tau);
    g.value(nodes.pooled).clone()
}

fn clustering_layer() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mut simplex_err, mut recon_err, mut grad_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let p = rng.random_range(1..=4);
        let k = rng.random_range(1..=5);
        let d = rng.random_range(1..=6);
        let tau = rng.random_range(0.2..2.0);
        let x = random_matrix(&mut rng, p, d);
        let protos = random_matrix(&mut rng, k, d);
        let bank = PrototypeBank::new(vec![protos.clone()], vec![0; k], 1e-8, 0.9).map_err(|e| e.to_string())?;
        let fmap = PatchFeatureMap::new(x.clone(), (p, 1)).map_err(|e| e.to_string())?;
        let a = soft_assignment(&fmap, &bank, 0, tau).map_err(|e| e.to_string())?;
        for row in a.weights.rows() {
            simplex_err = simplex_err.max((row.sum() - 1.0).abs());
            if row.iter().any(|w| *w < 0.0) {
                simplex_err = f64::INFINITY;
            }
        }
        let r = reconstruct_feature_map(&fmap, &a, &bank, 0).map_err(|e| e.to_string())?;
        for i in 0..p {
            for j in 0..d {
                let mut s = 0.0;
                for kk in 0..k {
                    s += a.weights[[i, kk]] * protos[[kk, j]];
                }
                recon_err = recon_err.max((s - r.patches[[i, j]]).abs());
            }
        }

        // d(pooled . probe)/dx by the tape against central differences
        let probe = random_matrix(&mut rng, 1, d);
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let nodes = stage_on_graph(&mut g, xv, &protos, 1e-8, tau);
        let pr = g.constant(probe.clone());
        let prod = g.mul(nodes.pooled, pr);
        let out = g.sum_all(prod);
        g.backward(out);
        let analytic = g.grad(xv).cloned().unwrap_or_else(|| Array2::zeros((p, d)));
        let h = 1e-5;
        let mut numeric = Array2::zeros((p, d));
        for i in 0..p {
            for j in 0..d {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[[i, j]] += h;
                xm[[i, j]] -= h;
                let fp = (pooled(&xp, &protos, tau) * &probe).sum();
                let fm = (pooled(&xm, &protos, tau) * &probe).sum();
                numeric[[i, j]] = (fp - fm) / (2.0 * h);
            }
        }
        let diff = (&analytic - &numeric).mapv(|v| v * v).sum().sqrt();
        let scale = analytic.mapv(|v| v * v).sum().sqrt().max(numeric.mapv(|v| v * v).sum().sqrt());
        if scale > 1e-6 {
            grad_err = grad_err.max(diff / scale);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = simplex_err <= 1e-6 && recon_err <= 1e-6 && grad_err <= 1e-3 && secs < 30.0;
    let msg = format!("simplex {simplex_err:.1e}, reconstruction {recon_err:.1e}, gradient rel err {grad_err:.1e}, {secs:.2}s");
    check(ok, msg.clone(), msg)
}

fn small_config() -> RunConfig {
    RunConfig {
        k: 12,
        d_model: 32,
        epochs: 1,
        batch_size: 32,
        max_lr: 1e-3,
        ema_warmup: true,
        ..RunConfig::default()
    }
}

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        samples_per_split: [120, 40, 40],
        ..SyntheticSpec::default()
    }
}

fn momentum_semantics() -> Outcome {
    let data = generate_synthetic(&small_spec()).map_err(|e| e.to_string())?;
    let cfg = RunConfig {
        lambda: 1.0,
        ..small_config()
    };
    let ckpt = initial_checkpoint(&cfg, &data.train, None).map_err(|e| e.to_string())?;
    let before = ckpt.bank.stages().to_vec();
    let out = train_from(ckpt, &data.train, None).map_err(|e| e.to_string())?;
    let identical = out.checkpoint.bank.stages() == before.as_slice();
    let steps = out.lr_log.len();

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (k, d, p) = (4, 5, 7);
    let mut bank = PrototypeBank::new(vec![random_matrix(&mut rng, k, d)], vec![0; k], 1e-8, 0.9).map_err(|e| e.to_string())?;
    let x = random_matrix(&mut rng, p, d);
    let w = Array2::from_shape_fn((p, k), |(i, j)| ((i * 7 + j * 3) % 5) as f64 + 0.5);
    let w = &w / &w.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1));
    let mass = w.sum_axis(ndarray::Axis(0));
    let target = w.t().dot(&x) / &mass.clone().insert_axis(ndarray::Axis(1));
    let dist = |b: &PrototypeBank| -> Array1<f64> {
        (b.stage(0) - &target).mapv(|v| v * v).sum_axis(ndarray::Axis(1)).mapv(f64::sqrt)
    };
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let d0 = dist(&bank);
        momentum_update_batch(&mut bank, 0, x.view(), w.view(), 0.9, 1e-4).map_err(|e| e.to_string())?;
        let d1 = dist(&bank);
        for (a, b) in d0.iter().zip(d1.iter()) {
            if *a > 1e-6 {
                worst = worst.max((b / a - 0.9).abs());
            }
        }
    }
    check(
        identical && worst <= 1e-6,
        format!("lambda=1 bank bit-identical over {steps} steps; lambda=0.9 contraction error {worst:.1e}"),
        format!("lambda=1 identical: {identical}; contraction error {worst:.1e}"),
    )
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut worst = 0.0f64;
    let mut note = |a: f64, b: f64| worst = worst.max((a - b).abs());
    for _ in 0..500 {
        let n = rng.random_range(1..=8);
        let c = rng.random_range(1..=5);
        // coarse scores so that ties occur
        let scores = Array2::from_shape_fn((n, c), |_| rng.random_range(0..10) as f64 / 9.0);
        let truth = Array2::from_shape_fn((n, c), |_| rng.random_bool(0.4) as u8 as f64);
        let t = 0.5;
        let (ma, mi, sa, per) = common::f1_oracle(&scores, &truth, t);
        let f = mccl::metrics::f1_suite(&scores, &truth, t).map_err(|e| e.to_string())?;
        note(ma, f.macro_f1);
        note(mi, f.micro_f1);
        note(sa, f.samples_f1);
        for (a, b) in per.iter().zip(&f.per_class) {
            note(*a, *b);
        }
        for j in 0..c {
            let s: Vec<f64> = scores.column(j).to_vec();
            let y: Vec<bool> = truth.column(j).iter().map(|v| *v > 0.5).collect();
            match (common::ap_oracle(&s, &y), average_precision(scores.column(j), truth.column(j))) {
                (Some(a), Some(b)) => note(a, b),
                (None, None) => {}
                other => return Err(format!("AP presence mismatch {other:?}")),
            }
            match (common::auc_oracle(&s, &y), roc_auc(scores.column(j), truth.column(j))) {
                (Some(a), Some(b)) => note(a, b),
                (None, None) => {}
                other => return Err(format!("AUC presence mismatch {other:?}")),
            }
        }
    }
    let y = ndarray::array![[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]];
    let p = ndarray::array![[0.9, 0.1, 0.2], [0.3, 0.8, 0.7]];
    let r = compute_metrics(&p, &y, LabelMode::MultiLabel, 0.5).map_err(|e| e.to_string())?;
    let s = ndarray::array![0.9, 0.8, 0.1];
    let t = ndarray::array![1.0, 0.0, 1.0];
    let ap = average_precision(s.view(), t.view()).unwrap_or(f64::NAN);
    let auc = roc_auc(s.view(), t.view()).unwrap_or(f64::NAN);
    let examples = (r.macro_f1 - 2.0 / 3.0).abs() < 1e-9 && (ap - 5.0 / 6.0).abs() < 1e-9 && (auc - 0.5).abs() < 1e-9;
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-9 && examples && secs < 10.0,
        format!("500 instances, max deviation {worst:.1e}; macro F1 2/3, AP 5/6, AUC 1/2 reproduced; {secs:.2}s"),
        format!("max deviation {worst:.1e}, worked examples ok: {examples}, {secs:.2}s"),
    )
}

fn loss_values() -> Outcome {
    let pos = asymmetric_term(0.5, 1.0, 0.0, 2.0, 1e-8);
    let neg = asymmetric_term(0.5, 0.0, 0.0, 2.0, 1e-8);
    let via_api = mccl::metrics::asymmetric_loss(&[0.5, 0.5], &[1.0, 0.0], 0.0, 2.0);
    let values = (pos - 0.693147).abs() < 1e-6 && (neg - 0.173287).abs() < 1e-6 && (via_api - (0.693147 + 0.173287) / 2.0).abs() < 1e-6;
    let mut monotone = true;
    for (gp, gn) in [(0.0, 0.0), (0.0, 2.0), (1.0, 4.0)] {
        let grid: Vec<f64> = (1..=100).map(|i| i as f64 / 101.0).collect();
        for w in grid.windows(2) {
            let (a, b) = (w[0], w[1]);
            monotone &= asymmetric_term(b, 1.0, gp, gn, 1e-8) < asymmetric_term(a, 1.0, gp, gn, 1e-8);
            monotone &= asymmetric_term(b, 0.0, gp, gn, 1e-8) > asymmetric_term(a, 0.0, gp, gn, 1e-8);
        }
    }
    check(
        values && monotone,
        format!("L(p=.5,y=1) {pos:.6}, L(p=.5,y=0,g-=2) {neg:.6}, monotone on 100-point grids"),
        format!("values {pos} {neg} {via_api}, monotone {monotone}"),
    )
}

fn desk_config() -> RunConfig {
    RunConfig {
        k: 32,
        d_model: 64,
        epochs: 20,
        max_lr: 1e-3,
        ema_warmup: true,
        ..RunConfig::default()
    }
}

const NOISY_STD: f64 = 0.3;
const NOISY_SEEDS: [u64; 4] = [0, 1, 2, 3];

fn learnability() -> Outcome {
    let start = Instant::now();
    let data = generate_synthetic(&common::desk_spec(0.0)).map_err(|e| e.to_string())?;
    let cfg = desk_config();
    let out = train(&cfg, &data.train, None, None).map_err(|e| e.to_string())?;
    let clean = evaluate(&out.checkpoint, &data.test, cfg.threshold).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();

    let noisy = generate_synthetic(&common::desk_spec(NOISY_STD)).map_err(|e| e.to_string())?;
    let oracle = common::samples_f1(&common::clue_oracle(&noisy.test, &noisy.dictionary), &noisy.test.truth_matrix());
    let mut per_seed = Vec::new();
    for seed in NOISY_SEEDS {
        let full_cfg = RunConfig { seed, ..cfg.clone() };
        let ablated_cfg = RunConfig {
            use_reconstruction: false,
            ..full_cfg.clone()
        };
        let mut scores = [0.0; 2];
        for (slot, c) in [&full_cfg, &ablated_cfg].into_iter().enumerate() {
            let out = train(c, &noisy.train, None, None).map_err(|e| e.to_string())?;
            scores[slot] = evaluate(&out.checkpoint, &noisy.test, c.threshold).map_err(|e| e.to_string())?.macro_f1;
        }
        per_seed.push(scores);
    }
    let n = per_seed.len() as f64;
    let full = per_seed.iter().map(|s| s[0]).sum::<f64>() / n;
    let ablated = per_seed.iter().map(|s| s[1]).sum::<f64>() / n;
    let runs: Vec<String> = per_seed.iter().map(|s| format!("{:.4}/{:.4}", s[0], s[1])).collect();

    let msg = format!(
        "clean held-out Samples F1 {:.4} in {secs:.0}s; noise {NOISY_STD} (oracle {oracle:.3}): mean Macro F1 full {full:.4} vs no-reconstruction {ablated:.4} (per seed {})",
        clean.samples_f1,
        runs.join(", ")
    );
    check(
        clean.samples_f1 >= 0.95 && secs <= 600.0 && oracle <= 0.9 && ablated <= full,
        msg.clone(),
        msg,
    )
}

fn analysis_fidelity() -> Outcome {
    let spec = SyntheticSpec {
        clues_per_class: (1, 1),
        ..common::desk_spec(0.0)
    };
    let data = generate_synthetic(&spec).map_err(|e| e.to_string())?;
    let cfg = RunConfig {
        k: spec.num_classes,
        ..desk_config()
    };
    let out = train(&cfg, &data.train, None, None).map_err(|e| e.to_string())?;
    if out.checkpoint.bank.owned_counts(spec.num_classes).iter().any(|&n| n != 1) {
        return Err("allocation did not give one prototype per class".into());
    }
    let analyses = analyze_prototypes(&out.checkpoint, &data.test).map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    let mut ok = true;
    for a in &analyses {
        let dom = a.owner_dominance();
        let rated = dom.iter().filter(|d| d.is_some()).count();
        let hits = dom.iter().filter(|d| **d == Some(true)).count();
        ok &= rated > 0 && hits as f64 >= 0.9 * rated as f64;
        parts.push(format!("stage {}: {hits}/{rated}", a.stage));
    }
    let msg = format!("row-dominant on owned prototype: {}", parts.join(", "));
    check(ok, msg.clone(), msg)
}

fn determinism() -> Outcome {
    let data = generate_synthetic(&small_spec()).map_err(|e| e.to_string())?;
    let cfg = RunConfig {
        epochs: 3,
        ..small_config()
    };
    let logs = |o: &mccl::harness::TrainOutcome| -> Vec<String> { o.epochs.iter().map(|r| r.log_line()).collect() };
    let a = train(&cfg, &data.train, Some(&data.val), None).map_err(|e| e.to_string())?;
    let b = train(&cfg, &data.train, Some(&data.val), None).map_err(|e| e.to_string())?;
    let same_logs = logs(&a) == logs(&b) && a.lr_log == b.lr_log && a.checkpoint == b.checkpoint;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut data_rt = true;
    for (name, split) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        let p = dir.path().join(name);
        write_dataset(&p, split).map_err(|e| e.to_string())?;
        data_rt &= &load_dataset(&p).map_err(|e| e.to_string())? == split;
    }
    let path = dir.path().join("checkpoint");
    a.checkpoint.save(&path).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    let ckpt_rt = loaded == a.checkpoint && loaded.to_bytes() == a.checkpoint.to_bytes();
    check(
        same_logs && data_rt && ckpt_rt,
        format!("identical logs over {} epochs; dataset and checkpoint round-trips bit-exact", cfg.epochs),
        format!("logs identical {same_logs}, dataset round-trip {data_rt}, checkpoint round-trip {ckpt_rt}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("allocation exactness", allocation_exactness),
        ("clustering layer", clustering_layer),
        ("momentum semantics", momentum_semantics),
        ("metric oracles", metric_oracles),
        ("loss values", loss_values),
        ("end-to-end learnability", learnability),
        ("analysis fidelity", analysis_fidelity),
        ("determinism and round-trips", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(m) => println!("criterion {} ({name}): PASS - {m}", i + 1),
            Err(m) => {
                failed += 1;
                println!("criterion {} ({name}): FAIL - {m}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
