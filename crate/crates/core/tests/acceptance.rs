//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! Run a subset with `cargo test -p autotask --test acceptance -- 3 7`.

use std::time::{Duration, Instant};

use autotask::baseline::{baseline_for, train_baseline};
use autotask::checkpoint::{self, TrainingInfo};
use autotask::data::{generate_synthetic, Dataset, SplitData, SyntheticSpec};
use autotask::encoding::{one_hot_tasks, FeatureBatch, Variant};
use autotask::eval::{evaluate, render_table, score_dataset, EvalOptions, EvalReport};
use autotask::gradcheck::GradCheckConfig;
use autotask::metrics::{accuracy, pr_auc, roc_auc, MetricError};
use autotask::model::{facet1_forward, facet2_forward, prepare_inputs, task_blocks, AutoTaskModel, ModelConfig};
use autotask::optim::AdamConfig;
use autotask::tape::Tape;
use autotask::train::{fit_dataset_norm, train, TrainPlan};
use autotask::{ConfigError, Error, NormStats, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit: Duration) -> bool {
    elapsed < limit
}

fn random_batch(b: usize, d_raw: usize, n_tasks: usize, rng: &mut ChaCha8Rng) -> FeatureBatch {
    let x = Tensor::<f32>::randn(&[b, d_raw], 1.0, rng);
    let ids = (0..b).map(|_| rng.random_range(0..=n_tasks)).collect();
    let labels = (0..b).map(|_| f32::from(u8::from(rng.random::<bool>()))).collect();
    FeatureBatch::new(x, ids, labels).unwrap()
}

fn random_norm(d: usize, rng: &mut ChaCha8Rng) -> NormStats {
    NormStats {
        mean: (0..d).map(|_| rng.random_range(-0.5..0.5)).collect(),
        std: (0..d).map(|_| rng.random_range(0.5..2.0)).collect(),
    }
}

fn shapes() -> Verdict {
    let start = Instant::now();
    let (b, d, n, e1, t) = (8, 10, 11, 4, 4);
    let config = ModelConfig::new(d, n, e1, t);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = AutoTaskModel::new(config.clone(), NormStats::identity(d), 1).unwrap();
    let batch = random_batch(b, d - 1, n, &mut rng);
    let inputs = prepare_inputs::<f32>(&config, &model.norm, &batch).unwrap();
    let mut tape = Tape::new();
    let vars = model.store.register(&mut tape, false);
    let tokens = tape.constant(inputs.encoded.tokens.clone());
    let x = tape.constant(inputs.x.clone());
    let t1 = facet1_forward(&mut tape, &vars, &model.layout, tokens).unwrap();
    let blocks = task_blocks(&mut tape, x, t).unwrap();
    let t2 = facet2_forward(&mut tape, &vars, &model.layout, x, t).unwrap();
    let got = [
        inputs.encoded.tokens.shape().to_vec(),
        tape.shape(t1).to_vec(),
        tape.shape(blocks).to_vec(),
        tape.shape(t2).to_vec(),
    ];
    let want = [vec![8, 10, 12], vec![8, 40], vec![2, 4, 10], vec![8, 40]];
    let elapsed = start.elapsed();
    verdict(
        got == want && config.e2 == 40 && within(elapsed, Duration::from_secs(1)),
        format!("encoded {:?}, T1 {:?}, blocks {:?}, T2 {:?} in {elapsed:.2?}", got[0], got[1], got[2], got[3]),
    )
}

fn gradient_check() -> Verdict {
    let start = Instant::now();
    let (d, n, e1, t, b) = (6, 3, 4, 4, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let norm = random_norm(d, &mut rng);
    let mut model = AutoTaskModel::new(ModelConfig::new(d, n, e1, t), norm, 2).unwrap();
    // Move away from the tiny initialization so gradients are well above
    // the denominator floor.
    model.perturb(0.3, 3);
    let batch = random_batch(b, d - 1, n, &mut rng);
    let cfg = GradCheckConfig {
        samples: Some(200),
        seed: 4,
        ..GradCheckConfig::default()
    };
    let report = model.grad_check(&batch, &batch.labels.clone(), t, &cfg).unwrap();
    let elapsed = start.elapsed();
    let worst = report.worst_rel_err();
    verdict(
        report.checked == 200 && cfg.h == 1e-5 && worst < 1e-4 && within(elapsed, Duration::from_secs(30)),
        format!("{} coordinates, worst relative error {worst:.2e} in {elapsed:.2?}", report.checked),
    )
}

fn causality() -> Verdict {
    let (t, d, n) = (8, 7, 4);
    let mut worst_serving = 0f32;
    let mut worst_prefix = 0f32;
    for trial in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
        let norm = random_norm(d, &mut rng);
        let mut model = AutoTaskModel::new(ModelConfig::new(d, n, 4, t), norm, trial).unwrap();
        model.perturb(0.5, 1000 + trial);
        let batch = random_batch(2 * t, d - 1, n, &mut rng);
        let blocked = model.predict(&batch, t).unwrap().scores;
        let single = model.predict(&batch, 1).unwrap().scores;
        for k in [0, t] {
            worst_serving = worst_serving.max((blocked[k] - single[k]).abs());
        }
        let j = rng.random_range(0..t - 1);
        let mut mutated = batch.clone();
        let width = d - 1;
        for row in (j + 1..t).chain(t + j + 1..2 * t) {
            for c in 0..width {
                mutated.features.data_mut()[row * width + c] += rng.random_range(-3.0..3.0);
            }
            mutated.task_ids[row] = rng.random_range(0..=n);
        }
        let after = model.predict(&mutated, t).unwrap().scores;
        for row in (0..=j).chain(t..=t + j) {
            worst_prefix = worst_prefix.max((after[row] - blocked[row]).abs());
        }
    }
    verdict(
        worst_serving <= 1e-6 && worst_prefix <= 1e-6,
        format!("position-0 vs single max |Δ| {worst_serving:.1e}, prefix under suffix mutation max |Δ| {worst_prefix:.1e}"),
    )
}

fn embed_constraint() -> Verdict {
    let mut config = ModelConfig::new(6, 3, 4, 4);
    config.e2 = 20;
    let bad = AutoTaskModel::new(config, NormStats::identity(6), 0);
    let good = AutoTaskModel::new(ModelConfig::new(6, 3, 4, 4), NormStats::identity(6), 0);
    let pass = matches!(bad, Err(Error::Config(ConfigError::EmbedMismatch { .. }))) && good.is_ok();
    let msg = bad.err().map(|e| e.to_string()).unwrap_or_default();
    verdict(pass, format!("e2 = 20 with d·e1 = 24 rejected: {msg}"))
}

/// O(n²) pair counting.
fn roc_oracle(s: &[f64], y: &[f64]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0usize);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] == 1.0 && y[j] == 0.0 {
                pairs += 1;
                wins += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

/// Direct enumeration: rank positives by descending score, ties in input
/// order, and average the precision at each positive.
fn ap_oracle(s: &[f64], y: &[f64]) -> Option<f64> {
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
    let positives = y.iter().filter(|&&v| v == 1.0).count();
    if positives == 0 {
        return None;
    }
    let mut precisions = Vec::new();
    for k in 0..order.len() {
        if y[order[k]] == 1.0 {
            let top = &order[..=k];
            precisions.push(top.iter().filter(|&&i| y[i] == 1.0).count() as f64 / top.len() as f64);
        }
    }
    Some(precisions.iter().sum::<f64>() / positives as f64)
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst_roc, mut worst_pr) = (0f64, 0f64);
    let mut mismatched = 0;
    let mut undefined = 0;
    for k in 0..1000 {
        let levels = rng.random_range(2..30);
        let s: Vec<f64> = (0..100).map(|_| f64::from(rng.random_range(0..levels)) / f64::from(levels)).collect();
        // Every 50th instance is single-class to exercise rejection.
        let y: Vec<f64> = match k % 50 {
            0 => vec![0.0; 100],
            1 => vec![1.0; 100],
            _ => (0..100).map(|_| f64::from(u8::from(rng.random::<f64>() < 0.3))).collect(),
        };
        match (roc_auc(&s, &y), roc_oracle(&s, &y)) {
            (Ok(a), Some(b)) => worst_roc = worst_roc.max((a - b).abs()),
            (Err(MetricError::Undefined { .. }), None) => undefined += 1,
            _ => mismatched += 1,
        }
        match (pr_auc(&s, &y), ap_oracle(&s, &y)) {
            (Ok(a), Some(b)) => worst_pr = worst_pr.max((a - b).abs()),
            (Err(MetricError::Undefined { .. }), None) => undefined += 1,
            _ => mismatched += 1,
        }
    }
    verdict(
        worst_roc <= 1e-9 && worst_pr <= 1e-9 && mismatched == 0 && undefined == 60,
        format!("max |Δ| ROC {worst_roc:.1e}, PR {worst_pr:.1e}; {undefined} single-class rejections, {mismatched} mismatches"),
    )
}

fn overfit_fixture() -> (Dataset, AutoTaskModel, TrainPlan) {
    let spec = SyntheticSpec {
        n_tasks: 3,
        d_raw: 4,
        task_rows: vec![20; 3],
        unseen_tasks: 0,
        noise: 0.0,
        train_frac: 1.0,
        calibration_frac: 0.0,
        seed: 6,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec).unwrap().train;
    let norm = fit_dataset_norm(&data).unwrap();
    let model = AutoTaskModel::new(ModelConfig::new(5, 3, 8, 4), norm, 6).unwrap();
    let plan = TrainPlan {
        phase1_epochs: 0,
        phase2_epochs: 200,
        batch_size: 4,
        block_len: 4,
        seed: 6,
        adam: AdamConfig::default(),
        ..TrainPlan::default()
    };
    (data, model, plan)
}

fn overfit() -> Verdict {
    let start = Instant::now();
    let (data, m0, plan) = overfit_fixture();
    let mut a = m0.clone();
    let mut b = m0;
    let ra = train(&mut a, &data, None, &plan).unwrap();
    let rb = train(&mut b, &data, None, &plan).unwrap();
    let elapsed = start.elapsed();
    let loss = ra.final_loss().unwrap();
    let same = ra.history == rb.history && a.store == b.store;
    // Smoothed loss (window 10) should fall in at least 90% of windows.
    let losses: Vec<f64> = ra.history.iter().map(|e| e.loss).collect();
    let smooth: Vec<f64> = losses.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    let falling = smooth.windows(2).filter(|w| w[1] <= w[0]).count() as f64 / (smooth.len() - 1) as f64;
    verdict(
        loss < 0.05 && same && falling >= 0.9 && within(elapsed, Duration::from_secs(120)),
        format!(
            "final BCE {loss:.4} after {} epochs (lr {}), deterministic: {same}, smoothed decrease {:.0}%, two runs in {elapsed:.1?}",
            plan.epochs(),
            plan.adam.lr,
            100.0 * falling
        ),
    )
}

fn conflict_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_tasks: 2,
        d_raw: 8,
        task_rows: vec![2000, 2000],
        unseen_tasks: 0,
        noise: 0.05,
        conflict_pairs: vec![(1, 2)],
        seed,
        ..SyntheticSpec::default()
    }
}

fn conflict_plan(seed: u64) -> TrainPlan {
    TrainPlan {
        phase1_epochs: 10,
        phase2_epochs: 20,
        batch_size: 64,
        block_len: 8,
        seed,
        ..TrainPlan::default()
    }
}

fn fit(data: &SplitData, n_tasks: usize, d_raw: usize, variant: Variant, plan: &TrainPlan) -> AutoTaskModel {
    let norm = fit_dataset_norm(&data.train).unwrap();
    let config = ModelConfig::new(d_raw + 1, n_tasks, 4, plan.block_len).with_variant(variant);
    let mut model = AutoTaskModel::new(config, norm, plan.seed).unwrap();
    train(&mut model, &data.train, None, plan).unwrap();
    model
}

fn task_accuracy(model: &AutoTaskModel, data: &Dataset, task: usize) -> f64 {
    let rows = data.filter_tasks(|t| t == task);
    let logits = score_dataset(model, &rows, 1).unwrap();
    let s: Vec<f64> = logits.iter().map(|&z| if z >= 0.0 { 1.0 } else { 0.0 }).collect();
    accuracy(&s, &rows.hard_labels().iter().map(|&y| f64::from(y)).collect::<Vec<_>>()).unwrap()
}

struct ConflictRun {
    full: EvalReport,
    blind: EvalReport,
    acc: [f64; 2],
    pooled_blind: f64,
    /// ROC AUC of the true Bayes margin on the same test rows.
    bayes: [f64; 2],
}

fn bayes_auc(spec: &SyntheticSpec, data: &Dataset, task: usize) -> f64 {
    let w = &spec.task_weights()[task - 1];
    let rows = data.filter_tasks(|t| t == task);
    let margin: Vec<f64> = rows.rows.iter().map(|r| r.features.iter().zip(w).map(|(&x, &wi)| f64::from(x) * wi).sum()).collect();
    let y: Vec<f64> = rows.hard_labels().iter().map(|&v| f64::from(v)).collect();
    roc_auc(&margin, &y).unwrap()
}

fn conflict_run() -> ConflictRun {
    let spec = conflict_spec(7);
    let data = generate_synthetic(&spec).unwrap();
    let plan = conflict_plan(7);
    let full = fit(&data, 2, spec.d_raw, Variant::Full, &plan);
    let blind = fit(&data, 2, spec.d_raw, Variant::NoTaskId, &plan);
    let opts = EvalOptions::default();
    ConflictRun {
        acc: [task_accuracy(&full, &data.test, 1), task_accuracy(&full, &data.test, 2)],
        pooled_blind: evaluate(&blind, "no_task_id", &data.test, &opts).unwrap().pooled.accuracy,
        full: evaluate(&full, "full", &data.test, &opts).unwrap(),
        blind: evaluate(&blind, "no_task_id", &data.test, &opts).unwrap(),
        bayes: [bayes_auc(&spec, &data.test, 1), bayes_auc(&spec, &data.test, 2)],
    }
}

fn conflict(run: &ConflictRun, elapsed: Duration) -> Verdict {
    let roc: Vec<f64> = [1, 2].iter().map(|t| run.full.tasks[t].roc_auc.unwrap_or(0.0)).collect();
    let pass = run.acc.iter().all(|&a| a >= 0.9)
        && roc.iter().all(|&r| r >= 0.95)
        && run.pooled_blind <= 0.55
        && within(elapsed, Duration::from_secs(600));
    verdict(
        pass,
        format!(
            "full accuracy {:.3}/{:.3}, ROC AUC {:.3}/{:.3} (Bayes rule on the same rows {:.3}/{:.3}); no_task_id pooled accuracy {:.3}; {elapsed:.1?}",
            run.acc[0], run.acc[1], roc[0], roc[1], run.bayes[0], run.bayes[1], run.pooled_blind
        ),
    )
}

fn unseen_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_tasks: 4,
        d_raw: 6,
        task_rows: vec![600, 600, 600, 600, 400],
        unseen_tasks: 1,
        unseen_shared_rule: true,
        alpha: 1.0,
        beta: 0.8,
        noise: 0.05,
        seed,
        ..SyntheticSpec::default()
    }
}

fn unseen_plan(seed: u64) -> TrainPlan {
    TrainPlan {
        phase1_epochs: 5,
        phase2_epochs: 10,
        batch_size: 64,
        block_len: 8,
        seed,
        ..TrainPlan::default()
    }
}

fn unseen() -> Verdict {
    // Serving path: ID 0 scores and its one-hot channel is all zero.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = AutoTaskModel::new(ModelConfig::new(5, 3, 4, 4), NormStats::identity(5), 8).unwrap();
    let mut batch = random_batch(4, 4, 3, &mut rng);
    batch.task_ids = vec![0, 1, 0, 3];
    let inputs = prepare_inputs::<f32>(&model.config, &model.norm, &batch).unwrap();
    let tokens = &inputs.encoded.tokens;
    let zero_channel = [0, 2].iter().all(|&k| (0..5).all(|j| (1..4).all(|c| tokens.at(&[k, j, c]) == 0.0)));
    let scored = model.predict(&batch, 1).map(|p| p.scores.iter().all(|s| s.is_finite())).unwrap_or(false);
    let onehot_zero = one_hot_tasks::<f32>(&[0], 3).unwrap().data().iter().all(|&v| v == 0.0);

    let mut wins = 0;
    let mut margins = Vec::new();
    for seed in 0..10 {
        let spec = unseen_spec(200 + seed);
        let data = generate_synthetic(&spec).unwrap();
        let plan = unseen_plan(200 + seed);
        let roc = |variant| {
            let m = fit(&data, 4, spec.d_raw, variant, &plan);
            evaluate(&m, "", &data.test, &EvalOptions::default()).unwrap().tasks[&5].roc_auc.unwrap()
        };
        let margin = roc(Variant::Full) - roc(Variant::TaskIdNumber);
        if margin > 0.0 {
            wins += 1;
        }
        margins.push(margin);
    }
    let shown: Vec<String> = margins.iter().map(|m| format!("{m:+.3}")).collect();
    verdict(
        zero_channel && scored && onehot_zero && wins >= 8,
        format!(
            "ID 0 scored: {scored}, one-hot zero: {}, full beats task_id_number on the unseen task in {wins}/10 seeds (ROC margins {})",
            zero_channel && onehot_zero,
            shown.join(" ")
        ),
    )
}

fn checkpoint_roundtrip() -> Verdict {
    let (data, mut model, plan) = overfit_fixture();
    let plan = TrainPlan { phase2_epochs: 5, ..plan };
    let report = train(&mut model, &data, None, &plan).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&path, &model, &report.info(plan.seed), Some(&report.optimizer)).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    let before = score_dataset(&model, &data, 1).unwrap();
    let after = score_dataset(&loaded.model, &data, 1).unwrap();
    let exact = before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits());

    let bytes = std::fs::read(&path).unwrap();
    let mut rejected = 0;
    let mut cases = 0;
    let mut corrupt = |name: &str, mutated: Vec<u8>| {
        cases += 1;
        let p = dir.path().join(name);
        std::fs::write(&p, mutated).unwrap();
        if checkpoint::load(&p).is_err() {
            rejected += 1;
        }
    };
    corrupt("truncated", bytes[..bytes.len() / 2].to_vec());
    let mut magic = bytes.clone();
    magic[1] ^= 0xFF;
    corrupt("magic", magic);
    let mut flipped = bytes.clone();
    let mid = bytes.len() * 3 / 4;
    flipped[mid] ^= 0x01;
    corrupt("flipped", flipped);
    let mut trailing = bytes.clone();
    trailing.extend_from_slice(b"junk");
    corrupt("trailing", trailing);
    corrupt("empty", Vec::new());
    let info_ok = loaded.training == TrainingInfo { ..report.info(plan.seed) };
    verdict(
        exact && info_ok && rejected == cases,
        format!("{} scores bit-identical: {exact}; corrupted files rejected {rejected}/{cases}", before.len()),
    )
}

fn baseline_parity(run: &ConflictRun) -> Verdict {
    let spec = conflict_spec(7);
    let data = generate_synthetic(&spec).unwrap();
    let plan = conflict_plan(7);
    let mut base = baseline_for(&data.train, 2, 7).unwrap();
    let trained = train_baseline(&mut base, &data.train, &plan).is_ok();
    let report = evaluate(&base, "baseline", &data.test, &EvalOptions::default()).unwrap();

    let uspec = unseen_spec(200);
    let udata = generate_synthetic(&uspec).unwrap();
    let mut ubase = baseline_for(&udata.train, 4, 9).unwrap();
    let utrained = train_baseline(&mut ubase, &udata.train, &unseen_plan(200)).is_ok();
    let ureport = evaluate(&ubase, "baseline", &udata.test, &EvalOptions::default()).unwrap();
    let ufull = fit(&udata, 4, uspec.d_raw, Variant::Full, &unseen_plan(200));
    let ufull_report = evaluate(&ufull, "full", &udata.test, &EvalOptions::default()).unwrap();

    let table = render_table(&[run.full.clone(), run.blind.clone(), report.clone()]);
    let utable = render_table(&[ufull_report, ureport.clone()]);
    println!("{table}");
    println!("{utable}");
    let lines: Vec<&str> = table.lines().collect();
    let roc_row = lines.iter().position(|l| l.starts_with("ROC AUC"));
    let pr_row = lines.iter().position(|l| l.starts_with("PR AUC"));
    let layout = matches!((roc_row, pr_row), (Some(r), Some(p)) if r < p)
        && lines.iter().filter(|l| l.contains("baseline")).count() == 2
        && utable.contains("task 5*");
    let base_roc: Vec<String> = [1, 2].iter().map(|t| format!("{:.3}", report.tasks[t].roc_auc.unwrap_or(f64::NAN))).collect();
    verdict(
        trained && utrained && layout && ureport.unseen_task_ids == vec![5],
        format!(
            "baseline trained on both fixtures; conflict ROC AUC {} next to full; ROC-upper/PR-lower table rendered",
            base_roc.join("/")
        ),
    )
}

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |id: u32| wanted.is_empty() || wanted.contains(&id);
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut record = |id: u32, name: &'static str, f: &mut dyn FnMut() -> Verdict| {
        if run(id) {
            let v = f();
            println!("[{}] {id:>2} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
            results.push((id, name, v));
        }
    };
    record(1, "shape contract", &mut shapes);
    record(2, "full-model gradient check", &mut gradient_check);
    record(3, "causality and serving equivalence", &mut causality);
    record(4, "e2 = d·e1 constraint", &mut embed_constraint);
    record(5, "metric oracles", &mut metric_oracles);
    record(6, "overfit fixture", &mut overfit);
    let mut conflict_cache = None;
    if run(7) || run(10) {
        let start = Instant::now();
        conflict_cache = Some((conflict_run(), start.elapsed()));
    }
    if let Some((c, elapsed)) = &conflict_cache {
        record(7, "conflicting-tasks ablation", &mut || conflict(c, *elapsed));
    }
    record(8, "unseen-task path", &mut unseen);
    record(9, "checkpoint round-trip", &mut checkpoint_roundtrip);
    if let Some((c, _)) = &conflict_cache {
        record(10, "baseline parity harness", &mut || baseline_parity(c));
    }
    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!("; failing: {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
