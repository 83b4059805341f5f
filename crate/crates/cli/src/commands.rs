use std::fs;
use std::path::{Path, PathBuf};

use autotask::baseline::{baseline_for, train_baseline};
use autotask::calibration::PlattFit;
use autotask::checkpoint::{self, Checkpoint};
use autotask::data::{generate_synthetic, load_csv, read_manifest, write_split_data, Dataset, Split};
use autotask::eval::{evaluate, fit_calibration, render_table, EvalOptions, EvalReport};
use autotask::gradcheck::{check_primitive_ops, GradCheckConfig};
use autotask::model::serving_task_id;
use autotask::tape::OpKind;
use autotask::train::{fit_dataset_norm, train};
use autotask::{AutoTaskModel, FeatureBatch, ModelConfig, NormStats, Tensor, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::CliError;

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<PathBuf, CliError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    write_file(dir, name, &text)
}

fn data_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    cfg.path("data")
        .ok_or_else(|| CliError::Usage("missing --data DIR (a directory written by gen-data)".into()))
}

fn load_split(dir: &Path, split: Split) -> Result<Dataset, CliError> {
    Ok(load_csv(&dir.join(split.file_name()))?)
}

fn load_checkpoint(cfg: &RunConfig) -> Result<Checkpoint, CliError> {
    let path = cfg
        .path("checkpoint")
        .ok_or_else(|| CliError::Usage("missing --checkpoint PATH".into()))?;
    Ok(checkpoint::load(&path)?)
}

/// Trained task count: the manifest's list if present, else `n_tasks` from
/// the configuration, else the largest ID in the training split.
fn trained_tasks(cfg: &RunConfig, dir: &Path, train: &Dataset) -> Result<usize, CliError> {
    if dir.join("manifest.json").exists() {
        return Ok(read_manifest(dir)?.trained_task_ids.len());
    }
    if cfg.is_set("n_tasks") {
        return cfg.get_or("n_tasks", 0);
    }
    Ok(train.task_ids().into_iter().max().unwrap_or(0))
}

fn check_width(model: &AutoTaskModel, d_raw: usize) -> Result<(), CliError> {
    let expected = model.config.d - 1;
    if d_raw != expected {
        return Err(CliError::Usage(format!(
            "checkpoint expects d - 1 = {expected} features per row, the data has {d_raw}"
        )));
    }
    Ok(())
}

/// Parameter count with the closed-form breakdown per component.
fn describe_params(config: &ModelConfig) -> String {
    let (f1, f2) = (config.facet1(), config.facet2());
    let h = config.fusion_hidden;
    let fusion = 2 * config.e2 * h + 2 * h + 1;
    format!(
        "parameters {} = facet1 {} + facet2 {} + fusion {}\n  \
         block: in*e + e + max_seq*e + layers*(12e^2 + 13e); fusion: 2*e2*h + 2h + 1\n  \
         facet1: in={} e={} max_seq={} layers={}; facet2: in={} e={} max_seq={} layers={}; h={}",
        config.param_count(),
        f1.param_count(),
        f2.param_count(),
        fusion,
        f1.in_dim,
        f1.embed_dim,
        f1.max_seq,
        f1.layers,
        f2.in_dim,
        f2.embed_dim,
        f2.max_seq,
        f2.layers,
        h
    )
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let spec = cfg.synthetic_spec()?;
    let data = generate_synthetic(&spec)?;
    let manifest = write_split_data(out, &data, &spec)?;
    for f in &manifest.files {
        println!("{:<12} {:>7} rows  {}", format!("{:?}", f.split).to_lowercase(), f.rows, out.join(&f.path).display());
    }
    println!(
        "tasks: {} trained {:?}, unseen {:?}",
        spec.total_tasks(),
        manifest.trained_task_ids,
        manifest.unseen_task_ids
    );
    Ok(())
}

pub fn train_cmd(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let dir = data_dir(cfg)?;
    let train_data = load_split(&dir, Split::Train)?;
    let calibration = dir.join(Split::Calibration.file_name());
    let validation = match calibration.exists() {
        true => Some(load_csv(&calibration)?).filter(|d| !d.is_empty()),
        false => None,
    };
    let n_tasks = trained_tasks(cfg, &dir, &train_data)?;
    let plan = cfg.train_plan()?;
    let config = cfg.model_config(train_data.d_raw + 1, n_tasks)?;
    if plan.phase1_epochs > 0 && !train_data.has_soft_labels() {
        return Err(CliError::key(
            "phase1_epochs",
            "the soft-label phase needs a soft_label column in train.csv; set phase1_epochs=0 to train on hard labels only",
        ));
    }
    let norm = fit_dataset_norm(&train_data)?;
    let mut model = AutoTaskModel::new(config, norm, plan.seed)?;
    println!("{}", describe_params(&model.config));
    let report = train(&mut model, &train_data, validation.as_ref(), &plan)?;

    let ckpt = out.join("model.ckpt");
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    checkpoint::save(&ckpt, &model, &report.info(plan.seed), Some(&report.optimizer))?;
    let mut log = String::from("epoch,labels,loss,validation_loss\n");
    for e in &report.history {
        let v = e.validation_loss.map(|v| v.to_string()).unwrap_or_default();
        log.push_str(&format!("{},{:?},{},{v}\n", e.epoch, e.labels, e.loss).to_lowercase());
    }
    write_file(out, "loss.csv", &log)?;
    write_json(
        out,
        "train.json",
        &json!({
            "keys": cfg.to_json(),
            "model": model.config,
            "plan": plan,
            "parameters": model.param_count(),
            "history": report.history,
        }),
    )?;
    let last = report.final_loss().unwrap_or(f64::NAN);
    println!("final BCE {last:.6} after {} epochs", report.history.len());
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

pub fn eval_cmd(cfg: &RunConfig, out: &Path, split: Split, calibrate: bool) -> Result<(), CliError> {
    let loaded = load_checkpoint(cfg)?;
    let model = &loaded.model;
    let dir = data_dir(cfg)?;
    let data = load_split(&dir, split)?;
    check_width(model, data.d_raw)?;
    let calibration = if calibrate {
        let calib = load_split(&dir, Split::Calibration)?;
        check_width(model, calib.d_raw)?;
        Some(fit_calibration(model, &calib, &PlattFit::default())?)
    } else {
        None
    };
    let opts = EvalOptions {
        block_len: None,
        calibration: calibration.as_ref(),
    };
    let report = evaluate(model, model.config.variant.name(), &data, &opts)?;
    let table = render_table(std::slice::from_ref(&report));
    print!("{table}");
    if !report.unseen_task_ids.is_empty() {
        println!("unseen_task_ids {:?}", report.unseen_task_ids);
    }
    write_file(out, "eval.txt", &table)?;
    write_json(
        out,
        "eval.json",
        &json!({
            "keys": cfg.to_json(),
            "model": model.config,
            "split": split,
            "tasks": report.tasks,
            "pooled": report.pooled,
            "unseen_task_ids": report.unseen_task_ids,
            "block_len": report.block_len,
            "pr_auc_method": report.pr_auc_method,
            "calibrated": report.calibrated,
            "calibration": calibration,
        }),
    )?;
    Ok(())
}

fn parse_features(s: &str) -> Result<Vec<f32>, CliError> {
    s.split(',')
        .enumerate()
        .map(|(i, v)| {
            v.trim()
                .parse::<f32>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| CliError::key("features", format!("value {} ({v:?}) is not a finite number", i + 1)))
        })
        .collect()
}

/// Reads `task_id,f1,…,fk` rows; any `label` or `soft_label` column is
/// ignored.
fn read_unlabeled(path: &Path) -> Result<(Vec<usize>, Vec<Vec<f32>>), CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::io(path, std::io::Error::other(e)))?;
    let bad = |line: u64, reason: String| CliError::Usage(format!("{}: line {line}: {reason}", path.display()));
    let header = reader.headers().map_err(|e| bad(1, e.to_string()))?.clone();
    let task_col = header
        .iter()
        .position(|h| h == "task_id")
        .ok_or_else(|| bad(1, "missing task_id column".into()))?;
    let feature_cols: Vec<usize> = (1..)
        .map_while(|i| header.iter().position(|h| h == format!("f{i}")))
        .collect();
    if feature_cols.is_empty() {
        return Err(bad(1, "no feature columns f1, f2, ...".into()));
    }
    let (mut ids, mut rows) = (Vec::new(), Vec::new());
    for rec in reader.records() {
        let rec = rec.map_err(|e| bad(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let id = rec[task_col]
            .parse::<usize>()
            .map_err(|_| bad(line, format!("task_id {:?} is not a non-negative integer", &rec[task_col])))?;
        let row = feature_cols
            .iter()
            .map(|&c| {
                rec[c]
                    .parse::<f32>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| bad(line, format!("column {}: {:?} is not a finite number", &header[c], &rec[c])))
            })
            .collect::<Result<Vec<_>, _>>()?;
        ids.push(id);
        rows.push(row);
    }
    Ok((ids, rows))
}

pub fn predict_cmd(cfg: &RunConfig, features: Option<&str>, task_id: Option<usize>, input: Option<&Path>) -> Result<(), CliError> {
    let loaded = load_checkpoint(cfg)?;
    let model = &loaded.model;
    let (ids, rows) = match (features, input) {
        (Some(f), None) => {
            let id = task_id.ok_or_else(|| CliError::Usage("--features needs --task-id (0 for an unknown task)".into()))?;
            (vec![id], vec![parse_features(f)?])
        }
        (None, Some(path)) => read_unlabeled(path)?,
        _ => return Err(CliError::Usage("give exactly one of --features or --input".into())),
    };
    if rows.is_empty() {
        return Err(CliError::Usage("no rows to score".into()));
    }
    let expected = model.config.d - 1;
    if let Some(bad) = rows.iter().find(|r| r.len() != expected) {
        return Err(CliError::key(
            "features",
            format!("expected d - 1 = {expected} features, got {}", bad.len()),
        ));
    }
    let n_tasks = model.config.n_tasks;
    for &id in ids.iter().filter(|&&id| id > n_tasks) {
        log::warn!("task {id} was not trained; scoring it as unknown task 0");
    }
    let ids: Vec<usize> = ids.iter().map(|&id| serving_task_id(id, n_tasks)).collect();
    let flat: Vec<f32> = rows.concat();
    let x = Tensor::new(vec![rows.len(), expected], flat).map_err(autotask::Error::from)?;
    let batch = FeatureBatch::unlabeled(x, ids).map_err(autotask::Error::from)?;
    let pred = model.predict(&batch, 1)?;
    for s in pred.scores {
        println!("{s:.6}");
    }
    Ok(())
}

pub fn gradcheck_cmd(cfg: &RunConfig, fault: Option<&str>) -> Result<(), CliError> {
    let fault = fault
        .map(|name| OpKind::from_name(name).ok_or_else(|| CliError::key("corrupt-backward", format!("unknown op {name:?}"))))
        .transpose()?;
    let seed = cfg.seed()?;
    let d_raw = cfg.get_or("d_raw", 5)?;
    let n_tasks = cfg.get_or("n_tasks", 3)?;
    let block_len = cfg.get_or("block_len", 4)?;
    let b = cfg.get_or("batch_size", 8)?;
    if b == 0 || b % block_len != 0 {
        return Err(CliError::key("batch_size", format!("{b} is not a positive multiple of block_len {block_len}")));
    }
    let mut config = cfg.model_config(d_raw + 1, n_tasks)?;
    config.block_len = block_len;
    let mut model = AutoTaskModel::new(config, NormStats::identity(d_raw + 1), seed)?;
    // Move away from the tiny initialization so gradients are well above the
    // relative-error floor.
    model.perturb(0.3, seed);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::<f32>::randn(&[b, d_raw], 1.0, &mut rng);
    let ids: Vec<usize> = (0..b).map(|_| rng.random_range(0..=n_tasks)).collect();
    let targets: Vec<f32> = (0..b).map(|_| f32::from(u8::from(rng.random_bool(0.5)))).collect();
    let batch = FeatureBatch::new(x, ids, targets.clone()).map_err(autotask::Error::from)?;

    let gc = GradCheckConfig {
        samples: Some(200),
        seed,
        fault,
        ..GradCheckConfig::default()
    };
    let mut failed = Vec::new();
    for (op, r) in check_primitive_ops(&gc)? {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!("op {:<16} {status}  worst rel err {:.3e} over {} coords", op.name(), r.worst_rel_err(), r.checked);
        if !r.passed() && !failed.contains(&op.name()) {
            failed.push(op.name());
        }
    }
    let r = model.grad_check(&batch, &targets, block_len, &gc)?;
    let worst = r.worst.as_ref().map_or(String::new(), |w| format!(" at {}[{}]", w.tensor, w.index));
    println!(
        "model {:<13} {}  worst rel err {:.3e}{worst} over {} coords (tol {:.0e}, h {:.0e})",
        "",
        if r.passed() { "PASS" } else { "FAIL" },
        r.worst_rel_err(),
        r.checked,
        gc.tol,
        gc.h
    );
    if failed.is_empty() && r.passed() {
        println!("PASS worst rel err {:.3e}", r.worst_rel_err());
        Ok(())
    } else if failed.is_empty() {
        println!("FAIL model gradient");
        Err(CliError::GradCheck("model gradient disagrees with finite differences".into()))
    } else {
        println!("FAIL op {}", failed.join(", "));
        Err(CliError::GradCheck(format!("backward of {} disagrees with finite differences", failed.join(", "))))
    }
}

fn pair_accuracy(report: &EvalReport) -> String {
    report
        .tasks
        .iter()
        .map(|(t, m)| format!("{t}:{:.3}", m.accuracy))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn ablate_cmd(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let dir = data_dir(cfg)?;
    let train_data = load_split(&dir, Split::Train)?;
    let test = load_split(&dir, Split::Test)?;
    let n_tasks = trained_tasks(cfg, &dir, &train_data)?;
    let plan = cfg.train_plan()?;
    let opts = EvalOptions::default();
    let mut reports = Vec::new();
    let mut configs = Vec::new();
    for variant in [Variant::Full, Variant::TaskIdNumber, Variant::NoTaskId] {
        let config = cfg.model_config(train_data.d_raw + 1, n_tasks)?.with_variant(variant);
        log::info!("training {variant}");
        let mut model = AutoTaskModel::new(config, fit_dataset_norm(&train_data)?, plan.seed)?;
        train(&mut model, &train_data, None, &plan)?;
        reports.push(evaluate(&model, variant.name(), &test, &opts)?);
        configs.push(model.config);
    }
    log::info!("training baseline");
    let mut baseline = baseline_for(&train_data, n_tasks, plan.seed)?;
    train_baseline(&mut baseline, &train_data, &plan)?;
    reports.push(evaluate(&baseline, "baseline", &test, &opts)?);

    let table = render_table(&reports);
    print!("{table}");
    for r in &reports {
        println!("accuracy {:<15} {}  pooled:{:.3}", r.model, pair_accuracy(r), r.pooled.accuracy);
    }
    write_file(out, "ablate.txt", &table)?;
    write_json(
        out,
        "ablate.json",
        &json!({
            "keys": cfg.to_json(),
            "plan": plan,
            "models": configs,
            "baseline": baseline.config,
            "reports": reports,
        }),
    )?;
    Ok(())
}
