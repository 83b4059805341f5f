//! Per-task evaluation reports and the ROC-over-PR comparison table.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::baseline::BaselineDnn;
use crate::calibration::{fit_platt, CalibrationParams, PlattFit};
use crate::data::{Dataset, LabelSource};
use crate::encoding::FeatureBatch;
use crate::error::{ConfigError, Result};
use crate::metrics::{accuracy, pr_auc, roc_auc};
use crate::model::{serving_task_id, AutoTaskModel};
use crate::tape::sigmoid_scalar;

/// Anything that maps a batch to one logit per row. Task IDs reaching
/// `logits` are already in `0..=n_tasks`.
pub trait Scorer {
    fn n_tasks(&self) -> usize;
    fn logits(&self, batch: &FeatureBatch, block_len: usize) -> Result<Vec<f32>>;
}

impl Scorer for AutoTaskModel {
    fn n_tasks(&self) -> usize {
        self.config.n_tasks
    }

    fn logits(&self, batch: &FeatureBatch, block_len: usize) -> Result<Vec<f32>> {
        Ok(self.predict(batch, block_len)?.logits)
    }
}

impl Scorer for BaselineDnn {
    fn n_tasks(&self) -> usize {
        self.config.n_tasks
    }

    /// The baseline has no block structure; `block_len` is ignored.
    fn logits(&self, batch: &FeatureBatch, _block_len: usize) -> Result<Vec<f32>> {
        BaselineDnn::logits(self, batch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub n: usize,
    pub positives: usize,
    /// `None` when the task has a single class.
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
    pub accuracy: f64,
    pub unseen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub tasks: BTreeMap<usize, TaskMetrics>,
    pub pooled: TaskMetrics,
    pub unseen_task_ids: Vec<usize>,
    pub block_len: usize,
    /// Set when `block_len > 1`: scores then depend on block neighbours and
    /// do not reflect single-example serving.
    pub diagnostic: bool,
    pub pr_auc_method: String,
    pub calibrated: bool,
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions<'a> {
    /// Facet-2 block length; anything above 1 is a diagnostic.
    pub block_len: Option<usize>,
    pub calibration: Option<&'a CalibrationParams>,
}

/// Logits for every row of `data` in order, with unseen task IDs served as 0.
/// With `block_len > 1`, trailing rows that do not fill a block are dropped.
pub fn score_dataset(scorer: &dyn Scorer, data: &Dataset, block_len: usize) -> Result<Vec<f32>> {
    if data.is_empty() {
        return Err(ConfigError::invalid("split", "evaluation split is empty").into());
    }
    if block_len == 0 {
        return Err(ConfigError::invalid("block_len", "must be at least 1").into());
    }
    let n = data.len() / block_len * block_len;
    if n == 0 {
        return Err(ConfigError::invalid("split", format!("fewer rows than one block of {block_len}")).into());
    }
    let n_tasks = scorer.n_tasks();
    let chunk = (1024 / block_len).max(1) * block_len;
    let idx: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(n);
    for part in idx.chunks(chunk) {
        let batch = data.batch(part, LabelSource::Hard, |id| serving_task_id(id, n_tasks))?;
        out.extend(scorer.logits(&batch, block_len)?);
    }
    Ok(out)
}

fn metrics(scores: &[f64], labels: &[f64], unseen: bool) -> TaskMetrics {
    TaskMetrics {
        n: labels.len(),
        positives: labels.iter().filter(|&&y| y == 1.0).count(),
        roc_auc: roc_auc(scores, labels).ok(),
        pr_auc: pr_auc(scores, labels).ok(),
        accuracy: accuracy(scores, labels).unwrap_or(f64::NAN),
        unseen,
    }
}

/// Scores `data` and groups metrics by task. Tasks with IDs above the
/// scorer's trained range are flagged unseen.
pub fn evaluate(scorer: &dyn Scorer, name: &str, data: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    let block_len = opts.block_len.unwrap_or(1);
    let logits = score_dataset(scorer, data, block_len)?;
    let rows = &data.rows[..logits.len()];
    let scores: Vec<f64> = rows
        .iter()
        .zip(&logits)
        .map(|(r, &z)| match opts.calibration {
            Some(c) => c.apply(r.task_id, f64::from(z)),
            None => sigmoid_scalar(f64::from(z)),
        })
        .collect();
    let labels: Vec<f64> = rows.iter().map(|r| f64::from(r.label)).collect();
    if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(ConfigError::invalid("label", format!("evaluation needs hard 0/1 labels, found {bad}")).into());
    }
    let n_tasks = scorer.n_tasks();
    let mut tasks = BTreeMap::new();
    for task in data.task_ids() {
        let (s, y): (Vec<f64>, Vec<f64>) = rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.task_id == task)
            .map(|(i, _)| (scores[i], labels[i]))
            .unzip();
        if !y.is_empty() {
            tasks.insert(task, metrics(&s, &y, task > n_tasks));
        }
    }
    let unseen_task_ids = tasks.keys().copied().filter(|&t| t > n_tasks).collect();
    Ok(EvalReport {
        model: name.to_string(),
        pooled: metrics(&scores, &labels, false),
        tasks,
        unseen_task_ids,
        block_len,
        diagnostic: block_len > 1,
        pr_auc_method: "average_precision".into(),
        calibrated: opts.calibration.is_some(),
    })
}

/// Fits one Platt map per trained task present in the calibration split.
pub fn fit_calibration(scorer: &dyn Scorer, calibration: &Dataset, fit: &PlattFit) -> Result<CalibrationParams> {
    let logits = score_dataset(scorer, calibration, 1)?;
    let mut params = CalibrationParams::default();
    for task in calibration.task_ids().into_iter().filter(|&t| (1..=scorer.n_tasks()).contains(&t)) {
        let (z, y): (Vec<f64>, Vec<f64>) = calibration
            .rows
            .iter()
            .zip(&logits)
            .filter(|(r, _)| r.task_id == task)
            .map(|(r, &z)| (f64::from(z), f64::from(r.label)))
            .unzip();
        params.tasks.insert(task, fit_platt(&z, &y, task, fit)?);
    }
    Ok(params)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}", 100.0 * v))
}

/// Renders reports as one aligned table: ROC AUC (%) rows in the upper panel,
/// PR AUC (%) rows in the lower panel, one column per task plus the pooled
/// score. Unseen tasks are marked with `*`.
pub fn render_table(reports: &[EvalReport]) -> String {
    let tasks: BTreeSet<usize> = reports.iter().flat_map(|r| r.tasks.keys().copied()).collect();
    let unseen: BTreeSet<usize> = reports.iter().flat_map(|r| r.unseen_task_ids.iter().copied()).collect();
    let mut header = vec!["metric".to_string(), "model".to_string()];
    header.extend(tasks.iter().map(|t| if unseen.contains(t) { format!("task {t}*") } else { format!("task {t}") }));
    header.push("pooled".into());

    let mut rows: Vec<Vec<String>> = Vec::new();
    for (label, pick) in [
        ("ROC AUC (%)", (|m: &TaskMetrics| m.roc_auc) as fn(&TaskMetrics) -> Option<f64>),
        ("PR AUC (%)", |m: &TaskMetrics| m.pr_auc),
    ] {
        for (i, r) in reports.iter().enumerate() {
            let mut row = vec![if i == 0 { label.to_string() } else { String::new() }, r.model.clone()];
            row.extend(tasks.iter().map(|t| cell(r.tasks.get(t).and_then(pick))));
            row.push(cell(pick(&r.pooled)));
            rows.push(row);
        }
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let fmt_row = |row: &[String]| -> String {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, v)| if c < 2 { format!("{v:<w$}", w = widths[c]) } else { format!("{v:>w$}", w = widths[c]) })
            .collect();
        cells.join("  ").trim_end().to_string()
    };
    let rule = "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1));
    let mut out = String::new();
    writeln!(out, "{}", fmt_row(&header)).unwrap();
    writeln!(out, "{rule}").unwrap();
    for (i, row) in rows.iter().enumerate() {
        if i == reports.len() {
            writeln!(out, "{rule}").unwrap();
        }
        writeln!(out, "{}", fmt_row(row)).unwrap();
    }
    if !unseen.is_empty() {
        writeln!(out, "* unseen task, served with task ID 0").unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::model::ModelConfig;
    use crate::train::fit_dataset_norm;

    fn setup() -> (AutoTaskModel, Dataset) {
        let spec = SyntheticSpec {
            n_tasks: 2,
            d_raw: 3,
            task_rows: vec![40, 40, 30],
            unseen_tasks: 1,
            seed: 3,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let norm = fit_dataset_norm(&data.train).unwrap();
        let mut model = AutoTaskModel::new(ModelConfig::new(4, 2, 2, 4), norm, 1).unwrap();
        model.perturb(0.2, 2);
        (model, data.test)
    }

    #[test]
    fn report_covers_every_task() {
        let (model, test) = setup();
        let r = evaluate(&model, "full", &test, &EvalOptions::default()).unwrap();
        assert_eq!(r.tasks.keys().copied().collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(r.unseen_task_ids, vec![3]);
        assert!(r.tasks[&3].unseen);
        assert_eq!(r.block_len, 1);
        assert!(!r.diagnostic);
        let again = evaluate(&model, "full", &test, &EvalOptions::default()).unwrap();
        assert_eq!(r, again);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["tasks"]["1"]["roc_auc"].is_number());
        assert_eq!(json["unseen_task_ids"][0], 3);
    }

    #[test]
    fn diagnostic_blocks_are_labelled() {
        let (model, test) = setup();
        let r = evaluate(&model, "full", &test, &EvalOptions { block_len: Some(4), calibration: None }).unwrap();
        assert!(r.diagnostic);
        assert_eq!(r.pooled.n, test.len() / 4 * 4);
    }

    #[test]
    fn calibration_keeps_auc() {
        let (model, test) = setup();
        let calib = fit_calibration(&model, &test.filter_tasks(|t| t <= 2), &PlattFit { steps: 300, ..PlattFit::default() }).unwrap();
        let plain = evaluate(&model, "m", &test, &EvalOptions::default()).unwrap();
        let cal = evaluate(&model, "m", &test, &EvalOptions { block_len: None, calibration: Some(&calib) }).unwrap();
        for (t, m) in &plain.tasks {
            if let (Some(a), Some(b)) = (m.roc_auc, cal.tasks[t].roc_auc) {
                if calib.get(*t).a > 0.0 {
                    assert!((a - b).abs() <= 1e-9);
                }
            }
        }
        assert!(cal.calibrated);
    }

    #[test]
    fn table_layout() {
        let (model, test) = setup();
        let a = evaluate(&model, "full", &test, &EvalOptions::default()).unwrap();
        let mut b = a.clone();
        b.model = "baseline".into();
        b.tasks.get_mut(&2).unwrap().roc_auc = None;
        let t = render_table(&[a, b]);
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[0].contains("task 3*"));
        assert!(lines[2].starts_with("ROC AUC (%)"));
        assert!(lines[3].contains("baseline") && lines[3].contains("n/a"));
        assert!(lines[5].starts_with("PR AUC (%)"));
        assert!(t.ends_with("task ID 0\n"));
    }
}
