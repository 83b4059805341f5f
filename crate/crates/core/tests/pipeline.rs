//! Generate → write → reload → train → checkpoint → evaluate.

use autotask::checkpoint;
use autotask::data::{generate_synthetic, load_csv, write_split_data, Split, SyntheticSpec};
use autotask::eval::{evaluate, fit_calibration, score_dataset, EvalOptions};
use autotask::calibration::PlattFit;
use autotask::train::{fit_dataset_norm, train, TrainPlan};
use autotask::{AutoTaskModel, ModelConfig};

#[test]
fn end_to_end() {
    let spec = SyntheticSpec {
        n_tasks: 3,
        d_raw: 5,
        task_rows: vec![300, 300, 300, 200],
        unseen_tasks: 1,
        noise: 0.05,
        seed: 12,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_split_data(dir.path(), &data, &spec).unwrap();
    let train_rows = load_csv(&dir.path().join(Split::Train.file_name())).unwrap();
    let test = load_csv(&dir.path().join(Split::Test.file_name())).unwrap();
    let calib = load_csv(&dir.path().join(Split::Calibration.file_name())).unwrap();
    assert_eq!(train_rows, data.train);
    assert!(train_rows.task_ids().iter().all(|&t| t <= 3));

    let plan = TrainPlan {
        phase1_epochs: 3,
        phase2_epochs: 6,
        batch_size: 32,
        block_len: 8,
        seed: 12,
        ..TrainPlan::default()
    };
    let norm = fit_dataset_norm(&train_rows).unwrap();
    let mut model = AutoTaskModel::new(ModelConfig::new(6, 3, 4, 8), norm, 12).unwrap();
    let report = train(&mut model, &train_rows, Some(&calib), &plan).unwrap();
    assert!(report.final_loss().unwrap() < report.history[0].loss);

    let path = dir.path().join("model.ckpt");
    checkpoint::save(&path, &model, &report.info(12), Some(&report.optimizer)).unwrap();
    let loaded = checkpoint::load_expecting(&path, &model.config).unwrap().model;
    assert_eq!(score_dataset(&model, &test, 1).unwrap(), score_dataset(&loaded, &test, 1).unwrap());

    let eval = evaluate(&loaded, "full", &test, &EvalOptions::default()).unwrap();
    assert_eq!(eval.unseen_task_ids, vec![4]);
    assert!(eval.tasks[&4].unseen);
    for t in 1..=3 {
        assert!(eval.tasks[&t].roc_auc.unwrap() > 0.7, "task {t}: {:?}", eval.tasks[&t]);
    }

    // Calibration is monotone per task, so per-task ROC AUC is unchanged.
    let params = fit_calibration(&loaded, &calib, &PlattFit::default()).unwrap();
    let calibrated = evaluate(&loaded, "full", &test, &EvalOptions { block_len: None, calibration: Some(&params) }).unwrap();
    for (t, m) in &eval.tasks {
        let (a, b) = (m.roc_auc.unwrap(), calibrated.tasks[t].roc_auc.unwrap());
        if params.get(*t).a > 0.0 {
            assert!((a - b).abs() <= 1e-9, "task {t}: {a} vs {b}");
        }
    }
}
