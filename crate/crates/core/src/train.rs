//! Two-phase training loop: soft labels first, then hard labels.

use serde::{Deserialize, Serialize};

use crate::checkpoint::TrainingInfo;
use crate::data::{make_blocks, Dataset, LabelSource};
use crate::encoding::{append_task_id, fit_norm_stats, NormStats};
use crate::error::{ConfigError, Error, Result};
use crate::model::{AutoTaskModel, ParamGroup};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    /// Epochs against soft labels; requires a soft_label column when > 0.
    pub phase1_epochs: usize,
    /// Epochs against hard labels.
    pub phase2_epochs: usize,
    /// Rows per optimizer step; a multiple of `block_len`.
    pub batch_size: usize,
    pub block_len: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub lr_facet1: Option<f64>,
    pub lr_facet2: Option<f64>,
    /// Evaluate the validation loss every this many epochs (0 disables).
    pub eval_every: usize,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            phase1_epochs: 30,
            phase2_epochs: 45,
            batch_size: 64,
            block_len: 8,
            seed: 0,
            adam: AdamConfig::default(),
            lr_facet1: None,
            lr_facet2: None,
            eval_every: 0,
        }
    }
}

impl TrainPlan {
    pub fn epochs(&self) -> usize {
        self.phase1_epochs + self.phase2_epochs
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.adam.validate()?;
        if self.block_len == 0 {
            return Err(ConfigError::invalid("block_len", "must be at least 1"));
        }
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(self.block_len) {
            return Err(ConfigError::invalid(
                "batch_size",
                format!("{} is not a positive multiple of block_len {}", self.batch_size, self.block_len),
            ));
        }
        for (field, lr) in [("lr_facet1", self.lr_facet1), ("lr_facet2", self.lr_facet2)] {
            if let Some(lr) = lr {
                if !(lr.is_finite() && lr >= 0.0) {
                    return Err(ConfigError::invalid(field, format!("{lr} must be finite and non-negative")));
                }
            }
        }
        Ok(())
    }

    fn epoch_seed(&self, epoch: usize) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub labels: LabelSource,
    /// Mean training loss over the epoch's steps.
    pub loss: f64,
    pub validation_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
    pub optimizer: Adam,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.history.last().map(|e| e.loss)
    }

    pub fn info(&self, seed: u64) -> TrainingInfo {
        TrainingInfo {
            seed,
            epoch: self.history.last().map_or(0, |e| e.epoch + 1),
            loss_history: self.history.iter().map(|e| e.loss).collect(),
        }
    }
}

/// Normalization statistics over the training rows with the task-ID column
/// appended.
pub fn fit_dataset_norm(data: &Dataset) -> Result<NormStats> {
    let batch = data.full_batch(LabelSource::Hard, |id| id)?;
    Ok(fit_norm_stats(&append_task_id(&batch))?)
}

/// Builds an optimizer with the plan's per-facet learning rates.
pub fn optimizer_for(model: &AutoTaskModel, plan: &TrainPlan) -> Result<Adam> {
    let mut adam = Adam::new(plan.adam, &model.store.shapes())?;
    for i in 0..model.store.len() {
        let lr = match model.layout.group_of(i) {
            ParamGroup::Facet1 => plan.lr_facet1,
            ParamGroup::Facet2 => plan.lr_facet2,
            ParamGroup::Fusion => None,
        };
        if let Some(lr) = lr {
            adam.set_lr(i, lr)?;
        }
    }
    Ok(adam)
}

pub fn train(model: &mut AutoTaskModel, data: &Dataset, validation: Option<&Dataset>, plan: &TrainPlan) -> Result<TrainReport> {
    let adam = optimizer_for(model, plan)?;
    resume(model, data, validation, plan, adam, 0)
}

/// Continues training from `start_epoch` with existing optimizer state.
///
/// If an epoch produces a non-finite loss or gradient, the parameters are
/// restored to their state at the start of that epoch and
/// [`Error::Diverged`] is returned.
pub fn resume(
    model: &mut AutoTaskModel,
    data: &Dataset,
    validation: Option<&Dataset>,
    plan: &TrainPlan,
    mut adam: Adam,
    start_epoch: usize,
) -> Result<TrainReport> {
    plan.validate()?;
    if plan.block_len > model.config.block_len {
        return Err(ConfigError::invalid(
            "block_len",
            format!("{} exceeds the model's maximum {}", plan.block_len, model.config.block_len),
        )
        .into());
    }
    if data.len() < plan.block_len {
        return Err(ConfigError::invalid("train", format!("{} rows cannot fill one block of {}", data.len(), plan.block_len)).into());
    }
    let soft = data.has_soft_labels();
    if plan.phase1_epochs > start_epoch && !soft {
        return Err(ConfigError::invalid(
            "phase1_epochs",
            "soft-label phase requested but the training data has no soft_label column",
        )
        .into());
    }
    let blocks_per_step = plan.batch_size / plan.block_len;
    let mut history = Vec::new();
    for epoch in start_epoch..plan.epochs() {
        let labels = if epoch < plan.phase1_epochs {
            LabelSource::Soft
        } else {
            LabelSource::Hard
        };
        let snapshot = model.store.clone();
        let blocks = make_blocks(data.len(), plan.block_len, plan.epoch_seed(epoch))?;
        let mut total = 0.0f64;
        let mut steps = 0usize;
        let outcome: Result<()> = (|| {
            for group in blocks.blocks.chunks(blocks_per_step) {
                let idx: Vec<usize> = group.iter().flatten().copied().collect();
                let batch = data.batch(&idx, labels, |id| id)?;
                let (loss, grads) = model.loss_and_grads(&batch, &batch.labels, plan.block_len)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch, loss: f64::from(loss) });
                }
                let names = model.store.names().to_vec();
                adam.update(model.store.tensors_mut(), &grads, &names)?;
                total += f64::from(loss);
                steps += 1;
            }
            Ok(())
        })();
        if let Err(e) = outcome {
            let numeric = matches!(
                e,
                Error::Diverged { .. } | Error::NonFiniteGradient { .. } | Error::Tensor(crate::error::TensorError::NonFinite { .. })
            );
            model.store = snapshot;
            if numeric {
                log::error!("epoch {epoch}: {e}; restored parameters from the start of the epoch");
                return Err(Error::Diverged { epoch, loss: f64::NAN });
            }
            return Err(e);
        }
        let loss = total / steps.max(1) as f64;
        let validation_loss = match validation {
            Some(v) if plan.eval_every > 0 && (epoch + 1) % plan.eval_every == 0 && !v.is_empty() => {
                Some(dataset_loss(model, v, plan.block_len.min(v.len()))?)
            }
            _ => None,
        };
        log::info!("epoch {epoch} ({labels:?}): loss {loss:.5}");
        history.push(EpochStats {
            epoch,
            labels,
            loss,
            validation_loss,
        });
    }
    Ok(TrainReport { history, optimizer: adam })
}

/// Mean hard-label loss over `data`, in order, dropping rows that do not fill
/// the last block.
pub fn dataset_loss(model: &AutoTaskModel, data: &Dataset, block_len: usize) -> Result<f64> {
    let n = data.len() / block_len * block_len;
    if n == 0 {
        return Err(ConfigError::invalid("data", "no complete block to evaluate").into());
    }
    let chunk = (512 / block_len).max(1) * block_len;
    let mut total = 0.0;
    let idx: Vec<usize> = (0..n).collect();
    for part in idx.chunks(chunk) {
        let batch = data.batch(part, LabelSource::Hard, |id| id)?;
        total += f64::from(model.loss(&batch, &batch.labels, block_len)?) * part.len() as f64;
    }
    Ok(total / n as f64)
}

/// Zero tensors shaped like the model's parameters.
pub fn zero_grads(model: &AutoTaskModel) -> Vec<Tensor<f32>> {
    model.store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::model::ModelConfig;

    fn setup() -> (AutoTaskModel, Dataset) {
        let spec = SyntheticSpec {
            n_tasks: 2,
            d_raw: 3,
            task_rows: vec![24, 24],
            unseen_tasks: 0,
            train_frac: 1.0,
            calibration_frac: 0.0,
            seed: 2,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap().train;
        let norm = fit_dataset_norm(&data).unwrap();
        let model = AutoTaskModel::new(ModelConfig::new(4, 2, 2, 4), norm, 1).unwrap();
        (model, data)
    }

    fn plan() -> TrainPlan {
        TrainPlan {
            phase1_epochs: 2,
            phase2_epochs: 2,
            batch_size: 8,
            block_len: 4,
            seed: 5,
            ..TrainPlan::default()
        }
    }

    #[test]
    fn deterministic_with_history() {
        let (m0, data) = setup();
        let mut a = m0.clone();
        let mut b = m0.clone();
        let ra = train(&mut a, &data, None, &plan()).unwrap();
        let rb = train(&mut b, &data, None, &plan()).unwrap();
        assert_eq!(ra.history, rb.history);
        assert_eq!(a.store, b.store);
        assert_eq!(ra.history.len(), 4);
        assert_eq!(ra.history[0].labels, LabelSource::Soft);
        assert_eq!(ra.history[3].labels, LabelSource::Hard);
        assert_ne!(a.store, m0.store);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let (m0, data) = setup();
        let mut full = m0.clone();
        train(&mut full, &data, None, &plan()).unwrap();

        let mut part = m0.clone();
        let first = TrainPlan { phase2_epochs: 0, ..plan() };
        let r = train(&mut part, &data, None, &first).unwrap();
        resume(&mut part, &data, None, &plan(), r.optimizer, 2).unwrap();
        assert_eq!(part.store, full.store);
    }

    #[test]
    fn zero_lr_leaves_facet_untouched() {
        let (m0, data) = setup();
        let mut m = m0.clone();
        let p = TrainPlan { lr_facet1: Some(0.0), ..plan() };
        train(&mut m, &data, None, &p).unwrap();
        for i in 0..m.store.len() {
            let same = m.store.tensors()[i] == m0.store.tensors()[i];
            if m.layout.group_of(i) == ParamGroup::Facet1 {
                assert!(same, "{}", m.store.names()[i]);
            }
        }
    }

    #[test]
    fn divergence_restores_parameters() {
        let (mut m, data) = setup();
        let p = TrainPlan {
            adam: AdamConfig { lr: 1e30, ..AdamConfig::default() },
            phase1_epochs: 0,
            phase2_epochs: 5,
            ..plan()
        };
        match train(&mut m, &data, None, &p) {
            Err(Error::Diverged { .. }) => assert!(m.store.tensors().iter().all(Tensor::is_finite)),
            Ok(_) => assert!(m.store.tensors().iter().all(Tensor::is_finite)),
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn soft_phase_needs_soft_labels() {
        let (m0, mut data) = setup();
        data.rows.iter_mut().for_each(|r| r.soft_label = None);
        let mut m = m0.clone();
        let err = train(&mut m, &data, None, &plan()).unwrap_err();
        assert!(err.to_string().contains("soft_label"));
        assert_eq!(m.store, m0.store);
        let hard = TrainPlan { phase1_epochs: 0, ..plan() };
        let r = train(&mut m, &data, None, &hard).unwrap();
        assert!(r.history.iter().all(|e| e.labels == LabelSource::Hard));
    }

    #[test]
    fn plan_validation() {
        assert!(TrainPlan { batch_size: 6, block_len: 4, ..plan() }.validate().is_err());
        assert!(TrainPlan { lr_facet2: Some(f64::NAN), ..plan() }.validate().is_err());
        let (mut m, data) = setup();
        assert!(train(&mut m, &data, None, &TrainPlan { block_len: 8, batch_size: 8, ..plan() }).is_err());
    }
}
