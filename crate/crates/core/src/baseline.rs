//! Shared-trunk multi-task DNN used as the comparison baseline.
//!
//! Two affine+GELU trunk layers feed `N + 1` affine heads. Column 0 is the
//! generalization head, trained on every row; column `i` is task `i`'s head,
//! trained only on that task's rows. Serving routes task `i ∈ 1..=N` to head
//! `i` and anything else to the generalization head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block::LinearIds;
use crate::data::{make_blocks, Dataset, LabelSource};
use crate::encoding::{apply_norm, fit_norm_stats, FeatureBatch, NormStats};
use crate::error::{ConfigError, Error, Result};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::{EpochStats, TrainPlan};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub d_raw: usize,
    pub n_tasks: usize,
    pub hidden1: usize,
    pub hidden2: usize,
}

impl BaselineConfig {
    pub fn new(d_raw: usize, n_tasks: usize) -> Self {
        BaselineConfig {
            d_raw,
            n_tasks,
            hidden1: 64,
            hidden2: 32,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, v) in [("d_raw", self.d_raw), ("hidden1", self.hidden1), ("hidden2", self.hidden2)] {
            if v == 0 {
                return Err(ConfigError::invalid(field, "must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineDnn {
    pub config: BaselineConfig,
    /// Statistics over the raw features (no task-ID column).
    pub norm: NormStats,
    pub store: ParamStore<f32>,
    trunk: [LinearIds; 2],
    heads: LinearIds,
}

impl BaselineDnn {
    /// Weights are drawn with std `1/√fan_in`.
    pub fn new(config: BaselineConfig, norm: NormStats, seed: u64) -> Result<Self> {
        config.validate()?;
        if norm.width() != config.d_raw {
            return Err(ConfigError::invalid("norm_stats", format!("width {} does not match d_raw {}", norm.width(), config.d_raw)).into());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let std = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let (d, h1, h2) = (config.d_raw, config.hidden1, config.hidden2);
        let trunk = [
            LinearIds::init(&mut store, "trunk.0", d, h1, std(d), &mut rng),
            LinearIds::init(&mut store, "trunk.1", h1, h2, std(h1), &mut rng),
        ];
        let heads = LinearIds::init(&mut store, "heads", h2, config.n_tasks + 1, std(h2), &mut rng);
        Ok(BaselineDnn {
            config,
            norm,
            store,
            trunk,
            heads,
        })
    }

    /// Head column used for a task ID.
    pub fn route(&self, task_id: usize) -> usize {
        if (1..=self.config.n_tasks).contains(&task_id) {
            task_id
        } else {
            0
        }
    }

    fn head_logits(&self, tape: &mut Tape<f32>, vars: &[Var], batch: &FeatureBatch) -> Result<Var> {
        if batch.raw_width() != self.config.d_raw {
            return Err(ConfigError::invalid(
                "features",
                format!("expected {} raw features, got {}", self.config.d_raw, batch.raw_width()),
            )
            .into());
        }
        let x = tape.constant(apply_norm(&batch.features, &self.norm)?);
        let mut h = x;
        for layer in &self.trunk {
            h = layer.forward(tape, vars, h)?;
            h = tape.gelu(h)?;
        }
        self.heads.forward(tape, vars, h)
    }

    /// Logits with per-row routing.
    pub fn logits(&self, batch: &FeatureBatch) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let vars = self.store.register(&mut tape, false);
        let z = self.head_logits(&mut tape, &vars, batch)?;
        let cols: Vec<usize> = batch.task_ids.iter().map(|&t| self.route(t)).collect();
        let picked = tape.gather_cols(z, &cols)?;
        Ok(tape.value(picked).data().to_vec())
    }

    /// Task-head loss on each row's own head plus generalization-head loss on
    /// every row.
    pub fn loss_and_grads(&self, batch: &FeatureBatch, targets: &[f32]) -> Result<(f32, Vec<Tensor<f32>>)> {
        if let Some(&id) = batch.task_ids.iter().find(|&&t| t == 0 || t > self.config.n_tasks) {
            return Err(ConfigError::TaskIdOutOfRange { id, max: self.config.n_tasks }.into());
        }
        let mut tape = Tape::new();
        let vars = self.store.register(&mut tape, true);
        let z = self.head_logits(&mut tape, &vars, batch)?;
        let own = tape.gather_cols(z, &batch.task_ids)?;
        let general = tape.gather_cols(z, &vec![0; batch.len()])?;
        let own_loss = tape.bce_with_logits(own, targets)?;
        let general_loss = tape.bce_with_logits(general, targets)?;
        let loss = tape.add(own_loss, general_loss)?;
        let value = tape.value(loss).data()[0];
        let mut grads = tape.backward(loss)?;
        let grads = vars
            .iter()
            .zip(self.store.tensors())
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((value, grads))
    }
}

/// Fits normalization on the training rows and initializes a baseline.
pub fn baseline_for(data: &Dataset, n_tasks: usize, seed: u64) -> Result<BaselineDnn> {
    let batch = data.full_batch(LabelSource::Hard, |id| id)?;
    let norm = fit_norm_stats(&batch.features)?;
    BaselineDnn::new(BaselineConfig::new(data.d_raw, n_tasks), norm, seed)
}

/// Trains the baseline on the plan's schedule. Rows are shuffled each epoch;
/// `block_len` is ignored.
pub fn train_baseline(model: &mut BaselineDnn, data: &Dataset, plan: &TrainPlan) -> Result<Vec<EpochStats>> {
    plan.adam.validate()?;
    if plan.batch_size == 0 {
        return Err(ConfigError::invalid("batch_size", "must be positive").into());
    }
    if plan.phase1_epochs > 0 && !data.has_soft_labels() {
        return Err(ConfigError::invalid("phase1_epochs", "soft-label phase requested but the training data has no soft_label column").into());
    }
    let mut adam = Adam::new(plan.adam, &model.store.shapes())?;
    let mut history = Vec::new();
    for epoch in 0..plan.epochs() {
        let labels = if epoch < plan.phase1_epochs {
            LabelSource::Soft
        } else {
            LabelSource::Hard
        };
        let order = make_blocks(data.len(), 1, plan.seed.wrapping_add(0xBA5E).wrapping_add(epoch as u64))?;
        let order: Vec<usize> = order.blocks.into_iter().flatten().collect();
        let mut total = 0.0;
        let mut steps = 0;
        for idx in order.chunks(plan.batch_size) {
            let batch = data.batch(idx, labels, |id| id)?;
            let (loss, grads) = model.loss_and_grads(&batch, &batch.labels)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss: f64::from(loss) });
            }
            let names = model.store.names().to_vec();
            adam.update(model.store.tensors_mut(), &grads, &names)?;
            total += f64::from(loss);
            steps += 1;
        }
        history.push(EpochStats {
            epoch,
            labels,
            loss: total / steps as f64,
            validation_loss: None,
        });
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::metrics::roc_auc;

    #[test]
    fn routing_contract() {
        let m = BaselineDnn::new(BaselineConfig::new(3, 2), NormStats::identity(3), 0).unwrap();
        assert_eq!(m.route(1), 1);
        assert_eq!(m.route(2), 2);
        assert_eq!(m.route(0), 0);
        assert_eq!(m.route(7), 0);
        let batch = FeatureBatch::unlabeled(Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, 0.1, 0.2, 0.3]).unwrap(), vec![0, 1]).unwrap();
        let l = m.logits(&batch).unwrap();
        assert_ne!(l[0], l[1]);
    }

    #[test]
    fn separable_single_task() {
        let spec = SyntheticSpec {
            n_tasks: 1,
            d_raw: 4,
            task_rows: vec![300],
            unseen_tasks: 0,
            noise: 0.0,
            train_frac: 1.0,
            calibration_frac: 0.0,
            seed: 4,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap().train;
        let mut m = baseline_for(&data, 1, 1).unwrap();
        let plan = TrainPlan {
            phase1_epochs: 0,
            phase2_epochs: 40,
            batch_size: 32,
            block_len: 1,
            adam: crate::optim::AdamConfig { lr: 3e-3, ..Default::default() },
            ..TrainPlan::default()
        };
        let h = train_baseline(&mut m, &data, &plan).unwrap();
        assert!(h.last().unwrap().loss < h[0].loss);
        let batch = data.full_batch(LabelSource::Hard, |id| id).unwrap();
        let s: Vec<f64> = m.logits(&batch).unwrap().iter().map(|&v| f64::from(v)).collect();
        let y: Vec<f64> = batch.labels.iter().map(|&v| f64::from(v)).collect();
        assert!(roc_auc(&s, &y).unwrap() > 0.99);
    }
}
