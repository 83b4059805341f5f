//! Task-aware inputs: the raw task ID appended as a feature, the one-hot task
//! code expanded across the feature sequence, and feature normalization.

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::tensor::{Scalar, Tensor};

/// Standard-deviation floor; columns at or below it are treated as constant.
pub const STD_FLOOR: f64 = 1e-8;

/// Which task-identity signals reach the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Raw ID column plus the expanded one-hot channel.
    #[default]
    Full,
    /// Raw ID column only; the one-hot channel is zeroed.
    TaskIdNumber,
    /// Neither: ID column and one-hot channel are both zeroed.
    NoTaskId,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::NoTaskId, Variant::TaskIdNumber, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::TaskIdNumber => "task_id_number",
            Variant::NoTaskId => "no_task_id",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn keeps_id_column(self) -> bool {
        !matches!(self, Variant::NoTaskId)
    }

    pub fn uses_one_hot(self) -> bool {
        matches!(self, Variant::Full)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Raw features (without the ID column), task IDs and labels for `b` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    pub features: Tensor<f32>,
    pub task_ids: Vec<usize>,
    pub labels: Vec<f32>,
}

impl FeatureBatch {
    pub fn new(features: Tensor<f32>, task_ids: Vec<usize>, labels: Vec<f32>) -> Result<Self, ConfigError> {
        if features.rank() != 2 {
            return Err(ConfigError::invalid("features", "must be a b×(d−1) matrix"));
        }
        let b = features.shape()[0];
        if task_ids.len() != b || labels.len() != b {
            return Err(ConfigError::invalid(
                "batch",
                format!("{b} feature rows but {} task ids and {} labels", task_ids.len(), labels.len()),
            ));
        }
        if let Some(l) = labels.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(ConfigError::invalid("labels", format!("label {l} is outside [0, 1]")));
        }
        Ok(FeatureBatch { features, task_ids, labels })
    }

    /// A batch for scoring only; labels are filled with 0.
    pub fn unlabeled(features: Tensor<f32>, task_ids: Vec<usize>) -> Result<Self, ConfigError> {
        let b = features.shape().first().copied().unwrap_or(0);
        Self::new(features, task_ids, vec![0.0; b])
    }

    pub fn len(&self) -> usize {
        self.task_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.task_ids.is_empty()
    }

    /// Width of the raw feature matrix (`d − 1`).
    pub fn raw_width(&self) -> usize {
        self.features.shape()[1]
    }
}

/// Facet-1 token sequence of shape `b × d × (N+1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskEncodedBatch<T = f32> {
    pub tokens: Tensor<T>,
    pub task_ids: Vec<usize>,
}

/// Places each row's raw task ID after its features, giving `b × d`.
pub fn append_task_id(batch: &FeatureBatch) -> Tensor<f32> {
    let (b, w) = (batch.len(), batch.raw_width());
    let mut data = Vec::with_capacity(b * (w + 1));
    for (row, &id) in batch.features.data().chunks(w).zip(&batch.task_ids) {
        data.extend_from_slice(row);
        data.push(id as f32);
    }
    Tensor::from_parts(vec![b, w + 1], data)
}

/// One-hot codes of shape `b × N`. ID `i ∈ 1..=N` sets position `i − 1`;
/// the reserved unknown-task ID 0 encodes as the zero vector.
pub fn one_hot_tasks<T: Scalar>(task_ids: &[usize], n_tasks: usize) -> Result<Tensor<T>, ConfigError> {
    if n_tasks == 0 {
        return Err(ConfigError::invalid("n_tasks", "one-hot codes need at least one task"));
    }
    if task_ids.is_empty() {
        return Err(ConfigError::invalid("task_ids", "empty batch"));
    }
    let mut data = vec![T::zero(); task_ids.len() * n_tasks];
    for (r, &id) in task_ids.iter().enumerate() {
        if id > n_tasks {
            return Err(ConfigError::TaskIdOutOfRange { id, max: n_tasks });
        }
        if id > 0 {
            data[r * n_tasks + id - 1] = T::one();
        }
    }
    Ok(Tensor::from_parts(vec![task_ids.len(), n_tasks], data))
}

/// Builds `tokens[k, j, :] = [x[k, j], onehot[k, 0], …, onehot[k, N−1]]`.
/// `onehot = None` stands for `N = 0`.
pub fn assemble_facet1_input<T: Scalar>(
    x: &Tensor<T>,
    onehot: Option<&Tensor<T>>,
    task_ids: &[usize],
) -> Result<TaskEncodedBatch<T>, ConfigError> {
    if x.rank() != 2 {
        return Err(ConfigError::invalid("x", "must be a b×d matrix"));
    }
    let (b, d) = (x.shape()[0], x.shape()[1]);
    let n = match onehot {
        Some(oh) => {
            if oh.rank() != 2 || oh.shape()[0] != b {
                return Err(ConfigError::invalid(
                    "onehot",
                    format!("shape {:?} does not match batch of {b}", oh.shape()),
                ));
            }
            oh.shape()[1]
        }
        None => 0,
    };
    let width = n + 1;
    let mut data = Vec::with_capacity(b * d * width);
    for k in 0..b {
        let code = onehot.map_or(&[][..], |oh| &oh.data()[k * n..(k + 1) * n]);
        for j in 0..d {
            data.push(x.data()[k * d + j]);
            data.extend_from_slice(code);
        }
    }
    Ok(TaskEncodedBatch {
        tokens: Tensor::from_parts(vec![b, d, width], data),
        task_ids: task_ids.to_vec(),
    })
}

/// Per-column normalization statistics fitted on training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn width(&self) -> usize {
        self.mean.len()
    }

    /// Stats that leave inputs unchanged.
    pub fn identity(width: usize) -> Self {
        NormStats {
            mean: vec![0.0; width],
            std: vec![1.0; width],
        }
    }
}

/// Fits column means and population standard deviations on an `n × d` matrix.
pub fn fit_norm_stats(x: &Tensor<f32>) -> Result<NormStats, ConfigError> {
    if x.rank() != 2 || x.shape()[0] < 2 {
        return Err(ConfigError::invalid(
            "norm_stats",
            format!("fitting needs at least 2 rows, got shape {:?}", x.shape()),
        ));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut mean = vec![0f64; d];
    for row in x.data().chunks(d) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += f64::from(v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0f64; d];
    for row in x.data().chunks(d) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (f64::from(v) - m).powi(2);
        }
    }
    Ok(NormStats {
        mean,
        std: var.iter().map(|&s| (s / n as f64).sqrt().max(STD_FLOOR)).collect(),
    })
}

/// Applies `(x − mean) / std` column-wise. Columns whose fitted std sits at the
/// floor carry no information and map to 0.
pub fn apply_norm(x: &Tensor<f32>, stats: &NormStats) -> Result<Tensor<f32>, ConfigError> {
    let d = stats.width();
    if x.rank() != 2 || x.shape()[1] != d {
        return Err(ConfigError::invalid(
            "features",
            format!("expected {d} columns (incl. task id), got shape {:?}", x.shape()),
        ));
    }
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i % d;
            if stats.std[c] <= STD_FLOOR {
                0.0
            } else {
                ((f64::from(v) - stats.mean[c]) / stats.std[c]) as f32
            }
        })
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn batch(rows: &[Vec<f32>], ids: &[usize]) -> FeatureBatch {
        FeatureBatch::new(Tensor::from_rows(rows).unwrap(), ids.to_vec(), vec![0.0; ids.len()]).unwrap()
    }

    #[test]
    fn append_examples() {
        let x = append_task_id(&batch(&[vec![0.5]], &[3]));
        assert_eq!(x.shape(), &[1, 2]);
        assert_eq!(x.data(), &[0.5, 3.0]);
        let x = append_task_id(&batch(&[vec![1.0, 2.0]], &[0]));
        assert_eq!(x.data(), &[1.0, 2.0, 0.0]);
        let x = append_task_id(&batch(&[vec![0.0; 9], vec![1.0; 9]], &[1, 2]));
        assert_eq!(x.shape(), &[2, 10]);
    }

    #[test]
    fn one_hot_examples() {
        let oh: Tensor<f32> = one_hot_tasks(&[2], 4).unwrap();
        assert_eq!(oh.data(), &[0., 1., 0., 0.]);
        let oh: Tensor<f32> = one_hot_tasks(&[0], 4).unwrap();
        assert_eq!(oh.data(), &[0., 0., 0., 0.]);
        let oh: Tensor<f32> = one_hot_tasks(&[1, 4], 4).unwrap();
        assert_eq!(oh.data(), &[1., 0., 0., 0., 0., 0., 0., 1.]);
        assert_eq!(
            one_hot_tasks::<f32>(&[5], 4),
            Err(ConfigError::TaskIdOutOfRange { id: 5, max: 4 })
        );
    }

    #[test]
    fn assemble_examples() {
        let x = Tensor::<f32>::zeros(&[2, 3]);
        let oh = one_hot_tasks(&[1, 4], 4).unwrap();
        let enc = assemble_facet1_input(&x, Some(&oh), &[1, 4]).unwrap();
        assert_eq!(enc.tokens.shape(), &[2, 3, 5]);

        let x = Tensor::<f32>::new(vec![1, 1], vec![7.0]).unwrap();
        let oh = one_hot_tasks(&[2], 3).unwrap();
        let enc = assemble_facet1_input(&x, Some(&oh), &[2]).unwrap();
        assert_eq!(enc.tokens.data(), &[7., 0., 1., 0.]);

        let x = Tensor::<f32>::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        let enc = assemble_facet1_input(&x, None, &[0, 0]).unwrap();
        assert_eq!(enc.tokens.shape(), &[2, 2, 1]);
        assert_eq!(enc.tokens.data(), x.data());
    }

    #[test]
    fn unknown_task_has_zero_channel() {
        let x = Tensor::<f32>::full(&[2, 4], 0.3);
        let oh = one_hot_tasks(&[0, 2], 3).unwrap();
        let enc = assemble_facet1_input(&x, Some(&oh), &[0, 2]).unwrap();
        for j in 0..4 {
            for c in 1..4 {
                assert_eq!(enc.tokens.at(&[0, j, c]), 0.0);
            }
        }
    }

    #[test]
    fn norm_examples() {
        let x = Tensor::<f32>::new(vec![2, 2], vec![1., 5., 3., 5.]).unwrap();
        let stats = fit_norm_stats(&x).unwrap();
        assert_eq!(stats.mean, vec![2.0, 5.0]);
        assert_eq!(stats.std[0], 1.0);
        assert_eq!(stats.std[1], STD_FLOOR);
        let y = apply_norm(&x, &stats).unwrap();
        assert_eq!(y.data(), &[-1., 0., 1., 0.]);

        let other = Tensor::<f32>::new(vec![1, 2], vec![100., -3.]).unwrap();
        let y = apply_norm(&other, &stats).unwrap();
        assert!(y.is_finite());
        assert_eq!(y.data(), &[98.0, 0.0]);

        assert!(fit_norm_stats(&Tensor::<f32>::zeros(&[1, 3])).is_err());
        assert!(apply_norm(&Tensor::<f32>::zeros(&[1, 3]), &stats).is_err());
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()), Some(v));
        }
    }

    proptest! {
        #[test]
        fn one_hot_codes_are_orthogonal(n in 1usize..8, a in 0usize..8, b in 0usize..8) {
            prop_assume!(a <= n && b <= n && a != b);
            let oh: Tensor<f64> = one_hot_tasks(&[a, b], n).unwrap();
            let dot: f64 = (0..n).map(|i| oh.at(&[0, i]) * oh.at(&[1, i])).sum();
            prop_assert_eq!(dot, 0.0);
        }

        #[test]
        fn one_hot_channel_constant_along_sequence(
            ids in proptest::collection::vec(0usize..=5, 1..6),
            d in 1usize..6,
            seed in any::<u64>(),
        ) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::randn(&[ids.len(), d], 1.0, &mut rng);
            let oh = one_hot_tasks(&ids, 5).unwrap();
            let enc = assemble_facet1_input(&x, Some(&oh), &ids).unwrap();
            for k in 0..ids.len() {
                for j in 0..d {
                    prop_assert_eq!(enc.tokens.at(&[k, j, 0]), x.at(&[k, j]));
                    for c in 1..6 {
                        prop_assert_eq!(enc.tokens.at(&[k, j, c]), enc.tokens.at(&[k, 0, c]));
                    }
                }
            }
        }

        #[test]
        fn assembly_is_injective_in_x(
            a in proptest::collection::vec(-5f32..5.0, 6),
            b in proptest::collection::vec(-5f32..5.0, 6),
        ) {
            prop_assume!(a != b);
            let oh = one_hot_tasks(&[1, 2], 3).unwrap();
            let ta = Tensor::new(vec![2, 3], a).unwrap();
            let tb = Tensor::new(vec![2, 3], b).unwrap();
            let ea = assemble_facet1_input(&ta, Some(&oh), &[1, 2]).unwrap();
            let eb = assemble_facet1_input(&tb, Some(&oh), &[1, 2]).unwrap();
            prop_assert_ne!(ea.tokens, eb.tokens);
        }

        #[test]
        fn normalization_fits_and_is_idempotent(
            rows in proptest::collection::vec(proptest::collection::vec(-100f32..100.0, 3), 2..40),
        ) {
            let x = Tensor::from_rows(&rows).unwrap();
            let stats = fit_norm_stats(&x).unwrap();
            let y = apply_norm(&x, &stats).unwrap();
            let n = rows.len() as f64;
            for c in 0..3 {
                let col: Vec<f64> = (0..rows.len()).map(|r| f64::from(y.at(&[r, c]))).collect();
                let mean = col.iter().sum::<f64>() / n;
                let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                prop_assert!(mean.abs() <= 1e-6, "mean {mean}");
                if stats.std[c] > STD_FLOOR * 1e3 {
                    prop_assert!((std - 1.0).abs() <= 1e-4, "std {std}");
                }
            }
            let again = apply_norm(&y, &fit_norm_stats(&y).unwrap()).unwrap();
            prop_assert!(again.max_abs_diff(&y) <= 1e-6);
        }
    }
}
