//! Per-task Platt scaling: `score = sigmoid(a·logit + c)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, Result};
use crate::optim::{Adam, AdamConfig};
use crate::tape::{sigmoid_scalar, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Platt {
    pub a: f64,
    pub c: f64,
}

impl Platt {
    pub const IDENTITY: Platt = Platt { a: 1.0, c: 0.0 };

    pub fn apply(&self, logit: f64) -> f64 {
        sigmoid_scalar(self.a * logit + self.c)
    }
}

impl Default for Platt {
    fn default() -> Self {
        Platt::IDENTITY
    }
}

/// Platt parameters per task ID; tasks without an entry use the identity.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    pub tasks: BTreeMap<usize, Platt>,
}

impl CalibrationParams {
    pub fn get(&self, task: usize) -> Platt {
        self.tasks.get(&task).copied().unwrap_or_default()
    }

    pub fn apply(&self, task: usize, logit: f64) -> f64 {
        self.get(task).apply(logit)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlattFit {
    pub steps: usize,
    pub adam: AdamConfig,
}

impl Default for PlattFit {
    fn default() -> Self {
        PlattFit {
            steps: 3000,
            adam: AdamConfig {
                lr: 0.02,
                ..AdamConfig::default()
            },
        }
    }
}

/// Fits `(a, c)` by full-batch Adam on mean cross-entropy. Targets may be
/// soft. With only one class present (every target on the same side of 0.5)
/// the identity is returned and a warning logged.
pub fn fit_platt(logits: &[f64], targets: &[f64], task: usize, fit: &PlattFit) -> Result<Platt> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(ConfigError::invalid(
            "calibration",
            format!("{} logits for {} targets", logits.len(), targets.len()),
        )
        .into());
    }
    let positives = targets.iter().filter(|&&y| y >= 0.5).count();
    if positives == 0 || positives == targets.len() {
        log::warn!("task {task}: calibration data has a single class; using identity calibration");
        return Ok(Platt::IDENTITY);
    }
    let z = Tensor::new(vec![logits.len(), 1], logits.to_vec())?;
    let mut params = vec![Tensor::<f64>::from_vec(vec![1.0]), Tensor::from_vec(vec![0.0])];
    let names = vec!["a".to_string(), "c".to_string()];
    let mut adam = Adam::new(fit.adam, &[vec![1], vec![1]])?;
    for _ in 0..fit.steps {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(params[0].reshape(&[1, 1])?);
        let c = tape.param(params[1].clone());
        let x = tape.constant(z.clone());
        let s = tape.matmul(x, a)?;
        let s = tape.add_broadcast(s, c)?;
        let s = tape.reshape(s, &[logits.len()])?;
        let loss = tape.bce_with_logits(s, targets)?;
        let mut grads = tape.backward(loss)?;
        let ga = grads.take(a).expect("a is trainable").reshape(&[1])?;
        let gc = grads.take(c).expect("c is trainable");
        adam.update(&mut params, &[ga, gc], &names)?;
    }
    Ok(Platt {
        a: params[0].data()[0],
        c: params[1].data()[0],
    })
}
