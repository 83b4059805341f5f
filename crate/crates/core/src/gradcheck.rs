//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub h: f64,
    /// Maximum allowed relative error.
    pub tol: f64,
    /// Floor applied to the relative-error denominator.
    pub floor: f64,
    /// Number of coordinates to sample; `None` checks every coordinate.
    pub samples: Option<usize>,
    pub seed: u64,
    /// Corrupts the backward pass of one op (harness self-test).
    pub fault: Option<OpKind>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-8,
            samples: None,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CoordCheck {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub tol: f64,
    pub worst: Option<CoordCheck>,
    pub failures: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn worst_rel_err(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |w| w.rel_err)
    }
}

/// A named parameter tensor checked by [`grad_check`].
pub type NamedTensor = (String, Tensor<f64>);

/// Compares the tape gradient of `f` against central differences
/// `(f(x+h) − f(x−h)) / 2h` on sampled coordinates of `params`.
///
/// `f` receives the tape and one `Var` per entry of `params` and must return
/// a scalar loss. It must be deterministic.
pub fn grad_check<F>(f: F, params: &[NamedTensor], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(kind) = cfg.fault {
        tape.inject_backward_fault(kind);
    }
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = params
        .iter()
        .zip(&vars)
        .map(|((_, t), &v)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, (_, t))| (0..t.numel()).map(move |i| (p, i)))
        .collect();
    let chosen: Vec<(usize, usize)> = match cfg.samples {
        Some(n) if n < coords.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut idx = sample(&mut rng, coords.len(), n).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| coords[i]).collect()
        }
        _ => coords,
    };

    let eval = |p: usize, i: usize, delta: f64| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params
            .iter()
            .enumerate()
            .map(|(q, (_, t))| {
                let mut t = t.clone();
                if q == p {
                    t.data_mut()[i] += delta;
                }
                tape.constant(t)
            })
            .collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut report = GradCheckReport {
        checked: 0,
        tol: cfg.tol,
        worst: None,
        failures: Vec::new(),
    };
    for (p, i) in chosen {
        let numeric = (eval(p, i, cfg.h)? - eval(p, i, -cfg.h)?) / (2.0 * cfg.h);
        let a = analytic[p].data()[i];
        let rel_err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
        let check = CoordCheck {
            tensor: params[p].0.clone(),
            index: i,
            analytic: a,
            numeric,
            rel_err,
        };
        report.checked += 1;
        if rel_err > cfg.tol {
            report.failures.push(check.clone());
        }
        if report.worst.as_ref().is_none_or(|w| rel_err > w.rel_err) {
            report.worst = Some(check);
        }
    }
    Ok(report)
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

fn named(name: &str, t: Tensor<f64>) -> NamedTensor {
    (name.to_string(), t)
}

/// Gradient checks for each differentiable primitive in isolation, so a
/// failure names the op whose backward pass is wrong.
pub fn check_primitive_ops(cfg: &GradCheckConfig) -> Result<Vec<(OpKind, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    // Each loss is reduced through a fixed random projection so that every
    // output coordinate contributes a distinct weight.
    let weighted_sum = |tape: &mut Tape<f64>, y: Var, w: &Tensor<f64>| -> Result<Var> {
        let wv = tape.constant(w.clone());
        let prod = tape.mul(y, wv)?;
        Ok(tape.sum(prod)?)
    };

    {
        let a = randn(&[2, 3, 4], &mut rng);
        let b = randn(&[4, 5], &mut rng);
        let w = randn(&[2, 3, 5], &mut rng);
        let r = grad_check(
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                weighted_sum(t, y, &w)
            },
            &[named("a", a), named("b", b)],
            cfg,
        )?;
        out.push((OpKind::MatMul, r));
    }
    for transpose in [false, true] {
        let a = randn(&[3, 2, 4], &mut rng);
        let b = if transpose { randn(&[3, 5, 4], &mut rng) } else { randn(&[3, 4, 5], &mut rng) };
        let w = randn(&[3, 2, 5], &mut rng);
        let r = grad_check(
            |t, v| {
                let y = t.batched_matmul(v[0], v[1], transpose)?;
                weighted_sum(t, y, &w)
            },
            &[named("a", a), named("b", b)],
            cfg,
        )?;
        out.push((OpKind::BatchedMatMul, r));
    }
    {
        let x = randn(&[2, 3, 4], &mut rng);
        let y = randn(&[3, 4], &mut rng);
        let w = randn(&[2, 3, 4], &mut rng);
        let r = grad_check(
            |t, v| {
                let s = t.add_broadcast(v[0], v[1])?;
                let z = t.add(s, v[0])?;
                weighted_sum(t, z, &w)
            },
            &[named("x", x), named("y", y)],
            cfg,
        )?;
        out.push((OpKind::AddBroadcast, r));
    }
    {
        let a = randn(&[6], &mut rng);
        let b = randn(&[6], &mut rng);
        let r = grad_check(
            |t, v| {
                let m = t.mul(v[0], v[1])?;
                let s = t.scale(m, 0.7)?;
                Ok(t.mean(s)?)
            },
            &[named("a", a), named("b", b)],
            cfg,
        )?;
        out.push((OpKind::Mul, r));
    }
    {
        let x = randn(&[3, 4], &mut rng).map(|v| 2.0 * v);
        let w = randn(&[3, 4], &mut rng);
        let r = grad_check(
            |t, v| {
                let y = t.gelu(v[0])?;
                weighted_sum(t, y, &w)
            },
            &[named("x", x.clone())],
            cfg,
        )?;
        out.push((OpKind::Gelu, r));
        let r = grad_check(
            |t, v| {
                let y = t.sigmoid(v[0])?;
                weighted_sum(t, y, &w)
            },
            &[named("x", x)],
            cfg,
        )?;
        out.push((OpKind::Sigmoid, r));
    }
    {
        let x = randn(&[2, 4, 4], &mut rng);
        let w = randn(&[2, 4, 4], &mut rng);
        let r = grad_check(
            |t, v| {
                let m = t.causal_mask(v[0])?;
                let y = t.softmax_rows(m)?;
                weighted_sum(t, y, &w)
            },
            &[named("x", x)],
            cfg,
        )?;
        out.push((OpKind::Softmax, r));
    }
    {
        let x = randn(&[3, 5], &mut rng);
        let g = randn(&[5], &mut rng);
        let b = randn(&[5], &mut rng);
        let w = randn(&[3, 5], &mut rng);
        let r = grad_check(
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(t, y, &w)
            },
            &[named("x", x), named("gain", g), named("bias", b)],
            cfg,
        )?;
        out.push((OpKind::LayerNorm, r));
    }
    {
        // bce ∘ sigmoid ∘ linear on a 4×3 input.
        let x = randn(&[4, 3], &mut rng);
        let wt = randn(&[3, 1], &mut rng);
        let bias = randn(&[1], &mut rng);
        let targets = [1.0, 0.0, 0.3, 0.8];
        let r = grad_check(
            |t, v| {
                let xv = t.constant(x.clone());
                let z = t.matmul(xv, v[0])?;
                let z = t.add_broadcast(z, v[1])?;
                let z = t.reshape(z, &[4])?;
                let p = t.sigmoid(z)?;
                Ok(t.bce(p, &targets)?)
            },
            &[named("weight", wt.clone()), named("bias", bias.clone())],
            cfg,
        )?;
        out.push((OpKind::Bce, r));
        let r = grad_check(
            |t, v| {
                let xv = t.constant(x.clone());
                let z = t.matmul(xv, v[0])?;
                let z = t.add_broadcast(z, v[1])?;
                let z = t.reshape(z, &[4])?;
                Ok(t.bce_with_logits(z, &targets)?)
            },
            &[named("weight", wt), named("bias", bias)],
            cfg,
        )?;
        out.push((OpKind::BceWithLogits, r));
    }
    {
        let x = randn(&[2, 3, 4], &mut rng);
        let w = randn(&[2, 3, 4], &mut rng);
        let r = grad_check(
            |t, v| {
                let s = t.split_heads(v[0], 2)?;
                let sc = t.scale(s, 1.3)?;
                let m = t.merge_heads(sc, 2)?;
                weighted_sum(t, m, &w)
            },
            &[named("x", x)],
            cfg,
        )?;
        out.push((OpKind::SplitHeads, r));
    }
    {
        let a = randn(&[3, 2], &mut rng);
        let b = randn(&[3, 4], &mut rng);
        let w = randn(&[3], &mut rng);
        let r = grad_check(
            |t, v| {
                let c = t.concat(v[0], v[1])?;
                let g = t.gather_cols(c, &[0, 5, 2])?;
                weighted_sum(t, g, &w)
            },
            &[named("a", a), named("b", b)],
            cfg,
        )?;
        out.push((OpKind::Concat, r));
    }
    {
        let x = randn(&[5, 3], &mut rng);
        let w = randn(&[2, 3], &mut rng);
        let r = grad_check(
            |t, v| {
                let y = t.take_rows(v[0], 2)?;
                weighted_sum(t, y, &w)
            },
            &[named("table", x)],
            cfg,
        )?;
        out.push((OpKind::TakeRows, r));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let cfg = GradCheckConfig::default();
        let report = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq)?)
            },
            &[named("w", Tensor::scalar(3.0))],
            &cfg,
        )
        .unwrap();
        let worst = report.worst.unwrap();
        assert_eq!(worst.analytic, 6.0);
        assert!((worst.numeric - 6.0).abs() < 1e-8);
        assert!(report.failures.is_empty());
    }

    #[test]
    fn primitive_suite_passes() {
        let cfg = GradCheckConfig::default();
        for (op, report) in check_primitive_ops(&cfg).unwrap() {
            assert!(report.passed(), "{op}: {:?}", report.worst);
        }
    }

    #[test]
    fn primitives_pass_over_many_seeds() {
        for seed in 0..20 {
            let cfg = GradCheckConfig { seed, ..Default::default() };
            for (op, report) in check_primitive_ops(&cfg).unwrap() {
                assert!(report.passed(), "seed {seed} {op}: {:?}", report.worst);
            }
        }
    }

    #[test]
    fn injected_fault_is_detected_and_named() {
        for kind in [OpKind::Gelu, OpKind::LayerNorm, OpKind::Softmax, OpKind::MatMul] {
            let cfg = GradCheckConfig { fault: Some(kind), ..Default::default() };
            let reports = check_primitive_ops(&cfg).unwrap();
            let failing: Vec<OpKind> = reports
                .iter()
                .filter(|(_, r)| !r.passed())
                .map(|(k, _)| *k)
                .collect();
            assert!(failing.contains(&kind), "{kind} not detected: {failing:?}");
        }
    }

    #[test]
    fn sampling_limits_coordinates() {
        let cfg = GradCheckConfig { samples: Some(5), ..Default::default() };
        let w = Tensor::from_vec((0..20).map(f64::from).collect());
        let report = grad_check(|t, v| Ok(t.sum(v[0])?), &[named("w", w)], &cfg).unwrap();
        assert_eq!(report.checked, 5);
    }
}
