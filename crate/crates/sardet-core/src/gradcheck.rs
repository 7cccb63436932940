//! Central finite-difference gradient verification.
//!
//! Runs at 64-bit precision, where the h = 1e-5 step is reliable. The
//! comparison only ever evaluates forward passes, so it is independent of
//! the backward implementation it judges.

use crate::error::Result;
use crate::rng::{stream_rng, STREAM_INIT};
use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorId};
use rand::Rng;
use std::sync::Arc;

/// Step used by every finite-difference probe.
pub const FD_STEP: f64 = 1e-5;
/// Tolerance for single-op checks.
pub const OP_TOL: f64 = 1e-4;
/// Tolerance for composed block/model checks.
pub const MODEL_TOL: f64 = 1e-3;

/// Outcome for one named parameter group.
#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub worst_rel_err: f64,
    pub tolerance: f64,
}

impl GroupReport {
    pub fn pass(&self) -> bool {
        self.worst_rel_err < self.tolerance
    }
}

/// Relative error with an absolute fallback for near-zero pairs.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    let scale = a.abs().max(b.abs());
    if scale < 1e-6 {
        diff
    } else {
        diff / scale
    }
}

/// A differentiable scalar function of named input arrays.
pub trait FdTarget {
    /// Names of the input groups, fixed across calls.
    fn groups(&self) -> Vec<String>;
    /// Evaluate the scalar loss at the given input values (one array per group).
    fn eval(&self, inputs: &[Vec<f64>]) -> Result<f64>;
    /// Evaluate once and return (loss, analytic gradient per group).
    fn eval_with_grads(&self, inputs: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)>;
}

/// Compare analytic gradients against central differences.
///
/// `probe_cap` bounds the probed entries per group (None = all), chosen by a
/// seeded draw so runs are reproducible. Returns one report per group, in
/// `groups()` order. Set `corrupt` to deliberately damage the first analytic
/// gradient entry; the harness must then fail (sensitivity hook).
pub fn run_fd_check(
    target: &dyn FdTarget,
    inputs: &[Vec<f64>],
    probe_cap: Option<usize>,
    tolerance: f64,
    corrupt: bool,
) -> Result<Vec<GroupReport>> {
    let names = target.groups();
    let (_, mut grads) = target.eval_with_grads(inputs)?;
    if corrupt {
        if let Some(first) = grads.iter_mut().flat_map(|g| g.iter_mut()).next() {
            *first += 1.0;
        }
    }
    let mut reports = Vec::with_capacity(names.len());
    let mut work = inputs.to_vec();
    for (gi, name) in names.iter().enumerate() {
        let n = inputs[gi].len();
        let entries: Vec<usize> = match probe_cap {
            Some(cap) if cap < n => {
                let mut rng = stream_rng(0xfd, STREAM_INIT, gi as u64);
                let mut picked = std::collections::BTreeSet::new();
                while picked.len() < cap {
                    picked.insert(rng.gen_range(0..n));
                }
                picked.into_iter().collect()
            }
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        for &j in &entries {
            let orig = work[gi][j];
            work[gi][j] = orig + FD_STEP;
            let up = target.eval(&work)?;
            work[gi][j] = orig - FD_STEP;
            let down = target.eval(&work)?;
            work[gi][j] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grads[gi][j], fd));
        }
        reports.push(GroupReport {
            name: name.clone(),
            worst_rel_err: worst,
            tolerance,
        });
    }
    Ok(reports)
}

/// One tape-level op expressed as an FdTarget: loss = sum(weights ∘ f(inputs)).
///
/// The fixed random weighting makes degenerate losses (e.g. sum of softmax
/// rows, which is constant) informative.
pub struct OpTarget<F>
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>,
{
    pub name: String,
    pub shapes: Vec<Vec<usize>>,
    pub build: F,
    pub weights: Vec<f64>,
}

impl<F> OpTarget<F>
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>,
{
    /// `build` must return the op output (any shape); the harness appends the
    /// weighted reduction itself.
    pub fn new(name: &str, shapes: Vec<Vec<usize>>, out_len: usize, build: F) -> Self {
        let mut rng = stream_rng(0x0b, STREAM_INIT, 77);
        let weights = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        OpTarget {
            name: name.to_string(),
            shapes,
            build,
            weights,
        }
    }

    fn run(&self, inputs: &[Vec<f64>]) -> Result<(Tape<f64>, TensorId, Vec<TensorId>)> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = inputs
            .iter()
            .zip(&self.shapes)
            .map(|(data, shape)| tape.leaf_grad(data.clone(), shape))
            .collect::<Result<_>>()?;
        let out = (self.build)(&mut tape, &ids)?;
        let w = tape.leaf(self.weights.clone(), tape.shape(out).to_vec().as_slice())?;
        let prod = tape.mul(out, w)?;
        let loss = tape.sum(prod)?;
        Ok((tape, loss, ids))
    }
}

impl<F> FdTarget for OpTarget<F>
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>,
{
    fn groups(&self) -> Vec<String> {
        (0..self.shapes.len())
            .map(|i| format!("{}.in{}", self.name, i))
            .collect()
    }

    fn eval(&self, inputs: &[Vec<f64>]) -> Result<f64> {
        let (tape, loss, _) = self.run(inputs)?;
        Ok(tape.value(loss).to_f64())
    }

    fn eval_with_grads(&self, inputs: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
        let (mut tape, loss, ids) = self.run(inputs)?;
        tape.backward(loss)?;
        let grads = ids
            .iter()
            .map(|&id| tape.grad(id).expect("leaf_grad input").to_vec())
            .collect();
        Ok((tape.value(loss).to_f64(), grads))
    }
}

/// Seeded uniform(-1, 1) array for check inputs.
pub fn random_input(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = stream_rng(seed, STREAM_INIT, 0x1d);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Per-operation finite-difference suite over every differentiable tape op.
pub fn ops_suite(corrupt: bool) -> Result<Vec<GroupReport>> {
    let mut reports = Vec::new();
    let mut check = |t: &dyn FdTarget, inputs: &[Vec<f64>], corrupt: bool| -> Result<()> {
        reports.extend(run_fd_check(t, inputs, None, OP_TOL, corrupt)?);
        Ok(())
    };

    // matmul, batched and shared-rhs forms
    let t = OpTarget::new("matmul", vec![vec![3, 4], vec![4, 2]], 6, |tape, ids| {
        tape.matmul(ids[0], ids[1])
    });
    check(&t, &[random_input(1, 12), random_input(2, 8)], corrupt)?;
    let t = OpTarget::new(
        "matmul_batched",
        vec![vec![2, 3, 4], vec![2, 4, 2]],
        12,
        |tape, ids| tape.matmul(ids[0], ids[1]),
    );
    check(&t, &[random_input(3, 24), random_input(4, 16)], false)?;

    let t = OpTarget::new("softmax_lastdim", vec![vec![5]], 5, |tape, ids| {
        tape.softmax_lastdim(ids[0])
    });
    check(&t, &[random_input(5, 5)], false)?;

    let t = OpTarget::new(
        "layer_norm",
        vec![vec![2, 6], vec![6], vec![6]],
        12,
        |tape, ids| tape.layer_norm(ids[0], ids[1], ids[2], 1e-5),
    );
    check(&t, &[random_input(6, 12), random_input(7, 6), random_input(8, 6)], false)?;

    let t = OpTarget::new(
        "conv2d_3x3",
        vec![vec![1, 2, 5, 5], vec![3, 2, 3, 3], vec![3]],
        75,
        |tape, ids| tape.conv2d(ids[0], ids[1], Some(ids[2]), 1, 1),
    );
    check(
        &t,
        &[random_input(9, 50), random_input(10, 54), random_input(11, 3)],
        false,
    )?;

    let t = OpTarget::new(
        "conv2d_1x1",
        vec![vec![2, 3, 4, 4], vec![2, 3, 1, 1]],
        64,
        |tape, ids| tape.conv2d(ids[0], ids[1], None, 1, 0),
    );
    check(&t, &[random_input(12, 96), random_input(13, 6)], false)?;

    let t = OpTarget::new(
        "conv2d_stride2",
        vec![vec![1, 2, 5, 5], vec![2, 2, 3, 3]],
        8,
        |tape, ids| tape.conv2d(ids[0], ids[1], None, 2, 0),
    );
    check(&t, &[random_input(14, 50), random_input(15, 36)], false)?;

    let t = OpTarget::new(
        "upsample_nearest_2x",
        vec![vec![1, 2, 3, 3]],
        72,
        |tape, ids| tape.upsample_nearest_2x(ids[0]),
    );
    check(&t, &[random_input(16, 18)], false)?;

    let t = OpTarget::new(
        "add_scaled",
        vec![vec![7], vec![7]],
        7,
        |tape, ids| tape.add_scaled(ids[0], ids[1], 0.37),
    );
    check(&t, &[random_input(17, 7), random_input(18, 7)], false)?;

    let t = OpTarget::new("gelu", vec![vec![9]], 9, |tape, ids| tape.gelu(ids[0]));
    check(&t, &[random_input(19, 9)], false)?;

    let t = OpTarget::new("relu", vec![vec![9]], 9, |tape, ids| tape.relu(ids[0]));
    // keep entries away from the kink at 0
    let relu_in: Vec<f64> = random_input(20, 9)
        .into_iter()
        .map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
        .collect();
    check(&t, &[relu_in], false)?;

    let t = OpTarget::new(
        "add_bias_lastdim",
        vec![vec![3, 4], vec![4]],
        12,
        |tape, ids| tape.add_bias_lastdim(ids[0], ids[1]),
    );
    check(&t, &[random_input(21, 12), random_input(22, 4)], false)?;

    let t = OpTarget::new("permute", vec![vec![2, 3, 4]], 24, |tape, ids| {
        tape.permute(ids[0], &[2, 0, 1])
    });
    check(&t, &[random_input(23, 24)], false)?;

    let t = OpTarget::new("pad_zero_2d", vec![vec![1, 2, 3, 3]], 2 * 4 * 5, |tape, ids| {
        tape.pad_zero_2d(ids[0], 1, 1, 0, 1)
    });
    check(&t, &[random_input(24, 18)], false)?;

    let targets: Vec<f64> = (0..8).map(|i| f64::from(i % 2)).collect();
    let t = OpTarget::new("bce_with_logits", vec![vec![8]], 8, move |tape, ids| {
        tape.bce_with_logits(ids[0], Arc::new(targets.clone()))
    });
    check(&t, &[random_input(25, 8)], false)?;

    let sl_targets = random_input(26, 8);
    let t = OpTarget::new("smooth_l1", vec![vec![8]], 8, move |tape, ids| {
        tape.smooth_l1(ids[0], Arc::new(sl_targets.clone()), 1.0 / 9.0)
    });
    // keep |pred - target| away from the beta branch point
    let pred: Vec<f64> = random_input(26, 8)
        .iter()
        .zip(random_input(27, 8))
        .map(|(&t, d)| t + d * 0.8 + if d.abs() < 0.02 { 0.05 } else { 0.0 })
        .collect();
    check(&t, &[pred], false)?;

    let t = OpTarget::new("mul", vec![vec![6], vec![6]], 6, |tape, ids| {
        tape.mul(ids[0], ids[1])
    });
    check(&t, &[random_input(28, 6), random_input(29, 6)], false)?;

    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_suite_passes_within_op_tolerance() {
        let reports = ops_suite(false).unwrap();
        assert!(!reports.is_empty());
        for r in &reports {
            assert!(
                r.pass(),
                "{} worst rel err {} over tolerance {}",
                r.name,
                r.worst_rel_err,
                r.tolerance
            );
        }
    }

    #[test]
    fn corrupted_backward_is_detected() {
        let reports = ops_suite(true).unwrap();
        assert!(reports.iter().any(|r| !r.pass()));
    }
}
