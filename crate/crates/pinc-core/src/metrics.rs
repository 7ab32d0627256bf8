//! Evaluation metrics for rollouts and closed-loop runs.
//!
//! All three metrics follow the same double-normalization pattern: an inner
//! mean (or sum) over steps, then a mean over output components. RMSE is the
//! mean of per-output root-mean-square errors, which is not the same number
//! as the root of the pooled mean square.

use crate::simulator::Trajectory;
use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("{what}: lengths differ ({a} vs {b})")]
    LengthMismatch {
        what: &'static str,
        a: usize,
        b: usize,
    },
    #[error("need at least one step after the initial state")]
    NoSteps,
}

/// Metric values for one evaluation or control run.
///
/// IAE is reported in both conventions: the per-output, per-step mean of
/// the printed formula, and the plain error sum that matches the magnitude
/// of published benchmark tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse_gen: Option<f64>,
    pub iae_normalized: Option<f64>,
    pub iae_unnormalized_sum: Option<f64>,
    pub rmse: Option<f64>,
    /// Steps compared (M for rollouts, C for control runs).
    pub steps: usize,
    /// Per-output squared-error means behind `mse_gen`.
    pub mse_gen_per_output: Option<Vec<f64>>,
    /// Per-output RMS errors behind `rmse`.
    pub rmse_per_output: Option<Vec<f64>>,
}

fn per_output_errors<'a>(
    what: &'static str,
    a: &'a [Array1<f64>],
    b: &'a [Array1<f64>],
) -> Result<(usize, usize), MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch {
            what,
            a: a.len(),
            b: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(MetricError::NoSteps);
    }
    let n_y = a[0].len();
    Ok((a.len() - 1, n_y))
}

/// Self-loop generalization error vs the RK ground truth: mean over outputs
/// of the mean over steps of the squared error, comparing only at discrete
/// steps k = 1..=M; the shared initial state is excluded.
pub fn mse_gen(pinc: &Trajectory, rk: &Trajectory) -> Result<(f64, Vec<f64>), MetricError> {
    let (m, n_y) = per_output_errors("mse_gen trajectories", &pinc.states, &rk.states)?;
    let mut per_output = vec![0.0; n_y];
    for k in 1..=m {
        for i in 0..n_y {
            let e = pinc.states[k][i] - rk.states[k][i];
            per_output[i] += e * e;
        }
    }
    for v in per_output.iter_mut() {
        *v /= m as f64;
    }
    Ok((per_output.iter().sum::<f64>() / n_y as f64, per_output))
}

/// Integral of absolute tracking error over a closed-loop run.
///
/// `reference[k]` is compared against `states[k]` for k = 1..=C. Returns
/// (normalized, plain sum): normalized applies the (1/N_y)(1/C) weights of
/// the printed formula, the sum applies none.
pub fn iae(
    traj: &Trajectory,
    reference: &[Array1<f64>],
) -> Result<(f64, f64), MetricError> {
    let (c, n_y) = per_output_errors("iae trajectory/reference", &traj.states, reference)?;
    let mut total = 0.0;
    for k in 1..=c {
        for i in 0..n_y {
            total += (reference[k][i] - traj.states[k][i]).abs();
        }
    }
    Ok((total / (n_y as f64 * c as f64), total))
}

/// Mean over outputs of the per-output root-mean-square tracking error.
pub fn rmse(
    traj: &Trajectory,
    reference: &[Array1<f64>],
) -> Result<(f64, Vec<f64>), MetricError> {
    let (c, n_y) = per_output_errors("rmse trajectory/reference", &traj.states, reference)?;
    let mut per_output = vec![0.0; n_y];
    for k in 1..=c {
        for i in 0..n_y {
            let e = reference[k][i] - traj.states[k][i];
            per_output[i] += e * e;
        }
    }
    for v in per_output.iter_mut() {
        *v = (*v / c as f64).sqrt();
    }
    Ok((per_output.iter().sum::<f64>() / n_y as f64, per_output))
}

/// Mean absolute error per output (used to cross-check RMSE bounds).
pub fn mean_abs_error_per_output(
    traj: &Trajectory,
    reference: &[Array1<f64>],
) -> Result<Vec<f64>, MetricError> {
    let (c, n_y) = per_output_errors("mae trajectory/reference", &traj.states, reference)?;
    let mut per_output = vec![0.0; n_y];
    for k in 1..=c {
        for i in 0..n_y {
            per_output[i] += (reference[k][i] - traj.states[k][i]).abs();
        }
    }
    for v in per_output.iter_mut() {
        *v /= c as f64;
    }
    Ok(per_output)
}

/// Tracking metrics of a closed-loop run against a reference program, with
/// selectable output subset (controlled outputs only, when some states are
/// unreferenced).
pub fn control_report(
    traj: &Trajectory,
    reference: &[Array1<f64>],
) -> Result<MetricReport, MetricError> {
    let (norm, total) = iae(traj, reference)?;
    let (r, r_per) = rmse(traj, reference)?;
    Ok(MetricReport {
        mse_gen: None,
        iae_normalized: Some(norm),
        iae_unnormalized_sum: Some(total),
        rmse: Some(r),
        steps: traj.states.len() - 1,
        mse_gen_per_output: None,
        rmse_per_output: Some(r_per),
    })
}

/// Restrict trajectory states and a reference to a subset of output
/// indices, preserving step structure (for metrics over controlled outputs
/// only).
pub fn project_outputs(
    states: &[Array1<f64>],
    indices: &[usize],
) -> Vec<Array1<f64>> {
    states
        .iter()
        .map(|y| Array1::from_iter(indices.iter().map(|&i| y[i])))
        .collect()
}

/// Convenience wrapper when a constant reference vector applies to every
/// compared step.
pub fn constant_reference(r: ArrayView1<f64>, states_len: usize) -> Vec<Array1<f64>> {
    vec![r.to_owned(); states_len]
}
