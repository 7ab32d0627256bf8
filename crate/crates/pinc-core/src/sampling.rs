//! Boundary-condition training points and collocation points.
//!
//! Both sets are drawn uniformly i.i.d. from the model's declared ranges
//! with a fixed, portable PRNG (ChaCha8), so a seed fully determines a set
//! on every platform. Points are stored column-wise (one column per point)
//! to match the batched tape layout.

use crate::physics::OdeModel;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("requested an empty {0} set; need at least one point")]
    Empty(&'static str),
    #[error("inner-interval length must be positive, got {0}")]
    BadHorizon(f64),
    #[error("csv: {0}")]
    Csv(String),
    #[error("csv io: {0}")]
    Io(#[from] std::io::Error),
}

/// Supervised pairs for the data term. Sampled sets have t = 0 and
/// target = y0 for every point; ingested sets may carry arbitrary tuples.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    /// Time input per point.
    pub t: Array1<f64>,
    /// Initial states, one column per point (n_states x N_t).
    pub y0: Array2<f64>,
    /// Controls, one column per point (n_controls x N_t).
    pub u: Array2<f64>,
    /// Supervision targets, one column per point (n_states x N_t).
    pub target: Array2<f64>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Unsupervised residual points for the physics term.
#[derive(Debug, Clone, PartialEq)]
pub struct CollocationSet {
    /// Time input per point, within [0, T].
    pub t: Array1<f64>,
    /// Initial states, one column per point (n_states x N_F).
    pub y0: Array2<f64>,
    /// Controls, one column per point (n_controls x N_F).
    pub u: Array2<f64>,
}

impl CollocationSet {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// N_t boundary points: t = 0, y0 and u uniform over the model ranges,
/// target = y0. Deterministic per seed.
pub fn sample_training_set(
    model: &OdeModel,
    n_t: usize,
    seed: u64,
) -> Result<TrainingSet, SamplingError> {
    if n_t == 0 {
        return Err(SamplingError::Empty("training"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ny = model.n_states();
    let nu = model.n_controls();
    let mut y0 = Array2::zeros((ny, n_t));
    let mut u = Array2::zeros((nu, n_t));
    for j in 0..n_t {
        for (i, &(lo, hi)) in model.state_ranges().iter().enumerate() {
            y0[[i, j]] = rng.random_range(lo..hi);
        }
        for (i, &(lo, hi)) in model.control_ranges().iter().enumerate() {
            u[[i, j]] = rng.random_range(lo..hi);
        }
    }
    Ok(TrainingSet {
        t: Array1::zeros(n_t),
        target: y0.clone(),
        y0,
        u,
    })
}

/// N_F collocation points: (t, y0, u) uniform over [0, T] and the model
/// ranges. Deterministic per seed.
pub fn sample_collocation_set(
    model: &OdeModel,
    t_horizon: f64,
    n_f: usize,
    seed: u64,
) -> Result<CollocationSet, SamplingError> {
    if n_f == 0 {
        return Err(SamplingError::Empty("collocation"));
    }
    if !(t_horizon.is_finite() && t_horizon > 0.0) {
        return Err(SamplingError::BadHorizon(t_horizon));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ny = model.n_states();
    let nu = model.n_controls();
    let mut t = Array1::zeros(n_f);
    let mut y0 = Array2::zeros((ny, n_f));
    let mut u = Array2::zeros((nu, n_f));
    for j in 0..n_f {
        t[j] = rng.random_range(0.0..t_horizon);
        for (i, &(lo, hi)) in model.state_ranges().iter().enumerate() {
            y0[[i, j]] = rng.random_range(lo..hi);
        }
        for (i, &(lo, hi)) in model.control_ranges().iter().enumerate() {
            u[[i, j]] = rng.random_range(lo..hi);
        }
    }
    Ok(CollocationSet { t, y0, u })
}

/// Ingest externally produced training tuples from CSV with header
/// `t,y0_1..y0_n,u_1..u_m,target_1..target_n`.
pub fn load_training_csv(path: &Path, model: &OdeModel) -> Result<TrainingSet, SamplingError> {
    let text = std::fs::read_to_string(path)?;
    let ny = model.n_states();
    let nu = model.n_controls();
    let mut expected = vec!["t".to_string()];
    expected.extend((1..=ny).map(|i| format!("y0_{i}")));
    expected.extend((1..=nu).map(|i| format!("u_{i}")));
    expected.extend((1..=ny).map(|i| format!("target_{i}")));

    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| SamplingError::Csv("empty file".into()))?;
    let got: Vec<&str> = header.split(',').map(str::trim).collect();
    if got != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(SamplingError::Csv(format!(
            "header mismatch: expected '{}', got '{}'",
            expected.join(","),
            header
        )));
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != expected.len() {
            return Err(SamplingError::Csv(format!(
                "line {}: expected {} fields, got {}",
                lineno + 2,
                expected.len(),
                fields.len()
            )));
        }
        let mut row = Vec::with_capacity(fields.len());
        for f in fields {
            let v: f64 = f.parse().map_err(|_| {
                SamplingError::Csv(format!("line {}: '{}' is not a number", lineno + 2, f))
            })?;
            if !v.is_finite() {
                return Err(SamplingError::Csv(format!(
                    "line {}: non-finite value",
                    lineno + 2
                )));
            }
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(SamplingError::Empty("training"));
    }

    let n = rows.len();
    let mut t = Array1::zeros(n);
    let mut y0 = Array2::zeros((ny, n));
    let mut u = Array2::zeros((nu, n));
    let mut target = Array2::zeros((ny, n));
    for (j, row) in rows.iter().enumerate() {
        t[j] = row[0];
        for i in 0..ny {
            y0[[i, j]] = row[1 + i];
            target[[i, j]] = row[1 + ny + nu + i];
        }
        for i in 0..nu {
            u[[i, j]] = row[1 + ny + i];
        }
    }
    Ok(TrainingSet { t, y0, u, target })
}
