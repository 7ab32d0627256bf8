//! Fully connected surrogate network realizing y(t) = f_w(t, y0, u) and the
//! discrete one-step map f̂_w(y, u) = f_w(T, y, u).
//!
//! Inputs are affinely scaled onto [-1, 1] per declared range before the
//! first layer; hidden layers use tanh, the output layer is linear, and an
//! optional per-output affine map converts the raw head back to physical
//! units. The network can be recorded onto an autodiff [`Tape`] either with
//! parameters as differentiable leaves (training) or as constants (control),
//! and the tape recording can also unroll the forward-mode tangent dy/dt as
//! explicit graph operations so a scalar loss built on top of dy/dt remains
//! differentiable with respect to the parameters.

use crate::autodiff::{NodeId, Tape, TapeError};
use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Current checkpoint format identifier.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{what}: expected length {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("checkpoint format version {got} unsupported (this build reads {supported})")]
    CheckpointVersion { got: u32, supported: u32 },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint encoding: {0}")]
    Encoding(#[from] serde_json::Error),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// One-dimensional affine map x -> gain * x + offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub gain: f64,
    pub offset: f64,
}

impl AffineMap {
    pub const IDENTITY: AffineMap = AffineMap {
        gain: 1.0,
        offset: 0.0,
    };

    /// Map [lo, hi] onto [-1, 1].
    pub fn normalizing(lo: f64, hi: f64) -> Result<Self, NetworkError> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(NetworkError::Config(format!(
                "cannot normalize degenerate range [{lo}, {hi}]"
            )));
        }
        Ok(AffineMap {
            gain: 2.0 / (hi - lo),
            offset: -(hi + lo) / (hi - lo),
        })
    }

    /// Map [-1, 1] onto [lo, hi] (midpoint to 0 in the inverse direction).
    pub fn denormalizing(lo: f64, hi: f64) -> Result<Self, NetworkError> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(NetworkError::Config(format!(
                "cannot denormalize degenerate range [{lo}, {hi}]"
            )));
        }
        Ok(AffineMap {
            gain: (hi - lo) / 2.0,
            offset: (hi + lo) / 2.0,
        })
    }

    pub fn apply(&self, x: f64) -> f64 {
        self.gain * x + self.offset
    }

    pub fn invert(&self, y: f64) -> f64 {
        (y - self.offset) / self.gain
    }
}

/// How raw network outputs map to physical state units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputScalingMode {
    /// Raw head values are physical units (suits symmetric ranges like
    /// the oscillator's [-3, 3]).
    Identity,
    /// Head value o maps to midpoint + halfwidth * o of each state range
    /// (suits non-negative asymmetric ranges like tank levels).
    Centered,
}

/// Which inputs of a forward call fell outside the trained envelope.
///
/// `t` flags values outside [0, T]; `y0` and `u` flag components outside
/// their declared range widened by 50% on each side. Flagged calls still
/// return a prediction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RangeFlags {
    pub t: bool,
    pub y0: bool,
    pub u: bool,
}

impl RangeFlags {
    pub fn any(&self) -> bool {
        self.t || self.y0 || self.u
    }
}

/// A forward evaluation: prediction plus out-of-envelope flags.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub y: Array1<f64>,
    pub flags: RangeFlags,
}

/// Layered weights and biases plus the scaling that fixes the physical
/// meaning of inputs and outputs. Immutable during concurrent reads; the
/// optimizer constructs updated copies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    layer_sizes: Vec<usize>,
    /// Inner-interval length T in seconds; forward's time input lives in [0, T].
    t_horizon: f64,
    /// Per network input (t, then y0 components, then u components).
    input_scaling: Vec<AffineMap>,
    /// Raw input ranges behind `input_scaling`, kept for range flagging.
    input_ranges: Vec<(f64, f64)>,
    /// Per output component, raw head -> physical units.
    output_scaling: Vec<AffineMap>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array2<f64>>,
}

impl NetworkParams {
    /// Glorot-uniform weights and zero biases, deterministic per seed.
    ///
    /// `layer_sizes` runs from the input width 1 + N_y + N_u to the output
    /// width N_y with at least one hidden layer in between. State and
    /// control ranges define the input normalization; `output_mode` decides
    /// whether the head is read raw or recentered onto the state ranges.
    pub fn init(
        layer_sizes: &[usize],
        t_horizon: f64,
        state_ranges: &[(f64, f64)],
        control_ranges: &[(f64, f64)],
        output_mode: OutputScalingMode,
        seed: u64,
    ) -> Result<Self, NetworkError> {
        if layer_sizes.len() < 3 {
            return Err(NetworkError::Config(format!(
                "need at least one hidden layer, got layer_sizes of length {}",
                layer_sizes.len()
            )));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(NetworkError::Config("layer sizes must be positive".into()));
        }
        if !(t_horizon.is_finite() && t_horizon > 0.0) {
            return Err(NetworkError::Config(format!(
                "inner-interval length must be positive, got {t_horizon}"
            )));
        }
        let n_y = state_ranges.len();
        let n_u = control_ranges.len();
        let expected_in = 1 + n_y + n_u;
        if layer_sizes[0] != expected_in {
            return Err(NetworkError::Config(format!(
                "input layer must have width 1 + {n_y} states + {n_u} controls = {expected_in}, got {}",
                layer_sizes[0]
            )));
        }
        let out = *layer_sizes.last().expect("nonempty");
        if out != n_y {
            return Err(NetworkError::Config(format!(
                "output layer must have width {n_y}, got {out}"
            )));
        }

        let mut input_scaling = Vec::with_capacity(expected_in);
        let mut input_ranges = Vec::with_capacity(expected_in);
        input_scaling.push(AffineMap::normalizing(0.0, t_horizon)?);
        input_ranges.push((0.0, t_horizon));
        for &(lo, hi) in state_ranges.iter().chain(control_ranges.iter()) {
            input_scaling.push(AffineMap::normalizing(lo, hi)?);
            input_ranges.push((lo, hi));
        }

        let output_scaling = match output_mode {
            OutputScalingMode::Identity => vec![AffineMap::IDENTITY; n_y],
            OutputScalingMode::Centered => state_ranges
                .iter()
                .map(|&(lo, hi)| AffineMap::denormalizing(lo, hi))
                .collect::<Result<Vec<_>, _>>()?,
        };

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(layer_sizes.len() - 1);
        let mut biases = Vec::with_capacity(layer_sizes.len() - 1);
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(Array2::from_shape_fn((fan_out, fan_in), |_| {
                rng.random_range(-bound..bound)
            }));
            biases.push(Array2::zeros((fan_out, 1)));
        }

        Ok(NetworkParams {
            layer_sizes: layer_sizes.to_vec(),
            t_horizon,
            input_scaling,
            input_ranges,
            output_scaling,
            weights,
            biases,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn t_horizon(&self) -> f64 {
        self.t_horizon
    }

    pub fn n_states(&self) -> usize {
        *self.layer_sizes.last().expect("nonempty")
    }

    pub fn n_controls(&self) -> usize {
        self.layer_sizes[0] - 1 - self.n_states()
    }

    pub fn input_scaling(&self) -> &[AffineMap] {
        &self.input_scaling
    }

    pub fn output_scaling(&self) -> &[AffineMap] {
        &self.output_scaling
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array2<f64>] {
        &self.biases
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.weights
            .iter()
            .zip(self.biases.iter())
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    /// Copy all parameters into a flat vector: per layer, weight row-major
    /// then bias.
    pub fn to_flat(&self) -> Array1<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(self.biases.iter()) {
            flat.extend(w.iter());
            flat.extend(b.iter());
        }
        Array1::from(flat)
    }

    /// Overwrite all parameters from a flat vector laid out as `to_flat`.
    pub fn read_flat(&mut self, flat: ArrayView1<f64>) -> Result<(), NetworkError> {
        if flat.len() != self.param_count() {
            return Err(NetworkError::DimensionMismatch {
                what: "flat parameter vector",
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        let mut at = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for v in w.iter_mut() {
                *v = flat[at];
                at += 1;
            }
            for v in b.iter_mut() {
                *v = flat[at];
                at += 1;
            }
        }
        Ok(())
    }

    fn check_forward_inputs(
        &self,
        t: f64,
        y0: ArrayView1<f64>,
        u: ArrayView1<f64>,
    ) -> Result<RangeFlags, NetworkError> {
        if y0.len() != self.n_states() {
            return Err(NetworkError::DimensionMismatch {
                what: "initial state",
                expected: self.n_states(),
                got: y0.len(),
            });
        }
        if u.len() != self.n_controls() {
            return Err(NetworkError::DimensionMismatch {
                what: "control vector",
                expected: self.n_controls(),
                got: u.len(),
            });
        }
        if !t.is_finite()
            || !y0.iter().all(|v| v.is_finite())
            || !u.iter().all(|v| v.is_finite())
        {
            return Err(NetworkError::NonFinite("forward input"));
        }

        let widened = |idx: usize, v: f64| {
            let (lo, hi) = self.input_ranges[idx];
            let half = 0.5 * (hi - lo);
            v < lo - half || v > hi + half
        };
        let mut flags = RangeFlags {
            t: !(0.0..=self.t_horizon).contains(&t),
            ..RangeFlags::default()
        };
        for (i, &v) in y0.iter().enumerate() {
            flags.y0 |= widened(1 + i, v);
        }
        for (i, &v) in u.iter().enumerate() {
            flags.u |= widened(1 + self.n_states() + i, v);
        }
        Ok(flags)
    }

    /// Evaluate y(t) = f_w(t, y0, u). Deterministic; out-of-envelope inputs
    /// are flagged, not rejected.
    pub fn forward(
        &self,
        t: f64,
        y0: ArrayView1<f64>,
        u: ArrayView1<f64>,
    ) -> Result<Prediction, NetworkError> {
        let flags = self.check_forward_inputs(t, y0, u)?;

        let mut x = Array1::zeros(self.layer_sizes[0]);
        x[0] = self.input_scaling[0].apply(t);
        for (i, &v) in y0.iter().enumerate() {
            x[1 + i] = self.input_scaling[1 + i].apply(v);
        }
        let off = 1 + self.n_states();
        for (i, &v) in u.iter().enumerate() {
            x[off + i] = self.input_scaling[off + i].apply(v);
        }

        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(self.biases.iter()).enumerate() {
            let mut z = w.dot(&x);
            z += &b.column(0);
            x = if l < last { z.mapv(f64::tanh) } else { z };
        }

        let y = Array1::from_iter(
            x.iter()
                .zip(self.output_scaling.iter())
                .map(|(&o, s)| s.apply(o)),
        );
        Ok(Prediction { y, flags })
    }

    /// The discrete control interface f̂_w: forward at t = T exactly (same
    /// code path, bitwise identical).
    pub fn step(
        &self,
        y_prev: ArrayView1<f64>,
        u_k: ArrayView1<f64>,
    ) -> Result<Array1<f64>, NetworkError> {
        Ok(self.forward(self.t_horizon, y_prev, u_k)?.y)
    }

    /// Record every weight and bias as a differentiable leaf, in `to_flat`
    /// order.
    pub fn params_as_leaves(&self, tape: &mut Tape) -> Result<ParamNodes, TapeError> {
        let mut weights = Vec::with_capacity(self.weights.len());
        let mut biases = Vec::with_capacity(self.biases.len());
        for (w, b) in self.weights.iter().zip(self.biases.iter()) {
            weights.push(tape.leaf(w.clone())?);
            biases.push(tape.leaf(b.clone())?);
        }
        Ok(ParamNodes { weights, biases })
    }

    /// Record every weight and bias as a fixed constant.
    pub fn params_as_constants(&self, tape: &mut Tape) -> Result<ParamNodes, TapeError> {
        let mut weights = Vec::with_capacity(self.weights.len());
        let mut biases = Vec::with_capacity(self.biases.len());
        for (w, b) in self.weights.iter().zip(self.biases.iter()) {
            weights.push(tape.constant(w.clone())?);
            biases.push(tape.constant(b.clone())?);
        }
        Ok(ParamNodes { weights, biases })
    }

    /// Record the scaled forward pass on a tape over batched columns.
    ///
    /// `t` is a (1 x B) node, `y0` (N_y x B), `u` (N_u x B); the result is
    /// the physical-unit prediction (N_y x B). With `with_time_tangent`,
    /// the forward-mode tangent dy/dt is unrolled as additional graph
    /// operations sharing the same parameter nodes, so losses built on the
    /// tangent differentiate correctly through it.
    pub fn output_on_tape(
        &self,
        tape: &mut Tape,
        params: &ParamNodes,
        t: NodeId,
        y0: NodeId,
        u: NodeId,
        with_time_tangent: bool,
    ) -> Result<TapeOutput, TapeError> {
        let batch = tape.shape(t).1;
        let n_in = self.layer_sizes[0];

        let gains: Vec<f64> = self.input_scaling.iter().map(|s| s.gain).collect();
        let offsets: Vec<f64> = self.input_scaling.iter().map(|s| s.offset).collect();
        let t_s = tape.row_affine(t, &gains[..1], &offsets[..1])?;
        let ny = self.n_states();
        let y0_s = tape.row_affine(y0, &gains[1..1 + ny], &offsets[1..1 + ny])?;
        let u_s = tape.row_affine(u, &gains[1 + ny..], &offsets[1 + ny..])?;
        let mut x = tape.concat_rows(&[t_s, y0_s, u_s])?;

        // Tangent seed: d(scaled input)/dt is the t gain in row 0, zero
        // elsewhere; y0 and u do not depend on t.
        let mut xdot = if with_time_tangent {
            let mut seed = Array2::zeros((n_in, batch));
            seed.row_mut(0).fill(self.input_scaling[0].gain);
            Some(tape.constant(seed)?)
        } else {
            None
        };

        let last = params.weights.len() - 1;
        for l in 0..params.weights.len() {
            let z = tape.affine(params.weights[l], x, params.biases[l])?;
            let zdot = match xdot {
                Some(xd) => {
                    let rows = tape.shape(z).0;
                    let zero_bias = tape.constant(Array2::zeros((rows, 1)))?;
                    Some(tape.affine(params.weights[l], xd, zero_bias)?)
                }
                None => None,
            };
            if l < last {
                let a = tape.tanh(z)?;
                xdot = match zdot {
                    Some(zd) => {
                        // tanh'(z) = 1 - tanh(z)^2, reusing the activation node.
                        let sq = tape.square(a)?;
                        let neg = tape.scale(sq, -1.0)?;
                        let deriv = tape.offset(neg, 1.0)?;
                        Some(tape.mul(deriv, zd)?)
                    }
                    None => None,
                };
                x = a;
            } else {
                x = z;
                xdot = zdot;
            }
        }

        let out_gains: Vec<f64> = self.output_scaling.iter().map(|s| s.gain).collect();
        let out_offsets: Vec<f64> = self.output_scaling.iter().map(|s| s.offset).collect();
        let y = tape.row_affine(x, &out_gains, &out_offsets)?;
        let dy_dt = match xdot {
            Some(xd) => {
                let zeros = vec![0.0; out_gains.len()];
                Some(tape.row_affine(xd, &out_gains, &zeros)?)
            }
            None => None,
        };
        Ok(TapeOutput { y, dy_dt })
    }

    /// Save as a versioned JSON checkpoint. f64 values round-trip exactly
    /// (shortest-representation encoding), so load(save(p)) == p bitwise.
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), NetworkError> {
        let doc = CheckpointDoc {
            format_version: CHECKPOINT_VERSION,
            params: self.clone(),
        };
        let json = serde_json::to_string_pretty(&doc)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self, NetworkError> {
        let text = std::fs::read_to_string(path)?;
        let doc: CheckpointDoc = serde_json::from_str(&text)?;
        if doc.format_version != CHECKPOINT_VERSION {
            return Err(NetworkError::CheckpointVersion {
                got: doc.format_version,
                supported: CHECKPOINT_VERSION,
            });
        }
        doc.params.validate()
    }

    fn validate(self) -> Result<Self, NetworkError> {
        if self.layer_sizes.len() < 3 {
            return Err(NetworkError::Config(
                "checkpoint has no hidden layers".into(),
            ));
        }
        let n_in = self.layer_sizes[0];
        if self.input_scaling.len() != n_in || self.input_ranges.len() != n_in {
            return Err(NetworkError::Config(
                "checkpoint input scaling does not match the input width".into(),
            ));
        }
        if self.output_scaling.len() != *self.layer_sizes.last().unwrap() {
            return Err(NetworkError::Config(
                "checkpoint output scaling does not match the output width".into(),
            ));
        }
        if self.weights.len() != self.layer_sizes.len() - 1
            || self.biases.len() != self.weights.len()
        {
            return Err(NetworkError::Config(
                "checkpoint layer count mismatch".into(),
            ));
        }
        for (l, pair) in self.layer_sizes.windows(2).enumerate() {
            if self.weights[l].dim() != (pair[1], pair[0])
                || self.biases[l].dim() != (pair[1], 1)
            {
                return Err(NetworkError::Config(format!(
                    "checkpoint layer {l} has inconsistent shapes"
                )));
            }
        }
        if !(self.t_horizon.is_finite() && self.t_horizon > 0.0) {
            return Err(NetworkError::Config(
                "checkpoint inner-interval length must be positive".into(),
            ));
        }
        Ok(self)
    }
}

/// Tape node ids of all weights and biases, in layer order.
pub struct ParamNodes {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
}

impl ParamNodes {
    /// Leaf ids in `to_flat` order (weight then bias per layer).
    pub fn flat_ids(&self) -> Vec<NodeId> {
        self.weights
            .iter()
            .zip(self.biases.iter())
            .flat_map(|(&w, &b)| [w, b])
            .collect()
    }
}

/// Network nodes recorded on a tape: prediction and, when requested, its
/// time derivative.
pub struct TapeOutput {
    pub y: NodeId,
    pub dy_dt: Option<NodeId>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    format_version: u32,
    params: NetworkParams,
}
