//! Composite loss assembly and the two-phase optimization schedule.
//!
//! Training minimizes `MSE_y + lambda * MSE_F`: a data term tying the
//! network output at t = 0 to the initial state, and a physics term
//! penalizing the ODE residual at collocation points drawn from the full
//! input domain. The schedule runs K1 full-batch first-order epochs to get
//! out of the random-init regime, then K2 quasi-Newton iterations to polish;
//! both phases consume the same tape-backed gradient. Everything is seeded,
//! full-batch, and sequential, so a (seed, config) pair reproduces the final
//! parameters bit for bit.

mod adam;
pub(crate) mod lbfgs;
mod loss;

pub use adam::{Adam, AdamConfig};
pub use lbfgs::{Lbfgs, LbfgsConfig, LbfgsOutcome};
pub use loss::{LossEvaluator, LossTerms};

use crate::autodiff::{Tape, TapeError};
use crate::network::{NetworkError, NetworkParams};
use crate::physics::{ModelError, OdeModel};
use crate::sampling::{
    sample_collocation_set, sample_training_set, CollocationSet, SamplingError, TrainingSet,
};
use ndarray::{s, Array1, Array2};
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error(
        "loss became non-finite at {phase} iteration {iteration} \
         (mse_y = {mse_y}, mse_f = {mse_f})"
    )]
    NonFiniteLoss {
        iteration: usize,
        phase: Phase,
        mse_y: f64,
        mse_f: f64,
    },
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
}

/// Which optimizer produced a record or snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Adam,
    Lbfgs,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Adam => f.write_str("adam"),
            Phase::Lbfgs => f.write_str("lbfgs"),
        }
    }
}

/// Physics-term weight: a fixed positive value, or balanced against the
/// data term once at initialization.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Lambda {
    #[default]
    Auto,
    Fixed(f64),
}

impl Serialize for Lambda {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Lambda::Auto => s.serialize_str("auto"),
            Lambda::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Lambda {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct LambdaVisitor;
        impl Visitor<'_> for LambdaVisitor {
            type Value = Lambda;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number or the string \"auto\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Lambda, E> {
                Ok(Lambda::Fixed(v))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Lambda, E> {
                Ok(Lambda::Fixed(v as f64))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Lambda, E> {
                Ok(Lambda::Fixed(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Lambda, E> {
                if v == "auto" {
                    Ok(Lambda::Auto)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
        }
        d.deserialize_any(LambdaVisitor)
    }
}

/// Bounds applied when resolving [`Lambda::Auto`] from the initial
/// loss-term ratio.
pub const LAMBDA_AUTO_BOUNDS: (f64, f64) = (1e-4, 1e4);

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Boundary training points (t = 0 pairs).
    pub n_t: usize,
    /// Collocation points for the physics term.
    pub n_f: usize,
    /// First-phase epochs.
    pub k1: usize,
    /// Second-phase iterations.
    pub k2: usize,
    pub lambda: Lambda,
    pub adam: AdamConfig,
    pub lbfgs: LbfgsConfig,
    /// Seeds the training set; the collocation set uses `seed + 1`.
    pub seed: u64,
    /// Snapshot cadence, in iterations, for the checkpoint hook. Phase
    /// boundaries always snapshot regardless of cadence.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_t: 1000,
            n_f: 100_000,
            k1: 500,
            k2: 2000,
            lambda: Lambda::Auto,
            adam: AdamConfig::default(),
            lbfgs: LbfgsConfig::default(),
            seed: 0,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.n_t == 0 {
            return Err(TrainError::Config("n_t must be at least 1".into()));
        }
        if self.n_f == 0 {
            return Err(TrainError::Config("n_f must be at least 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(TrainError::Config(
                "checkpoint_every must be at least 1".into(),
            ));
        }
        if let Lambda::Fixed(v) = self.lambda {
            if !v.is_finite() || v < 0.0 {
                return Err(TrainError::Config(format!(
                    "lambda must be finite and nonnegative, got {v}"
                )));
            }
        }
        self.adam.validate().map_err(TrainError::Config)?;
        self.lbfgs.validate().map_err(TrainError::Config)?;
        Ok(())
    }
}

/// One accepted optimizer iteration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iter: usize,
    pub phase: Phase,
    pub mse_y: f64,
    pub mse_f: f64,
    /// `mse_y + lambda * mse_f` with the resolved weight.
    pub total: f64,
    /// Wall-clock time since training started, in milliseconds.
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<TrainRecord>,
    /// Physics-term weight actually used.
    pub lambda: f64,
    /// Reason the second phase stopped before its iteration budget, if it did.
    pub lbfgs_stopped_early: Option<String>,
    pub final_mse_y: f64,
    pub final_mse_f: f64,
    pub final_total: f64,
    /// Validation rollout error, filled in by callers that run one.
    pub final_mse_gen: Option<f64>,
}

impl TrainReport {
    /// Write the per-iteration records as CSV with header
    /// `iter,phase,mse_y,mse_f,total,wall_ms`.
    pub fn save_csv(&self, path: &Path) -> io::Result<()> {
        let mut out = String::from("iter,phase,mse_y,mse_f,total,wall_ms\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.iter, r.phase, r.mse_y, r.mse_f, r.total, r.wall_ms
            ));
        }
        fs::write(path, out)
    }
}

/// Data term: mean over outputs of mean over samples of squared error
/// between the network at t = 0 and the stored targets.
pub fn loss_data(params: &NetworkParams, data: &TrainingSet) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    let n_t = data.len();
    let ny = params.n_states();
    let mut tape = Tape::new();
    let nodes = params.params_as_constants(&mut tape)?;
    let t_row = Array2::from_shape_vec((1, n_t), data.t.to_vec()).expect("t row");
    let tn = tape.constant(t_row)?;
    let yn = tape.constant(data.y0.clone())?;
    let un = tape.constant(data.u.clone())?;
    let out = params.output_on_tape(&mut tape, &nodes, tn, yn, un, false)?;
    let target = tape.constant(data.target.clone())?;
    let diff = tape.sub(out.y, target)?;
    let sq = tape.square(diff)?;
    let total = tape.sum(sq)?;
    let loss = tape.scale(total, 1.0 / (ny * n_t) as f64)?;
    Ok(tape.scalar_value(loss)?)
}

/// Physics term: mean over outputs of mean over collocation points of the
/// squared ODE residual `dy/dt - rhs(y, u)`.
pub fn loss_physics(
    params: &NetworkParams,
    colloc: &CollocationSet,
    model: &OdeModel,
) -> Result<f64, TrainError> {
    if colloc.is_empty() {
        return Err(TrainError::Config("collocation set is empty".into()));
    }
    const CHUNK: usize = 2000;
    let n_f = colloc.len();
    let ny = params.n_states();
    let weight = 1.0 / (ny * n_f) as f64;
    let mut acc = 0.0;
    let mut at = 0;
    while at < n_f {
        let end = (at + CHUNK).min(n_f);
        let mut tape = Tape::new();
        let nodes = params.params_as_constants(&mut tape)?;
        let t_row = colloc
            .t
            .slice(s![at..end])
            .to_owned()
            .into_shape_with_order((1, end - at))
            .expect("t chunk");
        let tn = tape.constant(t_row)?;
        let yn = tape.constant(colloc.y0.slice(s![.., at..end]).to_owned())?;
        let un = tape.constant(colloc.u.slice(s![.., at..end]).to_owned())?;
        let out = params.output_on_tape(&mut tape, &nodes, tn, yn, un, true)?;
        let dy_dt = out.dy_dt.expect("tangent requested");
        let rhs = model.rhs_on_tape(&mut tape, out.y, un)?;
        let residual = tape.sub(dy_dt, rhs)?;
        let sq = tape.square(residual)?;
        let total = tape.sum(sq)?;
        let loss = tape.scale(total, weight)?;
        acc += tape.scalar_value(loss)?;
        at = end;
    }
    Ok(acc)
}

/// Composite loss `loss_data + lambda * loss_physics` with a resolved
/// weight.
pub fn total_loss(
    params: &NetworkParams,
    data: &TrainingSet,
    colloc: &CollocationSet,
    model: &OdeModel,
    lambda: f64,
) -> Result<f64, TrainError> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(TrainError::Config(format!(
            "lambda must be finite and nonnegative, got {lambda}"
        )));
    }
    Ok(loss_data(params, data)? + lambda * loss_physics(params, colloc, model)?)
}

fn resolve_lambda(lambda: Lambda, init: LossTerms) -> f64 {
    match lambda {
        Lambda::Fixed(v) => v,
        Lambda::Auto => {
            if init.mse_f > 0.0 {
                let (lo, hi) = LAMBDA_AUTO_BOUNDS;
                (init.mse_y / init.mse_f).clamp(lo, hi)
            } else {
                1.0
            }
        }
    }
}

fn at_iteration(e: TrainError, iteration: usize) -> TrainError {
    match e {
        TrainError::NonFiniteLoss {
            phase, mse_y, mse_f, ..
        } => TrainError::NonFiniteLoss {
            iteration,
            phase,
            mse_y,
            mse_f,
        },
        other => other,
    }
}

/// Periodic parameter snapshots during training. Called with the current
/// parameters, the phase that produced them, and the global iteration.
pub type SnapshotHook<'a> = &'a mut dyn FnMut(&NetworkParams, Phase, usize) -> Result<(), NetworkError>;

struct Snapshots<'a> {
    hook: Option<SnapshotHook<'a>>,
    scratch: NetworkParams,
    last_iter: Option<usize>,
}

impl Snapshots<'_> {
    fn emit(&mut self, x: &Array1<f64>, phase: Phase, iter: usize) -> Result<(), TrainError> {
        if self.last_iter == Some(iter) {
            return Ok(());
        }
        if let Some(hook) = self.hook.as_mut() {
            self.scratch.read_flat(x.view())?;
            hook(&self.scratch, phase, iter)?;
        }
        self.last_iter = Some(iter);
        Ok(())
    }
}

/// Run the two-phase schedule: K1 full-batch ADAM epochs, then K2 L-BFGS
/// iterations with a strong-Wolfe line search, both on
/// `mse_y + lambda * mse_f`. Sample sets are generated from the config seed
/// unless a training set is supplied. Returns the trained parameters and
/// the per-iteration report.
pub fn train(
    params: &NetworkParams,
    model: &OdeModel,
    config: &TrainConfig,
    data: Option<&TrainingSet>,
    snapshot_hook: Option<SnapshotHook<'_>>,
) -> Result<(NetworkParams, TrainReport), TrainError> {
    config.validate()?;
    let owned_data;
    let data = match data {
        Some(d) => d,
        None => {
            owned_data = sample_training_set(model, config.n_t, config.seed)?;
            &owned_data
        }
    };
    let colloc = sample_collocation_set(
        model,
        params.t_horizon(),
        config.n_f,
        config.seed.wrapping_add(1),
    )?;
    let mut eval = LossEvaluator::build(params, model, data, &colloc)?;

    let mut x = params.to_flat();
    let (init_terms, _, _) = eval.eval_with_grad(&x)?;
    if !(init_terms.mse_y.is_finite() && init_terms.mse_f.is_finite()) {
        return Err(TrainError::NonFiniteLoss {
            iteration: 0,
            phase: Phase::Adam,
            mse_y: init_terms.mse_y,
            mse_f: init_terms.mse_f,
        });
    }
    let lambda = resolve_lambda(config.lambda, init_terms);

    let started = Instant::now();
    let ms = |started: &Instant| started.elapsed().as_secs_f64() * 1e3;
    let mut records: Vec<TrainRecord> = Vec::with_capacity(config.k1 + config.k2);
    let mut snapshots = Snapshots {
        hook: snapshot_hook,
        scratch: params.clone(),
        last_iter: None,
    };
    let mut lbfgs_stopped_early = None;
    let mut iter = 0usize;

    if config.k1 > 0 {
        let mut adam = Adam::new(config.adam, x.len());
        for _ in 0..config.k1 {
            iter += 1;
            let (terms, gy, gf) = eval.eval_with_grad(&x)?;
            let total = terms.mse_y + lambda * terms.mse_f;
            if !total.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    iteration: iter,
                    phase: Phase::Adam,
                    mse_y: terms.mse_y,
                    mse_f: terms.mse_f,
                });
            }
            let mut grad = gy;
            grad.scaled_add(lambda, &gf);
            adam.step(&mut x, &grad);
            records.push(TrainRecord {
                iter,
                phase: Phase::Adam,
                mse_y: terms.mse_y,
                mse_f: terms.mse_f,
                total,
                wall_ms: ms(&started),
            });
            if iter % config.checkpoint_every == 0 {
                snapshots.emit(&x, Phase::Adam, iter)?;
            }
        }
        snapshots.emit(&x, Phase::Adam, iter)?;
    }

    if config.k2 > 0 {
        let (terms, gy, gf) = eval.eval_with_grad(&x)?;
        let f0 = terms.mse_y + lambda * terms.mse_f;
        if !f0.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                iteration: iter,
                phase: Phase::Lbfgs,
                mse_y: terms.mse_y,
                mse_f: terms.mse_f,
            });
        }
        let mut g0 = gy;
        g0.scaled_add(lambda, &gf);
        let mut pending = terms;
        let mut opt = Lbfgs::new(config.lbfgs, x.clone(), f0, g0);
        for _ in 0..config.k2 {
            iter += 1;
            let outcome = {
                let mut objective = |p: &Array1<f64>| -> Result<(f64, Array1<f64>), TrainError> {
                    let (t, gy, gf) = eval.eval_with_grad(p)?;
                    let total = t.mse_y + lambda * t.mse_f;
                    if !total.is_finite() {
                        return Err(TrainError::NonFiniteLoss {
                            iteration: 0,
                            phase: Phase::Lbfgs,
                            mse_y: t.mse_y,
                            mse_f: t.mse_f,
                        });
                    }
                    pending = t;
                    let mut g = gy;
                    g.scaled_add(lambda, &gf);
                    Ok((total, g))
                };
                opt.iterate(&mut objective)
                    .map_err(|e| at_iteration(e, iter))?
            };
            match outcome {
                LbfgsOutcome::Stepped { .. } => {
                    // The accepted point is always the line search's final
                    // objective evaluation, so `pending` holds its terms.
                    records.push(TrainRecord {
                        iter,
                        phase: Phase::Lbfgs,
                        mse_y: pending.mse_y,
                        mse_f: pending.mse_f,
                        total: opt.f(),
                        wall_ms: ms(&started),
                    });
                    if iter % config.checkpoint_every == 0 {
                        snapshots.emit(opt.x(), Phase::Lbfgs, iter)?;
                    }
                }
                LbfgsOutcome::LineSearchFailed { evals } => {
                    lbfgs_stopped_early = Some(format!(
                        "line search found no acceptable step within {evals} evaluations \
                         at iteration {iter}"
                    ));
                    break;
                }
                LbfgsOutcome::Stationary => {
                    lbfgs_stopped_early =
                        Some(format!("gradient is exactly zero at iteration {iter}"));
                    break;
                }
            }
        }
        x = opt.x().clone();
        snapshots.emit(&x, Phase::Lbfgs, iter)?;
    }

    let (final_terms, _, _) = eval.eval_with_grad(&x)?;
    let mut trained = params.clone();
    trained.read_flat(x.view())?;
    let report = TrainReport {
        records,
        lambda,
        lbfgs_stopped_early,
        final_mse_y: final_terms.mse_y,
        final_mse_f: final_terms.mse_f,
        final_total: final_terms.mse_y + lambda * final_terms.mse_f,
        final_mse_gen: None,
    };
    Ok((trained, report))
}
