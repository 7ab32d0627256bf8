//! Physics-informed neural surrogates for controlled ODE systems.
//!
//! The crate trains a fully connected network `y(t) = f_w(t, y0, u)` to
//! satisfy an ODE `dy/dt = N[y, u]` over one sampling interval, so that
//! chaining `f_w(T, ., .)` steps the system like a discrete-time model.
//! That step function then serves as the prediction model inside a
//! receding-horizon controller.
//!
//! Modules:
//! - [`autodiff`]: reverse-mode tape over dense matrix nodes
//! - [`physics`]: ODE right-hand sides (Van der Pol, quadruple tank)
//! - [`network`]: the surrogate network, scaling, and checkpoints
//! - [`sampling`]: boundary and collocation point generation
//! - [`training`]: composite loss and the two-phase optimizer
//! - [`simulator`]: RK4 reference integration and self-loop rollouts
//! - [`mpc`]: condensed receding-horizon controller
//! - [`metrics`]: evaluation metrics for trajectories and control runs

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod autodiff;
pub mod metrics;
pub mod mpc;
pub mod network;
pub mod physics;
pub mod sampling;
pub mod simulator;
pub mod training;

pub use autodiff::{record_forward, NodeId, Nonlinearity, Tape, TapeError};
pub use metrics::{
    constant_reference, control_report, iae, mse_gen, project_outputs, rmse, MetricError,
    MetricReport,
};
pub use mpc::{
    aggregate_controls, receding_horizon_run, ClosedLoopRun, Controller, MpcConfig, MpcError,
    MpcSolution, PincModel, PredictionModel, RkModel, SolverConfig, StateConstraint,
};
pub use network::{
    AffineMap, NetworkError, NetworkParams, OutputScalingMode, ParamNodes, Prediction,
    RangeFlags, TapeOutput,
};
pub use physics::{FourTankParams, ModelError, OdeModel};
pub use sampling::{
    load_training_csv, sample_collocation_set, sample_training_set, CollocationSet,
    SamplingError, TrainingSet,
};
pub use simulator::{
    dense_prediction, rk4_integrate, rk4_step_fn, self_loop_rollout, Provenance,
    SimulatorError, Trajectory,
};
pub use training::{
    loss_data, loss_physics, total_loss, train, Adam, AdamConfig, Lambda, LbfgsConfig,
    LossEvaluator, LossTerms, Phase, TrainConfig, TrainError, TrainRecord, TrainReport,
};
