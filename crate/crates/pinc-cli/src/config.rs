//! Experiment configuration: one JSON file fully determines a run.
//!
//! The schema is versioned and strict. Unknown keys are rejected with the
//! offending key named, so a typo cannot silently fall back to a default.
//! Sections mirror the stages of an experiment: which plant, what network,
//! how to sample, how to train, how to control, and what scenario to run.

use crate::CliError;
use ndarray::Array1;
use pinc_core::{
    FourTankParams, MpcConfig, NetworkParams, OdeModel, OutputScalingMode, TrainConfig,
};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Schema revision this binary reads and writes.
pub const SCHEMA_VERSION: u32 = 1;

fn default_substeps() -> usize {
    10
}

fn default_true() -> bool {
    true
}

fn default_dense_points() -> usize {
    10
}

/// Plant selection plus physical-parameter overrides.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Registered model name: `van-der-pol` or `four-tank`.
    pub name: String,
    /// Oscillator damping; applies to `van-der-pol` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    /// Tank geometry; applies to `four-tank` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub four_tank: Option<FourTankParams>,
}

/// Surrogate network shape and initialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    /// Hidden layer widths; input and output widths come from the model.
    pub hidden_layers: Vec<usize>,
    /// Inner solution interval T, equal to the control sampling period.
    pub t_horizon: f64,
    /// Output head mapping; defaults per model (identity for the
    /// oscillator, centered for tank levels).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_scaling: Option<OutputScalingMode>,
    /// Weight initialization seed.
    #[serde(default)]
    pub seed: u64,
}

/// Where training points come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    /// Boundary (t = 0) training points.
    pub n_t: usize,
    /// Collocation points for the physics residual.
    pub n_f: usize,
    /// Seed for the training set; the collocation set uses `seed + 1`.
    #[serde(default)]
    pub seed: u64,
    /// Sampling region override for states (also sets the network's input
    /// scaling region).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_ranges: Option<Vec<(f64, f64)>>,
    /// Sampling region override for controls.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_ranges: Option<Vec<(f64, f64)>>,
    /// Optional CSV of externally produced training tuples; replaces the
    /// sampled boundary set when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_file: Option<PathBuf>,
}

/// Optimization schedule; sampling sizes and seed live in [`SamplingSection`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// First-phase epochs.
    pub k1: usize,
    /// Second-phase iterations.
    pub k2: usize,
    pub lambda: pinc_core::Lambda,
    pub adam: pinc_core::AdamConfig,
    pub lbfgs: pinc_core::LbfgsConfig,
    /// Snapshot cadence in iterations.
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let base = TrainConfig::default();
        TrainSection {
            k1: base.k1,
            k2: base.k2,
            lambda: base.lambda,
            adam: base.adam,
            lbfgs: base.lbfgs,
            checkpoint_every: base.checkpoint_every,
        }
    }
}

/// One piece of a piecewise-constant reference program.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceStep {
    /// Control step at which this setpoint takes effect.
    pub start: usize,
    /// Full state setpoint (entries with zero tracking weight are inert).
    pub setpoint: Vec<f64>,
}

/// What to simulate: initial condition, run length, reference program, and
/// validation rollout shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    /// Plant initial state.
    pub y0: Vec<f64>,
    /// Closed-loop run length in control steps.
    pub c_steps: usize,
    /// Piecewise-constant setpoint program, sorted by start step; the
    /// first entry must start at step 0.
    #[serde(default)]
    pub reference: Vec<ReferenceStep>,
    /// Control held before the first solve; defaults to the control box
    /// midpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_start: Option<Vec<f64>>,
    /// RK substeps per sampling interval for the plant and oracle.
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    /// Open-loop validation rollout length; defaults to `c_steps`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_steps: Option<usize>,
    /// Seed for the random control sequence of the validation rollout.
    #[serde(default)]
    pub validation_seed: u64,
    /// Replay the controls and initial state of a previously written
    /// trajectory CSV instead of generating a random sequence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay_file: Option<PathBuf>,
    /// State indices tracking metrics are computed over; defaults to all.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controlled_outputs: Option<Vec<usize>>,
    /// Also run the controller with the RK step map as prediction model.
    #[serde(default = "default_true")]
    pub rk_baseline: bool,
    /// Within-step evaluation grid size for the dense-prediction CSV;
    /// 0 skips the file.
    #[serde(default = "default_dense_points")]
    pub dense_points: usize,
}

/// Hyperparameter grid for `sweep`: the cell set is the cartesian product
/// of the populated axes (absent axes reuse the base config's value).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Architectures to try, each a hidden-layer width list.
    #[serde(default)]
    pub hidden_layer_grid: Vec<Vec<usize>>,
    /// Boundary-point counts to try.
    #[serde(default)]
    pub n_t_grid: Vec<usize>,
    /// Collocation-point counts to try.
    #[serde(default)]
    pub n_f_grid: Vec<usize>,
    /// Training repetitions per cell, each with its own seeds.
    pub repetitions: usize,
}

/// A complete, self-contained experiment description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub model: ModelSection,
    pub network: NetworkSection,
    pub sampling: SamplingSection,
    #[serde(default)]
    pub training: TrainSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mpc: Option<MpcConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    /// Where run outputs land; `--out` overrides it.
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Parse and structurally validate a config file. Schema violations
    /// name the offending key and location.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let config: ExperimentConfig = serde_json::from_str(&text).map_err(|e| {
            CliError::Config(format!("{}: {e}", path.display()))
        })?;
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<(), CliError> {
        let err = |m: String| Err(CliError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return err(format!(
                "unsupported schema_version {} (this binary reads {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        match self.model.name.as_str() {
            "van-der-pol" => {
                if self.model.four_tank.is_some() {
                    return err("four_tank parameters apply to the four-tank model only".into());
                }
            }
            "four-tank" => {
                if self.model.mu.is_some() {
                    return err("mu applies to the van-der-pol model only".into());
                }
            }
            other => {
                return err(format!(
                    "unknown model `{other}`; available: van-der-pol, four-tank"
                ));
            }
        }
        if self.network.hidden_layers.is_empty() {
            return err("network needs at least one hidden layer".into());
        }
        if self.network.hidden_layers.iter().any(|&w| w == 0) {
            return err("hidden layer widths must be positive".into());
        }
        if !(self.network.t_horizon.is_finite() && self.network.t_horizon > 0.0) {
            return err(format!(
                "t_horizon must be positive, got {}",
                self.network.t_horizon
            ));
        }
        if let Some(s) = &self.scenario {
            if s.substeps == 0 {
                return err("scenario substeps must be at least 1".into());
            }
            let mut last_start: Option<usize> = None;
            for (i, step) in s.reference.iter().enumerate() {
                match last_start {
                    None => {
                        if step.start != 0 {
                            return err(format!(
                                "reference program must start at step 0, got {}",
                                step.start
                            ));
                        }
                    }
                    Some(prev) => {
                        if step.start <= prev {
                            return err(format!(
                                "reference entry {i} starts at {} but the previous starts at {prev}",
                                step.start
                            ));
                        }
                    }
                }
                last_start = Some(step.start);
            }
        }
        if let Some(sw) = &self.sweep {
            if sw.repetitions == 0 {
                return err("sweep repetitions must be at least 1".into());
            }
        }
        Ok(())
    }

    /// Instantiate the plant with overrides applied.
    pub fn build_model(&self) -> Result<OdeModel, CliError> {
        let model = match self.model.name.as_str() {
            "van-der-pol" => OdeModel::van_der_pol(self.model.mu.unwrap_or(1.0))?,
            "four-tank" => {
                OdeModel::four_tank(self.model.four_tank.clone().unwrap_or_default())?
            }
            other => unreachable!("validate admitted model `{other}`"),
        };
        Ok(model.with_ranges(
            self.sampling.state_ranges.clone(),
            self.sampling.control_ranges.clone(),
        )?)
    }

    /// Output head mapping, defaulted per model when unset.
    pub fn output_scaling(&self) -> OutputScalingMode {
        self.network.output_scaling.unwrap_or(match self.model.name.as_str() {
            "four-tank" => OutputScalingMode::Centered,
            _ => OutputScalingMode::Identity,
        })
    }

    /// Fresh network matching the config, scaled to the model's ranges.
    pub fn init_network(&self, model: &OdeModel) -> Result<NetworkParams, CliError> {
        self.init_network_with(model, &self.network.hidden_layers, self.network.seed)
    }

    /// Fresh network with an overridden architecture and seed (sweep cells).
    pub fn init_network_with(
        &self,
        model: &OdeModel,
        hidden_layers: &[usize],
        seed: u64,
    ) -> Result<NetworkParams, CliError> {
        let mut layers = Vec::with_capacity(hidden_layers.len() + 2);
        layers.push(1 + model.n_states() + model.n_controls());
        layers.extend_from_slice(hidden_layers);
        layers.push(model.n_states());
        Ok(NetworkParams::init(
            &layers,
            self.network.t_horizon,
            model.state_ranges(),
            model.control_ranges(),
            self.output_scaling(),
            seed,
        )?)
    }

    /// Assemble the core training config from the sampling and training
    /// sections.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            n_t: self.sampling.n_t,
            n_f: self.sampling.n_f,
            seed: self.sampling.seed,
            k1: self.training.k1,
            k2: self.training.k2,
            lambda: self.training.lambda,
            adam: self.training.adam,
            lbfgs: self.training.lbfgs,
            checkpoint_every: self.training.checkpoint_every,
        }
    }

    /// The scenario section, or a config error naming the command that
    /// needs it.
    pub fn scenario(&self, command: &str) -> Result<&ScenarioSection, CliError> {
        self.scenario
            .as_ref()
            .ok_or_else(|| CliError::Config(format!("`{command}` requires a scenario section")))
    }
}

impl ScenarioSection {
    /// Expand the piecewise-constant program to one setpoint per step,
    /// `len` entries long, validated against the state dimension.
    pub fn reference_program(&self, len: usize, ny: usize) -> Result<Vec<Array1<f64>>, CliError> {
        if self.reference.is_empty() {
            return Err(CliError::Config(
                "scenario has no reference program".into(),
            ));
        }
        for (i, step) in self.reference.iter().enumerate() {
            if step.setpoint.len() != ny {
                return Err(CliError::Config(format!(
                    "reference entry {i} has {} components, the model has {ny} states",
                    step.setpoint.len()
                )));
            }
        }
        let mut out = Vec::with_capacity(len);
        let mut seg = 0;
        for k in 0..len {
            while seg + 1 < self.reference.len() && self.reference[seg + 1].start <= k {
                seg += 1;
            }
            out.push(Array1::from_vec(self.reference[seg].setpoint.clone()));
        }
        Ok(out)
    }
}
