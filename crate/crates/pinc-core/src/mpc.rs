//! Receding-horizon control over control increments.
//!
//! The controller condenses the horizon into a single-shooting problem:
//! predicted states are eliminated by chaining the prediction model, so the
//! only decision variables are the Nu control increments. The whole cost is
//! recorded once on a tape whose leaves are the quantities that change
//! between solves (state, previous control, references, increments, penalty
//! level); each solver trial is then one replay plus one backward pass.
//! Box bounds on increments and induced controls are enforced by sequential
//! projection, and soft state constraints enter as quadratic penalties whose
//! weight grows geometrically while violations persist.

use crate::autodiff::{NodeId, Tape, TapeError};
use crate::network::{NetworkError, NetworkParams};
use crate::physics::{ModelError, OdeModel};
use crate::simulator::{rk4_step_fn, Provenance, SimulatorError, Trajectory};
use crate::training::lbfgs::two_loop_direction;
use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MpcError {
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("plant integration failed at step {step}: {source}")]
    PlantFailure {
        step: usize,
        source: SimulatorError,
        /// Closed-loop log of the steps completed before the failure.
        partial: Box<ClosedLoopRun>,
    },
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("closed-loop csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One-step prediction map recorded as tape operations, plus the shape
/// information the controller needs to size its leaves.
pub trait PredictionModel {
    fn n_states(&self) -> usize;
    fn n_controls(&self) -> usize;
    /// Sampling interval one step advances, in seconds.
    fn ts(&self) -> f64;
    /// Record `y_next = F(y, u)` on the tape and return the output node.
    fn step_on_tape(&self, tape: &mut Tape, y: NodeId, u: NodeId) -> Result<NodeId, MpcError>;
}

/// Trained network as the prediction model: one step is the net evaluated
/// at its full horizon, exactly the self-loop recursion.
#[derive(Debug, Clone)]
pub struct PincModel {
    params: NetworkParams,
}

impl PincModel {
    pub fn new(params: NetworkParams) -> Self {
        PincModel { params }
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }
}

impl PredictionModel for PincModel {
    fn n_states(&self) -> usize {
        self.params.n_states()
    }

    fn n_controls(&self) -> usize {
        self.params.n_controls()
    }

    fn ts(&self) -> f64 {
        self.params.t_horizon()
    }

    fn step_on_tape(&self, tape: &mut Tape, y: NodeId, u: NodeId) -> Result<NodeId, MpcError> {
        let nodes = self.params.params_as_constants(tape)?;
        let t = tape.constant(Array2::from_elem((1, 1), self.params.t_horizon()))?;
        let out = self.params.output_on_tape(tape, &nodes, t, y, u, false)?;
        Ok(out.y)
    }
}

/// Runge-Kutta integration of the true dynamics as the prediction model,
/// for nominal-MPC baselines and perfect-model checks.
#[derive(Debug, Clone)]
pub struct RkModel {
    model: OdeModel,
    ts: f64,
    substeps: usize,
}

impl RkModel {
    pub fn new(model: OdeModel, ts: f64, substeps: usize) -> Result<Self, MpcError> {
        if !(ts.is_finite() && ts > 0.0) {
            return Err(MpcError::Config(format!(
                "sampling interval must be positive, got {ts}"
            )));
        }
        if substeps == 0 {
            return Err(MpcError::Config("substeps must be at least 1".into()));
        }
        Ok(RkModel {
            model,
            ts,
            substeps,
        })
    }
}

impl PredictionModel for RkModel {
    fn n_states(&self) -> usize {
        self.model.n_states()
    }

    fn n_controls(&self) -> usize {
        self.model.n_controls()
    }

    fn ts(&self) -> f64 {
        self.ts
    }

    fn step_on_tape(&self, tape: &mut Tape, y: NodeId, u: NodeId) -> Result<NodeId, MpcError> {
        let h = self.ts / self.substeps as f64;
        let mut yk = y;
        for _ in 0..self.substeps {
            let k1 = self.model.rhs_on_tape(tape, yk, u)?;
            let y2 = {
                let half = tape.scale(k1, 0.5 * h)?;
                tape.add(yk, half)?
            };
            let k2 = self.model.rhs_on_tape(tape, y2, u)?;
            let y3 = {
                let half = tape.scale(k2, 0.5 * h)?;
                tape.add(yk, half)?
            };
            let k3 = self.model.rhs_on_tape(tape, y3, u)?;
            let y4 = {
                let full = tape.scale(k3, h)?;
                tape.add(yk, full)?
            };
            let k4 = self.model.rhs_on_tape(tape, y4, u)?;
            let k2x2 = tape.scale(k2, 2.0)?;
            let k3x2 = tape.scale(k3, 2.0)?;
            let s12 = tape.add(k1, k2x2)?;
            let s34 = tape.add(k3x2, k4)?;
            let s = tape.add(s12, s34)?;
            let incr = tape.scale(s, h / 6.0)?;
            yk = tape.add(yk, incr)?;
        }
        Ok(yk)
    }
}

/// Soft box on one state over the penalized horizon window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateConstraint {
    pub index: usize,
    pub lower: f64,
    pub upper: f64,
    /// Base quadratic penalty weight; the solver scales it up while the
    /// constraint stays violated.
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Total quasi-Newton iterations allowed per solve, across all penalty
    /// stages.
    pub max_iterations: usize,
    /// Convergence threshold on the infinity norm of the projected
    /// gradient residual.
    pub gradient_tolerance: f64,
    /// Multiplier applied to the penalty level while state constraints
    /// remain violated; 1 disables growth.
    pub penalty_growth: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iterations: 100,
            gradient_tolerance: 1e-6,
            penalty_growth: 10.0,
        }
    }
}

/// Horizon, weights, and bounds of the tracking problem.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcConfig {
    /// First penalized prediction instant.
    pub n1: usize,
    /// Last penalized prediction instant (the prediction horizon).
    pub n2: usize,
    /// Control horizon: increments beyond it are zero.
    pub nu: usize,
    /// Diagonal tracking weights, one per state.
    pub q: Vec<f64>,
    /// Diagonal increment weights, one per control.
    pub r: Vec<f64>,
    /// Box on each control input.
    pub u_bounds: Vec<(f64, f64)>,
    /// Box on each per-step control increment.
    pub du_bounds: Vec<(f64, f64)>,
    #[serde(default)]
    pub state_constraints: Vec<StateConstraint>,
    #[serde(default)]
    pub solver: SolverConfig,
}

impl MpcConfig {
    fn validate(&self, ny: usize, nu_dims: usize) -> Result<(), MpcError> {
        let err = |m: String| Err(MpcError::Config(m));
        if self.n1 < 1 || self.n1 > self.n2 {
            return err(format!(
                "horizon must satisfy 1 <= N1 <= N2, got N1={} N2={}",
                self.n1, self.n2
            ));
        }
        if self.nu < 1 || self.nu > self.n2 {
            return err(format!(
                "control horizon must satisfy 1 <= Nu <= N2, got Nu={} N2={}",
                self.nu, self.n2
            ));
        }
        if self.q.len() != ny {
            return err(format!(
                "q has {} weights but the model has {} states",
                self.q.len(),
                ny
            ));
        }
        if self.r.len() != nu_dims {
            return err(format!(
                "r has {} weights but the model has {} controls",
                self.r.len(),
                nu_dims
            ));
        }
        if self.q.iter().chain(self.r.iter()).any(|w| !w.is_finite() || *w < 0.0) {
            return err("q and r weights must be finite and nonnegative".into());
        }
        if self.u_bounds.len() != nu_dims || self.du_bounds.len() != nu_dims {
            return err(format!(
                "u_bounds and du_bounds must have one interval per control ({nu_dims})"
            ));
        }
        for (name, bounds) in [("u_bounds", &self.u_bounds), ("du_bounds", &self.du_bounds)] {
            for &(lo, hi) in bounds.iter() {
                if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                    return err(format!("{name} interval ({lo}, {hi}) is empty or non-finite"));
                }
            }
        }
        for sc in &self.state_constraints {
            if sc.index >= ny {
                return err(format!(
                    "state constraint index {} out of range for {} states",
                    sc.index, ny
                ));
            }
            if !(sc.lower.is_finite() && sc.upper.is_finite() && sc.lower <= sc.upper) {
                return err(format!(
                    "state constraint interval ({}, {}) is empty or non-finite",
                    sc.lower, sc.upper
                ));
            }
            if !(sc.weight.is_finite() && sc.weight >= 0.0) {
                return err(format!(
                    "state constraint weight must be finite and nonnegative, got {}",
                    sc.weight
                ));
            }
        }
        if self.solver.max_iterations == 0 {
            return err("solver needs at least one iteration".into());
        }
        if !(self.solver.gradient_tolerance.is_finite() && self.solver.gradient_tolerance > 0.0) {
            return err("gradient tolerance must be positive".into());
        }
        if !(self.solver.penalty_growth.is_finite() && self.solver.penalty_growth >= 1.0) {
            return err("penalty growth factor must be at least 1".into());
        }
        Ok(())
    }
}

/// Result of one horizon optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    /// Increment sequence, Nu entries.
    pub du: Vec<Array1<f64>>,
    /// Induced control sequence, N2 entries (held at the last increment
    /// beyond the control horizon).
    pub u: Vec<Array1<f64>>,
    /// Predicted states at instants 1..=N2.
    pub predicted_states: Vec<Array1<f64>>,
    /// Objective value at the configured weights (penalty level 1).
    pub cost: f64,
    /// Quasi-Newton iterations spent, across penalty stages.
    pub iterations: usize,
    /// Gradient tolerance reached and state constraints satisfied.
    pub converged: bool,
    /// Worst state-constraint violation at the end of each penalty stage.
    pub stage_violations: Vec<f64>,
}

/// Controls induced by an increment sequence: each of the first Nu steps
/// adds its increment to the running value, which is then held to the end
/// of the horizon.
pub fn aggregate_controls(
    u_prev: ArrayView1<f64>,
    du: &[Array1<f64>],
    n2: usize,
) -> Vec<Array1<f64>> {
    let mut out = Vec::with_capacity(n2);
    let mut cur = u_prev.to_owned();
    for j in 0..n2 {
        if j < du.len() {
            cur = &cur + &du[j];
        }
        out.push(cur.clone());
    }
    out
}

struct CostTape {
    tape: Tape,
    y0: NodeId,
    u_prev: NodeId,
    du: Vec<NodeId>,
    /// Reference leaves for instants N1..=N2, in order.
    refs: Vec<NodeId>,
    /// Penalty-level leaf multiplying every constraint term.
    rho: NodeId,
    /// Predicted state nodes at instants 1..=N2.
    states: Vec<NodeId>,
    cost: NodeId,
}

/// Receding-horizon controller: owns the prediction tape and the warm
/// start carried between consecutive solves.
pub struct Controller<M: PredictionModel> {
    model: M,
    config: MpcConfig,
    ct: CostTape,
    warm: Array1<f64>,
}

impl<M: PredictionModel> Controller<M> {
    pub fn new(model: M, config: MpcConfig) -> Result<Self, MpcError> {
        let ny = model.n_states();
        let nu_dims = model.n_controls();
        config.validate(ny, nu_dims)?;
        let ct = Self::build_cost_tape(&model, &config)?;
        let warm = Array1::zeros(nu_dims * config.nu);
        Ok(Controller {
            model,
            config,
            ct,
            warm,
        })
    }

    pub fn config(&self) -> &MpcConfig {
        &self.config
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    /// Zero the warm start, e.g. at the start of a fresh closed-loop run.
    pub fn reset_warm_start(&mut self) {
        self.warm.fill(0.0);
    }

    fn build_cost_tape(model: &M, config: &MpcConfig) -> Result<CostTape, MpcError> {
        let ny = model.n_states();
        let nu_dims = model.n_controls();
        let mut tape = Tape::new();
        let y0 = tape.leaf(Array2::zeros((ny, 1)))?;
        let u_prev = tape.leaf(Array2::zeros((nu_dims, 1)))?;
        let du: Vec<NodeId> = (0..config.nu)
            .map(|_| tape.leaf(Array2::zeros((nu_dims, 1))))
            .collect::<Result<_, _>>()?;
        let refs: Vec<NodeId> = (config.n1..=config.n2)
            .map(|_| tape.leaf(Array2::zeros((ny, 1))))
            .collect::<Result<_, _>>()?;
        let rho = tape.leaf(Array2::ones((1, 1)))?;
        let q_col = Array2::from_shape_vec((ny, 1), config.q.clone()).expect("q column");
        let q_node = tape.constant(q_col)?;
        let r_col = Array2::from_shape_vec((nu_dims, 1), config.r.clone()).expect("r column");
        let r_node = tape.constant(r_col)?;

        // Induced control nodes: add increments while inside the control
        // horizon, then reuse the held node.
        let mut u_nodes = Vec::with_capacity(config.n2);
        let mut u_cur = u_prev;
        for j in 0..config.n2 {
            if j < config.nu {
                u_cur = tape.add(u_cur, du[j])?;
            }
            u_nodes.push(u_cur);
        }

        let mut states = Vec::with_capacity(config.n2);
        let mut cost: Option<NodeId> = None;
        let add_term = |tape: &mut Tape, cost: &mut Option<NodeId>, term: NodeId| {
            *cost = Some(match cost.take() {
                Some(c) => tape.add(c, term),
                None => Ok(term),
            }?);
            Ok::<(), TapeError>(())
        };

        let mut y = y0;
        for j in 1..=config.n2 {
            y = model.step_on_tape(&mut tape, y, u_nodes[j - 1])?;
            states.push(y);
            if j >= config.n1 {
                let r_id = refs[j - config.n1];
                let d = tape.sub(y, r_id)?;
                let sq = tape.square(d)?;
                let w = tape.mul(q_node, sq)?;
                let term = tape.sum(w)?;
                add_term(&mut tape, &mut cost, term)?;
                for sc in &config.state_constraints {
                    let v = tape.row(y, sc.index)?;
                    let over = tape.offset(v, -sc.upper)?;
                    let over = tape.relu(over)?;
                    let over = tape.square(over)?;
                    let neg = tape.scale(v, -1.0)?;
                    let under = tape.offset(neg, sc.lower)?;
                    let under = tape.relu(under)?;
                    let under = tape.square(under)?;
                    let viol = tape.add(over, under)?;
                    let weighted = tape.scale(viol, sc.weight)?;
                    let scaled = tape.mul(weighted, rho)?;
                    add_term(&mut tape, &mut cost, scaled)?;
                }
            }
        }
        for &d in &du {
            let sq = tape.square(d)?;
            let w = tape.mul(r_node, sq)?;
            let term = tape.sum(w)?;
            add_term(&mut tape, &mut cost, term)?;
        }
        let cost = cost.expect("n2 >= 1 guarantees at least one term");
        Ok(CostTape {
            tape,
            y0,
            u_prev,
            du,
            refs,
            rho,
            states,
            cost,
        })
    }

    fn check_solve_inputs(
        &self,
        y: ArrayView1<f64>,
        u_prev: ArrayView1<f64>,
        reference: &[Array1<f64>],
    ) -> Result<(), MpcError> {
        let ny = self.model.n_states();
        let nu_dims = self.model.n_controls();
        if y.len() != ny {
            return Err(MpcError::Input(format!(
                "state has {} entries, model has {} states",
                y.len(),
                ny
            )));
        }
        if u_prev.len() != nu_dims {
            return Err(MpcError::Input(format!(
                "previous control has {} entries, model has {} controls",
                u_prev.len(),
                nu_dims
            )));
        }
        if reference.len() < self.config.n2 {
            return Err(MpcError::Input(format!(
                "reference window has {} entries, horizon needs {}",
                reference.len(),
                self.config.n2
            )));
        }
        for (j, r) in reference.iter().take(self.config.n2).enumerate() {
            if r.len() != ny {
                return Err(MpcError::Input(format!(
                    "reference entry {j} has {} components, expected {ny}",
                    r.len()
                )));
            }
            if !r.iter().all(|v| v.is_finite()) {
                return Err(MpcError::Input(format!("reference entry {j} is non-finite")));
            }
        }
        if !y.iter().chain(u_prev.iter()).all(|v| v.is_finite()) {
            return Err(MpcError::Input("state or previous control is non-finite".into()));
        }
        Ok(())
    }

    /// Point the tape at one problem instance. `reference[j]` is the
    /// setpoint for prediction instant j+1.
    fn set_instance_leaves(
        &mut self,
        y: ArrayView1<f64>,
        u_prev: ArrayView1<f64>,
        reference: &[Array1<f64>],
    ) -> Result<(), MpcError> {
        let ny = self.model.n_states();
        let nu_dims = self.model.n_controls();
        let y_col = Array2::from_shape_vec((ny, 1), y.to_vec()).expect("y column");
        self.ct.tape.set_leaf(self.ct.y0, &y_col)?;
        let u_col = Array2::from_shape_vec((nu_dims, 1), u_prev.to_vec()).expect("u column");
        self.ct.tape.set_leaf(self.ct.u_prev, &u_col)?;
        for (slot, j) in (self.config.n1..=self.config.n2).enumerate() {
            let r = &reference[j - 1];
            let r_col = Array2::from_shape_vec((ny, 1), r.to_vec()).expect("ref column");
            self.ct.tape.set_leaf(self.ct.refs[slot], &r_col)?;
        }
        Ok(())
    }

    /// Cost and gradient at a flat increment vector, with instance leaves
    /// already set. A non-finite rollout reports infinite cost and a zero
    /// gradient so line searches back away from it.
    fn eval_flat(&mut self, du: &Array1<f64>, rho: f64) -> Result<(f64, Array1<f64>), MpcError> {
        let nu_dims = self.model.n_controls();
        for (j, &id) in self.ct.du.iter().enumerate() {
            let block = du.slice(ndarray::s![j * nu_dims..(j + 1) * nu_dims]);
            let col = Array2::from_shape_vec((nu_dims, 1), block.to_vec()).expect("du column");
            self.ct.tape.set_leaf(id, &col)?;
        }
        self.ct
            .tape
            .set_leaf(self.ct.rho, &Array2::from_elem((1, 1), rho))?;
        self.ct.tape.replay();
        let j_val = self.ct.tape.scalar_value(self.ct.cost)?;
        if !j_val.is_finite() {
            return Ok((f64::INFINITY, Array1::zeros(du.len())));
        }
        self.ct.tape.backward(self.ct.cost)?;
        let mut grad = Array1::zeros(du.len());
        for (j, &id) in self.ct.du.iter().enumerate() {
            let adj = self.ct.tape.adjoint(id);
            for i in 0..nu_dims {
                grad[j * nu_dims + i] = adj[(i, 0)];
            }
        }
        self.ct.tape.reset_adjoints();
        Ok((j_val, grad))
    }

    /// Sequential projection onto the increment box and the induced control
    /// box, channel by channel along the horizon. With the running control
    /// inside its box, the projected increments keep it there.
    fn project(&self, du: &mut Array1<f64>, u_prev: ArrayView1<f64>) {
        let nu_dims = self.model.n_controls();
        for i in 0..nu_dims {
            let (dlo, dhi) = self.config.du_bounds[i];
            let (ulo, uhi) = self.config.u_bounds[i];
            let mut cur = u_prev[i];
            for j in 0..self.config.nu {
                let idx = j * nu_dims + i;
                let step = du[idx].clamp(dlo, dhi);
                let step = ((cur + step).clamp(ulo, uhi) - cur).clamp(dlo, dhi);
                du[idx] = step;
                cur += step;
            }
        }
    }

    /// Worst constraint violation over the penalized window, read from the
    /// tape values of the most recent evaluation.
    fn max_violation(&self) -> f64 {
        let mut worst = 0.0f64;
        for sc in &self.config.state_constraints {
            for j in self.config.n1..=self.config.n2 {
                let v = self.ct.tape.value(self.ct.states[j - 1])[(sc.index, 0)];
                worst = worst.max(v - sc.upper).max(sc.lower - v);
            }
        }
        worst.max(0.0)
    }

    /// Cost and gradient of the horizon objective at a candidate increment
    /// sequence (flattened, step-major), at the configured weights.
    pub fn evaluate_cost(
        &mut self,
        y: ArrayView1<f64>,
        u_prev: ArrayView1<f64>,
        reference: &[Array1<f64>],
        du: &Array1<f64>,
    ) -> Result<(f64, Array1<f64>), MpcError> {
        self.check_solve_inputs(y, u_prev, reference)?;
        let expected = self.model.n_controls() * self.config.nu;
        if du.len() != expected {
            return Err(MpcError::Input(format!(
                "du has {} entries, expected Nu * n_controls = {expected}",
                du.len()
            )));
        }
        self.set_instance_leaves(y, u_prev, reference)?;
        self.eval_flat(du, 1.0)
    }

    /// Minimize the horizon objective over the increments with projected
    /// L-BFGS, growing the constraint penalty while violations persist.
    /// Warm-started from the previous solution shifted by one step; the
    /// best iterate is returned even when the budget runs out.
    pub fn solve(
        &mut self,
        y: ArrayView1<f64>,
        u_prev: ArrayView1<f64>,
        reference: &[Array1<f64>],
    ) -> Result<MpcSolution, MpcError> {
        self.check_solve_inputs(y, u_prev, reference)?;
        self.set_instance_leaves(y, u_prev, reference)?;
        let nu_dims = self.model.n_controls();
        let n = nu_dims * self.config.nu;
        let budget = self.config.solver.max_iterations;
        let gtol = self.config.solver.gradient_tolerance;
        let growth = self.config.solver.penalty_growth;
        const MAX_STAGES: usize = 8;
        const VIOLATION_TOL: f64 = 1e-6;
        const MEMORY: usize = 10;
        const C1: f64 = 1e-4;
        const MAX_BACKTRACKS: usize = 25;

        // Warm start: previous increments shifted one step, last block zero.
        let mut x = Array1::zeros(n);
        for j in 0..self.config.nu.saturating_sub(1) {
            for i in 0..nu_dims {
                x[j * nu_dims + i] = self.warm[(j + 1) * nu_dims + i];
            }
        }
        self.project(&mut x, u_prev);

        let mut rho = 1.0;
        let mut iterations = 0;
        let mut grad_converged = false;
        let mut stage_violations = Vec::new();
        let (mut f, mut g) = self.eval_flat(&x, rho)?;
        for stage in 0..MAX_STAGES {
            let mut pairs: VecDeque<(Array1<f64>, Array1<f64>, f64)> = VecDeque::new();
            grad_converged = false;
            while iterations < budget {
                // Natural residual: how far a unit gradient step moves
                // after projection.
                let mut probe = &x - &g;
                self.project(&mut probe, u_prev);
                let residual = (&probe - &x)
                    .iter()
                    .fold(0.0f64, |m, v| m.max(v.abs()));
                if residual < gtol {
                    grad_converged = true;
                    break;
                }
                iterations += 1;
                let mut d = two_loop_direction(&pairs, &g);
                if d.dot(&g) >= 0.0 {
                    pairs.clear();
                    d = -&g;
                }
                let mut alpha = 1.0;
                let mut accepted = None;
                for _ in 0..MAX_BACKTRACKS {
                    let mut xt = &x + &(&d * alpha);
                    self.project(&mut xt, u_prev);
                    let step = &xt - &x;
                    let decrease = g.dot(&step);
                    if step.iter().all(|v| *v == 0.0) || decrease >= 0.0 {
                        // Pinned by the boxes along this direction.
                        break;
                    }
                    let (ft, gt) = self.eval_flat(&xt, rho)?;
                    if ft.is_finite() && ft <= f + C1 * decrease {
                        accepted = Some((xt, ft, gt, step));
                        break;
                    }
                    alpha *= 0.5;
                }
                match accepted {
                    Some((xt, ft, gt, step)) => {
                        let yv = &gt - &g;
                        let sy = step.dot(&yv);
                        let guard =
                            1e-10 * step.dot(&step).sqrt() * yv.dot(&yv).sqrt();
                        if sy > guard {
                            if pairs.len() == MEMORY {
                                pairs.pop_front();
                            }
                            pairs.push_back((step, yv, 1.0 / sy));
                        }
                        x = xt;
                        f = ft;
                        g = gt;
                    }
                    None => break,
                }
            }
            // Refresh tape values at the accepted iterate (a rejected trial
            // may have been evaluated last) and measure violations.
            let _ = self.eval_flat(&x, rho)?;
            let viol = self.max_violation();
            stage_violations.push(viol);
            let out_of_budget = iterations >= budget;
            if self.config.state_constraints.is_empty()
                || viol <= VIOLATION_TOL
                || out_of_budget
                || growth <= 1.0
                || stage + 1 == MAX_STAGES
            {
                break;
            }
            rho *= growth;
            let refreshed = self.eval_flat(&x, rho)?;
            f = refreshed.0;
            g = refreshed.1;
        }

        // Report at the configured weights and read out the prediction.
        let (cost, _) = self.eval_flat(&x, 1.0)?;
        let predicted_states = self
            .ct
            .states
            .iter()
            .map(|&id| {
                let v = self.ct.tape.value(id);
                Array1::from_iter(v.column(0).iter().copied())
            })
            .collect();
        let du: Vec<Array1<f64>> = (0..self.config.nu)
            .map(|j| {
                Array1::from_iter(
                    (0..nu_dims).map(|i| x[j * nu_dims + i]),
                )
            })
            .collect();
        let u = aggregate_controls(u_prev, &du, self.config.n2);
        let final_violation = stage_violations.last().copied().unwrap_or(0.0);
        let converged = grad_converged
            && (self.config.state_constraints.is_empty() || final_violation <= VIOLATION_TOL);
        self.warm.assign(&x);
        Ok(MpcSolution {
            du,
            u,
            predicted_states,
            cost,
            iterations,
            converged,
            stage_violations,
        })
    }
}

/// Complete record of a closed-loop experiment: the plant trajectory, the
/// reference aligned with its states, and per-solve diagnostics. Row k of
/// the log pairs the plant state y[k] with the control chosen there (and
/// applied during [k, k+1)); the final state row has no control.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopRun {
    pub trajectory: Trajectory,
    /// Setpoint per step, aligned with `trajectory.states`.
    pub references: Vec<Array1<f64>>,
    pub costs: Vec<f64>,
    pub solver_iters: Vec<usize>,
    pub converged: Vec<bool>,
}

impl ClosedLoopRun {
    pub fn len_steps(&self) -> usize {
        self.trajectory.len_steps()
    }

    /// Serialize as `k,t_seconds,ref_1..,y_plant_1..,u_1..,J,solver_iters,converged`;
    /// the control and solver fields of the final row are empty. Values
    /// round-trip exactly.
    pub fn save_csv(&self, path: &Path) -> Result<(), MpcError> {
        let n_y = self
            .trajectory
            .states
            .first()
            .map_or(0, |y| y.len());
        let n_u = self
            .trajectory
            .controls
            .first()
            .map_or_else(|| self.trajectory.states.first().map_or(0, |_| 0), |u| u.len());
        let mut out = String::from("k,t_seconds");
        for i in 1..=n_y {
            out.push_str(&format!(",ref_{i}"));
        }
        for i in 1..=n_y {
            out.push_str(&format!(",y_plant_{i}"));
        }
        for i in 1..=n_u {
            out.push_str(&format!(",u_{i}"));
        }
        out.push_str(",J,solver_iters,converged\n");
        for (k, y) in self.trajectory.states.iter().enumerate() {
            out.push_str(&format!("{k},{}", k as f64 * self.trajectory.ts));
            for v in self.references[k].iter() {
                out.push_str(&format!(",{v}"));
            }
            for v in y.iter() {
                out.push_str(&format!(",{v}"));
            }
            if k < self.trajectory.controls.len() {
                for v in self.trajectory.controls[k].iter() {
                    out.push_str(&format!(",{v}"));
                }
                out.push_str(&format!(
                    ",{},{},{}\n",
                    self.costs[k], self.solver_iters[k], self.converged[k]
                ));
            } else {
                for _ in 0..n_u {
                    out.push(',');
                }
                out.push_str(",,,\n");
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Parse a file written by [`ClosedLoopRun::save_csv`]. Needs at least
    /// one control row to recover the sampling interval.
    pub fn load_csv(path: &Path) -> Result<ClosedLoopRun, MpcError> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| MpcError::Csv("empty file".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        let n_ref = cols.iter().filter(|c| c.starts_with("ref_")).count();
        let n_y = cols.iter().filter(|c| c.starts_with("y_plant_")).count();
        let n_u = cols.iter().filter(|c| c.starts_with("u_")).count();
        if n_ref != n_y || n_y == 0 {
            return Err(MpcError::Csv(format!(
                "header declares {n_ref} reference and {n_y} state columns"
            )));
        }
        let mut expected = String::from("k,t_seconds");
        for i in 1..=n_y {
            expected.push_str(&format!(",ref_{i}"));
        }
        for i in 1..=n_y {
            expected.push_str(&format!(",y_plant_{i}"));
        }
        for i in 1..=n_u {
            expected.push_str(&format!(",u_{i}"));
        }
        expected.push_str(",J,solver_iters,converged");
        if header != expected {
            return Err(MpcError::Csv(format!(
                "header mismatch: got `{header}`, expected `{expected}`"
            )));
        }
        let parse = |field: &str, what: &str, row: usize| -> Result<f64, MpcError> {
            field.parse::<f64>().map_err(|_| {
                MpcError::Csv(format!("row {row}: cannot parse {what} from `{field}`"))
            })
        };
        let mut states = Vec::new();
        let mut references = Vec::new();
        let mut controls = Vec::new();
        let mut costs = Vec::new();
        let mut solver_iters = Vec::new();
        let mut converged = Vec::new();
        let mut times = Vec::new();
        for (row, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let expected_len = 2 + 2 * n_y + n_u + 3;
            if fields.len() != expected_len {
                return Err(MpcError::Csv(format!(
                    "row {row}: {} fields, expected {expected_len}",
                    fields.len()
                )));
            }
            let k: usize = fields[0]
                .parse()
                .map_err(|_| MpcError::Csv(format!("row {row}: bad step index `{}`", fields[0])))?;
            if k != row {
                return Err(MpcError::Csv(format!(
                    "row {row}: step index {k} out of order"
                )));
            }
            times.push(parse(fields[1], "t_seconds", row)?);
            let mut at = 2;
            let mut r = Array1::zeros(n_y);
            for i in 0..n_y {
                r[i] = parse(fields[at + i], "reference", row)?;
            }
            references.push(r);
            at += n_y;
            let mut yv = Array1::zeros(n_y);
            for i in 0..n_y {
                yv[i] = parse(fields[at + i], "state", row)?;
            }
            states.push(yv);
            at += n_y;
            let control_fields = &fields[at..at + n_u];
            let tail = &fields[at + n_u..];
            let blank = control_fields.iter().all(|f| f.is_empty())
                && tail.iter().all(|f| f.is_empty());
            if blank {
                continue;
            }
            let mut uv = Array1::zeros(n_u);
            for i in 0..n_u {
                uv[i] = parse(control_fields[i], "control", row)?;
            }
            controls.push(uv);
            costs.push(parse(tail[0], "cost", row)?);
            solver_iters.push(tail[1].parse::<usize>().map_err(|_| {
                MpcError::Csv(format!("row {row}: bad solver_iters `{}`", tail[1]))
            })?);
            converged.push(match tail[2] {
                "true" => true,
                "false" => false,
                other => {
                    return Err(MpcError::Csv(format!(
                        "row {row}: bad converged flag `{other}`"
                    )))
                }
            });
        }
        if states.len() != controls.len() + 1 {
            return Err(MpcError::Csv(format!(
                "{} state rows but {} control rows; only the final row may omit the control",
                states.len(),
                controls.len()
            )));
        }
        if times.len() < 2 {
            return Err(MpcError::Csv(
                "need at least two rows to recover the sampling interval".into(),
            ));
        }
        let ts = times[1];
        if !(ts.is_finite() && ts > 0.0) {
            return Err(MpcError::Csv(format!("bad sampling interval {ts}")));
        }
        Ok(ClosedLoopRun {
            trajectory: Trajectory {
                ts,
                states,
                controls,
                provenance: Provenance::PlantClosedLoop,
            },
            references,
            costs,
            solver_iters,
            converged,
        })
    }
}

/// Closed-loop experiment: at each step, solve from the plant's true state,
/// apply the first induced control to the plant for one sampling interval,
/// and log everything. `reference[k]` is the setpoint at plant step k and
/// must extend N2 instants past the last solve.
pub fn receding_horizon_run<M: PredictionModel>(
    controller: &mut Controller<M>,
    plant: &OdeModel,
    y0: ArrayView1<f64>,
    u_start: Option<ArrayView1<f64>>,
    reference: &[Array1<f64>],
    c_steps: usize,
    substeps: usize,
) -> Result<ClosedLoopRun, MpcError> {
    let ny = controller.model.n_states();
    let nu_dims = controller.model.n_controls();
    if plant.n_states() != ny || plant.n_controls() != nu_dims {
        return Err(MpcError::Input(format!(
            "plant is {}x{} but the prediction model is {}x{}",
            plant.n_states(),
            plant.n_controls(),
            ny,
            nu_dims
        )));
    }
    let n2 = controller.config.n2;
    if reference.len() < c_steps + n2 {
        return Err(MpcError::Input(format!(
            "reference has {} entries; a {c_steps}-step run with horizon {n2} needs {}",
            reference.len(),
            c_steps + n2
        )));
    }
    let ts = controller.model.ts();
    let mut u_prev = match u_start {
        Some(u) => {
            if u.len() != nu_dims {
                return Err(MpcError::Input(format!(
                    "starting control has {} entries, model has {nu_dims} controls",
                    u.len()
                )));
            }
            u.to_owned()
        }
        None => Array1::from_iter(
            controller
                .config
                .u_bounds
                .iter()
                .map(|&(lo, hi)| 0.5 * (lo + hi)),
        ),
    };
    controller.reset_warm_start();

    let mut states = vec![y0.to_owned()];
    let mut controls: Vec<Array1<f64>> = Vec::with_capacity(c_steps);
    let mut costs = Vec::with_capacity(c_steps);
    let mut solver_iters = Vec::with_capacity(c_steps);
    let mut converged = Vec::with_capacity(c_steps);
    let mut rhs = |yv: ArrayView1<f64>, uv: ArrayView1<f64>| plant.rhs(yv, uv);

    for k in 0..c_steps {
        let y = states[k].clone();
        let window = &reference[k + 1..k + 1 + n2];
        let sol = controller.solve(y.view(), u_prev.view(), window)?;
        let u = sol.u[0].clone();
        let stepped = rk4_step_fn(&mut rhs, &y, u.view(), ts, substeps).and_then(|next| {
            if next.iter().all(|v| v.is_finite()) {
                Ok(next)
            } else {
                Err(SimulatorError::NonFiniteState { step: k + 1 })
            }
        });
        match stepped {
            Ok(next) => {
                controls.push(u.clone());
                costs.push(sol.cost);
                solver_iters.push(sol.iterations);
                converged.push(sol.converged);
                states.push(next);
                u_prev = u;
            }
            Err(source) => {
                let partial = ClosedLoopRun {
                    trajectory: Trajectory {
                        ts,
                        states,
                        controls,
                        provenance: Provenance::PlantClosedLoop,
                    },
                    references: reference[..=k].to_vec(),
                    costs,
                    solver_iters,
                    converged,
                };
                return Err(MpcError::PlantFailure {
                    step: k,
                    source,
                    partial: Box::new(partial),
                });
            }
        }
    }
    Ok(ClosedLoopRun {
        trajectory: Trajectory {
            ts,
            states,
            controls,
            provenance: Provenance::PlantClosedLoop,
        },
        references: reference[..=c_steps].to_vec(),
        costs,
        solver_iters,
        converged,
    })
}
