//! ODE model registry: right-hand sides for simulation and the residual
//! operator for the physics loss.
//!
//! Each model exposes its dynamics twice: as a plain function of state and
//! control for RK integration, and as a recording onto an autodiff [`Tape`]
//! (batched, one column per sample) so the physics loss and the RK-as-model
//! controller baseline can be differentiated.

use crate::autodiff::{NodeId, Tape, TapeError};
use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown model name '{0}', expected one of: van-der-pol, four-tank")]
    UnknownModel(String),
    #[error("{what}: expected length {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Quadruple-tank constants in cm/V/s units.
///
/// Defaults are the classical non-minimum-phase configuration of this
/// benchmark; every field may be overridden through the experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FourTankParams {
    /// Tank cross-sections A_i (cm^2).
    pub tank_area: [f64; 4],
    /// Outlet orifice cross-sections a_i (cm^2).
    pub orifice_area: [f64; 4],
    /// Pump gains k_j (cm^3 per volt-second).
    pub pump_gain: [f64; 2],
    /// Valve splits gamma_j in (0, 1).
    pub valve_split: [f64; 2],
    /// Gravity (cm/s^2).
    pub gravity: f64,
}

impl Default for FourTankParams {
    fn default() -> Self {
        FourTankParams {
            tank_area: [28.0, 32.0, 28.0, 32.0],
            orifice_area: [0.071, 0.057, 0.071, 0.057],
            pump_gain: [3.14, 3.29],
            valve_split: [0.43, 0.34],
            gravity: 981.0,
        }
    }
}

impl FourTankParams {
    fn validate(&self) -> Result<(), ModelError> {
        let positive = self
            .tank_area
            .iter()
            .chain(self.orifice_area.iter())
            .chain(self.pump_gain.iter())
            .all(|&v| v.is_finite() && v > 0.0);
        if !positive || !(self.gravity.is_finite() && self.gravity > 0.0) {
            return Err(ModelError::InvalidParameter(
                "tank areas, orifice areas, pump gains, and gravity must be positive".into(),
            ));
        }
        if !self.valve_split.iter().all(|&g| g > 0.0 && g < 1.0) {
            return Err(ModelError::InvalidParameter(
                "valve splits must lie strictly inside (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Dynamics {
    /// x1' = x2, x2' = mu (1 - x1^2) x2 - x1 + u.
    VanDerPol { mu: f64 },
    /// Mass balance of four coupled tanks with Bernoulli orifice outflow.
    FourTank(FourTankParams),
}

/// A named dynamical system with its sampling ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct OdeModel {
    name: String,
    n_states: usize,
    n_controls: usize,
    state_ranges: Vec<(f64, f64)>,
    control_ranges: Vec<(f64, f64)>,
    dynamics: Dynamics,
}

impl OdeModel {
    /// Van der Pol oscillator with damping mu, control entering x2',
    /// u in [-1, 1] and both states sampled from [-3, 3].
    pub fn van_der_pol(mu: f64) -> Result<Self, ModelError> {
        if !mu.is_finite() {
            return Err(ModelError::InvalidParameter("mu must be finite".into()));
        }
        Ok(OdeModel {
            name: "van-der-pol".into(),
            n_states: 2,
            n_controls: 1,
            state_ranges: vec![(-3.0, 3.0), (-3.0, 3.0)],
            control_ranges: vec![(-1.0, 1.0)],
            dynamics: Dynamics::VanDerPol { mu },
        })
    }

    /// Quadruple tank with level sampling range [0.5, 15] cm and pump
    /// voltages in [0, 5] V.
    pub fn four_tank(params: FourTankParams) -> Result<Self, ModelError> {
        params.validate()?;
        Ok(OdeModel {
            name: "four-tank".into(),
            n_states: 4,
            n_controls: 2,
            state_ranges: vec![(0.5, 15.0); 4],
            control_ranges: vec![(0.0, 5.0); 2],
            dynamics: Dynamics::FourTank(params),
        })
    }

    /// Look a model up by name with its default parameters.
    pub fn by_name(name: &str) -> Result<Self, ModelError> {
        match name {
            "van-der-pol" => Self::van_der_pol(1.0),
            "four-tank" => Self::four_tank(FourTankParams::default()),
            other => Err(ModelError::UnknownModel(other.to_string())),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_controls(&self) -> usize {
        self.n_controls
    }

    pub fn state_ranges(&self) -> &[(f64, f64)] {
        &self.state_ranges
    }

    pub fn control_ranges(&self) -> &[(f64, f64)] {
        &self.control_ranges
    }

    /// Replace the sampling ranges (config override). Lengths must match the
    /// model dimensions and every interval must be non-degenerate.
    pub fn with_ranges(
        mut self,
        state_ranges: Option<Vec<(f64, f64)>>,
        control_ranges: Option<Vec<(f64, f64)>>,
    ) -> Result<Self, ModelError> {
        if let Some(r) = state_ranges {
            if r.len() != self.n_states {
                return Err(ModelError::DimensionMismatch {
                    what: "state_ranges",
                    expected: self.n_states,
                    got: r.len(),
                });
            }
            self.state_ranges = r;
        }
        if let Some(r) = control_ranges {
            if r.len() != self.n_controls {
                return Err(ModelError::DimensionMismatch {
                    what: "control_ranges",
                    expected: self.n_controls,
                    got: r.len(),
                });
            }
            self.control_ranges = r;
        }
        for &(lo, hi) in self.state_ranges.iter().chain(self.control_ranges.iter()) {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(ModelError::InvalidParameter(format!(
                    "range [{lo}, {hi}] is degenerate"
                )));
            }
        }
        Ok(self)
    }

    fn check_dims(&self, y: ArrayView1<f64>, u: ArrayView1<f64>) -> Result<(), ModelError> {
        if y.len() != self.n_states {
            return Err(ModelError::DimensionMismatch {
                what: "state vector",
                expected: self.n_states,
                got: y.len(),
            });
        }
        if u.len() != self.n_controls {
            return Err(ModelError::DimensionMismatch {
                what: "control vector",
                expected: self.n_controls,
                got: u.len(),
            });
        }
        if !(y.iter().all(|v| v.is_finite()) && u.iter().all(|v| v.is_finite())) {
            return Err(ModelError::NonFinite("rhs input"));
        }
        Ok(())
    }

    /// Time derivative of the state, in state units per second.
    ///
    /// Tank levels are clamped to 0 inside the orifice square root, so the
    /// rhs stays finite if a transient undershoots an empty tank.
    pub fn rhs(&self, y: ArrayView1<f64>, u: ArrayView1<f64>) -> Result<Array1<f64>, ModelError> {
        self.check_dims(y, u)?;
        match &self.dynamics {
            Dynamics::VanDerPol { mu } => {
                let (x1, x2) = (y[0], y[1]);
                Ok(Array1::from(vec![
                    x2,
                    mu * (1.0 - x1 * x1) * x2 - x1 + u[0],
                ]))
            }
            Dynamics::FourTank(p) => {
                let two_g = 2.0 * p.gravity;
                let flow = |i: usize| p.orifice_area[i] * (two_g * y[i].max(0.0)).sqrt();
                let (w1, w2, w3, w4) = (flow(0), flow(1), flow(2), flow(3));
                let [g1, g2] = p.valve_split;
                let [k1, k2] = p.pump_gain;
                Ok(Array1::from(vec![
                    (g1 * k1 * u[0] + w3 - w1) / p.tank_area[0],
                    (g2 * k2 * u[1] + w4 - w2) / p.tank_area[1],
                    ((1.0 - g2) * k2 * u[1] - w3) / p.tank_area[2],
                    ((1.0 - g1) * k1 * u[0] - w4) / p.tank_area[3],
                ]))
            }
        }
    }

    /// ODE residual F = dydt_pred - rhs(y_pred, u); zero along exact
    /// solutions.
    pub fn residual(
        &self,
        y_pred: ArrayView1<f64>,
        dydt_pred: ArrayView1<f64>,
        u: ArrayView1<f64>,
    ) -> Result<Array1<f64>, ModelError> {
        if dydt_pred.len() != self.n_states {
            return Err(ModelError::DimensionMismatch {
                what: "state-derivative vector",
                expected: self.n_states,
                got: dydt_pred.len(),
            });
        }
        if !dydt_pred.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite("residual input"));
        }
        let f = self.rhs(y_pred, u)?;
        Ok(&dydt_pred - &f)
    }

    /// Record the rhs on a tape over batched columns.
    ///
    /// `y` must be an (n_states x B) node and `u` an (n_controls x B) node;
    /// the returned node holds dy/dt with the same shape as `y`.
    pub fn rhs_on_tape(
        &self,
        tape: &mut Tape,
        y: NodeId,
        u: NodeId,
    ) -> Result<NodeId, TapeError> {
        match &self.dynamics {
            Dynamics::VanDerPol { mu } => {
                let x1 = tape.row(y, 0)?;
                let x2 = tape.row(y, 1)?;
                let uu = tape.row(u, 0)?;
                let x1_sq = tape.square(x1)?;
                let neg = tape.scale(x1_sq, -1.0)?;
                let damping = tape.offset(neg, 1.0)?;
                let dxx = tape.mul(damping, x2)?;
                let scaled = tape.scale(dxx, *mu)?;
                let minus_x1 = tape.sub(scaled, x1)?;
                let dx2 = tape.add(minus_x1, uu)?;
                tape.concat_rows(&[x2, dx2])
            }
            Dynamics::FourTank(p) => {
                let two_g = 2.0 * p.gravity;
                let mut flows = Vec::with_capacity(4);
                for i in 0..4 {
                    let h = tape.row(y, i)?;
                    let scaled = tape.scale(h, two_g)?;
                    let root = tape.sqrt_clamped(scaled)?;
                    flows.push(tape.scale(root, p.orifice_area[i])?);
                }
                let u1 = tape.row(u, 0)?;
                let u2 = tape.row(u, 1)?;
                let [g1, g2] = p.valve_split;
                let [k1, k2] = p.pump_gain;

                let in1 = tape.scale(u1, g1 * k1)?;
                let d1 = tape.add(in1, flows[2])?;
                let d1 = tape.sub(d1, flows[0])?;
                let dh1 = tape.scale(d1, 1.0 / p.tank_area[0])?;

                let in2 = tape.scale(u2, g2 * k2)?;
                let d2 = tape.add(in2, flows[3])?;
                let d2 = tape.sub(d2, flows[1])?;
                let dh2 = tape.scale(d2, 1.0 / p.tank_area[1])?;

                let in3 = tape.scale(u2, (1.0 - g2) * k2)?;
                let d3 = tape.sub(in3, flows[2])?;
                let dh3 = tape.scale(d3, 1.0 / p.tank_area[2])?;

                let in4 = tape.scale(u1, (1.0 - g1) * k1)?;
                let d4 = tape.sub(in4, flows[3])?;
                let dh4 = tape.scale(d4, 1.0 / p.tank_area[3])?;

                tape.concat_rows(&[dh1, dh2, dh3, dh4])
            }
        }
    }
}
