//! Reference integration and network rollouts.
//!
//! The plant truth is classical fixed-step RK4 with the control held
//! constant within each sampling interval. The network side offers the
//! self-loop rollout (feeding each prediction back as the next initial
//! state) and dense in-interval prediction over a time grid.

use crate::network::{NetworkError, NetworkParams};
use crate::physics::{ModelError, OdeModel};
use ndarray::{Array1, ArrayView1};
use std::fmt;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimulatorError {
    #[error("state became non-finite at step {step}")]
    NonFiniteState { step: usize },
    #[error("substeps must be at least 1")]
    ZeroSubsteps,
    #[error("step length must be positive, got {0}")]
    BadStepLength(f64),
    #[error("time grid must be sorted and lie within [0, {t_horizon}]; offending entry {t} at index {index}")]
    BadGrid {
        index: usize,
        t: f64,
        t_horizon: f64,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("trajectory csv: {0}")]
    Csv(String),
    #[error("trajectory io: {0}")]
    Io(#[from] std::io::Error),
}

/// What produced a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Rk,
    PincSelfLoop,
    PlantClosedLoop,
}

impl Provenance {
    pub fn tag(&self) -> &'static str {
        match self {
            Provenance::Rk => "rk",
            Provenance::PincSelfLoop => "pinc-self-loop",
            Provenance::PlantClosedLoop => "plant-closed-loop",
        }
    }

    fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "rk" => Some(Provenance::Rk),
            "pinc-self-loop" => Some(Provenance::PincSelfLoop),
            "plant-closed-loop" => Some(Provenance::PlantClosedLoop),
            _ => None,
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Discrete-time record of a rollout: y[0] is the initial state and
/// controls[k-1] is the input held during step k, so there is one more
/// state than control.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub ts: f64,
    pub states: Vec<Array1<f64>>,
    pub controls: Vec<Array1<f64>>,
    pub provenance: Provenance,
}

impl Trajectory {
    /// Number of steps M (states run 0..=M).
    pub fn len_steps(&self) -> usize {
        self.controls.len()
    }

    /// Serialize as `k,t_seconds,u_1..u_m,y_1..y_n,source`; the control
    /// fields of row k=0 are empty. Values round-trip exactly.
    pub fn save_csv(&self, path: &Path) -> Result<(), SimulatorError> {
        let n_u = self.controls.first().map_or(0, |u| u.len());
        let n_y = self.states.first().map_or(0, |y| y.len());
        let mut out = String::new();
        out.push('k');
        out.push_str(",t_seconds");
        for i in 1..=n_u {
            out.push_str(&format!(",u_{i}"));
        }
        for i in 1..=n_y {
            out.push_str(&format!(",y_{i}"));
        }
        out.push_str(",source\n");
        for (k, y) in self.states.iter().enumerate() {
            out.push_str(&format!("{k},{}", k as f64 * self.ts));
            if k == 0 {
                for _ in 0..n_u {
                    out.push(',');
                }
            } else {
                for v in self.controls[k - 1].iter() {
                    out.push_str(&format!(",{v}"));
                }
            }
            for v in y.iter() {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{}\n", self.provenance));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self, SimulatorError> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| SimulatorError::Csv("empty file".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        let n_u = cols.iter().filter(|c| c.starts_with("u_")).count();
        let n_y = cols.iter().filter(|c| c.starts_with("y_")).count();
        if cols.first() != Some(&"k") || cols.last() != Some(&"source") || n_y == 0 {
            return Err(SimulatorError::Csv(format!("unrecognized header '{header}'")));
        }

        let mut states = Vec::new();
        let mut controls = Vec::new();
        let mut times = Vec::new();
        let mut provenance = None;
        for (idx, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 2 + n_u + n_y + 1 {
                return Err(SimulatorError::Csv(format!(
                    "row {}: expected {} fields, got {}",
                    idx + 2,
                    2 + n_u + n_y + 1,
                    fields.len()
                )));
            }
            let k: usize = fields[0]
                .parse()
                .map_err(|_| SimulatorError::Csv(format!("row {}: bad step index", idx + 2)))?;
            if k != idx {
                return Err(SimulatorError::Csv(format!(
                    "row {}: step indices must be contiguous from 0",
                    idx + 2
                )));
            }
            let parse = |s: &str| -> Result<f64, SimulatorError> {
                s.parse()
                    .map_err(|_| SimulatorError::Csv(format!("row {}: '{s}' is not a number", idx + 2)))
            };
            times.push(parse(fields[1])?);
            if k > 0 {
                let mut u = Array1::zeros(n_u);
                for i in 0..n_u {
                    u[i] = parse(fields[2 + i])?;
                }
                controls.push(u);
            }
            let mut y = Array1::zeros(n_y);
            for i in 0..n_y {
                y[i] = parse(fields[2 + n_u + i])?;
            }
            states.push(y);
            let tag = fields[2 + n_u + n_y];
            let p = Provenance::from_tag(tag)
                .ok_or_else(|| SimulatorError::Csv(format!("row {}: unknown source '{tag}'", idx + 2)))?;
            if *provenance.get_or_insert(p) != p {
                return Err(SimulatorError::Csv("mixed source tags".into()));
            }
        }
        if states.len() < 2 {
            return Err(SimulatorError::Csv(
                "need at least two rows to recover the step length".into(),
            ));
        }
        Ok(Trajectory {
            ts: times[1],
            states,
            controls,
            provenance: provenance.expect("nonempty"),
        })
    }
}

/// One RK4 macro step of length `h_total`, split into `substeps` classical
/// stages, with `u` held constant. Generic over the rhs so analytic test
/// systems can drive the same integrator as registered models.
pub fn rk4_step_fn<F>(
    rhs: &mut F,
    y: &Array1<f64>,
    u: ArrayView1<f64>,
    h_total: f64,
    substeps: usize,
) -> Result<Array1<f64>, SimulatorError>
where
    F: FnMut(ArrayView1<f64>, ArrayView1<f64>) -> Result<Array1<f64>, ModelError>,
{
    if substeps == 0 {
        return Err(SimulatorError::ZeroSubsteps);
    }
    if !(h_total.is_finite() && h_total > 0.0) {
        return Err(SimulatorError::BadStepLength(h_total));
    }
    let h = h_total / substeps as f64;
    let mut y = y.clone();
    for _ in 0..substeps {
        let k1 = rhs(y.view(), u)?;
        let k2 = rhs((&y + &(&k1 * (h / 2.0))).view(), u)?;
        let k3 = rhs((&y + &(&k2 * (h / 2.0))).view(), u)?;
        let k4 = rhs((&y + &(&k3 * h)).view(), u)?;
        y = &y + &((k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0));
    }
    Ok(y)
}

/// Integrate a control sequence with RK4: the trajectory has
/// `u_sequence.len() + 1` states at spacing `ts` seconds.
pub fn rk4_integrate(
    model: &OdeModel,
    y0: ArrayView1<f64>,
    u_sequence: &[Array1<f64>],
    ts: f64,
    substeps: usize,
) -> Result<Trajectory, SimulatorError> {
    let mut rhs = |y: ArrayView1<f64>, u: ArrayView1<f64>| model.rhs(y, u);
    let mut states = Vec::with_capacity(u_sequence.len() + 1);
    states.push(y0.to_owned());
    for (k, u) in u_sequence.iter().enumerate() {
        let next = rk4_step_fn(&mut rhs, &states[k], u.view(), ts, substeps)?;
        if !next.iter().all(|v| v.is_finite()) {
            return Err(SimulatorError::NonFiniteState { step: k + 1 });
        }
        states.push(next);
    }
    Ok(Trajectory {
        ts,
        states,
        controls: u_sequence.to_vec(),
        provenance: Provenance::Rk,
    })
}

/// Self-loop rollout: y[k] = f̂_w(y[k-1], u[k]), each prediction feeding the
/// next initial-state input.
pub fn self_loop_rollout(
    params: &NetworkParams,
    y0: ArrayView1<f64>,
    u_sequence: &[Array1<f64>],
) -> Result<Trajectory, SimulatorError> {
    let mut states = Vec::with_capacity(u_sequence.len() + 1);
    states.push(y0.to_owned());
    for (k, u) in u_sequence.iter().enumerate() {
        let next = params.step(states[k].view(), u.view())?;
        if !next.iter().all(|v| v.is_finite()) {
            return Err(SimulatorError::NonFiniteState { step: k + 1 });
        }
        states.push(next);
    }
    Ok(Trajectory {
        ts: params.t_horizon(),
        states,
        controls: u_sequence.to_vec(),
        provenance: Provenance::PincSelfLoop,
    })
}

/// Evaluate the network on a sorted time grid inside [0, T] with y0 and u
/// fixed; the grid endpoint t = T reproduces the discrete step exactly.
pub fn dense_prediction(
    params: &NetworkParams,
    y0: ArrayView1<f64>,
    u: ArrayView1<f64>,
    t_grid: &[f64],
) -> Result<Vec<Array1<f64>>, SimulatorError> {
    let t_horizon = params.t_horizon();
    for (i, &t) in t_grid.iter().enumerate() {
        let sorted = i == 0 || t >= t_grid[i - 1];
        if !sorted || !(0.0..=t_horizon).contains(&t) {
            return Err(SimulatorError::BadGrid {
                index: i,
                t,
                t_horizon,
            });
        }
    }
    t_grid
        .iter()
        .map(|&t| Ok(params.forward(t, y0, u)?.y))
        .collect()
}
