//! Tape-backed evaluation of the composite training loss.
//!
//! The data term and the physics term live on prebuilt replayable tapes:
//! one boundary tape over the full training set, and one or two collocation
//! tapes that are re-pointed at successive fixed-size chunks of the
//! collocation set. Parameters enter every tape as leaves, so one backward
//! pass per tape yields the full-batch gradient. Chunks are visited in a
//! fixed order with sequential accumulation, which keeps results
//! deterministic for a given partition.

use crate::autodiff::{NodeId, Tape, TapeError};
use crate::network::{NetworkParams, ParamNodes};
use crate::physics::OdeModel;
use crate::sampling::{CollocationSet, TrainingSet};
use ndarray::{s, Array1, Array2};

use super::TrainError;

/// Number of collocation points evaluated per tape replay. Sized so one
/// tape's values and adjoints stay in the tens of megabytes for the
/// networks used here.
const CHUNK: usize = 2000;

struct ChunkTape {
    tape: Tape,
    loss: NodeId,
    params: ParamNodes,
    t_leaf: NodeId,
    y0_leaf: NodeId,
    u_leaf: NodeId,
    batch: usize,
}

struct ChunkData {
    t: Array2<f64>,
    y0: Array2<f64>,
    u: Array2<f64>,
}

/// Prebuilt tapes for MSE_y and MSE_F over fixed sample sets.
pub struct LossEvaluator {
    boundary: Tape,
    boundary_loss: NodeId,
    boundary_params: ParamNodes,
    main: Option<ChunkTape>,
    tail: Option<ChunkTape>,
    chunk_data: Vec<ChunkData>,
    scratch: Vec<Array2<f64>>,
    n_params: usize,
}

/// Both loss terms at one parameter vector.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub mse_y: f64,
    pub mse_f: f64,
}

impl LossEvaluator {
    /// Record the loss graphs for the given network architecture and sample
    /// sets. The tapes bind to shapes, scaling, and sample values; only the
    /// parameter values vary afterwards.
    pub fn build(
        params: &NetworkParams,
        model: &OdeModel,
        data: &TrainingSet,
        colloc: &CollocationSet,
    ) -> Result<Self, TrainError> {
        if data.is_empty() {
            return Err(TrainError::Config("training set is empty".into()));
        }
        if colloc.is_empty() {
            return Err(TrainError::Config("collocation set is empty".into()));
        }
        let ny = params.n_states();
        let n_t = data.len();
        let n_f = colloc.len();

        // Boundary tape: inputs and targets are constants of the recording.
        let mut boundary = Tape::new();
        let boundary_params = params.params_as_leaves(&mut boundary)?;
        let t_row = Array2::from_shape_vec((1, n_t), data.t.to_vec()).expect("t row");
        let tn = boundary.constant(t_row)?;
        let yn = boundary.constant(data.y0.clone())?;
        let un = boundary.constant(data.u.clone())?;
        let out = params.output_on_tape(&mut boundary, &boundary_params, tn, yn, un, false)?;
        let target = boundary.constant(data.target.clone())?;
        let diff = boundary.sub(out.y, target)?;
        let sq = boundary.square(diff)?;
        let total = boundary.sum(sq)?;
        let boundary_loss = boundary.scale(total, 1.0 / (ny * n_t) as f64)?;

        // Collocation tapes: inputs are leaves so one tape serves every
        // chunk of the same width. Each chunk's loss node carries the
        // 1/(N_y * N_F) weight of the full term, so chunk losses sum to
        // MSE_F exactly.
        let weight = 1.0 / (ny * n_f) as f64;
        let full_chunks = n_f / CHUNK;
        let remainder = n_f % CHUNK;
        let main = if full_chunks > 0 {
            Some(Self::build_chunk_tape(params, model, CHUNK, weight)?)
        } else {
            None
        };
        let tail = if remainder > 0 {
            Some(Self::build_chunk_tape(params, model, remainder, weight)?)
        } else {
            None
        };

        let mut chunk_data = Vec::new();
        let mut at = 0;
        while at < n_f {
            let end = (at + CHUNK).min(n_f);
            chunk_data.push(ChunkData {
                t: colloc
                    .t
                    .slice(s![at..end])
                    .to_owned()
                    .into_shape_with_order((1, end - at))
                    .expect("t chunk"),
                y0: colloc.y0.slice(s![.., at..end]).to_owned(),
                u: colloc.u.slice(s![.., at..end]).to_owned(),
            });
            at = end;
        }

        let layer_shapes: Vec<(usize, usize)> = params
            .weights()
            .iter()
            .zip(params.biases().iter())
            .flat_map(|(w, b)| [w.dim(), b.dim()])
            .collect();
        let scratch = layer_shapes
            .iter()
            .map(|&(r, c)| Array2::zeros((r, c)))
            .collect();

        Ok(LossEvaluator {
            boundary,
            boundary_loss,
            boundary_params,
            main,
            tail,
            chunk_data,
            scratch,
            n_params: params.param_count(),
        })
    }

    fn build_chunk_tape(
        params: &NetworkParams,
        model: &OdeModel,
        batch: usize,
        weight: f64,
    ) -> Result<ChunkTape, TrainError> {
        let ny = params.n_states();
        let nu = params.n_controls();
        let mut tape = Tape::new();
        let param_nodes = params.params_as_leaves(&mut tape)?;
        let t_leaf = tape.leaf(Array2::zeros((1, batch)))?;
        let y0_leaf = tape.leaf(Array2::zeros((ny, batch)))?;
        let u_leaf = tape.leaf(Array2::zeros((nu, batch)))?;
        let out = params.output_on_tape(&mut tape, &param_nodes, t_leaf, y0_leaf, u_leaf, true)?;
        let dy_dt = out.dy_dt.expect("tangent requested");
        let rhs = model.rhs_on_tape(&mut tape, out.y, u_leaf)?;
        let residual = tape.sub(dy_dt, rhs)?;
        let sq = tape.square(residual)?;
        let total = tape.sum(sq)?;
        let loss = tape.scale(total, weight)?;
        Ok(ChunkTape {
            tape,
            loss,
            params: param_nodes,
            t_leaf,
            y0_leaf,
            u_leaf,
            batch,
        })
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    fn fill_scratch(&mut self, flat: &Array1<f64>) {
        let mut at = 0;
        for buf in self.scratch.iter_mut() {
            for v in buf.iter_mut() {
                *v = flat[at];
                at += 1;
            }
        }
    }

    fn set_params(tape: &mut Tape, nodes: &ParamNodes, scratch: &[Array2<f64>]) -> Result<(), TapeError> {
        for (i, id) in nodes.flat_ids().into_iter().enumerate() {
            tape.set_leaf(id, &scratch[i])?;
        }
        Ok(())
    }

    fn accumulate_leaf_grads(
        tape: &Tape,
        nodes: &ParamNodes,
        out: &mut Array1<f64>,
    ) {
        let mut at = 0;
        for id in nodes.flat_ids() {
            for &v in tape.adjoint(id).iter() {
                out[at] += v;
                at += 1;
            }
        }
    }

    /// Loss terms and their gradients at a flat parameter vector. The
    /// gradients of the two terms are kept separate so the caller can apply
    /// its own physics-term weight.
    pub fn eval_with_grad(
        &mut self,
        flat: &Array1<f64>,
    ) -> Result<(LossTerms, Array1<f64>, Array1<f64>), TrainError> {
        self.fill_scratch(flat);
        let mut grad_y = Array1::zeros(self.n_params);
        let mut grad_f = Array1::zeros(self.n_params);

        Self::set_params(&mut self.boundary, &self.boundary_params, &self.scratch)?;
        self.boundary.replay();
        let mse_y = self.boundary.scalar_value(self.boundary_loss)?;
        self.boundary.backward(self.boundary_loss)?;
        Self::accumulate_leaf_grads(&self.boundary, &self.boundary_params, &mut grad_y);
        self.boundary.reset_adjoints();

        let mut mse_f = 0.0;
        for chunk in &self.chunk_data {
            let batch = chunk.t.ncols();
            let ct = if Some(batch) == self.main.as_ref().map(|c| c.batch) {
                self.main.as_mut().expect("main tape")
            } else {
                self.tail.as_mut().expect("tail tape")
            };
            Self::set_params(&mut ct.tape, &ct.params, &self.scratch)?;
            ct.tape.set_leaf(ct.t_leaf, &chunk.t)?;
            ct.tape.set_leaf(ct.y0_leaf, &chunk.y0)?;
            ct.tape.set_leaf(ct.u_leaf, &chunk.u)?;
            ct.tape.replay();
            mse_f += ct.tape.scalar_value(ct.loss)?;
            ct.tape.backward(ct.loss)?;
            Self::accumulate_leaf_grads(&ct.tape, &ct.params, &mut grad_f);
            ct.tape.reset_adjoints();
        }

        Ok((LossTerms { mse_y, mse_f }, grad_y, grad_f))
    }
}
