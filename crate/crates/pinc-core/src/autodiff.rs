//! Reverse-mode automatic differentiation over small dense computation graphs.
//!
//! Operations are recorded on a [`Tape`] during a forward pass and replayed
//! in reverse to accumulate adjoints. Node values are dense `rows x cols`
//! matrices; the column dimension doubles as a batch dimension so one tape
//! can evaluate a whole set of sample points at once.
//!
//! A recorded tape is replayable: overwrite the leaf values with
//! [`Tape::set_leaf`] and call [`Tape::replay`] to recompute every node
//! without reallocating. Replay with identical inputs is bit-identical.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Axis, Zip};
use thiserror::Error;

/// Index of a node on the tape.
pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("non-finite input value for {what}")]
    NonFiniteInput { what: &'static str },
    #[error("node {0} is out of bounds for this tape")]
    UnknownNode(NodeId),
    #[error("node {node} has shape {rows}x{cols}, expected a 1x1 scalar")]
    SeedNotScalar {
        node: NodeId,
        rows: usize,
        cols: usize,
    },
    #[error("node {0} is not a leaf")]
    NotALeaf(NodeId),
    #[error("row {row} out of range for node with {rows} rows")]
    RowOutOfRange { row: usize, rows: usize },
}

/// Elementwise nonlinearities supported by the tape.
///
/// `SqrtClamped` evaluates `sqrt(max(x, 0))` and defines the derivative as 0
/// for arguments clamped at the floor, which keeps gradients finite when a
/// physical quantity (e.g. a liquid level) transiently undershoots zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    Tanh,
    Relu,
    SqrtClamped,
}

#[derive(Debug, Clone)]
enum Op {
    /// Variable input; value is supplied at record time and on each replay.
    Leaf,
    /// Fixed value captured at record time.
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// c * a
    Scale(NodeId, f64),
    /// a + c
    Offset(NodeId, f64),
    /// weight (m x n) · input (n x B) + bias (m x 1) broadcast over columns.
    Affine {
        weight: NodeId,
        input: NodeId,
        bias: NodeId,
    },
    Nonlin(Nonlinearity, NodeId),
    Square(NodeId),
    /// Sum of every entry, yielding a 1x1 scalar node.
    Sum(NodeId),
    /// Extract row r as a 1 x B node.
    Row(NodeId, usize),
    /// Stack nodes with equal column counts by rows.
    ConcatRows(Vec<NodeId>),
    /// Per-row affine with constant coefficients:
    /// out[i, :] = gain[i] * in[i, :] + offset[i].
    RowAffine {
        input: NodeId,
        gain: Vec<f64>,
        offset: Vec<f64>,
    },
}

/// Record of elementary operations with per-node forward values and adjoints.
pub struct Tape {
    ops: Vec<Op>,
    shapes: Vec<(usize, usize)>,
    values: Vec<Array2<f64>>,
    adjoints: Vec<Array2<f64>>,
    leaves: Vec<NodeId>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            ops: Vec::new(),
            shapes: Vec::new(),
            values: Vec::new(),
            adjoints: Vec::new(),
            leaves: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Leaf node ids in registration order.
    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.shapes[id]
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.values[id]
    }

    /// Value of a 1x1 node.
    pub fn scalar_value(&self, id: NodeId) -> Result<f64, TapeError> {
        let (r, c) = self.check_node(id)?;
        if (r, c) != (1, 1) {
            return Err(TapeError::SeedNotScalar {
                node: id,
                rows: r,
                cols: c,
            });
        }
        Ok(self.values[id][[0, 0]])
    }

    fn check_node(&self, id: NodeId) -> Result<(usize, usize), TapeError> {
        if id >= self.ops.len() {
            return Err(TapeError::UnknownNode(id));
        }
        Ok(self.shapes[id])
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> NodeId {
        let id = self.ops.len();
        self.shapes.push((value.nrows(), value.ncols()));
        self.ops.push(op);
        self.adjoints.push(Array2::zeros(value.raw_dim()));
        self.values.push(value);
        id
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Result<NodeId, TapeError> {
        if !value.iter().all(|v| v.is_finite()) {
            return Err(TapeError::NonFiniteInput { what: "leaf" });
        }
        let id = self.push(Op::Leaf, value);
        self.leaves.push(id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Result<NodeId, TapeError> {
        if !value.iter().all(|v| v.is_finite()) {
            return Err(TapeError::NonFiniteInput { what: "constant" });
        }
        Ok(self.push(Op::Constant, value))
    }

    pub fn constant_scalar(&mut self, value: f64) -> Result<NodeId, TapeError> {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Overwrite a leaf's value in place. The shape must match the recording.
    pub fn set_leaf(&mut self, leaf: NodeId, value: &Array2<f64>) -> Result<(), TapeError> {
        let shape = self.check_node(leaf)?;
        if !matches!(self.ops[leaf], Op::Leaf) {
            return Err(TapeError::NotALeaf(leaf));
        }
        if (value.nrows(), value.ncols()) != shape {
            return Err(TapeError::ShapeMismatch {
                op: "set_leaf",
                details: format!(
                    "leaf is {}x{}, got {}x{}",
                    shape.0,
                    shape.1,
                    value.nrows(),
                    value.ncols()
                ),
            });
        }
        if !value.iter().all(|v| v.is_finite()) {
            return Err(TapeError::NonFiniteInput { what: "leaf" });
        }
        self.values[leaf].assign(value);
        Ok(())
    }

    fn binary_shape(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(usize, usize), TapeError> {
        let sa = self.check_node(a)?;
        let sb = self.check_node(b)?;
        if sa != sb {
            return Err(TapeError::ShapeMismatch {
                op,
                details: format!("{}x{} vs {}x{}", sa.0, sa.1, sb.0, sb.1),
            });
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.binary_shape("add", a, b)?;
        let value = &self.values[a] + &self.values[b];
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.binary_shape("sub", a, b)?;
        let value = &self.values[a] - &self.values[b];
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.binary_shape("mul", a, b)?;
        let value = &self.values[a] * &self.values[b];
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, TapeError> {
        self.check_node(a)?;
        if !c.is_finite() {
            return Err(TapeError::NonFiniteInput { what: "scale factor" });
        }
        let value = self.values[a].mapv(|v| c * v);
        Ok(self.push(Op::Scale(a, c), value))
    }

    pub fn offset(&mut self, a: NodeId, c: f64) -> Result<NodeId, TapeError> {
        self.check_node(a)?;
        if !c.is_finite() {
            return Err(TapeError::NonFiniteInput { what: "offset" });
        }
        let value = self.values[a].mapv(|v| v + c);
        Ok(self.push(Op::Offset(a, c), value))
    }

    /// `weight · input + bias`, with `bias` broadcast across batch columns.
    pub fn affine(&mut self, weight: NodeId, input: NodeId, bias: NodeId) -> Result<NodeId, TapeError> {
        let (m, n) = self.check_node(weight)?;
        let (ni, cols) = self.check_node(input)?;
        let (mb, one) = self.check_node(bias)?;
        if n != ni || mb != m || one != 1 {
            return Err(TapeError::ShapeMismatch {
                op: "affine",
                details: format!(
                    "weight {}x{}, input {}x{}, bias {}x{}",
                    m, n, ni, cols, mb, one
                ),
            });
        }
        let mut value = Array2::zeros((m, cols));
        general_mat_mul(1.0, &self.values[weight], &self.values[input], 0.0, &mut value);
        let bias_col = self.values[bias].column(0).to_owned();
        for mut col in value.columns_mut() {
            col += &bias_col;
        }
        Ok(self.push(Op::Affine { weight, input, bias }, value))
    }

    pub fn nonlin(&mut self, f: Nonlinearity, a: NodeId) -> Result<NodeId, TapeError> {
        self.check_node(a)?;
        let value = match f {
            Nonlinearity::Tanh => self.values[a].mapv(f64::tanh),
            Nonlinearity::Relu => self.values[a].mapv(|v| v.max(0.0)),
            Nonlinearity::SqrtClamped => self.values[a].mapv(|v| v.max(0.0).sqrt()),
        };
        Ok(self.push(Op::Nonlin(f, a), value))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.nonlin(Nonlinearity::Tanh, a)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.nonlin(Nonlinearity::Relu, a)
    }

    pub fn sqrt_clamped(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.nonlin(Nonlinearity::SqrtClamped, a)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.check_node(a)?;
        let value = self.values[a].mapv(|v| v * v);
        Ok(self.push(Op::Square(a), value))
    }

    /// Sum of all entries, producing a 1x1 node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.check_node(a)?;
        let value = Array2::from_elem((1, 1), self.values[a].sum());
        Ok(self.push(Op::Sum(a), value))
    }

    pub fn row(&mut self, a: NodeId, r: usize) -> Result<NodeId, TapeError> {
        let (rows, cols) = self.check_node(a)?;
        if r >= rows {
            return Err(TapeError::RowOutOfRange { row: r, rows });
        }
        let value = self
            .values[a]
            .row(r)
            .to_owned()
            .into_shape_with_order((1, cols))
            .expect("row reshape");
        Ok(self.push(Op::Row(a, r), value))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, TapeError> {
        if parts.is_empty() {
            return Err(TapeError::ShapeMismatch {
                op: "concat_rows",
                details: "no parts".into(),
            });
        }
        let cols = self.check_node(parts[0])?.1;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.check_node(p)?;
            if c != cols {
                return Err(TapeError::ShapeMismatch {
                    op: "concat_rows",
                    details: format!("column counts differ: {} vs {}", cols, c),
                });
            }
            rows += r;
        }
        let mut value = Array2::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let r = self.shapes[p].0;
            value
                .slice_mut(ndarray::s![at..at + r, ..])
                .assign(&self.values[p]);
            at += r;
        }
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value))
    }

    /// Per-row constant affine map; `gain` and `offset` lengths must equal the
    /// row count of `input`.
    pub fn row_affine(
        &mut self,
        input: NodeId,
        gain: &[f64],
        offset: &[f64],
    ) -> Result<NodeId, TapeError> {
        let (rows, cols) = self.check_node(input)?;
        if gain.len() != rows || offset.len() != rows {
            return Err(TapeError::ShapeMismatch {
                op: "row_affine",
                details: format!(
                    "input has {} rows, gain has {}, offset has {}",
                    rows,
                    gain.len(),
                    offset.len()
                ),
            });
        }
        if !gain.iter().chain(offset.iter()).all(|v| v.is_finite()) {
            return Err(TapeError::NonFiniteInput { what: "row_affine coefficients" });
        }
        let mut value = Array2::zeros((rows, cols));
        for i in 0..rows {
            let src = self.values[input].row(i);
            let mut dst = value.row_mut(i);
            Zip::from(&mut dst).and(&src).for_each(|d, &s| {
                *d = gain[i] * s + offset[i];
            });
        }
        Ok(self.push(
            Op::RowAffine {
                input,
                gain: gain.to_vec(),
                offset: offset.to_vec(),
            },
            value,
        ))
    }

    /// Recompute every node from the current leaf and constant values.
    ///
    /// No allocation; replay with identical leaf values is bit-identical to
    /// the original recording.
    pub fn replay(&mut self) {
        for i in 0..self.ops.len() {
            let (done, rest) = self.values.split_at_mut(i);
            let out = &mut rest[0];
            match &self.ops[i] {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    let (a, b) = (&done[*a], &done[*b]);
                    Zip::from(out).and(a).and(b).for_each(|o, &x, &y| *o = x + y);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (&done[*a], &done[*b]);
                    Zip::from(out).and(a).and(b).for_each(|o, &x, &y| *o = x - y);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (&done[*a], &done[*b]);
                    Zip::from(out).and(a).and(b).for_each(|o, &x, &y| *o = x * y);
                }
                Op::Scale(a, c) => {
                    let (a, c) = (&done[*a], *c);
                    Zip::from(out).and(a).for_each(|o, &x| *o = c * x);
                }
                Op::Offset(a, c) => {
                    let (a, c) = (&done[*a], *c);
                    Zip::from(out).and(a).for_each(|o, &x| *o = x + c);
                }
                Op::Affine { weight, input, bias } => {
                    general_mat_mul(1.0, &done[*weight], &done[*input], 0.0, out);
                    let bias = done[*bias].column(0);
                    for mut col in out.columns_mut() {
                        col += &bias;
                    }
                }
                Op::Nonlin(f, a) => {
                    let a = &done[*a];
                    match f {
                        Nonlinearity::Tanh => {
                            Zip::from(out).and(a).for_each(|o, &x| *o = x.tanh())
                        }
                        Nonlinearity::Relu => {
                            Zip::from(out).and(a).for_each(|o, &x| *o = x.max(0.0))
                        }
                        Nonlinearity::SqrtClamped => {
                            Zip::from(out).and(a).for_each(|o, &x| *o = x.max(0.0).sqrt())
                        }
                    }
                }
                Op::Square(a) => {
                    let a = &done[*a];
                    Zip::from(out).and(a).for_each(|o, &x| *o = x * x);
                }
                Op::Sum(a) => {
                    out[[0, 0]] = done[*a].sum();
                }
                Op::Row(a, r) => {
                    out.row_mut(0).assign(&done[*a].row(*r));
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let r = done[p].nrows();
                        out.slice_mut(ndarray::s![at..at + r, ..]).assign(&done[p]);
                        at += r;
                    }
                }
                Op::RowAffine { input, gain, offset } => {
                    let src = &done[*input];
                    for i in 0..src.nrows() {
                        let row = src.row(i);
                        let mut dst = out.row_mut(i);
                        Zip::from(&mut dst)
                            .and(&row)
                            .for_each(|d, &s| *d = gain[i] * s + offset[i]);
                    }
                }
            }
        }
    }

    /// Seed the adjoint of a scalar node with 1 and sweep the tape in reverse.
    ///
    /// After this call the adjoint of any node n equals d(seed)/d(n).
    pub fn backward(&mut self, seed: NodeId) -> Result<(), TapeError> {
        let (r, c) = self.check_node(seed)?;
        if (r, c) != (1, 1) {
            return Err(TapeError::SeedNotScalar {
                node: seed,
                rows: r,
                cols: c,
            });
        }
        self.reset_adjoints();
        self.adjoints[seed][[0, 0]] = 1.0;

        for i in (0..self.ops.len()).rev() {
            // Inputs of node i precede it, so split borrows are disjoint.
            let (lo, hi) = self.adjoints.split_at_mut(i);
            let g = &hi[0];
            match &self.ops[i] {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    lo[*a] += g;
                    lo[*b] += g;
                }
                Op::Sub(a, b) => {
                    lo[*a] += g;
                    lo[*b] -= g;
                }
                Op::Mul(a, b) => {
                    {
                        let vb = &self.values[*b];
                        Zip::from(&mut lo[*a]).and(g).and(vb).for_each(|d, &gg, &v| *d += gg * v);
                    }
                    let va = &self.values[*a];
                    Zip::from(&mut lo[*b]).and(g).and(va).for_each(|d, &gg, &v| *d += gg * v);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    Zip::from(&mut lo[*a]).and(g).for_each(|d, &gg| *d += c * gg);
                }
                Op::Offset(a, _) => {
                    lo[*a] += g;
                }
                Op::Affine { weight, input, bias } => {
                    general_mat_mul(1.0, g, &self.values[*input].t(), 1.0, &mut lo[*weight]);
                    general_mat_mul(1.0, &self.values[*weight].t(), g, 1.0, &mut lo[*input]);
                    let gsum = g.sum_axis(Axis(1));
                    let mut db = lo[*bias].column_mut(0);
                    db += &gsum;
                }
                Op::Nonlin(f, a) => match f {
                    Nonlinearity::Tanh => {
                        let y = &self.values[i];
                        Zip::from(&mut lo[*a])
                            .and(g)
                            .and(y)
                            .for_each(|d, &gg, &yy| *d += gg * (1.0 - yy * yy));
                    }
                    Nonlinearity::Relu => {
                        let x = &self.values[*a];
                        Zip::from(&mut lo[*a])
                            .and(g)
                            .and(x)
                            .for_each(|d, &gg, &xx| {
                                if xx > 0.0 {
                                    *d += gg;
                                }
                            });
                    }
                    Nonlinearity::SqrtClamped => {
                        let x = &self.values[*a];
                        let y = &self.values[i];
                        Zip::from(&mut lo[*a])
                            .and(g)
                            .and(x)
                            .and(y)
                            .for_each(|d, &gg, &xx, &yy| {
                                if xx > 0.0 {
                                    *d += gg / (2.0 * yy);
                                }
                            });
                    }
                },
                Op::Square(a) => {
                    let x = &self.values[*a];
                    Zip::from(&mut lo[*a])
                        .and(g)
                        .and(x)
                        .for_each(|d, &gg, &xx| *d += 2.0 * gg * xx);
                }
                Op::Sum(a) => {
                    let gg = g[[0, 0]];
                    lo[*a] += gg;
                }
                Op::Row(a, r) => {
                    let mut dst = lo[*a].row_mut(*r);
                    dst += &g.row(0);
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let r = self.shapes[p].0;
                        let slice = g.slice(ndarray::s![at..at + r, ..]);
                        lo[p] += &slice;
                        at += r;
                    }
                }
                Op::RowAffine { input, gain, .. } => {
                    let rows = self.shapes[*input].0;
                    for r in 0..rows {
                        let gr = g.row(r);
                        let mut dst = lo[*input].row_mut(r);
                        Zip::from(&mut dst).and(&gr).for_each(|d, &gg| *d += gain[r] * gg);
                    }
                }
            }
        }
        Ok(())
    }

    /// Adjoint of a node after a [`Tape::backward`] pass.
    pub fn adjoint(&self, id: NodeId) -> &Array2<f64> {
        &self.adjoints[id]
    }

    pub fn reset_adjoints(&mut self) {
        for a in &mut self.adjoints {
            a.fill(0.0);
        }
    }

    /// Gradient of a scalar node with respect to each requested leaf.
    ///
    /// Adjoints are reset before returning, so repeated calls are independent.
    pub fn gradient(
        &mut self,
        output: NodeId,
        leaves: &[NodeId],
    ) -> Result<Vec<Array2<f64>>, TapeError> {
        for &l in leaves {
            self.check_node(l)?;
            if !matches!(self.ops[l], Op::Leaf) {
                return Err(TapeError::NotALeaf(l));
            }
        }
        self.backward(output)?;
        let grads = leaves.iter().map(|&l| self.adjoints[l].clone()).collect();
        self.reset_adjoints();
        Ok(grads)
    }

    /// Jacobian of scalar-valued output nodes with respect to a leaf set.
    ///
    /// Row i holds the gradient of `outputs[i]`; columns are the leaf
    /// components flattened in leaf order (row-major within each leaf).
    pub fn jacobian(
        &mut self,
        outputs: &[NodeId],
        leaves: &[NodeId],
    ) -> Result<Array2<f64>, TapeError> {
        let total: usize = leaves
            .iter()
            .map(|&l| {
                let (r, c) = self.shapes[l];
                r * c
            })
            .sum();
        let mut jac = Array2::zeros((outputs.len(), total));
        for (i, &out) in outputs.iter().enumerate() {
            let grads = self.gradient(out, leaves)?;
            let mut at = 0;
            for g in grads {
                for &v in g.iter() {
                    jac[[i, at]] = v;
                    at += 1;
                }
            }
        }
        Ok(jac)
    }
}

/// Record a forward pass over the given leaf values.
///
/// The builder receives the tape plus the leaf ids (one per entry of
/// `leaf_values`, in order) and returns the output node ids. The recorded
/// tape is replayable and the outputs are readable via [`Tape::value`].
pub fn record_forward<F>(
    leaf_values: &[Array2<f64>],
    build: F,
) -> Result<(Tape, Vec<NodeId>), TapeError>
where
    F: FnOnce(&mut Tape, &[NodeId]) -> Result<Vec<NodeId>, TapeError>,
{
    let mut tape = Tape::new();
    let mut ids = Vec::with_capacity(leaf_values.len());
    for v in leaf_values {
        ids.push(tape.leaf(v.clone())?);
    }
    let outputs = build(&mut tape, &ids)?;
    for &o in &outputs {
        tape.check_node(o)?;
    }
    Ok((tape, outputs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array2};
    use proptest::prelude::*;

    fn scalar(v: f64) -> Array2<f64> {
        Array2::from_elem((1, 1), v)
    }

    /// Mixed relative/absolute comparison: the FD oracle loses accuracy near
    /// zero, so tiny components are compared with an absolute floor.
    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
    }

    /// Central finite differences of a scalar function, the independent
    /// oracle for every gradient test in this module.
    fn central_diff<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], eps: f64) -> Vec<f64> {
        let mut g = Vec::with_capacity(x.len());
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            let orig = xp[i];
            xp[i] = orig + eps;
            let fp = f(&xp);
            xp[i] = orig - eps;
            let fm = f(&xp);
            xp[i] = orig;
            g.push((fp - fm) / (2.0 * eps));
        }
        g
    }

    #[test]
    fn identity_has_one_leaf() {
        let (tape, outs) = record_forward(&[scalar(2.0)], |_t, ids| Ok(vec![ids[0]])).unwrap();
        assert_eq!(tape.len(), 1);
        assert_eq!(tape.scalar_value(outs[0]).unwrap(), 2.0);
    }

    #[test]
    fn square_forward_value() {
        let (tape, outs) = record_forward(&[scalar(3.0)], |t, ids| {
            Ok(vec![t.square(ids[0])?])
        })
        .unwrap();
        assert_eq!(tape.scalar_value(outs[0]).unwrap(), 9.0);
    }

    #[test]
    fn gradient_of_square_is_power_rule() {
        let (mut tape, outs) = record_forward(&[scalar(3.0)], |t, ids| {
            Ok(vec![t.square(ids[0])?])
        })
        .unwrap();
        let leaf = tape.leaves()[0];
        let g = tape.gradient(outs[0], &[leaf]).unwrap();
        assert_eq!(g[0][[0, 0]], 6.0);
    }

    #[test]
    fn gradient_of_tanh_at_zero_is_one() {
        let (mut tape, outs) = record_forward(&[scalar(0.0)], |t, ids| {
            Ok(vec![t.tanh(ids[0])?])
        })
        .unwrap();
        let leaf = tape.leaves()[0];
        let g = tape.gradient(outs[0], &[leaf]).unwrap();
        assert_eq!(g[0][[0, 0]], 1.0);
    }

    #[test]
    fn non_finite_leaf_rejected() {
        let mut tape = Tape::new();
        let err = tape.leaf(scalar(f64::NAN));
        assert!(matches!(err, Err(TapeError::NonFiniteInput { .. })));
    }

    #[test]
    fn gradient_seed_must_be_scalar() {
        let mut tape = Tape::new();
        let v = tape.leaf(arr2(&[[1.0], [2.0]])).unwrap();
        assert!(matches!(
            tape.backward(v),
            Err(TapeError::SeedNotScalar { .. })
        ));
    }

    #[test]
    fn jacobian_of_identity_map() {
        let mut tape = Tape::new();
        let x = tape.leaf(arr2(&[[1.5], [-0.5]])).unwrap();
        let r0 = tape.row(x, 0).unwrap();
        let r1 = tape.row(x, 1).unwrap();
        let jac = tape.jacobian(&[r0, r1], &[x]).unwrap();
        assert_eq!(jac, arr2(&[[1.0, 0.0], [0.0, 1.0]]));
    }

    #[test]
    fn jacobian_of_linear_map_recovers_matrix() {
        let a = arr2(&[[1.0, 2.0, -1.0], [0.5, -3.0, 4.0]]);
        let mut tape = Tape::new();
        let w = tape.constant(a.clone()).unwrap();
        let x = tape.leaf(arr2(&[[0.3], [-1.2], [2.0]])).unwrap();
        let zero = tape.constant(Array2::zeros((2, 1))).unwrap();
        let y = tape.affine(w, x, zero).unwrap();
        let y0 = tape.row(y, 0).unwrap();
        let y1 = tape.row(y, 1).unwrap();
        let jac = tape.jacobian(&[y0, y1], &[x]).unwrap();
        assert_eq!(jac, a);
    }

    #[test]
    fn four_layer_forward_is_finite() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let mut x = tape
            .leaf(Array2::from_shape_fn((4, 7), |_| rng.random_range(-1.0..1.0)))
            .unwrap();
        let mut dim = 4;
        for _ in 0..4 {
            let w = tape
                .constant(Array2::from_shape_fn((20, dim), |_| rng.random_range(-0.5..0.5)))
                .unwrap();
            let b = tape.constant(Array2::zeros((20, 1))).unwrap();
            let z = tape.affine(w, x, b).unwrap();
            x = tape.tanh(z).unwrap();
            dim = 20;
        }
        assert!(tape.value(x).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn replay_is_bit_identical() {
        let x0 = arr2(&[[0.7, -0.3], [1.1, 0.2]]);
        let (mut tape, outs) = record_forward(&[x0.clone()], |t, ids| {
            let s = t.square(ids[0])?;
            let h = t.tanh(s)?;
            let total = t.sum(h)?;
            Ok(vec![total])
        })
        .unwrap();
        let first = tape.scalar_value(outs[0]).unwrap();
        let leaf = tape.leaves()[0];
        tape.set_leaf(leaf, &x0).unwrap();
        tape.replay();
        let second = tape.scalar_value(outs[0]).unwrap();
        assert_eq!(first.to_bits(), second.to_bits());
    }

    #[test]
    fn repeated_gradient_is_identical() {
        let (mut tape, outs) = record_forward(&[scalar(0.8)], |t, ids| {
            let s = t.square(ids[0])?;
            let h = t.tanh(s)?;
            Ok(vec![t.sum(h)?])
        })
        .unwrap();
        let leaf = tape.leaves()[0];
        let g1 = tape.gradient(outs[0], &[leaf]).unwrap();
        let g2 = tape.gradient(outs[0], &[leaf]).unwrap();
        assert_eq!(g1[0][[0, 0]].to_bits(), g2[0][[0, 0]].to_bits());
    }

    #[test]
    fn sum_gradient_is_linear() {
        // d/dx (f + g) == d/dx f + d/dx g on a random-ish expression pair.
        let x = arr2(&[[0.4], [-1.3], [0.9]]);
        let build_f = |t: &mut Tape, x: NodeId| -> Result<NodeId, TapeError> {
            let s = t.square(x)?;
            t.sum(s)
        };
        let build_g = |t: &mut Tape, x: NodeId| -> Result<NodeId, TapeError> {
            let h = t.tanh(x)?;
            t.sum(h)
        };

        let mut tape = Tape::new();
        let xl = tape.leaf(x.clone()).unwrap();
        let f = build_f(&mut tape, xl).unwrap();
        let g = build_g(&mut tape, xl).unwrap();
        let total = tape.add(f, g).unwrap();
        let grad_total = tape.gradient(total, &[xl]).unwrap();
        let grad_f = tape.gradient(f, &[xl]).unwrap();
        let grad_g = tape.gradient(g, &[xl]).unwrap();
        let sum = &grad_f[0] + &grad_g[0];
        for (a, b) in grad_total[0].iter().zip(sum.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    /// Evaluate a composite expression exercising one elementary op as a
    /// plain closure for the finite-difference oracle.
    fn op_scalar_fn(op: &str, x: &[f64]) -> f64 {
        match op {
            "add" => (x[0] + x[1]) * (x[0] + x[1]),
            "sub" => (x[0] - x[1]).tanh(),
            "mul" => x[0] * x[1],
            "scale" => 2.5 * x[0] * x[0],
            "offset" => (x[0] + 1.25).tanh(),
            "tanh" => x[0].tanh(),
            "relu" => x[0].max(0.0) * x[0].max(0.0),
            "sqrt" => x[0].max(0.0).sqrt(),
            "square" => (x[0] * x[0]).tanh(),
            "affine" => {
                // 2x2 weight leaves, 2-vector input leaves
                let y0 = x[0] * x[4] + x[1] * x[5] + 0.3;
                let y1 = x[2] * x[4] + x[3] * x[5] - 0.1;
                (y0 * y0 + y1 * y1).sqrt()
            }
            _ => unreachable!(),
        }
    }

    fn op_tape_fn(op: &str, t: &mut Tape, ids: &[NodeId]) -> Result<NodeId, TapeError> {
        match op {
            "add" => {
                let s = t.add(ids[0], ids[1])?;
                t.square(s)
            }
            "sub" => {
                let s = t.sub(ids[0], ids[1])?;
                t.tanh(s)
            }
            "mul" => t.mul(ids[0], ids[1]),
            "scale" => {
                let s = t.square(ids[0])?;
                t.scale(s, 2.5)
            }
            "offset" => {
                let s = t.offset(ids[0], 1.25)?;
                t.tanh(s)
            }
            "tanh" => t.tanh(ids[0]),
            "relu" => {
                let r = t.relu(ids[0])?;
                t.square(r)
            }
            "sqrt" => t.sqrt_clamped(ids[0]),
            "square" => {
                let s = t.square(ids[0])?;
                t.tanh(s)
            }
            _ => unreachable!(),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Reverse-mode derivative of each elementary op matches central
        /// finite differences within relative error 1e-5 on [-2, 2].
        #[test]
        fn elementary_ops_match_finite_differences(
            op in prop::sample::select(vec!["add", "sub", "mul", "scale", "offset", "tanh", "relu", "square", "sqrt"]),
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
        ) {
            // Keep clear of the relu/sqrt kinks where the FD oracle is invalid.
            let a = if op == "relu" || op == "sqrt" { a.abs().max(0.05) } else { a };
            let n_leaves = if matches!(op, "add" | "sub" | "mul") { 2 } else { 1 };
            let xs = if n_leaves == 2 { vec![a, b] } else { vec![a] };
            let leaf_vals: Vec<Array2<f64>> = xs.iter().map(|&v| scalar(v)).collect();

            let (mut tape, outs) = record_forward(&leaf_vals, |t, ids| {
                Ok(vec![op_tape_fn(op, t, ids)?])
            }).unwrap();
            let leaves: Vec<NodeId> = tape.leaves().to_vec();
            let grads = tape.gradient(outs[0], &leaves).unwrap();
            let ad: Vec<f64> = grads.iter().map(|g| g[[0, 0]]).collect();
            let fd = central_diff(|x| op_scalar_fn(op, x), &xs, 1e-6);
            for (g_ad, g_fd) in ad.iter().zip(fd.iter()) {
                prop_assert!(rel_err(*g_ad, *g_fd) < 1e-5,
                    "op {} ad {} fd {}", op, g_ad, g_fd);
            }
        }
    }

    #[test]
    fn affine_gradient_matches_finite_differences() {
        // Leaves: flattened 2x2 weight, 2-vector input; bias constant.
        let xs = [0.7, -0.4, 0.2, 1.1, 0.9, -0.6];
        let build = |t: &mut Tape, w: &Array2<f64>, x: &Array2<f64>| -> (Vec<NodeId>, NodeId) {
            let wl = t.leaf(w.clone()).unwrap();
            let xl = t.leaf(x.clone()).unwrap();
            let bias = t.constant(arr2(&[[0.3], [-0.1]])).unwrap();
            let y = t.affine(wl, xl, bias).unwrap();
            let sq = t.square(y).unwrap();
            let s = t.sum(sq).unwrap();
            let out = t.sqrt_clamped(s).unwrap();
            (vec![wl, xl], out)
        };
        let w = arr2(&[[xs[0], xs[1]], [xs[2], xs[3]]]);
        let x = arr2(&[[xs[4]], [xs[5]]]);
        let mut tape = Tape::new();
        let (leaves, out) = build(&mut tape, &w, &x);
        let grads = tape.gradient(out, &leaves).unwrap();
        let ad: Vec<f64> = grads.iter().flat_map(|g| g.iter().copied().collect::<Vec<_>>()).collect();
        let fd = central_diff(|v| op_scalar_fn("affine", v), &xs, 1e-6);
        for (g_ad, g_fd) in ad.iter().zip(fd.iter()) {
            assert!(rel_err(*g_ad, *g_fd) < 1e-5, "ad {} fd {}", g_ad, g_fd);
        }
    }

    #[test]
    fn sqrt_clamped_derivative_is_zero_at_floor() {
        let (mut tape, outs) = record_forward(&[scalar(-0.5)], |t, ids| {
            Ok(vec![t.sqrt_clamped(ids[0])?])
        })
        .unwrap();
        let leaf = tape.leaves()[0];
        let g = tape.gradient(outs[0], &[leaf]).unwrap();
        assert_eq!(g[0][[0, 0]], 0.0);
    }

    #[test]
    fn row_and_concat_roundtrip_gradients() {
        let x = arr2(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let (mut tape, outs) = record_forward(&[x], |t, ids| {
            let r0 = t.row(ids[0], 0)?;
            let r2 = t.row(ids[0], 2)?;
            let stacked = t.concat_rows(&[r2, r0])?;
            let sq = t.square(stacked)?;
            Ok(vec![t.sum(sq)?])
        })
        .unwrap();
        let leaf = tape.leaves()[0];
        let g = tape.gradient(outs[0], &[leaf]).unwrap();
        // d/dx sum(x0^2 + x2^2): rows 0 and 2 get 2x, row 1 untouched.
        assert_eq!(g[0], arr2(&[[2.0, 4.0], [0.0, 0.0], [10.0, 12.0]]));
    }
}
