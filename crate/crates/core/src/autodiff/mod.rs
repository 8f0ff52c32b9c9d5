//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every primitive applied to its variables. Each record
//! keeps its operation and inputs, so the tape doubles as a replayable
//! program: [`Tape::evaluate_with`] reruns it on substituted leaf values,
//! which is what the finite-difference checker in [`gradcheck`] relies on.
//!
//! ```
//! use spinconv::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
//! let sq = tape.mul(x, x).unwrap();
//! let y = tape.sum_all(sq).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[2.0, 4.0]);
//! ```

mod ops;
mod tensor;

pub mod gradcheck;

use std::cell::RefCell;
use std::sync::Arc;

use thiserror::Error;

use crate::spherical::GridShape;
pub(crate) use ops::Op;
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backpropagation needs a scalar output, got shape {shape:?}")]
    NonScalar { shape: Vec<usize> },
    #[error("non-finite value: {context}")]
    NonFinite { context: String },
}

impl AutodiffError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Self::Shape { op, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive operations. Inputs always precede the
/// operations that consume them.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar with respect to the leaves of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zero when `v` was detached or unused.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads.get_mut(v.0).and_then(Option::take) {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Records a leaf without copying a value that is held elsewhere.
    pub fn leaf_shared(&self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf, needs_grad: requires_grad });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn push(&self, op: Op) -> Result<Var> {
        let inputs = op.inputs();
        let (value, needs_grad) = {
            let nodes = self.nodes.borrow();
            let values: Vec<&Tensor> = inputs.iter().map(|v| nodes[v.0].value.as_ref()).collect();
            let needs_grad = inputs.iter().any(|v| nodes[v.0].needs_grad);
            (op.eval(&values)?, needs_grad)
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Arc::new(value), op, needs_grad });
        Ok(Var(nodes.len() - 1))
    }

    /// Backpropagates from a scalar output to every leaf that requires a gradient.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out_value = &nodes[output.0].value;
        if out_value.len() != 1 {
            return Err(AutodiffError::NonScalar { shape: out_value.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if !nodes[output.0].needs_grad {
            return Ok(Gradients { grads, shapes });
        }
        grads[output.0] = Some(Tensor::filled(out_value.shape(), 1.0));
        for i in (0..=output.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let inputs = node.op.inputs();
            let values: Vec<&Tensor> = inputs.iter().map(|v| nodes[v.0].value.as_ref()).collect();
            let input_grads = node.op.backward(&values, &node.value, &g);
            for (v, gi) in inputs.iter().zip(input_grads) {
                if !nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot => *slot = Some(gi),
                }
            }
        }
        for (i, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    /// Reruns the recorded program up to `output`, substituting leaf values.
    pub fn evaluate_with(&self, overrides: &[(Var, &Tensor)], output: Var) -> Result<Tensor> {
        let nodes = self.nodes.borrow();
        let mut values: Vec<Arc<Tensor>> = Vec::with_capacity(output.0 + 1);
        for (i, node) in nodes.iter().enumerate().take(output.0 + 1) {
            let v = match node.op {
                Op::Leaf => match overrides.iter().find(|(var, _)| var.0 == i) {
                    Some((_, t)) => {
                        if t.shape() != node.value.shape() {
                            return Err(AutodiffError::shape(
                                "evaluate_with",
                                format!("override for leaf {i} has shape {:?}, expected {:?}", t.shape(), node.value.shape()),
                            ));
                        }
                        Arc::new((*t).clone())
                    }
                    None => Arc::clone(&node.value),
                },
                ref op => {
                    let ins: Vec<&Tensor> = op.inputs().iter().map(|v| values[v.0].as_ref()).collect();
                    Arc::new(op.eval(&ins)?)
                }
            };
            values.push(v);
        }
        Ok((*values[output.0]).clone())
    }

    /// Replays the whole tape on its own leaves and reports whether every
    /// recomputed value matches the recorded one bit for bit.
    pub fn replay_matches(&self) -> Result<bool> {
        let Some(last) = self.len().checked_sub(1) else { return Ok(true) };
        let nodes = self.nodes.borrow();
        let mut values: Vec<Arc<Tensor>> = Vec::with_capacity(nodes.len());
        for node in nodes.iter().take(last + 1) {
            let v = match node.op {
                Op::Leaf => Arc::clone(&node.value),
                ref op => {
                    let ins: Vec<&Tensor> = op.inputs().iter().map(|v| values[v.0].as_ref()).collect();
                    let v = op.eval(&ins)?;
                    let same = v.shape() == node.value.shape()
                        && v.data().iter().zip(node.value.data()).all(|(a, b)| a.to_bits() == b.to_bits());
                    if !same {
                        return Ok(false);
                    }
                    Arc::new(v)
                }
            };
            values.push(v);
        }
        Ok(true)
    }

    // Primitive constructors.

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    /// `[n, m] + [m]`, broadcasting over rows.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow(a, row))
    }

    /// `[n, m] * [m]`, broadcasting over rows.
    pub fn mul_row(&self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::MulRow(a, row))
    }

    pub fn scale(&self, a: Var, factor: f64) -> Result<Var> {
        self.push(Op::Scale(a, factor))
    }

    pub fn swish(&self, a: Var) -> Result<Var> {
        self.push(Op::Swish(a))
    }

    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        self.push(Op::SoftmaxRows(a))
    }

    /// Per-row group normalization of `[n, c]` with `groups` equal groups,
    /// without affine parameters.
    pub fn group_norm(&self, x: Var, groups: usize, eps: f64) -> Result<Var> {
        self.push(Op::GroupNorm { x, groups, eps })
    }

    /// `exp(-(z - μ_i)² / 2σ²)` for every entry of `z` and every mean.
    pub fn gaussian(&self, z: Var, means: Arc<[f64]>, sigma: f64) -> Result<Var> {
        self.push(Op::Gaussian { z, means, sigma })
    }

    pub fn gather_rows(&self, x: Var, index: Arc<[usize]>) -> Result<Var> {
        self.push(Op::GatherRows { x, index })
    }

    pub fn segment_sum(&self, x: Var, segment: Arc<[usize]>, count: usize) -> Result<Var> {
        self.push(Op::SegmentSum { x, segment, count })
    }

    pub fn concat_cols(&self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::ConcatCols(a, b))
    }

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.push(Op::Reshape { x, shape })
    }

    pub fn sum_all(&self, x: Var) -> Result<Var> {
        self.push(Op::SumAll(x))
    }

    pub fn sum_axis(&self, x: Var, axis: usize) -> Result<Var> {
        self.push(Op::SumAxis { x, axis, mean: false })
    }

    pub fn mean_axis(&self, x: Var, axis: usize) -> Result<Var> {
        self.push(Op::SumAxis { x, axis, mean: true })
    }

    /// Moves index `i` along `axis` to `(i + shift) mod len`.
    pub fn circular_shift(&self, x: Var, axis: usize, shift: usize) -> Result<Var> {
        self.push(Op::CircularShift { x, axis, shift })
    }

    /// Mean absolute difference.
    pub fn l1_mean(&self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::L1Mean(a, b))
    }

    /// Mixes `B` candidate vectors per row: `[n, D·B] × [n, B] -> [n, D]`,
    /// with candidate `b` of feature `d` stored at column `d·B + b`.
    pub fn mixture(&self, values: Var, weights: Var) -> Result<Var> {
        self.push(Op::Mixture { values, weights })
    }

    /// Row differences `x[source[e]] - x[target[e]]`.
    pub fn pair_diff(&self, x: Var, source: Arc<[usize]>, target: Arc<[usize]>) -> Result<Var> {
        self.push(Op::PairDiff { x, source, target })
    }

    pub fn row_norm(&self, x: Var) -> Result<Var> {
        self.push(Op::RowNorm(x))
    }

    pub fn normalize_rows(&self, x: Var) -> Result<Var> {
        self.push(Op::NormalizeRows(x))
    }

    /// Polar angles `(φ, θ)` of each `dirs` row in the local frame whose
    /// z-axis is the matching `axes` row. Rows flagged `antipodal` are taken
    /// to be exactly `-axis` and map to the south pole with zero gradient.
    pub fn polar_angles(&self, axes: Var, dirs: Var, antipodal: Arc<[bool]>) -> Result<Var> {
        self.push(Op::PolarAngles { axes, dirs, antipodal })
    }

    /// Bilinear scatter of `values [N, M]` at `angles [N, 2]` into
    /// `grids × Φ × Θ × M` dense grids.
    pub fn bilinear_scatter(
        &self,
        values: Var,
        angles: Var,
        grid: Arc<[usize]>,
        grids: usize,
        shape: GridShape,
    ) -> Result<Var> {
        self.push(Op::BilinearScatter { values, angles, grid, grids, shape })
    }

    /// Circular correlation of `[G, Φ, Θ, M]` grids with `[D, Φ, Θ, M]`
    /// filters over every longitudinal shift, giving `[G, Θ, D]`.
    pub fn spin_correlate(&self, grid: Var, filters: Var) -> Result<Var> {
        self.push(Op::SpinCorrelate { grid, filters })
    }

    /// Fused [`bilinear_scatter`](Self::bilinear_scatter) followed by
    /// [`spin_correlate`](Self::spin_correlate) that never materializes the
    /// grids. Item `i` deposits row `rows[i]` of `values` into grid `grid[i]`.
    #[allow(clippy::too_many_arguments)]
    pub fn scatter_correlate(
        &self,
        values: Var,
        angles: Var,
        filters: Var,
        rows: Arc<[usize]>,
        grid: Arc<[usize]>,
        grids: usize,
        shape: GridShape,
    ) -> Result<Var> {
        self.push(Op::ScatterCorrelate { values, angles, filters, rows, grid, grids, shape })
    }
}
