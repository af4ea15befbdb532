use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Result, TapeError};

/// Elementwise unary operations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryKind {
    Relu,
    LeakyRelu(f64),
    Exp,
    Log,
    Neg,
    Sqrt,
}

/// Elementwise binary operations with trailing-axis broadcasting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// Axis reductions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Unary(UnaryKind),
    Binary(BinaryKind),
    Matmul,
    Reduce {
        kind: ReduceKind,
        axis: usize,
        /// For max: flat index of the winning entry per output slot.
        arg: Option<Vec<usize>>,
    },
    Concat {
        axis: usize,
    },
    Row {
        index: usize,
    },
    Reshape,
    Conv2d {
        stride: usize,
    },
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
}

#[derive(Default)]
struct GraphInner {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Append-only differentiation tape. Cloning is cheap and shares the tape.
///
/// Node input ids always precede the node's own id, so insertion order is a
/// topological order and the graph is acyclic by construction.
#[derive(Clone, Default)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register a differentiable leaf (a learnable parameter).
    pub fn param(&self, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_shape_data(shape, &data)?;
        let id = self.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            shape: shape.to_vec(),
            data: Arc::new(data),
            requires_grad: true,
        });
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.node_data(id),
            node: Some((self.clone(), id)),
        })
    }

    fn push(&self, node: Node) -> usize {
        let mut inner = self.inner.borrow_mut();
        debug_assert!(node.inputs.iter().all(|&i| i < inner.nodes.len()));
        inner.nodes.push(node);
        inner.grads.push(None);
        inner.nodes.len() - 1
    }

    fn node_data(&self, id: usize) -> Arc<Vec<f64>> {
        Arc::clone(&self.inner.borrow().nodes[id].data)
    }

    fn same_graph(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Dense row-major f64 tensor, optionally attached to a [`Graph`].
///
/// Detached tensors (constants, inputs) evaluate eagerly without recording;
/// as soon as an operand requires gradients the result is recorded on the
/// operand's graph.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<(Graph, usize)>,
}

fn check_shape_data(shape: &[usize], data: &[f64]) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(TapeError::Shape(format!(
            "zero extent in shape {shape:?}"
        )));
    }
    let numel: usize = shape.iter().product();
    if numel != data.len() {
        return Err(TapeError::Shape(format!(
            "shape {shape:?} implies {numel} elements, got {}",
            data.len()
        )));
    }
    Ok(())
}

fn debug_check_finite(data: &[f64]) {
    debug_assert!(
        data.iter().all(|v| !v.is_nan()),
        "forward operation produced NaN"
    );
}

/// Broadcast two shapes by aligning trailing axes; extents must match or be 1.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < a.len() { a[a.len() - 1 - i] } else { 1 };
        let db = if i < b.len() { b[b.len() - 1 - i] } else { 1 };
        if da != db && da != 1 && db != 1 {
            return Err(TapeError::Shape(format!(
                "cannot broadcast {a:?} with {b:?}"
            )));
        }
        out[rank - 1 - i] = da.max(db);
    }
    Ok(out)
}

/// Row-major strides; broadcast axes (extent 1 against a larger output) get
/// stride 0. `shape` is aligned to the trailing axes of `out_shape`.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut natural = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        natural[i] = acc;
        acc *= shape[i];
    }
    let mut strides = vec![0usize; rank];
    for i in 0..rank {
        if i >= offset && shape[i - offset] != 1 {
            strides[i] = natural[i - offset];
        }
    }
    strides
}

fn apply_binary(kind: BinaryKind, x: f64, y: f64) -> f64 {
    match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
        BinaryKind::Div => x / y,
    }
}

fn binary_zip(kind: BinaryKind, a: &[f64], b: &[f64], out: &mut [f64]) {
    match kind {
        BinaryKind::Add => {
            for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
                *o = x + y;
            }
        }
        BinaryKind::Sub => {
            for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
                *o = x - y;
            }
        }
        BinaryKind::Mul => {
            for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
                *o = x * y;
            }
        }
        BinaryKind::Div => {
            for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
                *o = x / y;
            }
        }
    }
}

fn binary_scalar_rhs(kind: BinaryKind, a: &[f64], y: f64, out: &mut [f64]) {
    match kind {
        BinaryKind::Add => out.iter_mut().zip(a).for_each(|(o, &x)| *o = x + y),
        BinaryKind::Sub => out.iter_mut().zip(a).for_each(|(o, &x)| *o = x - y),
        BinaryKind::Mul => out.iter_mut().zip(a).for_each(|(o, &x)| *o = x * y),
        BinaryKind::Div => out.iter_mut().zip(a).for_each(|(o, &x)| *o = x / y),
    }
}

fn binary_scalar_lhs(kind: BinaryKind, x: f64, b: &[f64], out: &mut [f64]) {
    match kind {
        BinaryKind::Add => out.iter_mut().zip(b).for_each(|(o, &y)| *o = x + y),
        BinaryKind::Sub => out.iter_mut().zip(b).for_each(|(o, &y)| *o = x - y),
        BinaryKind::Mul => out.iter_mut().zip(b).for_each(|(o, &y)| *o = x * y),
        BinaryKind::Div => out.iter_mut().zip(b).for_each(|(o, &y)| *o = x / y),
    }
}

/// Reduce a gradient of `out_shape` back onto a broadcast operand of `shape`.
fn reduce_broadcast_grad(grad: &[f64], out_shape: &[usize], shape: &[usize]) -> Vec<f64> {
    if shape == out_shape {
        return grad.to_vec();
    }
    let numel: usize = shape.iter().product();
    let mut out = vec![0.0; numel];
    let strides = broadcast_strides(shape, out_shape);
    let mut idx = vec![0usize; out_shape.len()];
    for &g in grad {
        let mut off = 0usize;
        for (d, &s) in idx.iter().zip(strides.iter()) {
            off += d * s;
        }
        out[off] += g;
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

impl Tensor {
    /// Detached tensor with explicit shape.
    pub fn constant(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_shape_data(shape, &data)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        })
    }

    /// Detached rank-0 scalar.
    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![],
            data: Arc::new(vec![value]),
            node: None,
        }
    }

    /// Detached rank-1 vector.
    pub fn vector(data: Vec<f64>) -> Tensor {
        Tensor {
            shape: vec![data.len()],
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        match &self.node {
            Some((g, id)) => g.inner.borrow().nodes[*id].requires_grad,
            None => false,
        }
    }

    /// Tape node id, if this tensor is recorded.
    pub fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|(_, id)| *id)
    }

    /// Copy of this tensor detached from any graph.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Graph shared by the operands, if any operand requires gradients.
    fn result_graph(operands: &[&Tensor]) -> Result<Option<Graph>> {
        let mut graph: Option<Graph> = None;
        for t in operands {
            if let Some((g, _)) = &t.node {
                match &graph {
                    None => graph = Some(g.clone()),
                    Some(existing) if existing.same_graph(g) => {}
                    Some(_) => {
                        return Err(TapeError::Graph(
                            "operands belong to different graphs".into(),
                        ))
                    }
                }
            }
        }
        let requires = operands.iter().any(|t| t.requires_grad());
        Ok(if requires { graph } else { None })
    }

    /// Node id of `self` on `graph`, registering a constant leaf if detached.
    fn ensure_node(&self, graph: &Graph) -> Result<usize> {
        match &self.node {
            Some((g, id)) => {
                if g.same_graph(graph) {
                    Ok(*id)
                } else {
                    Err(TapeError::Graph(
                        "operands belong to different graphs".into(),
                    ))
                }
            }
            None => Ok(graph.push(Node {
                op: Op::Leaf,
                inputs: vec![],
                shape: self.shape.clone(),
                data: Arc::clone(&self.data),
                requires_grad: false,
            })),
        }
    }

    fn record(
        &self,
        graph: Option<Graph>,
        op: Op,
        inputs: &[&Tensor],
        shape: Vec<usize>,
        data: Arc<Vec<f64>>,
    ) -> Result<Tensor> {
        debug_check_finite(&data);
        match graph {
            None => Ok(Tensor {
                shape,
                data,
                node: None,
            }),
            Some(g) => {
                let ids = inputs
                    .iter()
                    .map(|t| t.ensure_node(&g))
                    .collect::<Result<Vec<_>>>()?;
                let id = g.push(Node {
                    op,
                    inputs: ids,
                    shape: shape.clone(),
                    data: Arc::clone(&data),
                    requires_grad: true,
                });
                Ok(Tensor {
                    shape,
                    data,
                    node: Some((g, id)),
                })
            }
        }
    }

    /// Elementwise unary operation.
    pub fn unary(&self, kind: UnaryKind) -> Result<Tensor> {
        let src = self.data.as_slice();
        let out: Vec<f64> = match kind {
            UnaryKind::Relu => src.iter().map(|&x| x.max(0.0)).collect(),
            UnaryKind::LeakyRelu(slope) => src
                .iter()
                .map(|&x| if x >= 0.0 { x } else { slope * x })
                .collect(),
            UnaryKind::Exp => src.iter().map(|&x| x.exp()).collect(),
            UnaryKind::Log => {
                if let Some(x) = src.iter().find(|&&x| x <= 0.0) {
                    return Err(TapeError::Domain(format!("log of non-positive value {x}")));
                }
                src.iter().map(|&x| x.ln()).collect()
            }
            UnaryKind::Neg => src.iter().map(|&x| -x).collect(),
            UnaryKind::Sqrt => {
                if let Some(x) = src.iter().find(|&&x| x < 0.0) {
                    return Err(TapeError::Domain(format!("sqrt of negative value {x}")));
                }
                src.iter().map(|&x| x.sqrt()).collect()
            }
        };
        let graph = Self::result_graph(&[self])?;
        self.record(graph, Op::Unary(kind), &[self], self.shape.clone(), Arc::new(out))
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.unary(UnaryKind::Relu)
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Tensor> {
        self.unary(UnaryKind::LeakyRelu(slope))
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary(UnaryKind::Exp)
    }

    pub fn log(&self) -> Result<Tensor> {
        self.unary(UnaryKind::Log)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.unary(UnaryKind::Neg)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        self.unary(UnaryKind::Sqrt)
    }

    /// Elementwise binary operation with trailing-axis broadcasting.
    pub fn binary(&self, other: &Tensor, kind: BinaryKind) -> Result<Tensor> {
        let out_shape = broadcast_shape(&self.shape, &other.shape)?;
        let numel: usize = out_shape.iter().product();
        if kind == BinaryKind::Div && other.data.iter().any(|&v| v == 0.0) {
            return Err(TapeError::Domain("division by zero".into()));
        }
        let mut out = vec![0.0; numel];
        if self.shape == out_shape && other.shape == out_shape {
            binary_zip(kind, &self.data, &other.data, &mut out);
        } else if self.shape == out_shape && other.data.len() == 1 {
            binary_scalar_rhs(kind, &self.data, other.data[0], &mut out);
        } else if other.shape == out_shape && self.data.len() == 1 {
            binary_scalar_lhs(kind, self.data[0], &other.data, &mut out);
        } else if self.shape == out_shape && is_suffix(&other.shape, &out_shape) {
            // hot path: bias-style [..., n] operand cycling over the output
            let n = other.data.len();
            for (chunk, src) in out.chunks_mut(n).zip(self.data.chunks(n)) {
                binary_zip(kind, src, &other.data, chunk);
            }
        } else {
            let sa = broadcast_strides(&self.shape, &out_shape);
            let sb = broadcast_strides(&other.shape, &out_shape);
            let mut idx = vec![0usize; out_shape.len()];
            for slot in out.iter_mut() {
                let mut oa = 0usize;
                let mut ob = 0usize;
                for (d, (&a, &b)) in idx.iter().zip(sa.iter().zip(sb.iter())) {
                    oa += d * a;
                    ob += d * b;
                }
                *slot = apply_binary(kind, self.data[oa], other.data[ob]);
                for ax in (0..out_shape.len()).rev() {
                    idx[ax] += 1;
                    if idx[ax] < out_shape[ax] {
                        break;
                    }
                    idx[ax] = 0;
                }
            }
        }
        let graph = Self::result_graph(&[self, other])?;
        self.record(graph, Op::Binary(kind), &[self, other], out_shape, Arc::new(out))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Div)
    }

    /// Multiply by a plain scalar constant.
    pub fn mul_scalar(&self, value: f64) -> Result<Tensor> {
        self.mul(&Tensor::scalar(value))
    }

    /// Add a plain scalar constant.
    pub fn add_scalar(&self, value: f64) -> Result<Tensor> {
        self.add(&Tensor::scalar(value))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(TapeError::Shape(format!(
                "matmul requires rank-2 operands, got {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(TapeError::Shape(format!(
                "matmul inner extents differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let out = matmul_raw(&self.data, &other.data, m, k, n);
        let graph = Self::result_graph(&[self, other])?;
        self.record(graph, Op::Matmul, &[self, other], vec![m, n], Arc::new(out))
    }

    /// Reduce along `axis`. Max reduction records the winning indices so the
    /// backward pass routes the gradient to the first maximal entry.
    pub fn reduce(&self, kind: ReduceKind, axis: usize) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return Err(TapeError::Shape(format!(
                "reduce axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out_shape = self.shape.clone();
        out_shape.remove(axis);
        let mut out = vec![0.0; outer * inner];
        let mut arg = if kind == ReduceKind::Max {
            Some(vec![0usize; outer * inner])
        } else {
            None
        };
        // iterate whole inner rows so memory access stays contiguous
        for o in 0..outer {
            let base = o * len * inner;
            let dst = &mut out[o * inner..(o + 1) * inner];
            match kind {
                ReduceKind::Sum | ReduceKind::Mean => {
                    for t in 0..len {
                        let row = &self.data[base + t * inner..base + (t + 1) * inner];
                        for (d, &v) in dst.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    if kind == ReduceKind::Mean {
                        for d in dst.iter_mut() {
                            *d /= len as f64;
                        }
                    }
                }
                ReduceKind::Max => {
                    dst.copy_from_slice(&self.data[base..base + inner]);
                    let args = arg.as_mut().unwrap();
                    let adst = &mut args[o * inner..(o + 1) * inner];
                    for (i, a) in adst.iter_mut().enumerate() {
                        *a = base + i;
                    }
                    for t in 1..len {
                        let row = &self.data[base + t * inner..base + (t + 1) * inner];
                        for ((d, a), (i, &v)) in
                            dst.iter_mut().zip(adst.iter_mut()).zip(row.iter().enumerate())
                        {
                            if v > *d {
                                *d = v;
                                *a = base + t * inner + i;
                            }
                        }
                    }
                }
            }
        }
        let graph = Self::result_graph(&[self])?;
        self.record(graph, Op::Reduce { kind, axis, arg }, &[self], out_shape, Arc::new(out))
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce(ReduceKind::Sum, axis)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce(ReduceKind::Mean, axis)
    }

    pub fn max_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce(ReduceKind::Max, axis)
    }

    /// Winning flat indices of the latest max reduction along `axis`,
    /// computed without touching the tape.
    pub fn argmax_axis(&self, axis: usize) -> Result<Vec<usize>> {
        if axis >= self.shape.len() {
            return Err(TapeError::Shape(format!(
                "argmax axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut best = self.data[base];
                let mut best_t = 0usize;
                for t in 1..len {
                    let v = self.data[base + t * inner];
                    if v > best {
                        best = v;
                        best_t = t;
                    }
                }
                arg[o * inner + i] = best_t;
            }
        }
        Ok(arg)
    }

    /// Concatenate along `axis`; all other extents must match.
    pub fn concat(&self, other: &Tensor, axis: usize) -> Result<Tensor> {
        if self.shape.len() != other.shape.len() {
            return Err(TapeError::Shape(format!(
                "concat rank mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        if axis >= self.shape.len() {
            return Err(TapeError::Shape(format!(
                "concat axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        for (d, (&a, &b)) in self.shape.iter().zip(other.shape.iter()).enumerate() {
            if d != axis && a != b {
                return Err(TapeError::Shape(format!(
                    "concat extents differ off-axis: {:?} vs {:?}",
                    self.shape, other.shape
                )));
            }
        }
        let mut out_shape = self.shape.clone();
        out_shape[axis] += other.shape[axis];
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let block_a = self.shape[axis] * inner;
        let block_b = other.shape[axis] * inner;
        let mut out = Vec::with_capacity(outer * (block_a + block_b));
        for o in 0..outer {
            out.extend_from_slice(&self.data[o * block_a..(o + 1) * block_a]);
            out.extend_from_slice(&other.data[o * block_b..(o + 1) * block_b]);
        }
        let graph = Self::result_graph(&[self, other])?;
        self.record(graph, Op::Concat { axis }, &[self, other], out_shape, Arc::new(out))
    }

    /// Index along the leading axis, dropping it from the shape.
    pub fn row(&self, index: usize) -> Result<Tensor> {
        if self.shape.is_empty() {
            return Err(TapeError::Shape("row() on rank-0 tensor".into()));
        }
        if index >= self.shape[0] {
            return Err(TapeError::Shape(format!(
                "row {index} out of range for shape {:?}",
                self.shape
            )));
        }
        let inner: usize = self.shape[1..].iter().product();
        let out = self.data[index * inner..(index + 1) * inner].to_vec();
        let graph = Self::result_graph(&[self])?;
        self.record(
            graph,
            Op::Row { index },
            &[self],
            self.shape[1..].to_vec(),
            Arc::new(out),
        )
    }

    /// Reinterpret the data with a new shape of identical element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(TapeError::Shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        let graph = Self::result_graph(&[self])?;
        self.record(
            graph,
            Op::Reshape,
            &[self],
            shape.to_vec(),
            Arc::clone(&self.data),
        )
    }

    /// 2-D cross-correlation of a `[C_in, H, W]` input with
    /// `[C_out, C_in, kh, kw]` kernels. Forward runs as patch extraction
    /// (im2col) followed by a matrix product; backward reuses the same
    /// decomposition.
    pub fn conv2d(&self, kernels: &Tensor, stride: usize) -> Result<Tensor> {
        let (c_in, h, w) = match self.shape[..] {
            [c, h, w] => (c, h, w),
            _ => {
                return Err(TapeError::Shape(format!(
                    "conv2d input must be [C,H,W], got {:?}",
                    self.shape
                )))
            }
        };
        let (c_out, kc, kh, kw) = match kernels.shape[..] {
            [o, c, a, b] => (o, c, a, b),
            _ => {
                return Err(TapeError::Shape(format!(
                    "conv2d kernels must be [C_out,C_in,kh,kw], got {:?}",
                    kernels.shape
                )))
            }
        };
        if kc != c_in || kh > h || kw > w || stride == 0 {
            return Err(TapeError::Shape(format!(
                "conv2d incompatible: input {:?}, kernels {:?}, stride {stride}",
                self.shape, kernels.shape
            )));
        }
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;
        let patches = im2col(&self.data, c_in, h, w, kh, kw, stride, oh, ow);
        let pdim = c_in * kh * kw;
        // out[co, r] = dot(kernels[co], patches[r])
        let mut out = vec![0.0; c_out * oh * ow];
        for co in 0..c_out {
            let krow = &kernels.data[co * pdim..(co + 1) * pdim];
            let orow = &mut out[co * oh * ow..(co + 1) * oh * ow];
            for (r, orow_r) in orow.iter_mut().enumerate() {
                let prow = &patches[r * pdim..(r + 1) * pdim];
                let mut acc = 0.0;
                for (x, y) in krow.iter().zip(prow.iter()) {
                    acc += x * y;
                }
                *orow_r = acc;
            }
        }
        let graph = Self::result_graph(&[self, kernels])?;
        self.record(
            graph,
            Op::Conv2d { stride },
            &[self, kernels],
            vec![c_out, oh, ow],
            Arc::new(out),
        )
    }

    /// Run reverse-mode accumulation from this scalar. Gradients for every
    /// differentiable leaf become available through [`Tensor::grad`];
    /// leaves not reachable from the loss get zero gradients.
    pub fn backward(&self) -> Result<()> {
        let (graph, loss_id) = match &self.node {
            Some(pair) => pair.clone(),
            None => {
                return Err(TapeError::Graph(
                    "backward() on a tensor with no recorded node".into(),
                ))
            }
        };
        if self.data.len() != 1 {
            return Err(TapeError::Graph(format!(
                "backward() requires a scalar, got shape {:?}",
                self.shape
            )));
        }
        let mut inner = graph.inner.borrow_mut();
        let n = inner.nodes.len();
        inner.grads = vec![None; n];
        inner.grads[loss_id] = Some(vec![1.0]);
        for id in (0..=loss_id).rev() {
            let grad = match inner.grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            backprop_node(&mut inner, id, &grad);
            inner.grads[id] = Some(grad);
        }
        // unreachable differentiable leaves get explicit zeros
        for id in 0..n {
            if inner.nodes[id].requires_grad
                && matches!(inner.nodes[id].op, Op::Leaf)
                && inner.grads[id].is_none()
            {
                inner.grads[id] = Some(vec![0.0; inner.nodes[id].data.len()]);
            }
        }
        Ok(())
    }

    /// Accumulated gradient from the most recent backward pass.
    pub fn grad(&self) -> Option<Vec<f64>> {
        let (graph, id) = self.node.as_ref()?;
        graph.inner.borrow().grads[*id].clone()
    }
}

fn is_suffix(shape: &[usize], out_shape: &[usize]) -> bool {
    shape.len() <= out_shape.len() && out_shape[out_shape.len() - shape.len()..] == *shape
}

/// `c = a · b` for row-major `a: m×k`, `b: k×n`.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    #[cfg(target_arch = "x86_64")]
    {
        if n >= 4 && std::arch::is_x86_feature_detected!("fma") {
            let mut c = vec![0.0; m * n];
            unsafe { simd::matmul_fma(a, b, &mut c, m, k, n) };
            return c;
        }
    }
    matmul_scalar(a, b, m, k, n)
}

fn matmul_scalar(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += aik * bv;
            }
        }
    }
    c
}

/// `y += a * x` elementwise.
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if x.len() >= 4 && std::arch::is_x86_feature_detected!("fma") {
            unsafe { simd::axpy_fma(a, x, y) };
            return;
        }
    }
    for (yv, &xv) in y.iter_mut().zip(x.iter()) {
        *yv += a * xv;
    }
}

/// Row-major transpose of an `rows×cols` matrix.
pub(crate) fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    // blocked to keep both access patterns cache-friendly on large operands
    const B: usize = 32;
    for i0 in (0..rows).step_by(B) {
        for j0 in (0..cols).step_by(B) {
            for i in i0..(i0 + B).min(rows) {
                for j in j0..(j0 + B).min(cols) {
                    t[j * rows + i] = a[i * cols + j];
                }
            }
        }
    }
    t
}

#[cfg(target_arch = "x86_64")]
mod simd {
    #[cfg(target_arch = "x86_64")]
    use std::arch::x86_64::*;

    /// `y += a * x` with 4-lane FMA.
    #[target_feature(enable = "avx2", enable = "fma")]
    pub(super) unsafe fn axpy_fma(a: f64, x: &[f64], y: &mut [f64]) {
        let n = x.len();
        let nr = n / 4 * 4;
        let av = _mm256_set1_pd(a);
        let xp = x.as_ptr();
        let yp = y.as_mut_ptr();
        let mut j = 0;
        while j < nr {
            let xv = _mm256_loadu_pd(xp.add(j));
            let yv = _mm256_loadu_pd(yp.add(j));
            _mm256_storeu_pd(yp.add(j), _mm256_fmadd_pd(av, xv, yv));
            j += 4;
        }
        for j in nr..n {
            *yp.add(j) += a * *xp.add(j);
        }
    }

    /// FMA microkernel: tiles of 2 rows x 16 columns of C, accumulators held
    /// in registers across the shared axis.
    #[target_feature(enable = "avx2", enable = "fma")]
    pub(super) unsafe fn matmul_fma(
        a: &[f64],
        b: &[f64],
        c: &mut [f64],
        m: usize,
        k: usize,
        n: usize,
    ) {
        let mr = m / 2 * 2;
        let ap = a.as_ptr();
        let bp = b.as_ptr();
        let cp = c.as_mut_ptr();
        for i in (0..mr).step_by(2) {
            let mut j = 0;
            while j + 16 <= n {
                let mut acc = [_mm256_setzero_pd(); 8];
                for kk in 0..k {
                    let a0 = _mm256_set1_pd(*ap.add(i * k + kk));
                    let a1 = _mm256_set1_pd(*ap.add((i + 1) * k + kk));
                    let brow = bp.add(kk * n + j);
                    let b0 = _mm256_loadu_pd(brow);
                    let b1 = _mm256_loadu_pd(brow.add(4));
                    let b2 = _mm256_loadu_pd(brow.add(8));
                    let b3 = _mm256_loadu_pd(brow.add(12));
                    acc[0] = _mm256_fmadd_pd(a0, b0, acc[0]);
                    acc[1] = _mm256_fmadd_pd(a0, b1, acc[1]);
                    acc[2] = _mm256_fmadd_pd(a0, b2, acc[2]);
                    acc[3] = _mm256_fmadd_pd(a0, b3, acc[3]);
                    acc[4] = _mm256_fmadd_pd(a1, b0, acc[4]);
                    acc[5] = _mm256_fmadd_pd(a1, b1, acc[5]);
                    acc[6] = _mm256_fmadd_pd(a1, b2, acc[6]);
                    acc[7] = _mm256_fmadd_pd(a1, b3, acc[7]);
                }
                for q in 0..4 {
                    _mm256_storeu_pd(cp.add(i * n + j + 4 * q), acc[q]);
                    _mm256_storeu_pd(cp.add((i + 1) * n + j + 4 * q), acc[4 + q]);
                }
                j += 16;
            }
            while j + 4 <= n {
                let mut acc0 = _mm256_setzero_pd();
                let mut acc1 = _mm256_setzero_pd();
                for kk in 0..k {
                    let b0 = _mm256_loadu_pd(bp.add(kk * n + j));
                    acc0 = _mm256_fmadd_pd(_mm256_set1_pd(*ap.add(i * k + kk)), b0, acc0);
                    acc1 = _mm256_fmadd_pd(_mm256_set1_pd(*ap.add((i + 1) * k + kk)), b0, acc1);
                }
                _mm256_storeu_pd(cp.add(i * n + j), acc0);
                _mm256_storeu_pd(cp.add((i + 1) * n + j), acc1);
                j += 4;
            }
            while j < n {
                let mut s0 = 0.0;
                let mut s1 = 0.0;
                for kk in 0..k {
                    let bv = *bp.add(kk * n + j);
                    s0 += *ap.add(i * k + kk) * bv;
                    s1 += *ap.add((i + 1) * k + kk) * bv;
                }
                *cp.add(i * n + j) = s0;
                *cp.add((i + 1) * n + j) = s1;
                j += 1;
            }
        }
        if m > mr {
            let i = mr;
            let mut j = 0;
            while j + 4 <= n {
                let mut acc = _mm256_setzero_pd();
                for kk in 0..k {
                    let b0 = _mm256_loadu_pd(bp.add(kk * n + j));
                    acc = _mm256_fmadd_pd(_mm256_set1_pd(*ap.add(i * k + kk)), b0, acc);
                }
                _mm256_storeu_pd(cp.add(i * n + j), acc);
                j += 4;
            }
            while j < n {
                let mut s = 0.0;
                for kk in 0..k {
                    s += *ap.add(i * k + kk) * *bp.add(kk * n + j);
                }
                *cp.add(i * n + j) = s;
                j += 1;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    data: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let pdim = c_in * kh * kw;
    let mut patches = vec![0.0; oh * ow * pdim];
    for oy in 0..oh {
        for ox in 0..ow {
            let r = oy * ow + ox;
            let dst = &mut patches[r * pdim..(r + 1) * pdim];
            let mut col = 0usize;
            for ci in 0..c_in {
                for ky in 0..kh {
                    let y = oy * stride + ky;
                    let src_base = ci * h * w + y * w + ox * stride;
                    dst[col..col + kw].copy_from_slice(&data[src_base..src_base + kw]);
                    col += kw;
                }
            }
        }
    }
    patches
}

fn backprop_node(inner: &mut GraphInner, id: usize, grad: &[f64]) {
    let (op, inputs) = {
        let node = &inner.nodes[id];
        (node.op.clone(), node.inputs.clone())
    };
    match op {
        Op::Leaf => {}
        Op::Unary(kind) => {
            let a = inputs[0];
            if !inner.nodes[a].requires_grad {
                return;
            }
            let x = Arc::clone(&inner.nodes[a].data);
            let y = Arc::clone(&inner.nodes[id].data);
            let mut gx = vec![0.0; x.len()];
            match kind {
                UnaryKind::Relu => {
                    for ((d, &g), &xv) in gx.iter_mut().zip(grad).zip(x.iter()) {
                        *d = if xv > 0.0 { g } else { 0.0 };
                    }
                }
                UnaryKind::LeakyRelu(slope) => {
                    for ((d, &g), &xv) in gx.iter_mut().zip(grad).zip(x.iter()) {
                        *d = if xv >= 0.0 { g } else { slope * g };
                    }
                }
                UnaryKind::Exp => {
                    for ((d, &g), &yv) in gx.iter_mut().zip(grad).zip(y.iter()) {
                        *d = g * yv;
                    }
                }
                UnaryKind::Log => {
                    for ((d, &g), &xv) in gx.iter_mut().zip(grad).zip(x.iter()) {
                        *d = g / xv;
                    }
                }
                UnaryKind::Neg => {
                    for (d, &g) in gx.iter_mut().zip(grad) {
                        *d = -g;
                    }
                }
                UnaryKind::Sqrt => {
                    for ((d, &g), &yv) in gx.iter_mut().zip(grad).zip(y.iter()) {
                        *d = 0.5 * g / yv;
                    }
                }
            }
            accumulate(inner, a, gx);
        }
        Op::Binary(kind) => {
            let (a, b) = (inputs[0], inputs[1]);
            let out_shape = inner.nodes[id].shape.clone();
            let xa = Arc::clone(&inner.nodes[a].data);
            let xb = Arc::clone(&inner.nodes[b].data);
            let sa = inner.nodes[a].shape.clone();
            let sb = inner.nodes[b].shape.clone();
            let needs_a = inner.nodes[a].requires_grad;
            let needs_b = inner.nodes[b].requires_grad;
            let same = sa == out_shape && sb == out_shape;
            if same || (sa == out_shape && is_suffix(&sb, &out_shape)) {
                // fast paths: equal shapes, or a bias-style cyclic operand b
                let nb = xb.len();
                if needs_a {
                    let mut ga = vec![0.0; grad.len()];
                    for (slot, (gv, &g)) in ga.iter_mut().zip(grad.iter()).enumerate() {
                        let ob = slot % nb;
                        *gv = match kind {
                            BinaryKind::Add | BinaryKind::Sub => g,
                            BinaryKind::Mul => g * xb[ob],
                            BinaryKind::Div => g / xb[ob],
                        };
                    }
                    accumulate(inner, a, ga);
                }
                if needs_b {
                    let mut gb = vec![0.0; nb];
                    for (slot, &g) in grad.iter().enumerate() {
                        let ob = slot % nb;
                        gb[ob] += match kind {
                            BinaryKind::Add => g,
                            BinaryKind::Sub => -g,
                            BinaryKind::Mul => g * xa[slot],
                            BinaryKind::Div => -g * xa[slot] / (xb[ob] * xb[ob]),
                        };
                    }
                    accumulate(inner, b, gb);
                }
            } else {
                let stra = broadcast_strides(&sa, &out_shape);
                let strb = broadcast_strides(&sb, &out_shape);
                let mut ga = vec![0.0; grad.len()];
                let mut gb = vec![0.0; grad.len()];
                let mut idx = vec![0usize; out_shape.len()];
                for (slot, &g) in grad.iter().enumerate() {
                    let mut oa = 0usize;
                    let mut ob = 0usize;
                    for (d, (&p, &q)) in idx.iter().zip(stra.iter().zip(strb.iter())) {
                        oa += d * p;
                        ob += d * q;
                    }
                    match kind {
                        BinaryKind::Add => {
                            ga[slot] = g;
                            gb[slot] = g;
                        }
                        BinaryKind::Sub => {
                            ga[slot] = g;
                            gb[slot] = -g;
                        }
                        BinaryKind::Mul => {
                            ga[slot] = g * xb[ob];
                            gb[slot] = g * xa[oa];
                        }
                        BinaryKind::Div => {
                            ga[slot] = g / xb[ob];
                            gb[slot] = -g * xa[oa] / (xb[ob] * xb[ob]);
                        }
                    }
                    for ax in (0..out_shape.len()).rev() {
                        idx[ax] += 1;
                        if idx[ax] < out_shape[ax] {
                            break;
                        }
                        idx[ax] = 0;
                    }
                }
                if needs_a {
                    accumulate(inner, a, reduce_broadcast_grad(&ga, &out_shape, &sa));
                }
                if needs_b {
                    accumulate(inner, b, reduce_broadcast_grad(&gb, &out_shape, &sb));
                }
            }
        }
        Op::Matmul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = (inner.nodes[a].shape[0], inner.nodes[a].shape[1]);
            let n = inner.nodes[b].shape[1];
            let xa = Arc::clone(&inner.nodes[a].data);
            let xb = Arc::clone(&inner.nodes[b].data);
            if inner.nodes[a].requires_grad {
                // grad_a = grad · bᵀ
                let bt = transpose_raw(&xb, k, n);
                let ga = matmul_raw(grad, &bt, m, n, k);
                accumulate(inner, a, ga);
            }
            if inner.nodes[b].requires_grad {
                // grad_b[kk,:] += a[i,kk] * grad[i,:], as outer products over i;
                // this keeps the k*n accumulator cache-resident when m is large
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &grad[i * n..(i + 1) * n];
                    let arow = &xa[i * k..(i + 1) * k];
                    for (kk, &av) in arow.iter().enumerate() {
                        if av != 0.0 {
                            axpy(av, grow, &mut gb[kk * n..(kk + 1) * n]);
                        }
                    }
                }
                accumulate(inner, b, gb);
            }
        }
        Op::Reduce { kind, axis, arg } => {
            let a = inputs[0];
            if !inner.nodes[a].requires_grad {
                return;
            }
            let in_shape = inner.nodes[a].shape.clone();
            let outer: usize = in_shape[..axis].iter().product();
            let len = in_shape[axis];
            let inner_ext: usize = in_shape[axis + 1..].iter().product();
            let mut gx = vec![0.0; inner.nodes[a].data.len()];
            match kind {
                ReduceKind::Sum | ReduceKind::Mean => {
                    let scale = if kind == ReduceKind::Mean {
                        1.0 / len as f64
                    } else {
                        1.0
                    };
                    for o in 0..outer {
                        let grow = &grad[o * inner_ext..(o + 1) * inner_ext];
                        for t in 0..len {
                            let base = o * len * inner_ext + t * inner_ext;
                            let dst = &mut gx[base..base + inner_ext];
                            for (d, &g) in dst.iter_mut().zip(grow) {
                                *d += g * scale;
                            }
                        }
                    }
                }
                ReduceKind::Max => {
                    let arg = arg.expect("max reduce saves arg indices");
                    for (slot, &src) in arg.iter().enumerate() {
                        gx[src] += grad[slot];
                    }
                }
            }
            accumulate(inner, a, gx);
        }
        Op::Concat { axis } => {
            let (a, b) = (inputs[0], inputs[1]);
            let sa = inner.nodes[a].shape.clone();
            let sb = inner.nodes[b].shape.clone();
            let outer: usize = sa[..axis].iter().product();
            let inner_ext: usize = sa[axis + 1..].iter().product();
            let block_a = sa[axis] * inner_ext;
            let block_b = sb[axis] * inner_ext;
            if inner.nodes[a].requires_grad {
                let mut ga = vec![0.0; inner.nodes[a].data.len()];
                for o in 0..outer {
                    let src = o * (block_a + block_b);
                    ga[o * block_a..(o + 1) * block_a]
                        .copy_from_slice(&grad[src..src + block_a]);
                }
                accumulate(inner, a, ga);
            }
            if inner.nodes[b].requires_grad {
                let mut gb = vec![0.0; inner.nodes[b].data.len()];
                for o in 0..outer {
                    let src = o * (block_a + block_b) + block_a;
                    gb[o * block_b..(o + 1) * block_b]
                        .copy_from_slice(&grad[src..src + block_b]);
                }
                accumulate(inner, b, gb);
            }
        }
        Op::Row { index } => {
            let a = inputs[0];
            if !inner.nodes[a].requires_grad {
                return;
            }
            let inner_ext: usize = inner.nodes[a].shape[1..].iter().product();
            let mut gx = vec![0.0; inner.nodes[a].data.len()];
            gx[index * inner_ext..(index + 1) * inner_ext].copy_from_slice(grad);
            accumulate(inner, a, gx);
        }
        Op::Reshape => {
            let a = inputs[0];
            if !inner.nodes[a].requires_grad {
                return;
            }
            accumulate(inner, a, grad.to_vec());
        }
        Op::Conv2d { stride } => {
            let (inp, ker) = (inputs[0], inputs[1]);
            let (c_in, h, w) = {
                let s = &inner.nodes[inp].shape;
                (s[0], s[1], s[2])
            };
            let (c_out, kh, kw) = {
                let s = &inner.nodes[ker].shape;
                (s[0], s[2], s[3])
            };
            let oh = (h - kh) / stride + 1;
            let ow = (w - kw) / stride + 1;
            let pdim = c_in * kh * kw;
            let xin = Arc::clone(&inner.nodes[inp].data);
            let xker = Arc::clone(&inner.nodes[ker].data);
            if inner.nodes[ker].requires_grad {
                // grad_K[co] = sum_r grad[co, r] * P[r]
                let patches = im2col(&xin, c_in, h, w, kh, kw, stride, oh, ow);
                let mut gk = vec![0.0; c_out * pdim];
                for co in 0..c_out {
                    let grow = &grad[co * oh * ow..(co + 1) * oh * ow];
                    let gkrow = &mut gk[co * pdim..(co + 1) * pdim];
                    for (r, &g) in grow.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        let prow = &patches[r * pdim..(r + 1) * pdim];
                        for (gkv, &pv) in gkrow.iter_mut().zip(prow.iter()) {
                            *gkv += g * pv;
                        }
                    }
                }
                accumulate(inner, ker, gk);
            }
            if inner.nodes[inp].requires_grad {
                // grad_P[r] = sum_co grad[co, r] * K[co], then scatter (col2im)
                let mut gx = vec![0.0; xin.len()];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let r = oy * ow + ox;
                        let mut gp = vec![0.0; pdim];
                        for co in 0..c_out {
                            let g = grad[co * oh * ow + r];
                            if g == 0.0 {
                                continue;
                            }
                            let krow = &xker[co * pdim..(co + 1) * pdim];
                            for (gpv, &kv) in gp.iter_mut().zip(krow.iter()) {
                                *gpv += g * kv;
                            }
                        }
                        let mut col = 0usize;
                        for ci in 0..c_in {
                            for ky in 0..kh {
                                let y = oy * stride + ky;
                                let base = ci * h * w + y * w + ox * stride;
                                for kx in 0..kw {
                                    gx[base + kx] += gp[col];
                                    col += 1;
                                }
                            }
                        }
                    }
                }
                accumulate(inner, inp, gx);
            }
        }
    }
}

fn accumulate(inner: &mut GraphInner, id: usize, contribution: Vec<f64>) {
    match &mut inner.grads[id] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution.iter()) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::constant(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn relu_definition() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(x.relu().unwrap().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn exp_identity() {
        let x = t(&[1], &[0.0]);
        assert_eq!(x.exp().unwrap().data(), &[1.0]);
    }

    #[test]
    fn leaky_relu_definition() {
        let x = t(&[1], &[-2.0]);
        assert_eq!(x.leaky_relu(0.1).unwrap().data(), &[-0.2]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let x = t(&[2], &[1.0, 0.0]);
        assert!(matches!(x.log(), Err(TapeError::Domain(_))));
    }

    #[test]
    fn add_vectors() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn mul_broadcasts_singleton() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[1], &[10.0]);
        assert_eq!(a.mul(&b).unwrap().data(), &[10.0, 20.0, 30.0, 40.0]);
    }

    #[test]
    fn div_by_zero_is_domain_error() {
        let a = t(&[1], &[1.0]);
        let b = t(&[1], &[0.0]);
        assert!(matches!(a.div(&b), Err(TapeError::Domain(_))));
    }

    #[test]
    fn broadcast_rejects_mismatch() {
        let a = t(&[3], &[1.0, 2.0, 3.0]);
        let b = t(&[2], &[1.0, 2.0]);
        assert!(matches!(a.add(&b), Err(TapeError::Shape(_))));
    }

    #[test]
    fn matmul_identity() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(eye.matmul(&m).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_row_by_column() {
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[2, 1], &[3.0, 4.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn max_reduce_with_arg() {
        let x = t(&[3], &[1.0, 5.0, 3.0]);
        let m = x.max_axis(0).unwrap();
        assert_eq!(m.item(), 5.0);
        assert_eq!(x.argmax_axis(0).unwrap(), vec![1]);
    }

    #[test]
    fn mean_reduce() {
        let x = t(&[2], &[2.0, 4.0]);
        assert_eq!(x.mean_axis(0).unwrap().item(), 3.0);
    }

    #[test]
    fn concat_vectors_and_shape() {
        let a = t(&[1], &[1.0]);
        let b = t(&[1], &[2.0]);
        assert_eq!(a.concat(&b, 0).unwrap().data(), &[1.0, 2.0]);
        let c = t(&[2, 3], &[1.0; 6]);
        let d = t(&[2, 3], &[2.0; 6]);
        assert_eq!(c.concat(&d, 1).unwrap().shape(), &[2, 6]);
    }

    #[test]
    fn conv2d_one_by_one_kernel_scales() {
        let img = t(&[1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let ker = t(&[1, 1, 1, 1], &[2.0]);
        let out = img.conv2d(&ker, 1).unwrap();
        assert_eq!(out.shape(), &[1, 3, 3]);
        assert_eq!(out.data(), &[2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.0, 18.0]);
    }

    #[test]
    fn conv2d_all_ones_sums() {
        let img = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let ker = t(&[1, 1, 2, 2], &[1.0; 4]);
        let out = img.conv2d(&ker, 1).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.item(), 10.0);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let g = Graph::new();
        let w = g.param(&[3], vec![5.0, -1.0, 2.0]).unwrap();
        let loss = w.sum_axis(0).unwrap();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square_sum() {
        let g = Graph::new();
        let w = g.param(&[2], vec![1.0, 2.0]).unwrap();
        let loss = w.mul(&w).unwrap().sum_axis(0).unwrap();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_requires_recorded_scalar() {
        let x = t(&[1], &[1.0]);
        assert!(matches!(x.backward(), Err(TapeError::Graph(_))));
        let g = Graph::new();
        let w = g.param(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(w.backward(), Err(TapeError::Graph(_))));
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let g = Graph::new();
        let w = g.param(&[2], vec![1.0, 2.0]).unwrap();
        let unused = g.param(&[3], vec![1.0, 1.0, 1.0]).unwrap();
        let loss = w.sum_axis(0).unwrap();
        loss.backward().unwrap();
        assert_eq!(unused.grad().unwrap(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_backward_splits_gradient() {
        let g = Graph::new();
        let a = g.param(&[2], vec![1.0, 2.0]).unwrap();
        let b = g.param(&[2], vec![3.0, 4.0]).unwrap();
        let joined = a.concat(&b, 0).unwrap();
        let weights = t(&[4], &[1.0, 2.0, 3.0, 4.0]);
        let loss = joined.mul(&weights).unwrap().sum_axis(0).unwrap();
        loss.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 2.0]);
        assert_eq!(b.grad().unwrap(), vec![3.0, 4.0]);
    }

    #[test]
    fn max_backward_routes_to_first_tie() {
        let g = Graph::new();
        let w = g.param(&[3], vec![2.0, 7.0, 7.0]).unwrap();
        let loss = w.max_axis(0).unwrap();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn mixing_graphs_is_an_error() {
        let g1 = Graph::new();
        let g2 = Graph::new();
        let a = g1.param(&[1], vec![1.0]).unwrap();
        let b = g2.param(&[1], vec![2.0]).unwrap();
        assert!(matches!(a.add(&b), Err(TapeError::Graph(_))));
    }

    #[test]
    fn node_ids_strictly_follow_inputs() {
        let g = Graph::new();
        let a = g.param(&[2], vec![1.0, 2.0]).unwrap();
        let b = a.exp().unwrap();
        let c = b.add(&a).unwrap();
        let ids = [a.node_id().unwrap(), b.node_id().unwrap(), c.node_id().unwrap()];
        assert!(ids[0] < ids[1] && ids[1] < ids[2]);
    }

    #[test]
    fn detached_ops_do_not_grow_graph() {
        let g = Graph::new();
        let _p = g.param(&[1], vec![1.0]).unwrap();
        let before = g.len();
        let a = t(&[2], &[1.0, 2.0]);
        let _ = a.exp().unwrap().sum_axis(0).unwrap();
        assert_eq!(g.len(), before);
    }

    #[test]
    fn reshape_roundtrip_passes_grad() {
        let g = Graph::new();
        let w = g.param(&[2, 3], vec![1.0; 6]).unwrap();
        let loss = w
            .reshape(&[6])
            .unwrap()
            .mul(&t(&[6], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]))
            .unwrap()
            .sum_axis(0)
            .unwrap();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn row_extracts_and_scatters() {
        let g = Graph::new();
        let w = g.param(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = w.row(1).unwrap();
        assert_eq!(r.data(), &[3.0, 4.0]);
        let loss = r.sum_axis(0).unwrap();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![0.0, 0.0, 1.0, 1.0]);
    }
}
