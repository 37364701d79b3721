//! Reverse-mode automatic differentiation on dense 64-bit float arrays.
//!
//! A [`Value`] is a node of an acyclic computation graph. Forward ops record
//! their operands so a single [`Value::backward`] pass can replay the graph
//! in reverse topological order and accumulate gradients into every trainable
//! ancestor. Graphs are rebuilt per step; parameters are long-lived leaves.

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::ops::Range;
use std::rc::Rc;

use ndarray::{ArrayD, Axis, IxDyn, Slice, Zip};
use thiserror::Error;

mod checkpoint;
mod params;
mod rmsprop;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION, OPT_PREFIX};
pub use params::ParameterSet;
pub use rmsprop::{global_grad_norm, RmsProp, RmsPropState};

/// Dense dynamic-rank array of f64, the only tensor type in the engine.
pub type Arr = ArrayD<f64>;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadRank {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this node; reset gradients first")]
    RepeatedBackward,
    #[error("index {index} out of bounds for axis of length {len} in {op}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("trainable parameter '{0}' has no gradient")]
    MissingGradient(String),
    #[error("duplicate parameter name '{0}'")]
    DuplicateParameter(String),
    #[error("parameter '{0}' not found")]
    UnknownParameter(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type AdResult<T> = Result<T, AdError>;

enum Op {
    Leaf,
    Add(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    /// 2-D matrix product.
    Matmul(Value, Value),
    /// Batched 3-D matrix product `[s,a,b] x [s,b,c] -> [s,a,c]`.
    Bmm(Value, Value),
    Relu(Value),
    Elu(Value),
    Sigmoid(Value),
    Tanh(Value),
    Exp(Value),
    Log(Value),
    Abs(Value),
    /// Softmax over the last axis.
    Softmax(Value),
    Scale(Value, f64),
    AddScalar(Value),
    Clamp(Value, f64, f64),
    Concat(Vec<Value>, usize),
    Slice(Value, usize, Range<usize>),
    Reshape(Value),
    SumAll(Value),
    MeanAll(Value),
    SumAxis(Value, usize),
    /// Per-row pick from the last axis of a 2-D array: `out[r,0] = x[r, idx[r]]`.
    GatherLast(Value, Vec<usize>),
    /// Row lookup into a 2-D table: `out[r,:] = table[idx[r],:]`.
    GatherRows(Value, Vec<usize>),
    /// Elementwise KL between diagonal Gaussians given as
    /// (mean, log-variance) operand pairs.
    KlDiag(Value, Value, Value, Value),
}

struct Node {
    data: Arr,
    grad: Option<Arr>,
    requires_grad: bool,
    op: Op,
}

/// Handle to a node of the computation graph. Cloning is cheap (shared node).
#[derive(Clone)]
pub struct Value(Rc<RefCell<Node>>);

impl Value {
    fn new(data: Arr, requires_grad: bool, op: Op) -> Self {
        Value(Rc::new(RefCell::new(Node {
            data,
            grad: None,
            requires_grad,
            op,
        })))
    }

    /// Leaf that participates in gradient computation.
    pub fn param(data: Arr) -> Self {
        Self::new(data, true, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(data: Arr) -> Self {
        Self::new(data, false, Op::Leaf)
    }

    pub fn scalar(x: f64) -> Self {
        Self::constant(ArrayD::from_elem(IxDyn(&[]), x))
    }

    /// Copy of this node's data as a new constant leaf, cutting the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.borrow().data.clone())
    }

    pub fn data(&self) -> Ref<'_, Arr> {
        Ref::map(self.0.borrow(), |n| &n.data)
    }

    pub fn data_clone(&self) -> Arr {
        self.0.borrow().data.clone()
    }

    /// Overwrite a leaf's data in place (optimizer updates, perturbations).
    pub fn set_data(&self, data: Arr) {
        self.0.borrow_mut().data = data;
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().data.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    /// Toggle gradient participation of a leaf (used to freeze target nets).
    pub fn set_requires_grad(&self, flag: bool) {
        self.0.borrow_mut().requires_grad = flag;
    }

    pub fn grad(&self) -> Option<Arr> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    /// Value of a scalar (single-element) node.
    pub fn item(&self) -> f64 {
        let n = self.0.borrow();
        debug_assert_eq!(n.data.len(), 1, "item() on non-scalar");
        *n.data.iter().next().expect("empty array")
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    // ---- elementwise binary ops (numpy-style broadcasting) ----

    pub fn add(&self, rhs: &Value) -> AdResult<Value> {
        broadcast_binary(self, rhs, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, rhs: &Value) -> AdResult<Value> {
        broadcast_binary(self, rhs, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, rhs: &Value) -> AdResult<Value> {
        broadcast_binary(self, rhs, "mul", |a, b| a * b, Op::Mul)
    }

    // ---- elementwise unary ops ----

    pub fn relu(&self) -> Value {
        let data = self.0.borrow().data.mapv(|x| x.max(0.0));
        Value::new(data, self.requires_grad(), Op::Relu(self.clone()))
    }

    pub fn elu(&self) -> Value {
        let data = self.0.borrow().data.mapv(elu);
        Value::new(data, self.requires_grad(), Op::Elu(self.clone()))
    }

    pub fn sigmoid(&self) -> Value {
        let data = self.0.borrow().data.mapv(sigmoid);
        Value::new(data, self.requires_grad(), Op::Sigmoid(self.clone()))
    }

    pub fn tanh(&self) -> Value {
        let data = self.0.borrow().data.mapv(f64::tanh);
        Value::new(data, self.requires_grad(), Op::Tanh(self.clone()))
    }

    pub fn exp(&self) -> Value {
        let data = self.0.borrow().data.mapv(f64::exp);
        Value::new(data, self.requires_grad(), Op::Exp(self.clone()))
    }

    pub fn log(&self) -> Value {
        let data = self.0.borrow().data.mapv(f64::ln);
        Value::new(data, self.requires_grad(), Op::Log(self.clone()))
    }

    pub fn abs(&self) -> Value {
        let data = self.0.borrow().data.mapv(f64::abs);
        Value::new(data, self.requires_grad(), Op::Abs(self.clone()))
    }

    pub fn scale(&self, c: f64) -> Value {
        let data = self.0.borrow().data.mapv(|x| x * c);
        Value::new(data, self.requires_grad(), Op::Scale(self.clone(), c))
    }

    pub fn add_scalar(&self, c: f64) -> Value {
        let data = self.0.borrow().data.mapv(|x| x + c);
        Value::new(data, self.requires_grad(), Op::AddScalar(self.clone()))
    }

    pub fn neg(&self) -> Value {
        self.scale(-1.0)
    }

    pub fn square(&self) -> AdResult<Value> {
        self.mul(self)
    }

    /// Clamp to `[lo, hi]`; gradient passes through where the input is inside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Value {
        let data = self.0.borrow().data.mapv(|x| x.clamp(lo, hi));
        Value::new(data, self.requires_grad(), Op::Clamp(self.clone(), lo, hi))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Value {
        let data = softmax_last_data(&self.0.borrow().data);
        Value::new(data, self.requires_grad(), Op::Softmax(self.clone()))
    }

    // ---- linear algebra ----

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, rhs: &Value) -> AdResult<Value> {
        let (a, b) = (self.0.borrow(), rhs.0.borrow());
        let (sa, sb) = (a.data.shape(), b.data.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let out = mat2(&a.data).dot(&mat2(&b.data)).into_dyn();
        let rg = a.requires_grad || b.requires_grad;
        drop(a);
        drop(b);
        Ok(Value::new(out, rg, Op::Matmul(self.clone(), rhs.clone())))
    }

    /// Batched matrix product `[s,a,b] x [s,b,c] -> [s,a,c]`.
    pub fn bmm(&self, rhs: &Value) -> AdResult<Value> {
        let (a, b) = (self.0.borrow(), rhs.0.borrow());
        let (sa, sb) = (a.data.shape(), b.data.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(AdError::ShapeMismatch {
                op: "bmm",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let out = bmm_kernel(&a.data, &b.data, false, false);
        let rg = a.requires_grad || b.requires_grad;
        drop(a);
        drop(b);
        Ok(Value::new(out, rg, Op::Bmm(self.clone(), rhs.clone())))
    }

    // ---- structure ----

    /// Concatenate along `axis`.
    pub fn concat(parts: &[Value], axis: usize) -> AdResult<Value> {
        if parts.is_empty() {
            return Err(AdError::BadRank {
                op: "concat",
                expected: "at least one operand",
                got: vec![],
            });
        }
        let datas: Vec<Arr> = parts.iter().map(|p| p.data_clone()).collect();
        let views: Vec<_> = datas.iter().map(|d| d.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).map_err(|_| AdError::ShapeMismatch {
            op: "concat",
            lhs: datas[0].shape().to_vec(),
            rhs: datas.last().map(|d| d.shape().to_vec()).unwrap_or_default(),
        })?;
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(Value::new(out, rg, Op::Concat(parts.to_vec(), axis)))
    }

    /// Contiguous sub-range along `axis`.
    pub fn slice_axis(&self, axis: usize, range: Range<usize>) -> AdResult<Value> {
        let n = self.0.borrow();
        let shape = n.data.shape().to_vec();
        if axis >= shape.len() || range.end > shape[axis] || range.start > range.end {
            return Err(AdError::IndexOutOfBounds {
                op: "slice_axis",
                index: range.end,
                len: *shape.get(axis).unwrap_or(&0),
            });
        }
        let out = n
            .data
            .slice_axis(Axis(axis), Slice::from(range.clone()))
            .to_owned();
        let rg = n.requires_grad;
        drop(n);
        Ok(Value::new(out, rg, Op::Slice(self.clone(), axis, range)))
    }

    /// Reshape to `shape` (row-major order); element count must match.
    pub fn reshape(&self, shape: &[usize]) -> AdResult<Value> {
        let n = self.0.borrow();
        if n.data.len() != shape.iter().product::<usize>() {
            return Err(AdError::ShapeMismatch {
                op: "reshape",
                lhs: n.data.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = n
            .data
            .to_shape(IxDyn(shape))
            .expect("element count checked")
            .into_owned();
        let rg = n.requires_grad;
        drop(n);
        Ok(Value::new(out, rg, Op::Reshape(self.clone())))
    }

    /// Sum of all elements, accumulated in row-major order.
    pub fn sum_all(&self) -> Value {
        let s = sequential_sum(&self.0.borrow().data);
        Value::new(
            ArrayD::from_elem(IxDyn(&[]), s),
            self.requires_grad(),
            Op::SumAll(self.clone()),
        )
    }

    /// Mean of all elements (row-major accumulation).
    pub fn mean_all(&self) -> Value {
        let n = self.0.borrow();
        let m = sequential_sum(&n.data) / n.data.len() as f64;
        let rg = n.requires_grad;
        drop(n);
        Value::new(
            ArrayD::from_elem(IxDyn(&[]), m),
            rg,
            Op::MeanAll(self.clone()),
        )
    }

    /// Sum over one axis (axis removed from the shape), accumulating in
    /// axis order.
    pub fn sum_axis(&self, axis: usize) -> AdResult<Value> {
        let n = self.0.borrow();
        if axis >= n.data.ndim() {
            return Err(AdError::IndexOutOfBounds {
                op: "sum_axis",
                index: axis,
                len: n.data.ndim(),
            });
        }
        let mut shape = n.data.shape().to_vec();
        shape.remove(axis);
        let mut out = ArrayD::zeros(IxDyn(&shape));
        for lane in n.data.axis_iter(Axis(axis)) {
            out += &lane;
        }
        let rg = n.requires_grad;
        drop(n);
        Ok(Value::new(out, rg, Op::SumAxis(self.clone(), axis)))
    }

    /// Per-row pick from a 2-D array: `out[r,0] = x[r, idx[r]]`.
    pub fn gather_last(&self, idx: &[usize]) -> AdResult<Value> {
        let n = self.0.borrow();
        let shape = n.data.shape();
        if shape.len() != 2 || shape[0] != idx.len() {
            return Err(AdError::BadRank {
                op: "gather_last",
                expected: "2-D input with one index per row",
                got: shape.to_vec(),
            });
        }
        let cols = shape[1];
        let mut out = ArrayD::zeros(IxDyn(&[idx.len(), 1]));
        for (r, &i) in idx.iter().enumerate() {
            if i >= cols {
                return Err(AdError::IndexOutOfBounds {
                    op: "gather_last",
                    index: i,
                    len: cols,
                });
            }
            out[[r, 0]] = n.data[[r, i]];
        }
        let rg = n.requires_grad;
        drop(n);
        Ok(Value::new(
            out,
            rg,
            Op::GatherLast(self.clone(), idx.to_vec()),
        ))
    }

    /// Row lookup into a 2-D table (embedding): `out[r,:] = table[idx[r],:]`.
    pub fn gather_rows(&self, idx: &[usize]) -> AdResult<Value> {
        let n = self.0.borrow();
        let shape = n.data.shape();
        if shape.len() != 2 {
            return Err(AdError::BadRank {
                op: "gather_rows",
                expected: "2-D table",
                got: shape.to_vec(),
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let mut out = ArrayD::zeros(IxDyn(&[idx.len(), cols]));
        for (r, &i) in idx.iter().enumerate() {
            if i >= rows {
                return Err(AdError::IndexOutOfBounds {
                    op: "gather_rows",
                    index: i,
                    len: rows,
                });
            }
            out.index_axis_mut(Axis(0), r)
                .assign(&n.data.index_axis(Axis(0), i));
        }
        let rg = n.requires_grad;
        drop(n);
        Ok(Value::new(
            out,
            rg,
            Op::GatherRows(self.clone(), idx.to_vec()),
        ))
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss: fills `grad` on every ancestor with
    /// `requires_grad`, each node visited exactly once.
    pub fn backward(&self) -> AdResult<()> {
        {
            let n = self.0.borrow();
            if n.data.len() != 1 {
                return Err(AdError::NonScalarLoss(n.data.shape().to_vec()));
            }
            if n.grad.is_some() {
                return Err(AdError::RepeatedBackward);
            }
            if !n.requires_grad {
                return Ok(()); // nothing trainable below
            }
        }
        let order = topo_order(self);
        {
            let mut n = self.0.borrow_mut();
            let shape = n.data.raw_dim();
            n.grad = Some(ArrayD::from_elem(shape, 1.0));
        }
        let root_key = self.key();
        for v in order.iter().rev() {
            // leaf gradients persist for the optimizer and the root's for
            // repeated-backward detection; interior gradients are consumed
            // as the pass walks down
            let grad = {
                let mut n = v.0.borrow_mut();
                if matches!(n.op, Op::Leaf) {
                    continue;
                }
                if v.key() == root_key {
                    match &n.grad {
                        Some(g) => g.clone(),
                        None => continue,
                    }
                } else {
                    match n.grad.take() {
                        Some(g) => g,
                        None => continue,
                    }
                }
            };
            backprop_node(v, grad);
        }
        Ok(())
    }
}

/// Post-order DFS over grad-requiring ancestors; result is topologically
/// sorted (parents before children).
fn topo_order(root: &Value) -> Vec<Value> {
    let mut order = Vec::new();
    let mut seen: HashSet<usize> = HashSet::new();
    // (node, children_pushed)
    let mut stack: Vec<(Value, bool)> = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !seen.insert(v.key()) {
            continue;
        }
        stack.push((v.clone(), true));
        let n = v.0.borrow();
        let mut push = |p: &Value| {
            if p.requires_grad() && !seen.contains(&p.key()) {
                stack.push((p.clone(), false));
            }
        };
        match &n.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) | Op::Bmm(a, b) => {
                push(a);
                push(b);
            }
            Op::Relu(a)
            | Op::Elu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Abs(a)
            | Op::Softmax(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Clamp(a, _, _)
            | Op::Slice(a, _, _)
            | Op::Reshape(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::SumAxis(a, _)
            | Op::GatherLast(a, _)
            | Op::GatherRows(a, _) => push(a),
            Op::Concat(parts, _) => {
                for p in parts {
                    push(p);
                }
            }
            Op::KlDiag(m1, l1, m2, l2) => {
                push(m1);
                push(l1);
                push(m2);
                push(l2);
            }
        }
    }
    order
}

fn accumulate(target: &Value, grad: Arr) {
    if !target.requires_grad() {
        return;
    }
    let mut n = target.0.borrow_mut();
    match &mut n.grad {
        Some(g) => *g += &grad,
        None => {
            // keep stored gradients in row-major layout (transposed matmul
            // backward outputs can arrive column-major)
            let grad = if grad.is_standard_layout() {
                grad
            } else {
                grad.as_standard_layout().into_owned()
            };
            n.grad = Some(grad);
        }
    }
}

fn backprop_node(v: &Value, grad: Arr) {
    let n = v.0.borrow();
    match &n.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            let gb = reduce_to_shape(&grad, &b.shape());
            let ga_shape = a.shape();
            let (a, b) = (a.clone(), b.clone());
            drop(n);
            if grad.shape() == ga_shape.as_slice() {
                accumulate(&a, grad);
            } else {
                accumulate(&a, reduce_to_shape(&grad, &ga_shape));
            }
            accumulate(&b, gb);
        }
        Op::Sub(a, b) => {
            let gb = reduce_to_shape(&grad.mapv(|x| -x), &b.shape());
            let ga_shape = a.shape();
            let (a, b) = (a.clone(), b.clone());
            drop(n);
            if grad.shape() == ga_shape.as_slice() {
                accumulate(&a, grad);
            } else {
                accumulate(&a, reduce_to_shape(&grad, &ga_shape));
            }
            accumulate(&b, gb);
        }
        Op::Mul(a, b) => {
            let out_shape = n.data.shape().to_vec();
            let (ga, gb) = {
                let an = a.0.borrow();
                let bn = b.0.borrow();
                let ab = an.data.broadcast(IxDyn(&out_shape)).expect("fwd broadcast");
                let bb = bn.data.broadcast(IxDyn(&out_shape)).expect("fwd broadcast");
                (
                    reduce_to_shape(&(&grad * &bb), an.data.shape()),
                    reduce_to_shape(&(&grad * &ab), bn.data.shape()),
                )
            };
            let (a, b) = (a.clone(), b.clone());
            drop(n);
            accumulate(&a, ga);
            accumulate(&b, gb);
        }
        Op::Matmul(a, b) => {
            let g2 = mat2(&grad);
            let (ga, gb) = {
                let an = a.0.borrow();
                let bn = b.0.borrow();
                (
                    g2.dot(&mat2(&bn.data).t()).into_dyn(),
                    mat2(&an.data).t().dot(&g2).into_dyn(),
                )
            };
            let (a, b) = (a.clone(), b.clone());
            drop(n);
            accumulate(&a, ga);
            accumulate(&b, gb);
        }
        Op::Bmm(a, b) => {
            let (ga, gb) = {
                let an = a.0.borrow();
                let bn = b.0.borrow();
                let ga = bmm_kernel(&grad, &bn.data, false, true);
                let gb = bmm_kernel(&an.data, &grad, true, false);
                (ga, gb)
            };
            let (a, b) = (a.clone(), b.clone());
            drop(n);
            accumulate(&a, ga);
            accumulate(&b, gb);
        }
        Op::Relu(a) => {
            let mut g = grad;
            Zip::from(&mut g)
                .and(&a.0.borrow().data)
                .for_each(|g, &x| {
                    if x <= 0.0 {
                        *g = 0.0;
                    }
                });
            let a = a.clone();
            drop(n);
            accumulate(&a, g);
        }
        Op::Elu(a) => {
            let mut g = grad;
            Zip::from(&mut g)
                .and(&a.0.borrow().data)
                .for_each(|g, &x| {
                    if x <= 0.0 {
                        *g *= x.exp();
                    }
                });
            let a = a.clone();
            drop(n);
            accumulate(&a, g);
        }
        Op::Sigmoid(a) => {
            let mut g = grad;
            Zip::from(&mut g)
                .and(&n.data)
                .for_each(|g, &y| *g *= y * (1.0 - y));
            let a = a.clone();
            drop(n);
            accumulate(&a, g);
        }
        Op::Tanh(a) => {
            let mut g = grad;
            Zip::from(&mut g)
                .and(&n.data)
                .for_each(|g, &y| *g *= 1.0 - y * y);
            let a = a.clone();
            drop(n);
            accumulate(&a, g);
        }
        Op::Exp(a) => {
            let mut g = grad;
            Zip::from(&mut g).and(&n.data).for_each(|g, &y| *g *= y);
            let a = a.clone();
            drop(n);
            accumulate(&a, g);
        }
        Op::Log(a) => {
            let mut g = grad;
            Zip::from(&mut g)
                .and(&a.0.borrow().data)
                .for_each(|g, &x| *g /= x);
            let a = a.clone();
            drop(n);
            accumulate(&a, g);
        }
        Op::Abs(a) => {
            let mut g = grad;
            Zip::from(&mut g)
                .and(&a.0.borrow().data)
                .for_each(|g, &x| *g *= x.signum());
            let a = a.clone();
            drop(n);
            accumulate(&a, g);
        }
        Op::Softmax(a) => {
            // dx_i = y_i * (g_i - sum_j g_j y_j) along the last axis
            let y = &n.data;
            let gy = &grad * y;
            let last = y.ndim() - 1;
            let dots = gy.sum_axis(Axis(last)).insert_axis(Axis(last));
            let g = &gy - &(y * &dots);
            let a = a.clone();
            drop(n);
            accumulate(&a, g);
        }
        Op::Scale(a, c) => {
            let c = *c;
            let mut g = grad;
            g.mapv_inplace(|x| x * c);
            let a = a.clone();
            drop(n);
            accumulate(&a, g);
        }
        Op::AddScalar(a) => {
            let a = a.clone();
            drop(n);
            accumulate(&a, grad);
        }
        Op::Clamp(a, lo, hi) => {
            let (lo, hi) = (*lo, *hi);
            let mut g = grad;
            Zip::from(&mut g)
                .and(&a.0.borrow().data)
                .for_each(|g, &x| {
                    if x < lo || x > hi {
                        *g = 0.0;
                    }
                });
            let a = a.clone();
            drop(n);
            accumulate(&a, g);
        }
        Op::Concat(parts, axis) => {
            let axis = *axis;
            let mut offset = 0;
            let grads: Vec<(Value, Arr)> = parts
                .iter()
                .map(|p| {
                    let w = p.shape()[axis];
                    let g = grad
                        .slice_axis(Axis(axis), Slice::from(offset..offset + w))
                        .to_owned();
                    offset += w;
                    (p.clone(), g)
                })
                .collect();
            drop(n);
            for (p, g) in grads {
                accumulate(&p, g);
            }
        }
        Op::Slice(a, axis, range) => {
            // accumulate straight into the parent's gradient region
            let axis = *axis;
            let range = range.clone();
            let a = a.clone();
            drop(n);
            {
                let mut an = a.0.borrow_mut();
                if an.grad.is_none() {
                    let shape = an.data.raw_dim();
                    an.grad = Some(ArrayD::zeros(shape));
                }
                let g = an.grad.as_mut().expect("just set");
                let mut region = g.slice_axis_mut(Axis(axis), Slice::from(range));
                region += &grad;
            }
        }
        Op::Reshape(a) => {
            let shape = a.shape();
            let a = a.clone();
            drop(n);
            let g = if grad.is_standard_layout() {
                grad.into_shape_with_order(IxDyn(&shape))
                    .expect("same element count")
            } else {
                grad.to_shape(IxDyn(&shape))
                    .expect("same element count")
                    .into_owned()
            };
            accumulate(&a, g);
        }
        Op::SumAll(a) => {
            let g0 = *grad.iter().next().expect("scalar grad");
            let g = ArrayD::from_elem(IxDyn(&a.shape()), g0);
            let a = a.clone();
            drop(n);
            accumulate(&a, g);
        }
        Op::MeanAll(a) => {
            let count = a.numel() as f64;
            let g0 = *grad.iter().next().expect("scalar grad");
            let g = ArrayD::from_elem(IxDyn(&a.shape()), g0 / count);
            let a = a.clone();
            drop(n);
            accumulate(&a, g);
        }
        Op::SumAxis(a, axis) => {
            let expanded = grad.insert_axis(Axis(*axis));
            let g = expanded
                .broadcast(IxDyn(&a.shape()))
                .expect("sum_axis backward broadcast")
                .to_owned();
            let a = a.clone();
            drop(n);
            accumulate(&a, g);
        }
        Op::GatherLast(a, idx) => {
            let mut g = ArrayD::zeros(IxDyn(&a.shape()));
            for (r, &i) in idx.iter().enumerate() {
                g[[r, i]] += grad[[r, 0]];
            }
            let a = a.clone();
            drop(n);
            accumulate(&a, g);
        }
        Op::GatherRows(a, idx) => {
            let mut g = ArrayD::zeros(IxDyn(&a.shape()));
            for (r, &i) in idx.iter().enumerate() {
                let src = grad.index_axis(Axis(0), r);
                let mut dst = g.index_axis_mut(Axis(0), i);
                dst += &src;
            }
            let a = a.clone();
            drop(n);
            accumulate(&a, g);
        }
        Op::KlDiag(m1, l1, m2, l2) => {
            let dim = grad.raw_dim();
            let need = [
                m1.requires_grad(),
                l1.requires_grad(),
                m2.requires_grad(),
                l2.requires_grad(),
            ];
            let mut gm1 = if need[0] { Some(ArrayD::zeros(dim.clone())) } else { None };
            let mut gl1 = if need[1] { Some(ArrayD::zeros(dim.clone())) } else { None };
            let mut gm2 = if need[2] { Some(ArrayD::zeros(dim.clone())) } else { None };
            let mut gl2 = if need[3] { Some(ArrayD::zeros(dim)) } else { None };
            {
                let m1n = m1.0.borrow();
                let l1n = l1.0.borrow();
                let m2n = m2.0.borrow();
                let l2n = l2.0.borrow();
                let gs = grad.as_slice().expect("standard layout grad");
                let a = m1n.data.as_slice().expect("standard layout");
                let la = l1n.data.as_slice().expect("standard layout");
                let b = m2n.data.as_slice().expect("standard layout");
                let lb = l2n.data.as_slice().expect("standard layout");
                let sm1 = gm1.as_mut().map(|v| v.as_slice_mut().expect("fresh"));
                let sl1 = gl1.as_mut().map(|v| v.as_slice_mut().expect("fresh"));
                let sm2 = gm2.as_mut().map(|v| v.as_slice_mut().expect("fresh"));
                let sl2 = gl2.as_mut().map(|v| v.as_slice_mut().expect("fresh"));
                let (mut sm1, mut sl1, mut sm2, mut sl2) = (sm1, sl1, sm2, sl2);
                for i in 0..gs.len() {
                    let g = gs[i];
                    let e_ratio = (la[i] - lb[i]).exp();
                    let e_prec = (-lb[i]).exp();
                    let d = a[i] - b[i];
                    if let Some(s) = sm1.as_mut() {
                        s[i] = g * d * e_prec;
                    }
                    if let Some(s) = sl1.as_mut() {
                        s[i] = g * 0.5 * (e_ratio - 1.0);
                    }
                    if let Some(s) = sm2.as_mut() {
                        s[i] = -g * d * e_prec;
                    }
                    if let Some(s) = sl2.as_mut() {
                        s[i] = g * 0.5 * (1.0 - e_ratio - d * d * e_prec);
                    }
                }
            }
            let (m1, l1, m2, l2) = (m1.clone(), l1.clone(), m2.clone(), l2.clone());
            drop(n);
            if let Some(g) = gm1 {
                accumulate(&m1, g);
            }
            if let Some(g) = gl1 {
                accumulate(&l1, g);
            }
            if let Some(g) = gm2 {
                accumulate(&m2, g);
            }
            if let Some(g) = gl2 {
                accumulate(&l2, g);
            }
        }
    }
}

/// Batched matrix product with optional operand transposition. Small inner
/// shapes use direct loops; larger ones go through the gemm path.
fn bmm_kernel(a: &Arr, b: &Arr, ta: bool, tb: bool) -> Arr {
    let s = a.shape()[0];
    let (am, ak) = (a.shape()[1], a.shape()[2]);
    let (bk, bn) = (b.shape()[1], b.shape()[2]);
    let (m, k) = if ta { (ak, am) } else { (am, ak) };
    let (kb, n) = if tb { (bn, bk) } else { (bk, bn) };
    debug_assert_eq!(k, kb);
    let mut out = ArrayD::zeros(IxDyn(&[s, m, n]));
    if m.min(n).min(k) <= 16 {
        if let (Some(sa), Some(sb), Some(so)) = (a.as_slice(), b.as_slice(), out.as_slice_mut()) {
            for i in 0..s {
                let ab = &sa[i * am * ak..(i + 1) * am * ak];
                let bb = &sb[i * bk * bn..(i + 1) * bk * bn];
                let ob = &mut so[i * m * n..(i + 1) * m * n];
                for r in 0..m {
                    for c in 0..n {
                        let mut acc = 0.0;
                        for x in 0..k {
                            let av = if ta { ab[x * ak + r] } else { ab[r * ak + x] };
                            let bv = if tb { bb[c * bn + x] } else { bb[x * bn + c] };
                            acc += av * bv;
                        }
                        ob[r * n + c] = acc;
                    }
                }
            }
            return out;
        }
    }
    for i in 0..s {
        let ai = mat2v(a.index_axis(Axis(0), i));
        let bi = mat2v(b.index_axis(Axis(0), i));
        let prod = match (ta, tb) {
            (false, false) => ai.dot(&bi),
            (true, false) => ai.t().dot(&bi),
            (false, true) => ai.dot(&bi.t()),
            (true, true) => ai.t().dot(&bi.t()),
        };
        out.index_axis_mut(Axis(0), i).assign(&prod);
    }
    out
}

/// Elementwise KL contributions between diagonal Gaussians:
/// `0.5 * (lv2 - lv1 + exp(lv1 - lv2) + (mu1 - mu2)^2 exp(-lv2) - 1)`.
/// One fused node: cheaper than the equivalent op chain on large arrays.
pub fn kl_diag_elements(mu1: &Value, lv1: &Value, mu2: &Value, lv2: &Value) -> AdResult<Value> {
    let (m1, l1, m2, l2) = (mu1.0.borrow(), lv1.0.borrow(), mu2.0.borrow(), lv2.0.borrow());
    let shape = m1.data.shape();
    for (other, name) in [(&l1, "log_var1"), (&m2, "mu2"), (&l2, "log_var2")] {
        if other.data.shape() != shape {
            return Err(AdError::ShapeMismatch {
                op: "kl_diag",
                lhs: shape.to_vec(),
                rhs: { let _ = name; other.data.shape().to_vec() },
            });
        }
    }
    let mut out = ArrayD::zeros(m1.data.raw_dim());
    Zip::from(&mut out)
        .and(&m1.data)
        .and(&l1.data)
        .and(&m2.data)
        .and(&l2.data)
        .for_each(|o, &a, &la, &b, &lb| {
            let d = a - b;
            *o = 0.5 * (lb - la + (la - lb).exp() + d * d * (-lb).exp() - 1.0);
        });
    let rg = m1.requires_grad || l1.requires_grad || m2.requires_grad || l2.requires_grad;
    drop(m1);
    drop(l1);
    drop(m2);
    drop(l2);
    Ok(Value::new(
        out,
        rg,
        Op::KlDiag(mu1.clone(), lv1.clone(), mu2.clone(), lv2.clone()),
    ))
}

/// Plain sequential row-major sum (deterministic accumulation order).
fn sequential_sum(a: &Arr) -> f64 {
    if let Some(s) = a.as_slice() {
        let mut acc = 0.0;
        for &x in s {
            acc += x;
        }
        acc
    } else {
        let mut acc = 0.0;
        for &x in a.iter() {
            acc += x;
        }
        acc
    }
}

// ---- helpers ----

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

fn softmax_last_data(x: &Arr) -> Arr {
    let last = x.ndim() - 1;
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s: f64 = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    debug_assert_eq!(last, x.ndim() - 1);
    out
}

fn mat2(a: &Arr) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality().expect("2-D array")
}

fn mat2v(a: ndarray::ArrayViewD<'_, f64>) -> ndarray::ArrayView2<'_, f64> {
    a.into_dimensionality().expect("2-D view")
}

/// Numpy-style broadcast shape of two operands, or a shape error.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> AdResult<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() {
            1
        } else {
            a[i - (rank - a.len())]
        };
        let db = if i < rank - b.len() {
            1
        } else {
            b[i - (rank - b.len())]
        };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(AdError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

fn broadcast_binary(
    lhs: &Value,
    rhs: &Value,
    name: &'static str,
    f: fn(f64, f64) -> f64,
    op: fn(Value, Value) -> Op,
) -> AdResult<Value> {
    let (a, b) = (lhs.0.borrow(), rhs.0.borrow());
    let shape = broadcast_shape(name, a.data.shape(), b.data.shape())?;
    let av = a.data.broadcast(IxDyn(&shape)).ok_or(AdError::ShapeMismatch {
        op: name,
        lhs: a.data.shape().to_vec(),
        rhs: shape.clone(),
    })?;
    let bv = b.data.broadcast(IxDyn(&shape)).ok_or(AdError::ShapeMismatch {
        op: name,
        lhs: b.data.shape().to_vec(),
        rhs: shape.clone(),
    })?;
    let out = Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y));
    let rg = a.requires_grad || b.requires_grad;
    drop(a);
    drop(b);
    Ok(Value::new(out, rg, op(lhs.clone(), rhs.clone())))
}

/// Sum `grad` down to `shape` (inverse of broadcasting).
fn reduce_to_shape(grad: &Arr, shape: &[usize]) -> Arr {
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (i, (&gd, &sd)) in g.shape().to_vec().iter().zip(shape.iter()).enumerate() {
        if sd == 1 && gd != 1 {
            g = g.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    g
}
