//! Dense tensors with a reverse-mode tape.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! the tape as leaves, intermediate results are nodes that remember their
//! parents, and [`Tape::backward`] walks the nodes in reverse insertion order
//! (which is a topological order) to produce gradients. Tapes are meant to
//! be thrown away after one backward pass.

mod adam;
mod gradcheck;
mod ops;

use std::cell::{Ref, RefCell};
use std::fmt;

use crate::error::{Error, Result};

pub use adam::{AdamConfig, AdamSlot, AdamState};
pub use gradcheck::{finite_diff_check, GradCheckReport, Worst};

/// Scalar width used for values produced on a tape.
///
/// Storage is always `f64`; in `Standard` mode every value and gradient is
/// rounded to the nearest `f32` after each operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    Standard,
    Wide,
}

impl Precision {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::Standard => v as f32 as f64,
            Precision::Wide => v,
        }
    }

    pub fn round_all(self, data: &mut [f64]) {
        if self == Precision::Standard {
            for v in data {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::Standard => "standard",
            Precision::Wide => "wide",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "standard" | "f32" => Some(Precision::Standard),
            "wide" | "f64" => Some(Precision::Wide),
            _ => None,
        }
    }
}

/// Deliberate backward-rule corruption, used to prove the gradient checks
/// can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Negates the gradient matmul sends to its left operand.
    FlipMatmulGrad,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TapeOptions {
    pub precision: Precision,
    pub fault: Option<Fault>,
}

impl TapeOptions {
    pub fn wide() -> Self {
        TapeOptions {
            precision: Precision::Wide,
            fault: None,
        }
    }
}

/// Row-major dense array of reals.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.shape);
        if self.data.len() <= 16 {
            s.field("data", &self.data);
        }
        s.field("requires_grad", &self.requires_grad).finish()
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, yes: bool) -> Self {
        self.requires_grad = yes;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    fn value_only(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }
}

/// Backward rule for operations defined outside this module.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Returns one gradient buffer per input, in input order.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Vec<f64>>;
}

pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    BroadcastTo(usize),
    MatMul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Softmax(usize, usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Relu(usize),
    Gelu(usize),
    MaxAxis {
        x: usize,
        axis: usize,
        argmax: Vec<usize>,
    },
    Sum(usize),
    Mean(usize),
    Gather {
        x: usize,
        index: Vec<Vec<usize>>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Custom {
        inputs: Vec<usize>,
        rule: Box<dyn CustomOp>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::BroadcastTo(..) => "broadcast_to",
            Op::MatMul(..) => "matmul",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::MaxAxis { .. } => "max",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Gather { .. } => "gather",
            Op::Concat { .. } => "concat",
            Op::Custom { rule, .. } => rule.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    label: Option<String>,
}

/// Append-only record of one forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    options: TapeOptions,
    first_nonfinite: RefCell<Option<usize>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new(TapeOptions::default())
    }
}

impl Tape {
    pub fn new(options: TapeOptions) -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            options,
            first_nonfinite: RefCell::new(None),
        }
    }

    pub fn options(&self) -> TapeOptions {
        self.options
    }

    pub fn precision(&self) -> Precision {
        self.options.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf. Gradients are tracked iff `t.requires_grad`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.leaf_labeled(t, None)
    }

    pub fn constant(&self, t: Tensor) -> Var<'_> {
        let mut t = t;
        t.requires_grad = false;
        t.grad = None;
        self.options.precision.round_all(&mut t.data);
        self.push(t, Op::Leaf, false, None)
    }

    pub fn leaf_labeled(&self, t: &Tensor, label: Option<String>) -> Var<'_> {
        let rg = t.requires_grad;
        let mut v = t.value_only();
        self.options.precision.round_all(&mut v.data);
        self.push(v, Op::Leaf, rg, label)
    }

    pub fn custom<'t>(&'t self, inputs: &[Var<'t>], value: Tensor, rule: Box<dyn CustomOp>) -> Var<'t> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let rg = self.any_requires_grad(&ids);
        self.push_op(value, Op::Custom { inputs: ids, rule }, rg)
    }

    pub(crate) fn push_op(&self, mut value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        self.options.precision.round_all(&mut value.data);
        value.requires_grad = requires_grad;
        self.push(value, op, requires_grad, None)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool, label: Option<String>) -> Var<'_> {
        let finite = value.all_finite();
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            label,
        });
        drop(nodes);
        if !finite {
            let mut first = self.first_nonfinite.borrow_mut();
            if first.is_none() {
                *first = Some(id);
            }
        }
        Var { tape: self, id }
    }

    pub(crate) fn any_requires_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    pub(crate) fn node_value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Describes the first node whose value contained NaN or infinity.
    pub fn first_nonfinite(&self) -> Option<(&'static str, String)> {
        let id = (*self.first_nonfinite.borrow())?;
        let nodes = self.nodes.borrow();
        let node = &nodes[id];
        let label = node
            .label
            .clone()
            .unwrap_or_else(|| format!("node {id} shape {:?}", node.value.shape));
        Some((node.op.name(), label))
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.id].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(vec![1.0]);
        let precision = self.options.precision;
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let contributions = ops::backward_rule(&nodes, id, &g, self.options.fault);
            for (parent, mut pg) in contributions {
                if !nodes[parent].requires_grad {
                    continue;
                }
                precision.round_all(&mut pg);
                match &mut grads[parent] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&pg) {
                            *a = precision.round(*a + b);
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of one backward pass, indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    pub fn get_id(&self, id: usize) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.node_value(self.id).shape.clone()
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        self.tape.node_value(self.id)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.tape.node_value(self.id).value_only()
    }

    pub fn item(&self) -> f64 {
        self.tape.node_value(self.id).data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.any_requires_grad(&[self.id])
    }
}
