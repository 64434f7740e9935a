use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::conv::{self, ConvGeometry, Padding};
use super::tensor::{self as k, Tensor};
use crate::error::{KwsError, Result};

/// Recorded operation of a node; indices refer to earlier nodes.
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Max(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Pow(usize, f64),
    MatMul(usize, usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    Sum {
        input: usize,
        axis: usize,
    },
    Mean {
        input: usize,
        axis: usize,
    },
    Broadcast(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Softmax(usize, usize),
    Conv2d {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        geom: ConvGeometry,
    },
    MaxPool {
        input: usize,
        argmax: Vec<usize>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A define-by-run tape. Nodes are appended in evaluation order, so the
/// insertion order is a topological order of the graph.
///
/// A graph is used by one thread; build a fresh one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.len()).finish()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients of a scalar with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// A leaf that receives gradients.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    pub fn concat<'g>(&'g self, parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = k::concat(&refs, axis)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.rg(&ids);
        Ok(self.push(out, Op::Concat(ids, axis), rg))
    }

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(KwsError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut flow = |target: usize, t: Tensor| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            let val = |i: usize| nodes[i].value.as_ref();
            let y = node.value.as_ref();
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    flow(*a, k::reduce_to_shape(&g, val(*a).shape()));
                    flow(*b, k::reduce_to_shape(&g, val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    flow(*a, k::reduce_to_shape(&g, val(*a).shape()));
                    flow(*b, k::reduce_to_shape(&g.map(|v| -v), val(*b).shape()));
                }
                Op::Mul(a, b) => {
                    let ga = k::zip_broadcast("mul", &g, val(*b), |x, y| x * y)?;
                    let gb = k::zip_broadcast("mul", &g, val(*a), |x, y| x * y)?;
                    flow(*a, k::reduce_to_shape(&ga, val(*a).shape()));
                    flow(*b, k::reduce_to_shape(&gb, val(*b).shape()));
                }
                Op::Max(a, b) => {
                    let av = k::broadcast_to(val(*a), g.shape())?;
                    let bv = k::broadcast_to(val(*b), g.shape())?;
                    let mut ga = g.clone();
                    let mut gb = g.clone();
                    for i in 0..g.numel() {
                        if av.data()[i] >= bv.data()[i] {
                            gb.data_mut()[i] = 0.0;
                        } else {
                            ga.data_mut()[i] = 0.0;
                        }
                    }
                    flow(*a, k::reduce_to_shape(&ga, val(*a).shape()));
                    flow(*b, k::reduce_to_shape(&gb, val(*b).shape()));
                }
                Op::Scale(a, s) => flow(*a, g.map(|v| v * s)),
                Op::Offset(a) => flow(*a, g.clone()),
                Op::Pow(a, p) => {
                    let d = k::zip_broadcast("pow", &g, val(*a), |gv, x| gv * p * x.powf(p - 1.0))?;
                    flow(*a, d);
                }
                Op::MatMul(a, b) => {
                    let bt = k::permute(val(*b), &[1, 0])?;
                    let at = k::permute(val(*a), &[1, 0])?;
                    flow(*a, k::matmul(&g, &bt)?);
                    flow(*b, k::matmul(&at, &g)?);
                }
                Op::Reshape(a) => flow(*a, g.reshaped(val(*a).shape())?),
                Op::Permute(a, perm) => flow(*a, k::permute(&g, &k::inverse_permutation(perm))?),
                Op::Concat(ids, axis) => {
                    let mut start = 0;
                    for &i in ids {
                        let len = val(i).shape()[*axis];
                        flow(i, k::slice(&g, *axis, start, start + len)?);
                        start += len;
                    }
                }
                Op::Slice { input, axis, start } => {
                    flow(*input, k::unslice(&g, val(*input).shape(), *axis, *start));
                }
                Op::Sum { input, axis } | Op::Mean { input, axis } => {
                    let shape = val(*input).shape();
                    let mut kept = shape.to_vec();
                    kept[*axis] = 1;
                    let mut spread = k::broadcast_to(&g.reshaped(&kept)?, shape)?;
                    if matches!(node.op, Op::Mean { .. }) {
                        let n = shape[*axis] as f64;
                        spread = spread.map(|v| v / n);
                    }
                    flow(*input, spread);
                }
                Op::Broadcast(a) => flow(*a, k::reduce_to_shape(&g, val(*a).shape())),
                Op::Sigmoid(a) => flow(*a, k::zip_broadcast("sigmoid", &g, y, |gv, s| gv * s * (1.0 - s))?),
                Op::Tanh(a) => flow(*a, k::zip_broadcast("tanh", &g, y, |gv, t| gv * (1.0 - t * t))?),
                Op::Relu(a) => flow(
                    *a,
                    k::zip_broadcast("relu", &g, val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })?,
                ),
                Op::Exp(a) => flow(*a, k::zip_broadcast("exp", &g, y, |gv, e| gv * e)?),
                Op::Log(a) => flow(*a, k::zip_broadcast("log", &g, val(*a), |gv, x| gv / x)?),
                Op::Softmax(a, axis) => flow(*a, k::softmax_backward(y, &g, *axis)),
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    geom,
                } => {
                    let (dx, dk, db) = conv::conv2d_backward(val(*input), val(*kernel), &g, geom);
                    flow(*input, dx);
                    flow(*kernel, dk);
                    if let Some(b) = bias {
                        flow(*b, db);
                    }
                }
                Op::MaxPool { input, argmax } => {
                    flow(*input, conv::max_pool_backward(val(*input).shape(), argmax, &g));
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        Rc::clone(&self.graph.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn same_graph(&self, other: &Var<'g>) {
        assert!(std::ptr::eq(self.graph, other.graph), "vars from different graphs");
    }

    fn unary(&self, out: Tensor, op: Op) -> Var<'g> {
        let rg = self.requires_grad();
        self.graph.push(out, op, rg)
    }

    fn binary(&self, other: Var<'g>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'g>> {
        self.same_graph(&other);
        let out = k::zip_broadcast(name, &self.value(), &other.value(), f)?;
        let rg = self.graph.rg(&[self.id, other.id]);
        Ok(self.graph.push(out, op, rg))
    }

    pub fn add(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "subtract", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "multiply", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn maximum(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "max", f64::max, Op::Max(self.id, other.id))
    }

    pub fn scale(&self, s: f64) -> Var<'g> {
        self.unary(self.value().map(|v| v * s), Op::Scale(self.id, s))
    }

    pub fn offset(&self, c: f64) -> Var<'g> {
        self.unary(self.value().map(|v| v + c), Op::Offset(self.id))
    }

    pub fn powf(&self, p: f64) -> Var<'g> {
        self.unary(self.value().map(|v| v.powf(p)), Op::Pow(self.id, p))
    }

    pub fn matmul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other);
        let out = k::matmul(&self.value(), &other.value())?;
        let rg = self.graph.rg(&[self.id, other.id]);
        Ok(self.graph.push(out, Op::MatMul(self.id, other.id), rg))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let out = self.value().reshaped(shape)?;
        Ok(self.unary(out, Op::Reshape(self.id)))
    }

    /// Axis permutation; `perm[i]` is the input axis placed at output axis i.
    pub fn transpose(&self, perm: &[usize]) -> Result<Var<'g>> {
        let out = k::permute(&self.value(), perm)?;
        Ok(self.unary(out, Op::Permute(self.id, perm.to_vec())))
    }

    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Var<'g>> {
        let out = k::slice(&self.value(), axis, start, end)?;
        Ok(self.unary(
            out,
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
        ))
    }

    pub fn sum(&self, axis: usize, keepdim: bool) -> Result<Var<'g>> {
        let v = self.value();
        k::check_axis("sum", v.shape(), axis)?;
        let out = k::sum_axis(&v, axis, keepdim);
        Ok(self.unary(out, Op::Sum { input: self.id, axis }))
    }

    pub fn mean(&self, axis: usize, keepdim: bool) -> Result<Var<'g>> {
        let v = self.value();
        k::check_axis("mean", v.shape(), axis)?;
        let n = v.shape()[axis] as f64;
        let out = k::sum_axis(&v, axis, keepdim).map(|s| s / n);
        Ok(self.unary(out, Op::Mean { input: self.id, axis }))
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&self) -> Result<Var<'g>> {
        let n = self.value().numel();
        self.reshape(&[n])?.sum(0, false)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'g>> {
        let out = k::broadcast_to(&self.value(), shape)?;
        Ok(self.unary(out, Op::Broadcast(self.id)))
    }

    pub fn sigmoid(&self) -> Var<'g> {
        let out = self.value().map(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        self.unary(out, Op::Sigmoid(self.id))
    }

    pub fn tanh(&self) -> Var<'g> {
        self.unary(self.value().map(f64::tanh), Op::Tanh(self.id))
    }

    pub fn relu(&self) -> Var<'g> {
        self.unary(self.value().map(|x| x.max(0.0)), Op::Relu(self.id))
    }

    pub fn exp(&self) -> Var<'g> {
        self.unary(self.value().map(f64::exp), Op::Exp(self.id))
    }

    pub fn log(&self) -> Var<'g> {
        self.unary(self.value().map(f64::ln), Op::Log(self.id))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'g>> {
        let v = self.value();
        k::check_axis("softmax", v.shape(), axis)?;
        let out = k::softmax_axis(&v, axis);
        Ok(self.unary(out, Op::Softmax(self.id, axis)))
    }

    /// Cross-correlation of an N×C×H×W input with an O×C×KH×KW kernel.
    pub fn conv2d(
        &self,
        kernel: Var<'g>,
        bias: Option<Var<'g>>,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Var<'g>> {
        self.same_graph(&kernel);
        let x = self.value();
        let kv = kernel.value();
        let geom = ConvGeometry::new(x.shape(), kv.shape(), stride, padding)?;
        let bv = bias.map(|b| b.value());
        if let Some(b) = &bv {
            if b.shape() != [geom.o] {
                return Err(KwsError::shape(
                    "conv2d",
                    format!("bias shape {:?} for {} output channels", b.shape(), geom.o),
                ));
            }
        }
        let out = conv::conv2d_forward(&x, &kv, bv.as_deref(), &geom);
        let mut ids = vec![self.id, kernel.id];
        ids.extend(bias.map(|b| b.id));
        let rg = self.graph.rg(&ids);
        let op = Op::Conv2d {
            input: self.id,
            kernel: kernel.id,
            bias: bias.map(|b| b.id),
            geom,
        };
        Ok(self.graph.push(out, op, rg))
    }

    /// Max pooling over the trailing H×W axes of an N×C×H×W tensor.
    pub fn max_pool(&self, window: (usize, usize), stride: (usize, usize)) -> Result<Var<'g>> {
        let (out, argmax) = conv::max_pool_forward(&self.value(), window, stride)?;
        Ok(self.unary(out, Op::MaxPool { input: self.id, argmax }))
    }
}
