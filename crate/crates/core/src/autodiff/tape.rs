use std::fmt;
use std::sync::Arc;

use super::kernels::{self, ConvGeometry};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient override for operators whose true derivative is useless for
/// training (rounding, thresholds, sign).
///
/// Gradients produced by a custom op are recorded as constants, so they do
/// not take part in higher-order differentiation.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input, `None` where the input gets nothing.
    fn backward(&self, upstream: &Tensor, inputs: &[&Tensor], output: &Tensor) -> Result<Vec<Option<Tensor>>>;
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Sigmoid(Var),
    MulConst(Var, Arc<Vec<f64>>),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    BroadcastTo(Var),
    SumTo(Var),
    SumAll(Var),
    Conv2d(Var, Var, ConvGeometry),
    Conv2dInputGrad(Var, Var, ConvGeometry),
    Conv2dWeightGrad(Var, Var, ConvGeometry),
    Gather(Var, Arc<Vec<usize>>),
    ScatterAdd(Var, Arc<Vec<usize>>),
    Custom(Vec<Var>, Arc<dyn CustomOp>),
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Custom(inputs, op) => write!(f, "Custom({}, {inputs:?})", op.name()),
            Op::Leaf => write!(f, "Leaf"),
            _ => write!(f, "Op"),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

/// A Wengert list: values are appended in execution order, which is also a
/// topological order, so the backward sweep is a single reverse scan.
///
/// Tapes are single-use per forward pass and must not be shared between
/// concurrent forward passes.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Drops every node recorded after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf; it takes part in differentiation iff
    /// `t.requires_grad` is set.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        let rg = t.requires_grad;
        t.grad = None;
        t.requires_grad = false;
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let value = self.value(a).zip_map(self.value(b), f)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same var has same shape")
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Arc<Vec<f64>>) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(shape_err(
                "mul_const",
                format!("constant has {} values, input {:?}", c.len(), self.shape(a)),
            ));
        }
        let value = Tensor::new(
            self.shape(a).to_vec(),
            self.value(a).data().iter().zip(c.iter()).map(|(x, m)| x * m).collect(),
        )?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::MulConst(a, c), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mask: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > 0.0 { 1.0 } else { 0.0 })
            .collect();
        self.mul_const(a, Arc::new(mask)).expect("mask matches input")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::Matmul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(shape_err("transpose", format!("expected 2-D, got {s:?}")));
        }
        let data = kernels::transpose(self.value(a).data(), s[0], s[1]);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![s[1], s[0]], data)?, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Same-rank broadcast: every dimension of `a` must be 1 or equal `shape`.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let from = self.shape(a).to_vec();
        check_broadcast("broadcast_to", &from, shape)?;
        let data = kernels::broadcast_to(self.value(a).data(), &from, shape);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape.to_vec(), data)?, Op::BroadcastTo(a), rg))
    }

    /// Sums `a` down to `shape`, the adjoint of [`Tape::broadcast_to`].
    pub fn sum_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let from = self.shape(a).to_vec();
        check_broadcast("sum_to", shape, &from)?;
        let data = kernels::sum_to(self.value(a).data(), &from, shape);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape.to_vec(), data)?, Op::SumTo(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Adds `b` to `a`, broadcasting `b` up to `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let target = self.shape(a).to_vec();
        let b = if self.shape(b) == target.as_slice() {
            b
        } else {
            self.broadcast_to(b, &target)?
        };
        self.add(a, b)
    }

    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let target = self.shape(a).to_vec();
        let b = if self.shape(b) == target.as_slice() {
            b
        } else {
            self.broadcast_to(b, &target)?
        };
        self.mul(a, b)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(shape_err(
                "conv2d",
                format!("expected 4-D input and weight, got {sx:?} and {sw:?}"),
            ));
        }
        if sx[1] != sw[1] {
            return Err(shape_err(
                "conv2d",
                format!("input has {} channels, weight expects {}", sx[1], sw[1]),
            ));
        }
        if stride == 0 || sx[2] + 2 * padding < sw[2] || sx[3] + 2 * padding < sw[3] {
            return Err(shape_err(
                "conv2d",
                format!(
                    "kernel {}x{} does not fit input {}x{} with padding {padding}",
                    sw[2], sw[3], sx[2], sx[3]
                ),
            ));
        }
        let g = ConvGeometry {
            batch: sx[0],
            in_channels: sx[1],
            in_h: sx[2],
            in_w: sx[3],
            out_channels: sw[0],
            kernel_h: sw[2],
            kernel_w: sw[3],
            stride,
            padding,
        };
        Ok(self.conv_from_geometry(x, w, g))
    }

    fn conv_from_geometry(&mut self, x: Var, w: Var, g: ConvGeometry) -> Var {
        let data = kernels::conv2d(self.value(x).data(), self.value(w).data(), &g);
        let rg = self.rg(&[x, w]);
        let value = Tensor::new(g.output_shape(), data).expect("geometry-consistent");
        self.push(value, Op::Conv2d(x, w, g), rg)
    }

    fn conv_input_grad(&mut self, gy: Var, w: Var, g: ConvGeometry) -> Var {
        let data = kernels::conv2d_input_grad(self.value(gy).data(), self.value(w).data(), &g);
        let rg = self.rg(&[gy, w]);
        let value = Tensor::new(g.input_shape(), data).expect("geometry-consistent");
        self.push(value, Op::Conv2dInputGrad(gy, w, g), rg)
    }

    fn conv_weight_grad(&mut self, x: Var, gy: Var, g: ConvGeometry) -> Var {
        let data = kernels::conv2d_weight_grad(self.value(x).data(), self.value(gy).data(), &g);
        let rg = self.rg(&[x, gy]);
        let value = Tensor::new(g.weight_shape(), data).expect("geometry-consistent");
        self.push(value, Op::Conv2dWeightGrad(x, gy, g), rg)
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || kernel == 0 || stride == 0 || s[2] < kernel || s[3] < kernel {
            return Err(shape_err(
                "max_pool2d",
                format!("window {kernel} stride {stride} on input {s:?}"),
            ));
        }
        let (_, idx, shape) = kernels::max_pool2d(self.value(x).data(), &s, kernel, stride);
        self.gather(x, Arc::new(idx), &shape)
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        let data: Vec<f64> = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Gather(x, index), rg))
    }

    /// `out[index[i]] += g[i]` into a zero tensor of `shape`.
    fn scatter_add(&mut self, g: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Var {
        let mut data = vec![0.0; shape.iter().product()];
        for (&i, &v) in index.iter().zip(self.value(g).data()) {
            data[i] += v;
        }
        let value = Tensor::new(shape.to_vec(), data).expect("valid shape");
        let rg = self.rg(&[g]);
        self.push(value, Op::ScatterAdd(g, index), rg)
    }

    /// Records an operator whose forward value was computed by the caller
    /// and whose gradient comes from `op`.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Arc<dyn CustomOp>) -> Var {
        let rg = self.rg(inputs);
        self.push(output.with_requires_grad(false), Op::Custom(inputs.to_vec(), op), rg)
    }

    /// Straight-through application of an elementwise map: the forward value
    /// is `f(x)` and the backward pass forwards the upstream gradient
    /// unchanged.
    pub fn ste_apply(&mut self, x: Var, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(x).map(f);
        self.custom(&[x], out, Arc::new(StraightThrough))
    }

    /// Reverse sweep from a scalar `loss`. Every node gets a gradient entry;
    /// nodes the loss does not depend on get `None` (see [`Gradients::wrt`]).
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let mark = self.nodes.len();
        let result = self.backprop(loss).map(|grads| {
            let shapes = self.nodes[..mark].iter().map(|n| n.value.shape().to_vec()).collect();
            let grads = grads
                .into_iter()
                .map(|g| g.map(|v| self.nodes[v.0].value.clone()))
                .collect();
            Gradients { grads, shapes }
        });
        self.nodes.truncate(mark);
        result
    }

    /// Gradients of `loss` with respect to `wrt`, recorded on the tape so
    /// they can be differentiated again (Hessian-vector products).
    pub fn grad_graph(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let grads = self.backprop(loss)?;
        Ok(wrt
            .iter()
            .map(|&v| match grads[v.0] {
                Some(g) => g,
                None => {
                    let shape = self.shape(v).to_vec();
                    self.constant(Tensor::zeros(&shape))
                }
            })
            .collect())
    }

    fn backprop(&mut self, loss: Var) -> Result<Vec<Option<Var>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let end = loss.0 + 1;
        let mut grads: Vec<Option<Var>> = vec![None; end];
        let seed_shape = self.shape(loss).to_vec();
        grads[loss.0] = Some(self.constant(Tensor::ones(&seed_shape)));
        for id in (0..end).rev() {
            let Some(g) = grads[id] else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            for (input, gi) in self.vjp(id, g)? {
                grads[input.0] = Some(match grads[input.0] {
                    None => gi,
                    Some(prev) => self.add(prev, gi)?,
                });
            }
        }
        Ok(grads)
    }

    /// Vector-Jacobian products of node `id` given upstream gradient `g`,
    /// expressed with tape operators.
    fn vjp(&mut self, id: usize, g: Var) -> Result<Vec<(Var, Var)>> {
        let op = self.nodes[id].op.clone();
        let out = Var(id);
        let mut res = Vec::with_capacity(2);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.emit(&mut res, a, |_| Ok(g))?;
                self.emit(&mut res, b, |_| Ok(g))?;
            }
            Op::Sub(a, b) => {
                self.emit(&mut res, a, |_| Ok(g))?;
                self.emit(&mut res, b, |t| Ok(t.neg(g)))?;
            }
            Op::Mul(a, b) => {
                self.emit(&mut res, a, |t| t.mul(g, b))?;
                self.emit(&mut res, b, |t| t.mul(g, a))?;
            }
            Op::Div(a, b) => {
                self.emit(&mut res, a, |t| t.div(g, b))?;
                self.emit(&mut res, b, |t| {
                    let go = t.mul(g, out)?;
                    let q = t.div(go, b)?;
                    Ok(t.neg(q))
                })?;
            }
            Op::Neg(a) => self.emit(&mut res, a, |t| Ok(t.neg(g)))?,
            Op::Scale(a, c) => self.emit(&mut res, a, |t| Ok(t.scale(g, c)))?,
            Op::AddScalar(a) => self.emit(&mut res, a, |_| Ok(g))?,
            Op::Exp(a) => self.emit(&mut res, a, |t| t.mul(g, out))?,
            Op::Log(a) => self.emit(&mut res, a, |t| t.div(g, a))?,
            Op::Sqrt(a) => self.emit(&mut res, a, |t| {
                let two_out = t.scale(out, 2.0);
                t.div(g, two_out)
            })?,
            Op::Sigmoid(a) => self.emit(&mut res, a, |t| {
                let neg = t.neg(out);
                let one_minus = t.add_scalar(neg, 1.0);
                let d = t.mul(out, one_minus)?;
                t.mul(g, d)
            })?,
            Op::MulConst(a, c) => self.emit(&mut res, a, |t| t.mul_const(g, c))?,
            Op::Matmul(a, b) => {
                self.emit(&mut res, a, |t| {
                    let bt = t.transpose(b)?;
                    t.matmul(g, bt)
                })?;
                self.emit(&mut res, b, |t| {
                    let at = t.transpose(a)?;
                    t.matmul(at, g)
                })?;
            }
            Op::Transpose(a) => self.emit(&mut res, a, |t| t.transpose(g))?,
            Op::Reshape(a) => self.emit(&mut res, a, |t| {
                let s = t.shape(a).to_vec();
                t.reshape(g, &s)
            })?,
            Op::BroadcastTo(a) => self.emit(&mut res, a, |t| {
                let s = t.shape(a).to_vec();
                t.sum_to(g, &s)
            })?,
            Op::SumTo(a) => self.emit(&mut res, a, |t| {
                let s = t.shape(a).to_vec();
                t.broadcast_to(g, &s)
            })?,
            Op::SumAll(a) => self.emit(&mut res, a, |t| {
                let s = t.shape(a).to_vec();
                let ones = vec![1; s.len()];
                let r = t.reshape(g, &ones)?;
                t.broadcast_to(r, &s)
            })?,
            Op::Conv2d(x, w, geo) => {
                self.emit(&mut res, x, |t| Ok(t.conv_input_grad(g, w, geo)))?;
                self.emit(&mut res, w, |t| Ok(t.conv_weight_grad(x, g, geo)))?;
            }
            // <conv_input_grad(gy, w), u> = <gy, conv2d(u, w)>
            Op::Conv2dInputGrad(gy, w, geo) => {
                self.emit(&mut res, gy, |t| Ok(t.conv_from_geometry(g, w, geo)))?;
                self.emit(&mut res, w, |t| Ok(t.conv_weight_grad(g, gy, geo)))?;
            }
            // <conv_weight_grad(x, gy), u> = <gy, conv2d(x, u)>
            Op::Conv2dWeightGrad(x, gy, geo) => {
                self.emit(&mut res, x, |t| Ok(t.conv_input_grad(gy, g, geo)))?;
                self.emit(&mut res, gy, |t| Ok(t.conv_from_geometry(x, g, geo)))?;
            }
            Op::Gather(a, idx) => self.emit(&mut res, a, |t| {
                let s = t.shape(a).to_vec();
                Ok(t.scatter_add(g, idx, &s))
            })?,
            Op::ScatterAdd(a, idx) => self.emit(&mut res, a, |t| {
                let s = t.shape(a).to_vec();
                t.gather(g, idx, &s)
            })?,
            Op::Custom(inputs, op) => {
                let upstream = self.value(g).clone();
                let grads = {
                    let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                    op.backward(&upstream, &values, self.value(out))?
                };
                if grads.len() != inputs.len() {
                    return Err(Error::Graph(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                for (v, gi) in inputs.into_iter().zip(grads) {
                    if let Some(gi) = gi {
                        if self.requires_grad(v) {
                            if gi.shape() != self.shape(v) {
                                return Err(shape_err(
                                    "custom backward",
                                    format!("{} produced {:?} for input {:?}", op.name(), gi.shape(), self.shape(v)),
                                ));
                            }
                            let c = self.constant(gi);
                            res.push((v, c));
                        }
                    }
                }
            }
        }
        Ok(res)
    }

    fn emit(&mut self, res: &mut Vec<(Var, Var)>, input: Var, f: impl FnOnce(&mut Self) -> Result<Var>) -> Result<()> {
        if self.requires_grad(input) {
            let gi = f(self)?;
            res.push((input, gi));
        }
        Ok(())
    }
}

fn check_broadcast(op: &'static str, small: &[usize], big: &[usize]) -> Result<()> {
    let ok = small.len() == big.len() && small.iter().zip(big).all(|(&s, &b)| s == b || s == 1);
    if ok {
        Ok(())
    } else {
        Err(shape_err(op, format!("cannot broadcast {small:?} to {big:?}")))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Identity-Jacobian gradient for a single-input elementwise map.
#[derive(Debug)]
pub struct StraightThrough;

impl CustomOp for StraightThrough {
    fn name(&self) -> &'static str {
        "straight_through"
    }

    fn backward(&self, upstream: &Tensor, _: &[&Tensor], _: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(upstream.clone())])
    }
}
