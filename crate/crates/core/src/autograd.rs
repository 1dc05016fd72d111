//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every backward rule is expressed with the same differentiable operations
//! used in the forward pass, so gradients can themselves be differentiated
//! (needed for the R1 penalty on the discriminator's input gradient).

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::tensor::{self, ConvGeom, Real, Tensor};

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add,
    Sub,
    Mul,
    Neg,
    Scale(T),
    AddScalar,
    MulConst(Rc<Tensor<T>>),
    Expand(Vec<usize>),
    SumTo(Vec<usize>),
    Reshape(Vec<usize>),
    MatMul,
    Transpose,
    Conv(ConvGeom),
    ConvInputGrad(ConvGeom),
    ConvWeightGrad(ConvGeom),
    Upsample2,
    SumPool2,
    Narrow { axis: usize, start: usize, full: usize },
    Unnarrow { axis: usize, start: usize, len: usize },
    Concat { axis: usize, sizes: Vec<usize> },
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Rsqrt,
    Sqrt,
    Recip,
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    parents: Vec<usize>,
    requires_grad: bool,
}

/// Records operations for later differentiation. Values live until the tape
/// is dropped.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: Cell<bool>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that participates in differentiation.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Rc::new(value), Op::Leaf, Vec::new(), true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Rc::new(value), Op::Leaf, Vec::new(), false)
    }

    pub fn constant_rc(&self, value: Rc<Tensor<T>>) -> Var<'_, T> {
        self.push(value, Op::Leaf, Vec::new(), false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_, T> {
        self.constant(Tensor::scalar(T::of(v)))
    }

    fn push(
        &self,
        value: Rc<Tensor<T>>,
        op: Op<T>,
        parents: Vec<usize>,
        requires_grad: bool,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let recording = self.recording.get();
        let requires_grad = recording && requires_grad;
        let (op, parents) = if requires_grad {
            (op, parents)
        } else {
            (Op::Leaf, Vec::new())
        };
        nodes.push(Node {
            value,
            op,
            parents,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn op_result(&self, value: Tensor<T>, op: Op<T>, parents: &[Var<'_, T>]) -> Var<'_, T> {
        let rg = parents.iter().any(|p| self.requires_grad(p.id));
        self.push(
            Rc::new(value),
            op,
            parents.iter().map(|p| p.id).collect(),
            rg,
        )
    }

    fn var(&self, id: usize) -> Var<'_, T> {
        Var { tape: self, id }
    }

    /// Gradients of the scalar `output` with respect to `wrt`.
    ///
    /// With `create_graph` the returned gradients are themselves differentiable.
    /// Entries are `None` when `output` does not depend on that input.
    pub fn grad<'t>(
        &'t self,
        output: Var<'t, T>,
        wrt: &[Var<'t, T>],
        create_graph: bool,
    ) -> Vec<Option<Var<'t, T>>> {
        assert_eq!(output.numel(), 1, "gradient requires a scalar output");
        let end = output.id + 1;
        // Only nodes that lie on a path from some `wrt` input to the output
        // are visited.
        let mut relevant = vec![false; end];
        {
            let nodes = self.nodes.borrow();
            for w in wrt {
                if w.id < end {
                    relevant[w.id] = nodes[w.id].requires_grad;
                }
            }
            for id in 0..end {
                if relevant[id] || !nodes[id].requires_grad {
                    continue;
                }
                relevant[id] = nodes[id].parents.iter().any(|&p| relevant[p]);
            }
        }
        let prev = self.recording.replace(create_graph);
        let mut grads: Vec<Option<usize>> = vec![None; end];
        grads[output.id] = Some(
            self.constant(Tensor::from_vec(&output.shape(), vec![T::one()]).unwrap())
                .id,
        );
        for id in (0..end).rev() {
            let Some(g) = grads[id] else { continue };
            if !relevant[id] {
                continue;
            }
            let (op, parents) = {
                let nodes = self.nodes.borrow();
                (nodes[id].op.clone(), nodes[id].parents.clone())
            };
            if parents.is_empty() {
                continue;
            }
            let needs: Vec<bool> = parents.iter().map(|&p| relevant[p]).collect();
            let pgrads = self.backward_op(&op, id, &parents, g, &needs);
            for ((&p, pg), need) in parents.iter().zip(pgrads).zip(needs) {
                if !need {
                    continue;
                }
                if let Some(pg) = pg {
                    grads[p] = Some(match grads[p] {
                        None => pg.id,
                        Some(acc) => (self.var(acc) + pg).id,
                    });
                }
            }
        }
        self.recording.set(prev);
        wrt.iter()
            .map(|w| {
                if w.id < end {
                    grads[w.id].map(|id| self.var(id))
                } else {
                    None
                }
            })
            .collect()
    }

    fn backward_op<'t>(
        &'t self,
        op: &Op<T>,
        out_id: usize,
        parents: &[usize],
        g: usize,
        needs: &[bool],
    ) -> Vec<Option<Var<'t, T>>> {
        let g = self.var(g);
        let out = self.var(out_id);
        let p = |i: usize| self.var(parents[i]);
        let want = |i: usize| needs[i];
        match op {
            Op::Leaf => vec![],
            Op::Add => vec![Some(g), Some(g)],
            Op::Sub => vec![Some(g), want(1).then(|| -g)],
            Op::Mul => vec![
                want(0).then(|| g * p(1)),
                want(1).then(|| g * p(0)),
            ],
            Op::Neg => vec![Some(-g)],
            Op::Scale(c) => vec![Some(g.scale_t(*c))],
            Op::AddScalar => vec![Some(g)],
            Op::MulConst(m) => vec![Some(g.mul_const_rc(m.clone()))],
            Op::Expand(from) => vec![Some(g.sum_to(from))],
            Op::SumTo(from) => vec![Some(g.expand(from))],
            Op::Reshape(from) => vec![Some(g.reshape(from))],
            Op::MatMul => vec![
                want(0).then(|| g.matmul(p(1).t())),
                want(1).then(|| p(0).t().matmul(g)),
            ],
            Op::Transpose => vec![Some(g.t())],
            Op::Conv(geom) => {
                let x = p(0);
                let w = p(1);
                vec![
                    want(0).then(|| g.conv_input_grad(w, &x.shape(), *geom)),
                    want(1).then(|| g.conv_weight_grad(x, &w.shape(), *geom)),
                ]
            }
            Op::ConvInputGrad(geom) => {
                // out = conv_input_grad(gy, w)
                let gy = p(0);
                let w = p(1);
                vec![
                    want(0).then(|| g.conv2d(w, *geom)),
                    want(1).then(|| gy.conv_weight_grad(g, &w.shape(), *geom)),
                ]
            }
            Op::ConvWeightGrad(geom) => {
                // out = conv_weight_grad(gy, x)
                let gy = p(0);
                let x = p(1);
                vec![
                    want(0).then(|| x.conv2d(g, *geom)),
                    want(1).then(|| gy.conv_input_grad(g, &x.shape(), *geom)),
                ]
            }
            Op::Upsample2 => vec![Some(g.sum_pool2())],
            Op::SumPool2 => vec![Some(g.upsample2())],
            Op::Narrow { axis, start, full } => vec![Some(g.unnarrow(*axis, *start, *full))],
            Op::Unnarrow { axis, start, len } => vec![Some(g.narrow(*axis, *start, *len))],
            Op::Concat { axis, sizes } => {
                let mut start = 0;
                sizes
                    .iter()
                    .enumerate()
                    .map(|(i, &len)| {
                        let s = start;
                        start += len;
                        want(i).then(|| g.narrow(*axis, s, len))
                    })
                    .collect()
            }
            Op::Tanh => {
                // d tanh = 1 - y^2
                let one_minus = (-(out * out)).add_scalar(1.0);
                vec![Some(g * one_minus)]
            }
            Op::Sigmoid => {
                let d = out * (-out).add_scalar(1.0);
                vec![Some(g * d)]
            }
            Op::Softplus => vec![Some(g * p(0).sigmoid())],
            Op::Exp => vec![Some(g * out)],
            Op::Log => vec![Some(g * p(0).recip())],
            Op::Rsqrt => {
                // d x^{-1/2} = -1/2 x^{-3/2} = -1/2 y^3
                vec![Some(g * (out * out * out).scale(-0.5))]
            }
            Op::Sqrt => vec![Some(g * out.recip().scale(0.5))],
            Op::Recip => vec![Some(g * -(out * out))],
        }
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn item(&self) -> T {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn unary(self, value: Tensor<T>, op: Op<T>) -> Self {
        self.tape.op_result(value, op, &[self])
    }

    fn binary(self, other: Self, value: Tensor<T>, op: Op<T>) -> Self {
        self.tape.op_result(value, op, &[self, other])
    }

    fn same_shape(&self, other: &Self, what: &str) {
        let (a, b) = (self.shape(), other.shape());
        assert_eq!(a, b, "{what}: shape mismatch {a:?} vs {b:?}");
    }

    pub fn scale(self, c: f64) -> Self {
        self.scale_t(T::of(c))
    }

    pub fn scale_t(self, c: T) -> Self {
        let v = self.value().map(|x| x * c);
        self.unary(v, Op::Scale(c))
    }

    pub fn add_scalar(self, c: f64) -> Self {
        let c = T::of(c);
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::AddScalar)
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(self, m: Tensor<T>) -> Self {
        self.mul_const_rc(Rc::new(m))
    }

    pub fn mul_const_rc(self, m: Rc<Tensor<T>>) -> Self {
        let v = self.value().zip(&m, |a, b| a * b);
        self.unary(v, Op::MulConst(m))
    }

    pub fn expand(self, shape: &[usize]) -> Self {
        let from = self.shape();
        if from == shape {
            return self;
        }
        let v = tensor::expand(&self.value(), shape);
        self.unary(v, Op::Expand(from))
    }

    pub fn sum_to(self, shape: &[usize]) -> Self {
        let from = self.shape();
        if from == shape {
            return self;
        }
        let v = tensor::sum_to(&self.value(), shape);
        self.unary(v, Op::SumTo(from))
    }

    pub fn reshape(self, shape: &[usize]) -> Self {
        let from = self.shape();
        if from == shape {
            return self;
        }
        let v = self.value().reshaped(shape).expect("reshape element count");
        self.unary(v, Op::Reshape(from))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(self) -> Self {
        let rank = self.shape().len();
        self.sum_to(&vec![1; rank]).reshape(&[1])
    }

    pub fn mean(self) -> Self {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Adds `other` broadcast to this tensor's shape.
    pub fn add_bcast(self, other: Self) -> Self {
        self + other.expand(&self.shape())
    }

    pub fn mul_bcast(self, other: Self) -> Self {
        self * other.expand(&self.shape())
    }

    pub fn matmul(self, other: Self) -> Self {
        let v = tensor::matmul(&self.value(), &other.value(), false, false);
        self.binary(other, v, Op::MatMul)
    }

    pub fn t(self) -> Self {
        let v = tensor::transpose2(&self.value());
        self.unary(v, Op::Transpose)
    }

    pub fn conv2d(self, w: Self, geom: ConvGeom) -> Self {
        let v = tensor::conv2d(&self.value(), &w.value(), geom);
        self.binary(w, v, Op::Conv(geom))
    }

    fn conv_input_grad(self, w: Self, x_shape: &[usize], geom: ConvGeom) -> Self {
        let v = tensor::conv2d_input_grad(&self.value(), &w.value(), x_shape, geom);
        self.binary(w, v, Op::ConvInputGrad(geom))
    }

    fn conv_weight_grad(self, x: Self, w_shape: &[usize], geom: ConvGeom) -> Self {
        let v = tensor::conv2d_weight_grad(&self.value(), &x.value(), w_shape, geom);
        self.binary(x, v, Op::ConvWeightGrad(geom))
    }

    pub fn upsample2(self) -> Self {
        let v = tensor::upsample2(&self.value());
        self.unary(v, Op::Upsample2)
    }

    pub fn sum_pool2(self) -> Self {
        let v = tensor::sum_pool2(&self.value());
        self.unary(v, Op::SumPool2)
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Self {
        let full = self.shape()[axis];
        if start == 0 && len == full {
            return self;
        }
        let v = tensor::narrow(&self.value(), axis, start, len);
        self.unary(v, Op::Narrow { axis, start, full })
    }

    fn unnarrow(self, axis: usize, start: usize, full: usize) -> Self {
        let len = self.shape()[axis];
        let v = tensor::unnarrow(&self.value(), axis, start, full);
        self.unary(v, Op::Unnarrow { axis, start, len })
    }

    pub fn concat(parts: &[Self], axis: usize) -> Self {
        let tape = parts[0].tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let v = tensor::concat(&refs, axis);
        let sizes = values.iter().map(|v| v.shape()[axis]).collect();
        tape.op_result(v, Op::Concat { axis, sizes }, parts)
    }

    pub fn leaky_relu(self, slope: f64) -> Self {
        let s = T::of(slope);
        let x = self.value();
        let mask = x.map(|v| if v > T::zero() { T::one() } else { s });
        self.mul_const(mask)
    }

    pub fn abs(self) -> Self {
        let x = self.value();
        let sign = x.map(|v| {
            if v > T::zero() {
                T::one()
            } else if v < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        });
        self.mul_const(sign)
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Self {
        let (lo, hi) = (T::of(lo), T::of(hi));
        let x = self.value();
        let inside = x.map(|v| if v >= lo && v <= hi { T::one() } else { T::zero() });
        // x*inside + (clamp(x) - x*inside): exact value, gradient only inside
        let rest = x.zip(&inside, |v, m| v.max(lo).min(hi) - v * m);
        self.mul_const(inside) + self.tape.constant(rest)
    }

    pub fn tanh(self) -> Self {
        let v = self.value().map(|x| x.tanh());
        self.unary(v, Op::Tanh)
    }

    pub fn sigmoid(self) -> Self {
        let v = self.value().map(stable_sigmoid);
        self.unary(v, Op::Sigmoid)
    }

    /// `ln(1 + e^x)` evaluated without overflow.
    pub fn softplus(self) -> Self {
        let v = self.value().map(stable_softplus);
        self.unary(v, Op::Softplus)
    }

    pub fn exp(self) -> Self {
        let v = self.value().map(|x| x.exp());
        self.unary(v, Op::Exp)
    }

    pub fn ln(self) -> Self {
        let v = self.value().map(|x| x.ln());
        self.unary(v, Op::Log)
    }

    pub fn rsqrt(self) -> Self {
        let v = self.value().map(|x| x.sqrt().recip());
        self.unary(v, Op::Rsqrt)
    }

    pub fn sqrt(self) -> Self {
        let v = self.value().map(|x| x.sqrt());
        self.unary(v, Op::Sqrt)
    }

    pub fn recip(self) -> Self {
        let v = self.value().map(|x| x.recip());
        self.unary(v, Op::Recip)
    }

    pub fn square(self) -> Self {
        self * self
    }
}

pub fn stable_sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn stable_softplus<T: Real>(x: T) -> T {
    // max(x, 0) + ln(1 + e^{-|x|})
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<'t, T: Real> std::ops::Add for Var<'t, T> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        self.same_shape(&rhs, "add");
        let v = self.value().zip(&rhs.value(), |a, b| a + b);
        self.binary(rhs, v, Op::Add)
    }
}

impl<'t, T: Real> std::ops::Sub for Var<'t, T> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self.same_shape(&rhs, "sub");
        let v = self.value().zip(&rhs.value(), |a, b| a - b);
        self.binary(rhs, v, Op::Sub)
    }
}

impl<'t, T: Real> std::ops::Mul for Var<'t, T> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self.same_shape(&rhs, "mul");
        let v = self.value().zip(&rhs.value(), |a, b| a * b);
        self.binary(rhs, v, Op::Mul)
    }
}

impl<'t, T: Real> std::ops::Neg for Var<'t, T> {
    type Output = Self;
    fn neg(self) -> Self {
        let v = self.value().map(|x| -x);
        self.unary(v, Op::Neg)
    }
}

/// Named tensors bound as leaves of one tape.
pub struct Bound<'t, T: Real> {
    vars: HashMap<String, Var<'t, T>>,
}

impl<'t, T: Real> Bound<'t, T> {
    pub fn new() -> Self {
        Self {
            vars: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, v: Var<'t, T>) {
        self.vars.insert(name.into(), v);
    }

    pub fn get(&self, name: &str) -> Var<'t, T> {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var<'t, T>> {
        self.vars.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn extend(&mut self, other: Bound<'t, T>) {
        self.vars.extend(other.vars);
    }
}

impl<T: Real> Default for Bound<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'t, T: Real> std::ops::Index<&str> for Bound<'t, T> {
    type Output = Var<'t, T>;
    fn index(&self, name: &str) -> &Var<'t, T> {
        match self.vars.get(name) {
            Some(v) => v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }
}
