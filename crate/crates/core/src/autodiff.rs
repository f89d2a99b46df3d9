//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive operation of one forward pass in
//! execution order, so node inputs always precede the node. [`Tape::backward`]
//! walks the record in reverse and returns the gradient of a scalar loss with
//! respect to every node. Parameters enter the tape as keyed leaves; their
//! gradients are looked up by [`ParamKey`] afterwards. A tape is built for a
//! single pass and dropped; nothing carries over between tapes.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Position of a parameter tensor inside a model's flattened parameter list.
pub type ParamKey = usize;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    index: usize,
    tape: u64,
}

/// How an operand's elements map onto the output of a binary op.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// Operand is one row, repeated down every row of the output.
    Row,
    /// Operand is one column, repeated across every column.
    Col,
    Scalar,
}

impl Bcast {
    #[inline]
    fn index(self, i: usize, cols: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Row => i % cols,
            Bcast::Col => i / cols,
            Bcast::Scalar => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Tanh,
    Sigmoid,
    Log,
    Neg,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        k: usize,
    },
    Binary {
        op: BinaryOp,
        a: usize,
        b: usize,
        ba: Bcast,
        bb: Bcast,
    },
    Unary {
        op: UnaryOp,
        x: usize,
    },
    Scale {
        x: usize,
        c: T,
    },
    Softmax {
        x: usize,
    },
    LogSoftmax {
        x: usize,
    },
    Sum {
        x: usize,
    },
    Mean {
        x: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
}

impl<T> Node<T> {
    fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }
}

#[derive(Debug)]
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    params: BTreeMap<ParamKey, usize>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        if v.tape != self.id {
            return Err(Error::Contract("variable belongs to a different tape".into()));
        }
        Ok(&self.nodes[v.index])
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op });
        Var {
            index: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    /// Records a constant input; gradients flow into it but it is not a parameter.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf)
    }

    /// Records a trainable parameter under `key`.
    pub fn param(&mut self, key: ParamKey, t: &Tensor<T>) -> Result<Var> {
        if self.params.contains_key(&key) {
            return Err(Error::Contract(format!("parameter {key} registered twice")));
        }
        let v = self.constant(t);
        self.params.insert(key, v.index);
        Ok(v)
    }

    /// Copies `v` into a fresh leaf so nothing upstream of it receives gradient.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let n = self.node(v)?;
        let (shape, value) = (n.shape.clone(), n.value.clone());
        Ok(self.push(shape, value, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> Result<&[T]> {
        Ok(&self.node(v)?.value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(&self.node(v)?.shape)
    }

    pub fn tensor(&self, v: Var) -> Result<Tensor<T>> {
        let n = self.node(v)?;
        Tensor::new(n.shape.clone(), n.value.clone())
    }

    pub fn scalar_value(&self, v: Var) -> Result<T> {
        let n = self.node(v)?;
        if n.value.len() != 1 {
            return Err(Error::Shape(format!("expected scalar, got shape {:?}", n.shape)));
        }
        Ok(n.value[0])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
            return Err(Error::Shape(format!(
                "matmul of {:?} and {:?}",
                na.shape, nb.shape
            )));
        }
        let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let arow = &na.value[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                let brow = &nb.value[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
        Ok(self.push(
            vec![m, n],
            out,
            Op::MatMul {
                a: a.index,
                b: b.index,
                k,
            },
        ))
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        let (shape, ba, bb) = broadcast(&na.shape, na.value.len(), &nb.shape, nb.value.len())?;
        let len: usize = shape.iter().product();
        let cols = shape.last().copied().unwrap_or(1);
        let f = |x: T, y: T| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
        };
        let value = (0..len)
            .map(|i| f(na.value[ba.index(i, cols)], nb.value[bb.index(i, cols)]))
            .collect();
        Ok(self.push(
            shape,
            value,
            Op::Binary {
                op,
                a: a.index,
                b: b.index,
                ba,
                bb,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        let n = self.node(x)?;
        if op == UnaryOp::Log {
            // Written negated so NaN is rejected too.
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if let Some(bad) = n.value.iter().find(|v| !(**v > T::zero())) {
                return Err(Error::Domain(format!("log of non-positive value {bad}")));
            }
        }
        let value = n
            .value
            .iter()
            .map(|&v| match op {
                UnaryOp::Relu => v.max(T::zero()),
                UnaryOp::Tanh => v.tanh(),
                UnaryOp::Sigmoid => sigmoid(v),
                UnaryOp::Log => v.ln(),
                UnaryOp::Neg => -v,
            })
            .collect();
        let shape = n.shape.clone();
        Ok(self.push(shape, value, Op::Unary { op, x: x.index }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, x)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let n = self.node(x)?;
        let value = n.value.iter().map(|&v| v * c).collect();
        let shape = n.shape.clone();
        Ok(self.push(shape, value, Op::Scale { x: x.index, c }))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?;
        let cols = n.cols();
        let mut value = Vec::with_capacity(n.value.len());
        for row in n.value.chunks(cols) {
            value.extend(softmax_row(row));
        }
        let shape = n.shape.clone();
        Ok(self.push(shape, value, Op::Softmax { x: x.index }))
    }

    /// Log-softmax over the last axis via log-sum-exp.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?;
        let cols = n.cols();
        let mut value = Vec::with_capacity(n.value.len());
        for row in n.value.chunks(cols) {
            let lse = log_sum_exp(row);
            value.extend(row.iter().map(|&v| v - lse));
        }
        let shape = n.shape.clone();
        Ok(self.push(shape, value, Op::LogSoftmax { x: x.index }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.node(x)?.value.iter().copied().sum();
        Ok(self.push(Vec::new(), vec![s], Op::Sum { x: x.index }))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?;
        let s: T = n.value.iter().copied().sum();
        let m = s / T::from_usize(n.value.len()).unwrap();
        Ok(self.push(Vec::new(), vec![m], Op::Mean { x: x.index }))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ln = self.node(loss)?;
        if ln.value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                ln.shape
            )));
        }
        let mut grads: Vec<Vec<T>> = self
            .nodes
            .iter()
            .map(|n| vec![T::zero(); n.value.len()])
            .collect();
        grads[loss.index][0] = T::one();

        for idx in (0..=loss.index).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = std::mem::take(&mut grads[idx]);
            if g.iter().all(|v| *v == T::zero()) {
                grads[idx] = g;
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = g;
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Vec<T>]) {
        match node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, k } => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
                // dA = G · Bᵀ
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = T::zero();
                        for j in 0..n {
                            acc = acc + g[i * n + j] * bv[p * n + j];
                        }
                        grads[a][i * k + p] = grads[a][i * k + p] + acc;
                    }
                }
                // dB = Aᵀ · G
                for i in 0..m {
                    for p in 0..k {
                        let a_ip = av[i * k + p];
                        for j in 0..n {
                            grads[b][p * n + j] = grads[b][p * n + j] + a_ip * g[i * n + j];
                        }
                    }
                }
            }
            Op::Binary { op, a, b, ba, bb } => {
                let cols = node.cols();
                for (i, &gi) in g.iter().enumerate() {
                    let (ia, ib) = (ba.index(i, cols), bb.index(i, cols));
                    let (ga, gb) = match op {
                        BinaryOp::Add => (gi, gi),
                        BinaryOp::Sub => (gi, -gi),
                        BinaryOp::Mul => (
                            gi * self.nodes[b].value[ib],
                            gi * self.nodes[a].value[ia],
                        ),
                    };
                    grads[a][ia] = grads[a][ia] + ga;
                    grads[b][ib] = grads[b][ib] + gb;
                }
            }
            Op::Unary { op, x } => {
                let xv = &self.nodes[x].value;
                for (i, &gi) in g.iter().enumerate() {
                    let y = node.value[i];
                    let d = match op {
                        UnaryOp::Relu => {
                            if xv[i] > T::zero() {
                                gi
                            } else {
                                T::zero()
                            }
                        }
                        UnaryOp::Tanh => gi * (T::one() - y * y),
                        UnaryOp::Sigmoid => gi * y * (T::one() - y),
                        UnaryOp::Log => gi / xv[i],
                        UnaryOp::Neg => -gi,
                    };
                    grads[x][i] = grads[x][i] + d;
                }
            }
            Op::Scale { x, c } => {
                for (i, &gi) in g.iter().enumerate() {
                    grads[x][i] = grads[x][i] + gi * c;
                }
            }
            Op::Softmax { x } => {
                let cols = node.cols();
                for (r, (yrow, grow)) in node.value.chunks(cols).zip(g.chunks(cols)).enumerate() {
                    let dot: T = yrow.iter().zip(grow).map(|(&y, &gy)| y * gy).sum();
                    for j in 0..cols {
                        let i = r * cols + j;
                        grads[x][i] = grads[x][i] + yrow[j] * (grow[j] - dot);
                    }
                }
            }
            Op::LogSoftmax { x } => {
                let cols = node.cols();
                for (r, (yrow, grow)) in node.value.chunks(cols).zip(g.chunks(cols)).enumerate() {
                    let gsum: T = grow.iter().copied().sum();
                    for j in 0..cols {
                        let i = r * cols + j;
                        grads[x][i] = grads[x][i] + grow[j] - yrow[j].exp() * gsum;
                    }
                }
            }
            Op::Sum { x } => {
                for v in grads[x].iter_mut() {
                    *v = *v + g[0];
                }
            }
            Op::Mean { x } => {
                let n = T::from_usize(grads[x].len()).unwrap();
                for v in grads[x].iter_mut() {
                    *v = *v + g[0] / n;
                }
            }
        }
    }
}

/// Result of one backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Vec<T>>,
    params: BTreeMap<ParamKey, usize>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to any recorded value.
    pub fn wrt(&self, v: Var) -> Result<&[T]> {
        if v.tape != self.tape {
            return Err(Error::Contract("variable belongs to a different tape".into()));
        }
        Ok(&self.grads[v.index])
    }

    /// Gradient of a registered parameter; zeros if the loss does not reach it.
    pub fn param(&self, key: ParamKey) -> Option<&[T]> {
        self.params.get(&key).map(|&i| self.grads[i].as_slice())
    }

    pub fn param_keys(&self) -> impl Iterator<Item = ParamKey> + '_ {
        self.params.keys().copied()
    }
}

fn broadcast(
    sa: &[usize],
    la: usize,
    sb: &[usize],
    lb: usize,
) -> Result<(Vec<usize>, Bcast, Bcast)> {
    if sa == sb {
        return Ok((sa.to_vec(), Bcast::Same, Bcast::Same));
    }
    if lb == 1 {
        return Ok((sa.to_vec(), Bcast::Same, Bcast::Scalar));
    }
    if la == 1 {
        return Ok((sb.to_vec(), Bcast::Scalar, Bcast::Same));
    }
    let as_row = |big: &[usize], small: &[usize]| {
        big.len() == 2
            && ((small.len() == 1 && small[0] == big[1])
                || (small.len() == 2 && small[0] == 1 && small[1] == big[1]))
    };
    let as_col = |big: &[usize], small: &[usize]| {
        big.len() == 2 && small.len() == 2 && small[1] == 1 && small[0] == big[0]
    };
    if as_row(sa, sb) {
        return Ok((sa.to_vec(), Bcast::Same, Bcast::Row));
    }
    if as_row(sb, sa) {
        return Ok((sb.to_vec(), Bcast::Row, Bcast::Same));
    }
    if as_col(sa, sb) {
        return Ok((sa.to_vec(), Bcast::Same, Bcast::Col));
    }
    if as_col(sb, sa) {
        return Ok((sb.to_vec(), Bcast::Col, Bcast::Same));
    }
    Err(Error::Shape(format!("cannot broadcast {sa:?} with {sb:?}")))
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

pub(crate) fn softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Value-only softmax over the last axis of `t`.
pub fn softmax<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let cols = t.cols();
    let values = t.values().chunks(cols).flat_map(softmax_row).collect();
    Tensor::new(t.shape().to_vec(), values).expect("same shape")
}
