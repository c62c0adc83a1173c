//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Ops record nodes during the forward pass; [`Tape::backward`] replays them
//! in reverse, visiting each node once. A tape and its [`Var`]s form a
//! single-threaded unit. Every op validates shapes and finiteness before the
//! node lands on the tape, so a NaN is caught at the boundary of the op that
//! produced it.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, sigmoid_scalar, Tensor};
use crate::{lstm, tcn};

/// Recorded primitive ops. Parent handles index earlier nodes.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    /// `[..., C] + [C]`, the vector added to every row.
    AddRows { a: usize, v: usize },
    Matmul { a: usize, b: usize },
    MatVec { a: usize, x: usize },
    Transpose { a: usize },
    Sigmoid { a: usize },
    Tanh { a: usize },
    Relu { a: usize },
    Exp { a: usize },
    SoftmaxLast { a: usize },
    LogSoftmaxLast { a: usize },
    Sum { a: usize },
    Mean { a: usize },
    Reshape { a: usize },
    /// `[B,T,C] -> [B,C]` at a fixed time step.
    SliceTime { a: usize, t: usize },
    /// T parts of `[B,C]` -> `[B,T,C]`.
    StackTime { parts: Vec<usize> },
    /// n parts of `[C]` -> `[n,C]`.
    StackRows { parts: Vec<usize> },
    /// out[b,:] = sum_i weights[b,i] * experts_i[b,:].
    MixExperts { experts: Vec<usize>, weights: usize },
    DilatedConv { x: usize, w: usize, b: usize, dilation: usize },
    BatchNormTrain { x: usize, gamma: usize, beta: usize },
    BatchNormEval { x: usize, gamma: usize, beta: usize },
    /// Fused LSTM over a whole sequence; parents ordered
    /// [xs, w_i, w_f, w_o, w_c, u_i, u_f, u_o, u_c, b_i, b_f, b_o, b_c].
    LstmSeq { parents: [usize; 13] },
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } | Op::Matmul { a, b } => {
                vec![*a, *b]
            }
            Op::MatVec { a, x } => vec![*a, *x],
            Op::AddRows { a, v } => vec![*a, *v],
            Op::Scale { a, .. }
            | Op::Transpose { a }
            | Op::Sigmoid { a }
            | Op::Tanh { a }
            | Op::Relu { a }
            | Op::Exp { a }
            | Op::SoftmaxLast { a }
            | Op::LogSoftmaxLast { a }
            | Op::Sum { a }
            | Op::Mean { a }
            | Op::Reshape { a }
            | Op::SliceTime { a, .. } => vec![*a],
            Op::StackTime { parts } | Op::StackRows { parts } => parts.clone(),
            Op::MixExperts { experts, weights } => {
                let mut p = experts.clone();
                p.push(*weights);
                p
            }
            Op::DilatedConv { x, w, b, .. } => vec![*x, *w, *b],
            Op::BatchNormTrain { x, gamma, beta } | Op::BatchNormEval { x, gamma, beta } => {
                vec![*x, *gamma, *beta]
            }
            Op::LstmSeq { parents } => parents.to_vec(),
        }
    }

    pub(crate) fn label(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddRows { .. } => "add_rows",
            Op::Matmul { .. } => "matmul",
            Op::MatVec { .. } => "matvec",
            Op::Transpose { .. } => "transpose",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Tanh { .. } => "tanh",
            Op::Relu { .. } => "relu",
            Op::Exp { .. } => "exp",
            Op::SoftmaxLast { .. } => "softmax",
            Op::LogSoftmaxLast { .. } => "log_softmax",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Reshape { .. } => "reshape",
            Op::SliceTime { .. } => "slice_time",
            Op::StackTime { .. } => "stack_time",
            Op::StackRows { .. } => "stack_rows",
            Op::MixExperts { .. } => "mix_experts",
            Op::DilatedConv { .. } => "dilated_conv",
            Op::BatchNormTrain { .. } => "batch_norm_train",
            Op::BatchNormEval { .. } => "batch_norm_eval",
            Op::LstmSeq { .. } => "lstm_seq",
        }
    }
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) value: Tensor,
    /// Op-specific buffers kept for the backward pass.
    pub(crate) saved: Vec<Tensor>,
}

struct TapeInner {
    nodes: Vec<Node>,
    /// Test hook: (op label, delta) perturbs that op's first parent gradient.
    fault: Option<(String, f64)>,
}

/// Shared handle to a recording tape.
#[derive(Clone)]
pub struct Tape(Rc<RefCell<TapeInner>>);

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// A tensor tracked on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape(Rc::new(RefCell::new(TapeInner { nodes: Vec::new(), fault: None })))
    }

    /// Record a leaf whose gradient will be available after `backward`.
    pub fn watch(&self, t: &Tensor) -> Var {
        self.push_unchecked(Op::Leaf, t.clone(), vec![])
    }

    /// Leaf for constant data; gradients flow to it but are simply unused.
    pub fn constant(&self, t: &Tensor) -> Var {
        self.watch(t)
    }

    pub fn len(&self) -> usize {
        self.0.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Perturb the named op's backward pass. Exists so gradient-check
    /// tooling can prove it detects a broken derivative.
    pub fn inject_backward_fault(&self, op_label: &str, delta: f64) {
        self.0.borrow_mut().fault = Some((op_label.to_string(), delta));
    }

    fn push_unchecked(&self, op: Op, value: Tensor, saved: Vec<Tensor>) -> Var {
        let mut inner = self.0.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { op, value, saved });
        Var { tape: self.clone(), id }
    }

    pub(crate) fn push(&self, op: Op, value: Tensor, saved: Vec<Tensor>) -> Result<Var> {
        value.check_finite(op.label())?;
        Ok(self.push_unchecked(op, value, saved))
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub(crate) fn value_of(&self, id: usize) -> Tensor {
        self.0.borrow().nodes[id].value.clone()
    }

    /// Reverse sweep from a scalar loss. Leaves keep their accumulated
    /// gradients; interior gradients are dropped as soon as they are consumed.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if !self.same_tape(&loss.tape) {
            return Err(Error::Numeric("loss belongs to a different tape".into()));
        }
        let inner = self.0.borrow();
        let loss_node = &inner.nodes[loss.id];
        if loss_node.value.numel() != 1 {
            return Err(Error::Numeric(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }

        let n = inner.nodes.len();
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss.id] = Some(Tensor::ones(loss_node.value.shape()));

        for id in (0..=loss.id).rev() {
            let node = &inner.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            let contributions = backward_op(node, &gy, &inner.nodes)?;
            let parents = node.op.parents();
            debug_assert_eq!(contributions.len(), parents.len());
            for (i, (pid, mut delta)) in parents.iter().zip(contributions).enumerate() {
                if let Some((label, eps)) = &inner.fault {
                    if i == 0 && label == node.op.label() {
                        delta.data_mut()[0] += eps;
                    }
                }
                accumulate(&mut grads[*pid], delta);
            }
        }

        let shapes = inner.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gradients for the leaves of one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`. A leaf the loss never touched gets
    /// zeros of its own shape rather than an error.
    pub fn get(&self, v: &Var) -> Tensor {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.id]),
        }
    }

    pub fn take(&mut self, v: &Var) -> Tensor {
        match self.grads[v.id].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.id]),
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        None => *slot = Some(delta),
        Some(g) => {
            debug_assert_eq!(g.shape(), delta.shape());
            for (gi, di) in g.data_mut().iter_mut().zip(delta.data()) {
                *gi += di;
            }
        }
    }
}

enum Bcast {
    Equal,
    LeftScalar,
    RightScalar,
}

fn bcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
    if a.shape() == b.shape() {
        Ok(Bcast::Equal)
    } else if a.is_scalar() {
        Ok(Bcast::LeftScalar)
    } else if b.is_scalar() {
        Ok(Bcast::RightScalar)
    } else {
        Err(Error::shape(op, format!("incompatible shapes {:?} vs {:?}", a.shape(), b.shape())))
    }
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.0.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn scalar_value(&self) -> Result<f64> {
        self.value().item()
    }

    fn pair(&self, other: &Var, op: &'static str) -> Result<()> {
        if self.tape.same_tape(&other.tape) {
            Ok(())
        } else {
            Err(Error::Numeric(format!("{op}: operands recorded on different tapes")))
        }
    }

    fn binary_pointwise(
        &self,
        other: &Var,
        op_label: &'static str,
        make: impl Fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.pair(other, op_label)?;
        let (av, bv) = (self.value(), other.value());
        let out = match bcast(op_label, &av, &bv)? {
            Bcast::Equal => {
                let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
                Tensor::from_raw(av.shape().to_vec(), data)
            }
            Bcast::LeftScalar => {
                let s = av.data()[0];
                let data = bv.data().iter().map(|y| f(s, *y)).collect();
                Tensor::from_raw(bv.shape().to_vec(), data)
            }
            Bcast::RightScalar => {
                let s = bv.data()[0];
                let data = av.data().iter().map(|x| f(*x, s)).collect();
                Tensor::from_raw(av.shape().to_vec(), data)
            }
        };
        self.tape.push(make(self.id, other.id), out, vec![])
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary_pointwise(other, "add", |a, b| Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary_pointwise(other, "sub", |a, b| Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary_pointwise(other, "mul", |a, b| Op::Mul { a, b }, |x, y| x * y)
    }

    pub fn square(&self) -> Result<Var> {
        self.mul(self)
    }

    pub fn scale(&self, c: f64) -> Result<Var> {
        let av = self.value();
        let data = av.data().iter().map(|x| x * c).collect();
        let out = Tensor::from_raw(av.shape().to_vec(), data);
        self.tape.push(Op::Scale { a: self.id, c }, out, vec![])
    }

    /// Add a vector to every row: `[..., C] + [C]`.
    pub fn add_rows(&self, v: &Var) -> Result<Var> {
        self.pair(v, "add_rows")?;
        let (av, vv) = (self.value(), v.value());
        if vv.rank() != 1 || av.rank() < 2 || av.shape().last() != Some(&vv.shape()[0]) {
            return Err(Error::shape(
                "add_rows",
                format!("cannot add {:?} to rows of {:?}", vv.shape(), av.shape()),
            ));
        }
        let c = vv.shape()[0];
        let mut data = av.data().to_vec();
        for (i, x) in data.iter_mut().enumerate() {
            *x += vv.data()[i % c];
        }
        let out = Tensor::from_raw(av.shape().to_vec(), data);
        self.tape.push(Op::AddRows { a: self.id, v: v.id }, out, vec![])
    }

    /// Standard matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.pair(other, "matmul")?;
        let (av, bv) = (self.value(), other.value());
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("cannot multiply {:?} by {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(false, false, m, k, n, 1.0, av.data(), bv.data(), 0.0, &mut out);
        let out = Tensor::from_raw(vec![m, n], out);
        self.tape.push(Op::Matmul { a: self.id, b: other.id }, out, vec![])
    }

    /// `[m,k] x [k] -> [m]`.
    pub fn matvec(&self, x: &Var) -> Result<Var> {
        self.pair(x, "matvec")?;
        let (av, xv) = (self.value(), x.value());
        if av.rank() != 2 || xv.rank() != 1 || av.shape()[1] != xv.shape()[0] {
            return Err(Error::shape(
                "matvec",
                format!("cannot multiply {:?} by {:?}", av.shape(), xv.shape()),
            ));
        }
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let mut out = vec![0.0; m];
        gemm(false, false, m, k, 1, 1.0, av.data(), xv.data(), 0.0, &mut out);
        let out = Tensor::from_raw(vec![m], out);
        self.tape.push(Op::MatVec { a: self.id, x: x.id }, out, vec![])
    }

    pub fn transpose(&self) -> Result<Var> {
        let av = self.value();
        if av.rank() != 2 {
            return Err(Error::shape("transpose", format!("expected rank 2, got {:?}", av.shape())));
        }
        let (m, n) = (av.shape()[0], av.shape()[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = av.data()[i * n + j];
            }
        }
        let out = Tensor::from_raw(vec![n, m], data);
        self.tape.push(Op::Transpose { a: self.id }, out, vec![])
    }

    fn unary(&self, make: impl Fn(usize) -> Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let av = self.value();
        let data = av.data().iter().map(|x| f(*x)).collect();
        let out = Tensor::from_raw(av.shape().to_vec(), data);
        self.tape.push(make(self.id), out, vec![])
    }

    pub fn sigmoid(&self) -> Result<Var> {
        self.unary(|a| Op::Sigmoid { a }, sigmoid_scalar)
    }

    pub fn tanh(&self) -> Result<Var> {
        self.unary(|a| Op::Tanh { a }, f64::tanh)
    }

    pub fn relu(&self) -> Result<Var> {
        self.unary(|a| Op::Relu { a }, |x| x.max(0.0))
    }

    pub fn exp(&self) -> Result<Var> {
        self.unary(|a| Op::Exp { a }, f64::exp)
    }

    /// Softmax over the last dimension, computed with max subtraction.
    pub fn softmax_lastdim(&self) -> Result<Var> {
        let av = self.value();
        let out = softmax_last_raw(&av, false)?;
        self.tape.push(Op::SoftmaxLast { a: self.id }, out, vec![])
    }

    pub fn log_softmax_lastdim(&self) -> Result<Var> {
        let av = self.value();
        let out = softmax_last_raw(&av, true)?;
        self.tape.push(Op::LogSoftmaxLast { a: self.id }, out, vec![])
    }

    pub fn sum(&self) -> Result<Var> {
        let s: f64 = self.value().data().iter().sum();
        self.tape.push(Op::Sum { a: self.id }, Tensor::scalar(s), vec![])
    }

    pub fn mean(&self) -> Result<Var> {
        let v = self.value();
        let s: f64 = v.data().iter().sum();
        let m = s / v.numel() as f64;
        self.tape.push(Op::Mean { a: self.id }, Tensor::scalar(m), vec![])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let out = self.value().reshaped(shape)?;
        self.tape.push(Op::Reshape { a: self.id }, out, vec![])
    }

    /// `[B,T,C] -> [B,C]` at time `t`.
    pub fn slice_time(&self, t: usize) -> Result<Var> {
        let av = self.value();
        if av.rank() != 3 || t >= av.shape()[1] {
            return Err(Error::shape(
                "slice_time",
                format!("cannot take step {} of {:?}", t, av.shape()),
            ));
        }
        let (bsz, steps, c) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let mut data = vec![0.0; bsz * c];
        for b in 0..bsz {
            let src = (b * steps + t) * c;
            data[b * c..(b + 1) * c].copy_from_slice(&av.data()[src..src + c]);
        }
        let out = Tensor::from_raw(vec![bsz, c], data);
        self.tape.push(Op::SliceTime { a: self.id, t }, out, vec![])
    }
}

/// Stack T tensors of `[B,C]` into `[B,T,C]`.
pub fn stack_time(parts: &[Var]) -> Result<Var> {
    let first = parts.first().ok_or_else(|| Error::shape("stack_time", "no parts".to_string()))?;
    let shape = first.shape();
    if shape.len() != 2 {
        return Err(Error::shape("stack_time", format!("expected rank-2 parts, got {:?}", shape)));
    }
    let (bsz, c) = (shape[0], shape[1]);
    let steps = parts.len();
    let mut data = vec![0.0; bsz * steps * c];
    for (t, p) in parts.iter().enumerate() {
        let pv = p.value();
        if pv.shape() != [bsz, c] {
            return Err(Error::shape("stack_time", "ragged part shapes".to_string()));
        }
        for b in 0..bsz {
            let dst = (b * steps + t) * c;
            data[dst..dst + c].copy_from_slice(&pv.data()[b * c..(b + 1) * c]);
        }
    }
    let out = Tensor::from_raw(vec![bsz, steps, c], data);
    let ids = parts.iter().map(|p| p.id).collect();
    first.tape.push(Op::StackTime { parts: ids }, out, vec![])
}

/// Stack n vectors of `[C]` into `[n,C]`.
pub fn stack_rows(parts: &[Var]) -> Result<Var> {
    let first = parts.first().ok_or_else(|| Error::shape("stack_rows", "no parts".to_string()))?;
    let shape = first.shape();
    if shape.len() != 1 {
        return Err(Error::shape("stack_rows", format!("expected rank-1 parts, got {:?}", shape)));
    }
    let c = shape[0];
    let mut data = Vec::with_capacity(parts.len() * c);
    for p in parts {
        let pv = p.value();
        if pv.shape() != [c] {
            return Err(Error::shape("stack_rows", "ragged part shapes".to_string()));
        }
        data.extend_from_slice(pv.data());
    }
    let out = Tensor::from_raw(vec![parts.len(), c], data);
    let ids = parts.iter().map(|p| p.id).collect();
    first.tape.push(Op::StackRows { parts: ids }, out, vec![])
}

/// Per-row convex combination: out[b,:] = sum_i weights[b,i] * experts_i[b,:].
pub fn mix_experts(experts: &[Var], weights: &Var) -> Result<Var> {
    let first =
        experts.first().ok_or_else(|| Error::shape("mix_experts", "no experts".to_string()))?;
    let eshape = first.shape();
    let wv = weights.value();
    let n = experts.len();
    if eshape.len() != 2 || wv.rank() != 2 || wv.shape() != [eshape[0], n] {
        return Err(Error::shape(
            "mix_experts",
            format!("experts {:?} x{} with weights {:?}", eshape, n, wv.shape()),
        ));
    }
    let (bsz, he) = (eshape[0], eshape[1]);
    let mut data = vec![0.0; bsz * he];
    for (i, e) in experts.iter().enumerate() {
        let ev = e.value();
        if ev.shape() != [bsz, he] {
            return Err(Error::shape("mix_experts", "ragged expert shapes".to_string()));
        }
        for b in 0..bsz {
            let w = wv.data()[b * n + i];
            for j in 0..he {
                data[b * he + j] += w * ev.data()[b * he + j];
            }
        }
    }
    let out = Tensor::from_raw(vec![bsz, he], data);
    let ids = experts.iter().map(|e| e.id).collect();
    first.tape.push(Op::MixExperts { experts: ids, weights: weights.id }, out, vec![])
}

/// Left-padded dilated causal convolution. `x` is `[B,T,Cin]` or `[T,Cin]`,
/// `w` is `[k,Cin,Cout]`, `b` is `[Cout]`.
pub fn dilated_conv(x: &Var, w: &Var, b: &Var, dilation: usize) -> Result<Var> {
    let xv = x.value();
    let wv = w.value();
    let bv = b.value();
    let (bsz, t, cin, squeeze) = match xv.rank() {
        3 => (xv.shape()[0], xv.shape()[1], xv.shape()[2], false),
        2 => (1, xv.shape()[0], xv.shape()[1], true),
        _ => {
            return Err(Error::shape(
                "dilated_conv",
                format!("input must be rank 2 or 3, got {:?}", xv.shape()),
            ))
        }
    };
    if wv.rank() != 3 || wv.shape()[1] != cin || bv.rank() != 1 || bv.shape()[0] != wv.shape()[2] {
        return Err(Error::shape(
            "dilated_conv",
            format!("weights {:?} bias {:?} against input {:?}", wv.shape(), bv.shape(), xv.shape()),
        ));
    }
    if dilation < 1 {
        return Err(Error::Config("dilation must be >= 1".into()));
    }
    let cout = wv.shape()[2];
    let data = tcn::conv_forward(xv.data(), bsz, t, cin, wv.data(), wv.shape()[0], cout, bv.data(), dilation);
    let shape = if squeeze { vec![t, cout] } else { vec![bsz, t, cout] };
    let out = Tensor::from_raw(shape, data);
    x.tape.push(Op::DilatedConv { x: x.id, w: w.id, b: b.id, dilation }, out, vec![])
}

/// Batch statistics produced by a train-mode normalization.
pub struct BatchStats {
    pub mean: Tensor,
    pub var: Tensor,
}

/// Train-mode batch norm over all leading axes, per channel (last axis).
/// Returns the batch statistics so the caller can fold them into running
/// buffers.
pub fn batch_norm_train(x: &Var, gamma: &Var, beta: &Var) -> Result<(Var, BatchStats)> {
    let xv = x.value();
    let (c, rows) = bn_dims(&xv, gamma, beta)?;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for r in 0..rows {
        for j in 0..c {
            mean[j] += xv.data()[r * c + j];
        }
    }
    for m in mean.iter_mut() {
        *m /= rows as f64;
    }
    for r in 0..rows {
        for j in 0..c {
            let d = xv.data()[r * c + j] - mean[j];
            var[j] += d * d;
        }
    }
    for v in var.iter_mut() {
        *v /= rows as f64;
    }
    let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + tcn::BN_EPS).sqrt()).collect();
    let out = bn_apply(&xv, &mean, &invstd, &gamma.value(), &beta.value());
    let mean_t = Tensor::new(vec![c], mean)?;
    let var_t = Tensor::new(vec![c], var)?;
    let invstd_t = Tensor::new(vec![c], invstd)?;
    let node = x.tape.push(
        Op::BatchNormTrain { x: x.id, gamma: gamma.id, beta: beta.id },
        Tensor::from_raw(xv.shape().to_vec(), out),
        vec![mean_t.clone(), invstd_t],
    )?;
    Ok((node, BatchStats { mean: mean_t, var: var_t }))
}

/// Eval-mode batch norm consuming running statistics.
pub fn batch_norm_eval(
    x: &Var,
    gamma: &Var,
    beta: &Var,
    running_mean: &Tensor,
    running_var: &Tensor,
) -> Result<Var> {
    let xv = x.value();
    let (c, _rows) = bn_dims(&xv, gamma, beta)?;
    if running_mean.numel() != c || running_var.numel() != c {
        return Err(Error::shape("batch_norm_eval", "running stats do not match channels"));
    }
    let invstd: Vec<f64> = running_var.data().iter().map(|v| 1.0 / (v + tcn::BN_EPS).sqrt()).collect();
    let out = bn_apply(&xv, running_mean.data(), &invstd, &gamma.value(), &beta.value());
    let invstd_t = Tensor::new(vec![c], invstd)?;
    x.tape.push(
        Op::BatchNormEval { x: x.id, gamma: gamma.id, beta: beta.id },
        Tensor::from_raw(xv.shape().to_vec(), out),
        vec![running_mean.clone(), invstd_t],
    )
}

fn bn_dims(xv: &Tensor, gamma: &Var, beta: &Var) -> Result<(usize, usize)> {
    if xv.rank() < 2 {
        return Err(Error::shape("batch_norm", format!("input must be rank >= 2, got {:?}", xv.shape())));
    }
    let c = *xv.shape().last().unwrap();
    let gshape = gamma.shape();
    let bshape = beta.shape();
    if gshape != [c] || bshape != [c] {
        return Err(Error::shape(
            "batch_norm",
            format!("gamma {:?} / beta {:?} against channels {}", gshape, bshape, c),
        ));
    }
    Ok((c, xv.numel() / c))
}

fn bn_apply(xv: &Tensor, mean: &[f64], invstd: &[f64], gamma: &Tensor, beta: &Tensor) -> Vec<f64> {
    let c = mean.len();
    xv.data()
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let j = i % c;
            gamma.data()[j] * (x - mean[j]) * invstd[j] + beta.data()[j]
        })
        .collect()
}

/// Run an LSTM over `xs` (`[B,T,D]` or `[T,D]`), recording one fused node.
/// Returns the full hidden sequence (`[B,T,H]` or `[T,H]`).
pub fn lstm_seq(xs: &Var, p: &crate::lstm::LstmVars) -> Result<Var> {
    crate::lstm::lstm_seq_op(xs, p)
}

fn softmax_last_raw(t: &Tensor, log: bool) -> Result<Tensor> {
    if t.rank() == 0 {
        return Err(Error::shape("softmax", "softmax of a rank-0 scalar is undefined".to_string()));
    }
    let m = *t.shape().last().unwrap();
    let rows = t.numel() / m;
    let mut out = vec![0.0; t.numel()];
    for r in 0..rows {
        let row = &t.data()[r * m..(r + 1) * m];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for v in row {
            denom += (v - mx).exp();
        }
        for (j, v) in row.iter().enumerate() {
            out[r * m + j] = if log { v - mx - denom.ln() } else { (v - mx).exp() / denom };
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

/// Per-node backward: returns one gradient tensor per parent, in parent order.
fn backward_op(node: &Node, gy: &Tensor, nodes: &[Node]) -> Result<Vec<Tensor>> {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    let out = match &node.op {
        Op::Leaf => vec![],
        Op::Add { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            vec![reduce_to(gy, av), reduce_to(gy, bv)]
        }
        Op::Sub { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let neg = scale_tensor(gy, -1.0);
            vec![reduce_to(gy, av), reduce_to(&neg, bv)]
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let da = mul_bcast(gy, bv);
            let db = mul_bcast(gy, av);
            vec![reduce_to(&da, av), reduce_to(&db, bv)]
        }
        Op::Scale { a, c } => {
            let _ = a;
            vec![scale_tensor(gy, *c)]
        }
        Op::AddRows { a, v } => {
            let c = val(*v).numel();
            let mut dv = vec![0.0; c];
            for (i, g) in gy.data().iter().enumerate() {
                dv[i % c] += g;
            }
            let _ = a;
            vec![gy.clone(), Tensor::from_raw(vec![c], dv)]
        }
        Op::Matmul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            let mut da = vec![0.0; m * k];
            let mut db = vec![0.0; k * n];
            gemm(false, true, m, n, k, 1.0, gy.data(), bv.data(), 0.0, &mut da);
            gemm(true, false, k, m, n, 1.0, av.data(), gy.data(), 0.0, &mut db);
            vec![Tensor::from_raw(vec![m, k], da), Tensor::from_raw(vec![k, n], db)]
        }
        Op::MatVec { a, x } => {
            let (av, xv) = (val(*a), val(*x));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let mut da = vec![0.0; m * k];
            let mut dx = vec![0.0; k];
            gemm(false, false, m, 1, k, 1.0, gy.data(), xv.data(), 0.0, &mut da);
            gemm(true, false, k, m, 1, 1.0, av.data(), gy.data(), 0.0, &mut dx);
            vec![Tensor::from_raw(vec![m, k], da), Tensor::from_raw(vec![k], dx)]
        }
        Op::Transpose { a } => {
            let av = val(*a);
            let (m, n) = (av.shape()[0], av.shape()[1]);
            let mut da = vec![0.0; m * n];
            for i in 0..n {
                for j in 0..m {
                    da[j * n + i] = gy.data()[i * m + j];
                }
            }
            vec![Tensor::from_raw(vec![m, n], da)]
        }
        Op::Sigmoid { .. } => {
            let y = &node.value;
            let data = gy.data().iter().zip(y.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
            vec![Tensor::from_raw(y.shape().to_vec(), data)]
        }
        Op::Tanh { .. } => {
            let y = &node.value;
            let data = gy.data().iter().zip(y.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
            vec![Tensor::from_raw(y.shape().to_vec(), data)]
        }
        Op::Relu { a } => {
            let av = val(*a);
            let data = gy.data().iter().zip(av.data()).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
            vec![Tensor::from_raw(av.shape().to_vec(), data)]
        }
        Op::Exp { .. } => {
            let y = &node.value;
            let data = gy.data().iter().zip(y.data()).map(|(g, y)| g * y).collect();
            vec![Tensor::from_raw(y.shape().to_vec(), data)]
        }
        Op::SoftmaxLast { .. } => {
            let y = &node.value;
            let m = *y.shape().last().unwrap();
            let rows = y.numel() / m;
            let mut dx = vec![0.0; y.numel()];
            for r in 0..rows {
                let ys = &y.data()[r * m..(r + 1) * m];
                let gs = &gy.data()[r * m..(r + 1) * m];
                let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                for j in 0..m {
                    dx[r * m + j] = ys[j] * (gs[j] - dot);
                }
            }
            vec![Tensor::from_raw(y.shape().to_vec(), dx)]
        }
        Op::LogSoftmaxLast { .. } => {
            let y = &node.value;
            let m = *y.shape().last().unwrap();
            let rows = y.numel() / m;
            let mut dx = vec![0.0; y.numel()];
            for r in 0..rows {
                let ys = &y.data()[r * m..(r + 1) * m];
                let gs = &gy.data()[r * m..(r + 1) * m];
                let gsum: f64 = gs.iter().sum();
                for j in 0..m {
                    dx[r * m + j] = gs[j] - ys[j].exp() * gsum;
                }
            }
            vec![Tensor::from_raw(y.shape().to_vec(), dx)]
        }
        Op::Sum { a } => {
            let av = val(*a);
            vec![Tensor::filled(av.shape(), gy.data()[0])]
        }
        Op::Mean { a } => {
            let av = val(*a);
            vec![Tensor::filled(av.shape(), gy.data()[0] / av.numel() as f64)]
        }
        Op::Reshape { a } => {
            let av = val(*a);
            vec![gy.reshaped(av.shape())?]
        }
        Op::SliceTime { a, t } => {
            let av = val(*a);
            let (bsz, steps, c) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let mut da = vec![0.0; av.numel()];
            for b in 0..bsz {
                let dst = (b * steps + t) * c;
                da[dst..dst + c].copy_from_slice(&gy.data()[b * c..(b + 1) * c]);
            }
            vec![Tensor::from_raw(av.shape().to_vec(), da)]
        }
        Op::StackTime { parts } => {
            let (bsz, steps, c) = (node.value.shape()[0], node.value.shape()[1], node.value.shape()[2]);
            let mut out = Vec::with_capacity(parts.len());
            for t in 0..steps {
                let mut d = vec![0.0; bsz * c];
                for b in 0..bsz {
                    let src = (b * steps + t) * c;
                    d[b * c..(b + 1) * c].copy_from_slice(&gy.data()[src..src + c]);
                }
                out.push(Tensor::from_raw(vec![bsz, c], d));
            }
            out
        }
        Op::StackRows { parts } => {
            let c = node.value.shape()[1];
            (0..parts.len())
                .map(|i| Tensor::from_raw(vec![c], gy.data()[i * c..(i + 1) * c].to_vec()))
                .collect()
        }
        Op::MixExperts { experts, weights } => {
            let wv = val(*weights);
            let n = experts.len();
            let (bsz, he) = (node.value.shape()[0], node.value.shape()[1]);
            let mut out = Vec::with_capacity(n + 1);
            let mut dw = vec![0.0; bsz * n];
            for (i, eid) in experts.iter().enumerate() {
                let ev = val(*eid);
                let mut de = vec![0.0; bsz * he];
                for b in 0..bsz {
                    let w = wv.data()[b * n + i];
                    let mut acc = 0.0;
                    for j in 0..he {
                        de[b * he + j] = w * gy.data()[b * he + j];
                        acc += gy.data()[b * he + j] * ev.data()[b * he + j];
                    }
                    dw[b * n + i] = acc;
                }
                out.push(Tensor::from_raw(vec![bsz, he], de));
            }
            out.push(Tensor::from_raw(vec![bsz, n], dw));
            out
        }
        Op::DilatedConv { x, w, b, dilation } => {
            let xv = val(*x);
            let wv = val(*w);
            let (bsz, t, cin) = match xv.rank() {
                3 => (xv.shape()[0], xv.shape()[1], xv.shape()[2]),
                _ => (1, xv.shape()[0], xv.shape()[1]),
            };
            let (k, cout) = (wv.shape()[0], wv.shape()[2]);
            let (dx, dw, db) =
                tcn::conv_backward(gy.data(), xv.data(), wv.data(), bsz, t, cin, k, cout, *dilation);
            let _ = b;
            vec![
                Tensor::from_raw(xv.shape().to_vec(), dx),
                Tensor::from_raw(vec![k, cin, cout], dw),
                Tensor::from_raw(vec![cout], db),
            ]
        }
        Op::BatchNormTrain { x, gamma, .. } => {
            let xv = val(*x);
            let gv = val(*gamma);
            let mean = &node.saved[0];
            let invstd = &node.saved[1];
            let (dx, dgamma, dbeta) =
                tcn::bn_backward_train(gy.data(), xv.data(), gv.data(), mean.data(), invstd.data());
            let c = mean.numel();
            vec![
                Tensor::from_raw(xv.shape().to_vec(), dx),
                Tensor::from_raw(vec![c], dgamma),
                Tensor::from_raw(vec![c], dbeta),
            ]
        }
        Op::BatchNormEval { x, gamma, .. } => {
            let xv = val(*x);
            let gv = val(*gamma);
            let mean = &node.saved[0];
            let invstd = &node.saved[1];
            let (dx, dgamma, dbeta) =
                tcn::bn_backward_eval(gy.data(), xv.data(), gv.data(), mean.data(), invstd.data());
            let c = mean.numel();
            vec![
                Tensor::from_raw(xv.shape().to_vec(), dx),
                Tensor::from_raw(vec![c], dgamma),
                Tensor::from_raw(vec![c], dbeta),
            ]
        }
        Op::LstmSeq { parents } => lstm::lstm_seq_backward(node, gy, parents, nodes)?,
    };
    Ok(out)
}

fn scale_tensor(t: &Tensor, c: f64) -> Tensor {
    let data = t.data().iter().map(|v| v * c).collect();
    Tensor::from_raw(t.shape().to_vec(), data)
}

/// Elementwise product where either side may be scalar.
fn mul_bcast(a: &Tensor, b: &Tensor) -> Tensor {
    if b.is_scalar() {
        scale_tensor(a, b.data()[0])
    } else if a.is_scalar() {
        scale_tensor(b, a.data()[0])
    } else {
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        Tensor::from_raw(a.shape().to_vec(), data)
    }
}

/// Sum `g` down to the shape of `target` (identity, or total for a scalar).
fn reduce_to(g: &Tensor, target: &Tensor) -> Tensor {
    if g.shape() == target.shape() {
        g.clone()
    } else {
        debug_assert!(target.is_scalar());
        let s: f64 = g.data().iter().sum();
        let mut z = Tensor::zeros(target.shape());
        z.data_mut()[0] = s;
        z
    }
}
