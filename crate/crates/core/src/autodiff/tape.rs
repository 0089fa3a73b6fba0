//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward op computes its value eagerly and, when at least one input
//! requires a gradient, appends a record to the tape. `backward` walks the
//! records in reverse and applies each op's local vector-Jacobian product.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;
use crate::tensor::{matmul_into, matmul_nt_acc, matmul_tn_acc, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Local backward rule for [`Tape::custom`]: `(input, output, grad_output) -> grad_input`.
pub type CustomBackward = Box<dyn Fn(&Tensor, &Tensor, &Tensor) -> Tensor>;

/// The primitive op kinds exposed through [`Tape::apply`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Subtract,
    Multiply,
    MatMul,
    ConcatLast,
    Sigmoid,
    Tanh,
    SoftmaxLast,
    Relu,
    Dropout(f64),
    Scale(f64),
    Sum,
    Mean,
}

impl Primitive {
    pub const ALL: [Primitive; 13] = [
        Primitive::Add,
        Primitive::Subtract,
        Primitive::Multiply,
        Primitive::MatMul,
        Primitive::ConcatLast,
        Primitive::Sigmoid,
        Primitive::Tanh,
        Primitive::SoftmaxLast,
        Primitive::Relu,
        Primitive::Dropout(0.1),
        Primitive::Scale(0.5),
        Primitive::Sum,
        Primitive::Mean,
    ];

    pub fn arity(self) -> Option<usize> {
        match self {
            Primitive::Add | Primitive::Subtract | Primitive::Multiply | Primitive::MatMul => {
                Some(2)
            }
            Primitive::ConcatLast => None,
            _ => Some(1),
        }
    }
}

enum Op {
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MatMul(Var, Var),
    ConcatLast(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LogSigmoid(Var),
    SoftmaxLast(Var),
    Dropout(Var, Vec<f64>),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    SpMM(Arc<CsrMatrix>, Var),
    TimeEncode {
        omega: Var,
        times: Vec<f64>,
    },
    Attention {
        query: Var,
        keys: Var,
        values: Var,
        mask: Vec<bool>,
        scale: f64,
        weights: Vec<f64>,
    },
    Custom(Var, CustomBackward),
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulCol(..) => "mul_col",
            Op::MatMul(..) => "matmul",
            Op::ConcatLast(..) => "concat_last",
            Op::ConcatRows(..) => "concat_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::Transpose(..) => "transpose",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::LogSigmoid(..) => "log_sigmoid",
            Op::SoftmaxLast(..) => "softmax_last",
            Op::Dropout(..) => "dropout",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumLast(..) => "sum_last",
            Op::SpMM(..) => "spmm",
            Op::TimeEncode { .. } => "time_encode",
            Op::Attention { .. } => "attention",
            Op::Custom(..) => "custom",
        };
        f.write_str(name)
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
}

/// Records differentiable computations for one forward/backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<(Op, Var)>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
    training: bool,
    rng: ChaCha8Rng,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("values", &self.nodes.len())
            .field("recorded", &self.ops.len())
            .field("training", &self.training)
            .finish()
    }
}

impl Tape {
    /// Gradient-enabled tape in evaluation mode (dropout inactive).
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Gradient-enabled tape with dropout active, driven by `seed`.
    pub fn training(seed: u64) -> Self {
        Tape {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Tape::new()
        }
    }

    /// Tape on which parameters do not require gradients; nothing is recorded
    /// unless a caller explicitly creates a gradient-requiring leaf.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Number of recorded (differentiable) ops.
    pub fn recorded(&self) -> usize {
        self.ops.len()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf for a stored parameter; repeated calls return the same handle.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone(), self.grad_enabled);
        self.params.insert(id, v);
        v
    }

    fn push(&mut self, name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let out = self.leaf(value, requires_grad);
        if requires_grad {
            self.ops.push((op, out));
        }
        Ok(out)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    /// Dispatches a primitive by kind.
    pub fn apply(&mut self, kind: Primitive, inputs: &[Var]) -> Result<Var> {
        if let Some(n) = kind.arity() {
            if inputs.len() != n {
                return Err(Error::shape(
                    "apply",
                    format!("{kind:?} takes {n} inputs, got {}", inputs.len()),
                ));
            }
        }
        match kind {
            Primitive::Add => self.add(inputs[0], inputs[1]),
            Primitive::Subtract => self.sub(inputs[0], inputs[1]),
            Primitive::Multiply => self.mul(inputs[0], inputs[1]),
            Primitive::MatMul => self.matmul(inputs[0], inputs[1]),
            Primitive::ConcatLast => self.concat_last(inputs),
            Primitive::Sigmoid => self.sigmoid(inputs[0]),
            Primitive::Tanh => self.tanh(inputs[0]),
            Primitive::SoftmaxLast => self.softmax_last(inputs[0]),
            Primitive::Relu => self.relu(inputs[0]),
            Primitive::Dropout(p) => self.dropout(inputs[0], p),
            Primitive::Scale(c) => self.scale(inputs[0], c),
            Primitive::Sum => self.sum(inputs[0]),
            Primitive::Mean => self.mean(inputs[0]),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        self.push("add", value, &[a, b], Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("subtract", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        self.push("subtract", value, &[a, b], Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("multiply", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        self.push("multiply", value, &[a, b], Op::Mul(a, b))
    }

    /// `x[r, c] + bias[c]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.cols();
        if tb.numel() != c {
            return Err(Error::shape(
                "add_row",
                format!("bias of {} values for width {c}", tb.numel()),
            ));
        }
        let mut value = tx.clone();
        if c > 0 {
            for row in value.data_mut().chunks_mut(c) {
                for (v, b) in row.iter_mut().zip(tb.data()) {
                    *v += b;
                }
            }
        }
        self.push("add_row", value, &[x, bias], Op::AddRow(x, bias))
    }

    /// `x[r, c] * scale[r]`, one factor per row.
    pub fn mul_col(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(scale));
        if ts.numel() != tx.rows() {
            return Err(Error::shape(
                "mul_col",
                format!("{} factors for {} rows", ts.numel(), tx.rows()),
            ));
        }
        let c = tx.cols();
        let mut value = tx.clone();
        if c > 0 {
            for (row, s) in value.data_mut().chunks_mut(c).zip(ts.data()) {
                row.iter_mut().for_each(|v| *v *= s);
            }
        }
        self.push("mul_col", value, &[x, scale], Op::MulCol(x, scale))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::matrix(m, n, out)?;
        self.push("matmul", value, &[a, b], Op::MatMul(a, b))
    }

    /// Concatenates along the last axis; all inputs need the same row count.
    pub fn concat_last(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::shape("concat_last", "no inputs"));
        }
        let rows = self.value(inputs[0]).rows();
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let t = self.value(v);
            if t.rows() != rows {
                return Err(Error::shape(
                    "concat_last",
                    format!("row counts {rows} vs {}", t.rows()),
                ));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &v in inputs {
                data.extend_from_slice(self.value(v).row(r));
            }
        }
        let value = Tensor::matrix(rows, total, data)?;
        self.push("concat_last", value, inputs, Op::ConcatLast(inputs.to_vec()))
    }

    /// Stacks inputs vertically; all inputs need the same width.
    pub fn concat_rows(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs"));
        }
        let cols = self.value(inputs[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &v in inputs {
            let t = self.value(v);
            if t.cols() != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("widths {cols} vs {}", t.cols()),
                ));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::matrix(rows, cols, data)?;
        self.push("concat_rows", value, inputs, Op::ConcatRows(inputs.to_vec()))
    }

    /// Matrix transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(Error::shape("transpose", format!("{:?} is not a matrix", t.shape())));
        }
        let value = transposed(t);
        self.push("transpose", value, &[x], Op::Transpose(x))
    }

    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let rows = t.rows();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} of {rows}"),
            ));
        }
        let mut data = Vec::with_capacity(indices.len() * t.cols());
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::matrix(indices.len(), t.cols(), data)?;
        self.push("gather_rows", value, &[x], Op::GatherRows(x, indices.to_vec()))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid);
        self.push("sigmoid", value, &[x], Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::tanh);
        self.push("tanh", value, &[x], Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push("relu", value, &[x], Op::Relu(x))
    }

    /// Numerically stable `ln(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(log_sigmoid);
        self.push("log_sigmoid", value, &[x], Op::LogSigmoid(x))
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        let mut value = t.clone();
        if c > 0 {
            for row in value.data_mut().chunks_mut(c) {
                softmax_in_place(row);
            }
        }
        self.push("softmax_last", value, &[x], Op::SoftmaxLast(x))
    }

    /// Inverted dropout. The identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::shape("dropout", format!("probability {p} outside [0, 1)")));
        }
        if !self.training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push("dropout", value, &[x], Op::Dropout(x, mask))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.push("scale", value, &[x], Op::Scale(x, c))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push("sum", value, &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        self.push("mean", value, &[x], Op::Mean(x))
    }

    /// Row sums: `[r, c] -> [r, 1]`.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        let data = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect::<Vec<f64>>();
        let value = Tensor::matrix(data.len(), 1, data)?;
        let _ = c;
        self.push("sum_last", value, &[x], Op::SumLast(x))
    }

    /// Constant sparse matrix times a dense matrix.
    pub fn spmm(&mut self, a: Arc<CsrMatrix>, x: Var) -> Result<Var> {
        let t = self.value(x);
        if a.cols() != t.rows() {
            return Err(Error::shape(
                "spmm",
                format!("{}x{} times {:?}", a.rows(), a.cols(), t.shape()),
            ));
        }
        let width = t.cols();
        let value = Tensor::matrix(a.rows(), width, a.mul_dense(t.data(), width))?;
        self.push("spmm", value, &[x], Op::SpMM(a, x))
    }

    /// Harmonic time encoding: one row per time,
    /// `[cos(w_1 t), sin(w_1 t), ..., cos(w_n t), sin(w_n t)] / sqrt(n)`.
    pub fn time_encode(&mut self, omega: Var, times: &[f64]) -> Result<Var> {
        if let Some(bad) = times.iter().find(|t| !t.is_finite()) {
            return Err(Error::Data(format!("non-finite time {bad} passed to time encoding")));
        }
        let w = self.value(omega).data().to_vec();
        let half = w.len();
        if half == 0 {
            return Err(Error::shape("time_encode", "no frequencies"));
        }
        let norm = 1.0 / (half as f64).sqrt();
        let mut data = Vec::with_capacity(times.len() * 2 * half);
        for &t in times {
            for &wj in &w {
                let (s, c) = (wj * t).sin_cos();
                data.push(norm * c);
                data.push(norm * s);
            }
        }
        let value = Tensor::matrix(times.len(), 2 * half, data)?;
        self.push(
            "time_encode",
            value,
            &[omega],
            Op::TimeEncode {
                omega,
                times: times.to_vec(),
            },
        )
    }

    /// Batched masked scaled-dot-product attention.
    ///
    /// `query` is `[n, dk]`; `keys`/`values` hold `per_query` consecutive rows
    /// for each query. Masked rows get zero weight and a query with every row
    /// masked yields a zero output row.
    pub fn attention(
        &mut self,
        query: Var,
        keys: Var,
        values: Var,
        mask: &[bool],
        scale: f64,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(query), self.value(keys), self.value(values));
        let n = tq.rows();
        let dk = tq.cols();
        let dv = tv.cols();
        if tk.cols() != dk || tk.rows() != tv.rows() || mask.len() != tk.rows() {
            return Err(Error::shape(
                "attention",
                format!(
                    "q {:?}, k {:?}, v {:?}, mask {}",
                    tq.shape(),
                    tk.shape(),
                    tv.shape(),
                    mask.len()
                ),
            ));
        }
        if n == 0 || tk.rows() % n != 0 {
            return Err(Error::shape(
                "attention",
                format!("{} key rows for {n} queries", tk.rows()),
            ));
        }
        let per = tk.rows() / n;
        let mut weights = vec![0.0; n * per];
        let mut out = vec![0.0; n * dv];
        for i in 0..n {
            let q = tq.row(i);
            let w = &mut weights[i * per..(i + 1) * per];
            let mut max = f64::NEG_INFINITY;
            for j in 0..per {
                if mask[i * per + j] {
                    let s = scale * dot(q, tk.row(i * per + j));
                    w[j] = s;
                    max = max.max(s);
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for j in 0..per {
                if mask[i * per + j] {
                    w[j] = (w[j] - max).exp();
                    total += w[j];
                } else {
                    w[j] = 0.0;
                }
            }
            let o = &mut out[i * dv..(i + 1) * dv];
            for (j, wj) in w.iter_mut().enumerate().take(per) {
                *wj /= total;
                if *wj != 0.0 {
                    for (ov, vv) in o.iter_mut().zip(tv.row(i * per + j)) {
                        *ov += *wj * vv;
                    }
                }
            }
        }
        let value = Tensor::matrix(n, dv, out)?;
        self.push(
            "attention",
            value,
            &[query, keys, values],
            Op::Attention {
                query,
                keys,
                values,
                mask: mask.to_vec(),
                scale,
                weights,
            },
        )
    }

    /// Saved attention weights of an attention output, `per_query` per row.
    pub fn attention_weights(&self, out: Var) -> Option<&[f64]> {
        self.ops.iter().find_map(|(op, o)| match op {
            Op::Attention { weights, .. } if *o == out => Some(weights.as_slice()),
            _ => None,
        })
    }

    /// Unary op with a caller-supplied value and backward rule.
    pub fn custom(&mut self, x: Var, value: Tensor, backward: CustomBackward) -> Result<Var> {
        self.push("custom", value, &[x], Op::Custom(x, backward))
    }

    /// Runs reverse accumulation from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::NotScalar(loss_value.shape().to_vec()));
        }
        let Tape {
            nodes, ops, params, ..
        } = self;
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(nodes[loss.0].value.shape(), 1.0));
        let mut rules_applied = 0;
        for (op, out) in ops.into_iter().rev() {
            rules_applied += 1;
            let Some(g) = grads[out.0].take() else {
                continue;
            };
            let mut acc = Accumulator {
                nodes: &nodes,
                grads: &mut grads,
            };
            apply_backward(&op, &nodes[out.0].value, &g, &mut acc);
            // keep gradients of leaves the caller may ask for
            if out == loss {
                grads[out.0] = Some(g);
            }
        }
        let mut params: Vec<(ParamId, Var)> = params.into_iter().collect();
        params.sort_by_key(|(id, _)| *id);
        Ok(Gradients {
            grads,
            params,
            rules_applied,
        })
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
    rules_applied: usize,
}

impl Gradients {
    /// Gradient for a leaf, `None` when no path reached it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Number of backward rules executed (one per recorded op).
    pub fn rules_applied(&self) -> usize {
        self.rules_applied
    }

    /// Parameter gradients, in parameter-id order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor>)> + '_ {
        self.params.iter().map(|&(id, v)| (id, self.wrt(v)))
    }
}

struct Accumulator<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Tensor>],
}

impl Accumulator<'_> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn slot(&mut self, v: Var) -> &mut Tensor {
        let shape = self.nodes[v.0].value.shape();
        self.grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
    }

    fn add(&mut self, v: Var, g: Tensor) {
        if !self.wants(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(g.reshape(shape).expect("gradient shape"));
            }
        }
    }

    fn add_with(&mut self, v: Var, f: impl FnOnce(&[Node], &mut Tensor)) {
        if !self.wants(v) {
            return;
        }
        let nodes = self.nodes;
        let slot = self.slot(v);
        f(nodes, slot);
    }
}

fn apply_backward(op: &Op, out: &Tensor, g: &Tensor, acc: &mut Accumulator<'_>) {
    match op {
        Op::Add(a, b) => {
            acc.add(*a, g.clone());
            acc.add(*b, g.clone());
        }
        Op::Sub(a, b) => {
            acc.add(*a, g.clone());
            acc.add(*b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (acc.value(*a).clone(), acc.value(*b).clone());
            acc.add(*a, elementwise(g, &vb, |x, y| x * y));
            acc.add(*b, elementwise(g, &va, |x, y| x * y));
        }
        Op::AddRow(x, bias) => {
            acc.add(*x, g.clone());
            acc.add_with(*bias, |_, slot| {
                let c = g.cols();
                if c > 0 {
                    for row in g.data().chunks(c) {
                        for (s, v) in slot.data_mut().iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                }
            });
        }
        Op::MulCol(x, scale) => {
            let c = g.cols();
            let vs = acc.value(*scale).clone();
            let vx = acc.value(*x).clone();
            acc.add_with(*x, |_, slot| {
                if c > 0 {
                    for ((srow, grow), s) in slot
                        .data_mut()
                        .chunks_mut(c)
                        .zip(g.data().chunks(c))
                        .zip(vs.data())
                    {
                        for (o, gv) in srow.iter_mut().zip(grow) {
                            *o += gv * s;
                        }
                    }
                }
            });
            acc.add_with(*scale, |_, slot| {
                if c > 0 {
                    for (r, s) in slot.data_mut().iter_mut().enumerate() {
                        *s += dot(g.row(r), vx.row(r));
                    }
                }
            });
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (acc.value(*a).clone(), acc.value(*b).clone());
            let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
            acc.add_with(*a, |_, slot| {
                matmul_nt_acc(g.data(), tb.data(), slot.data_mut(), m, k, n)
            });
            acc.add_with(*b, |_, slot| {
                matmul_tn_acc(ta.data(), g.data(), slot.data_mut(), m, k, n)
            });
        }
        Op::ConcatLast(inputs) => {
            let total = g.cols();
            let mut offset = 0;
            for &v in inputs {
                let w = acc.value(v).cols();
                acc.add_with(v, |_, slot| {
                    for r in 0..g.rows() {
                        let src = &g.data()[r * total + offset..r * total + offset + w];
                        for (s, x) in slot.data_mut()[r * w..(r + 1) * w].iter_mut().zip(src) {
                            *s += x;
                        }
                    }
                });
                offset += w;
            }
        }
        Op::ConcatRows(inputs) => {
            let mut offset = 0;
            for &v in inputs {
                let n = acc.value(v).numel();
                acc.add_with(v, |_, slot| {
                    for (s, x) in slot.data_mut().iter_mut().zip(&g.data()[offset..offset + n]) {
                        *s += x;
                    }
                });
                offset += n;
            }
        }
        Op::GatherRows(x, indices) => {
            let c = g.cols();
            acc.add_with(*x, |_, slot| {
                for (r, &i) in indices.iter().enumerate() {
                    for (s, v) in slot.data_mut()[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(&g.data()[r * c..(r + 1) * c])
                    {
                        *s += v;
                    }
                }
            });
        }
        Op::Transpose(x) => acc.add(*x, transposed(g)),
        Op::Sigmoid(x) => acc.add(*x, elementwise(g, out, |gv, y| gv * y * (1.0 - y))),
        Op::Tanh(x) => acc.add(*x, elementwise(g, out, |gv, y| gv * (1.0 - y * y))),
        Op::Relu(x) => {
            let vx = acc.value(*x).clone();
            acc.add(*x, elementwise(g, &vx, |gv, v| if v > 0.0 { gv } else { 0.0 }));
        }
        Op::LogSigmoid(x) => {
            let vx = acc.value(*x).clone();
            acc.add(*x, elementwise(g, &vx, |gv, v| gv * sigmoid(-v)));
        }
        Op::SoftmaxLast(x) => {
            let c = out.cols();
            let mut dx = Tensor::zeros(out.shape());
            if c > 0 {
                for ((d, y), gr) in dx
                    .data_mut()
                    .chunks_mut(c)
                    .zip(out.data().chunks(c))
                    .zip(g.data().chunks(c))
                {
                    let inner = dot(y, gr);
                    for j in 0..c {
                        d[j] = y[j] * (gr[j] - inner);
                    }
                }
            }
            acc.add(*x, dx);
        }
        Op::Dropout(x, mask) => {
            let data = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
            acc.add(*x, Tensor::new(g.shape().to_vec(), data).expect("shape"));
        }
        Op::Scale(x, c) => acc.add(*x, g.map(|v| v * c)),
        Op::Sum(x) => {
            let shape = acc.value(*x).shape().to_vec();
            acc.add(*x, Tensor::filled(&shape, g.item()));
        }
        Op::Mean(x) => {
            let t = acc.value(*x);
            let shape = t.shape().to_vec();
            let n = t.numel() as f64;
            acc.add(*x, Tensor::filled(&shape, g.item() / n));
        }
        Op::SumLast(x) => {
            let c = acc.value(*x).cols();
            acc.add_with(*x, |_, slot| {
                if c > 0 {
                    for (row, gv) in slot.data_mut().chunks_mut(c).zip(g.data()) {
                        row.iter_mut().for_each(|s| *s += gv);
                    }
                }
            });
        }
        Op::SpMM(a, x) => {
            let width = g.cols();
            acc.add_with(*x, |_, slot| a.mul_transpose_acc(g.data(), width, slot.data_mut()));
        }
        Op::TimeEncode { omega, times } => {
            let half = acc.value(*omega).numel();
            acc.add_with(*omega, |_, slot| {
                let s = slot.data_mut();
                for (r, &t) in times.iter().enumerate() {
                    let base = r * 2 * half;
                    for (j, sj) in s.iter_mut().enumerate().take(half) {
                        let (c_val, s_val) = (out.data()[base + 2 * j], out.data()[base + 2 * j + 1]);
                        let (g_c, g_s) = (g.data()[base + 2 * j], g.data()[base + 2 * j + 1]);
                        *sj += t * (g_s * c_val - g_c * s_val);
                    }
                }
            });
        }
        Op::Attention {
            query,
            keys,
            values,
            mask,
            scale,
            weights,
        } => attention_backward(acc, g, *query, *keys, *values, mask, *scale, weights),
        Op::Custom(x, backward) => {
            let grad = backward(acc.value(*x), out, g);
            acc.add(*x, grad);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    acc: &mut Accumulator<'_>,
    g: &Tensor,
    query: Var,
    keys: Var,
    values: Var,
    mask: &[bool],
    scale: f64,
    weights: &[f64],
) {
    let tq = acc.value(query).clone();
    let tk = acc.value(keys).clone();
    let tv = acc.value(values).clone();
    let n = tq.rows();
    let per = tk.rows() / n;
    let (dk, dv) = (tq.cols(), tv.cols());
    let mut dq = vec![0.0; n * dk];
    let mut dkeys = vec![0.0; tk.numel()];
    let mut dvals = vec![0.0; tv.numel()];
    let mut dscore = vec![0.0; per];
    for i in 0..n {
        let gi = g.row(i);
        let w = &weights[i * per..(i + 1) * per];
        let mut inner = 0.0;
        for j in 0..per {
            let row = i * per + j;
            if !mask[row] {
                dscore[j] = 0.0;
                continue;
            }
            let da = dot(gi, tv.row(row));
            dscore[j] = da;
            inner += w[j] * da;
            for (d, gv) in dvals[row * dv..(row + 1) * dv].iter_mut().zip(gi) {
                *d += w[j] * gv;
            }
        }
        let qi = tq.row(i);
        for j in 0..per {
            let row = i * per + j;
            if !mask[row] {
                continue;
            }
            let ds = scale * w[j] * (dscore[j] - inner);
            if ds == 0.0 {
                continue;
            }
            for (d, kv) in dq[i * dk..(i + 1) * dk].iter_mut().zip(tk.row(row)) {
                *d += ds * kv;
            }
            for (d, qv) in dkeys[row * dk..(row + 1) * dk].iter_mut().zip(qi) {
                *d += ds * qv;
            }
        }
    }
    acc.add(query, Tensor::new(tq.shape().to_vec(), dq).expect("shape"));
    acc.add(keys, Tensor::new(tk.shape().to_vec(), dkeys).expect("shape"));
    acc.add(values, Tensor::new(tv.shape().to_vec(), dvals).expect("shape"));
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(b.shape().to_vec(), data).expect("shape")
}

fn transposed(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::matrix(c, r, data).expect("transposed shape")
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
