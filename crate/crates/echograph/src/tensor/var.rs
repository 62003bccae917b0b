//! Computation-graph nodes and the reverse-mode backward pass.
//!
//! A [`Var`] owns its forward value plus references to the input nodes and a
//! backward rule. Calling [`Var::backward`] on a scalar loss walks the graph
//! in reverse topological order and accumulates gradients; gradients of
//! parameter leaves are added into their persistent [`Param`] storage.
//!
//! Every kernel uses a fixed sequential reduction order so repeated runs are
//! bit-identical.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Persistent tensor slot for trainable weights and stateful buffers
/// (batch-norm running statistics). Trainable params receive gradient
/// accumulation during [`Var::backward`].
pub struct Param {
    name: String,
    trainable: bool,
    value: RefCell<Tensor>,
    grad: RefCell<Tensor>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor, trainable: bool) -> Rc<Param> {
        let grad = Tensor::zeros(value.shape());
        Rc::new(Param {
            name: name.into(),
            trainable,
            value: RefCell::new(value),
            grad: RefCell::new(grad),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn value(&self) -> Ref<'_, Tensor> {
        self.value.borrow()
    }

    pub fn set_value(&self, value: Tensor) {
        assert_eq!(
            value.shape(),
            self.value.borrow().shape(),
            "param {} shape change",
            self.name
        );
        *self.value.borrow_mut() = value;
    }

    pub fn grad(&self) -> Ref<'_, Tensor> {
        self.grad.borrow()
    }

    pub fn numel(&self) -> usize {
        self.value.borrow().numel()
    }

    /// Resets the accumulated gradient to exact zeros.
    pub fn zero_grad(&self) {
        let shape = self.value.borrow().shape().to_vec();
        *self.grad.borrow_mut() = Tensor::zeros(&shape);
    }

    /// In-place mutation of the stored value (optimizer updates, finite
    /// difference probes).
    pub fn update_value(&self, f: impl FnOnce(&mut Tensor)) {
        f(&mut self.value.borrow_mut());
    }

    fn accumulate_grad(&self, g: &Tensor) {
        self.grad.borrow_mut().add_assign(g);
    }
}

/// Context handed to backward rules.
pub(crate) struct BackCtx<'a> {
    pub inputs: &'a [Var],
    pub output: &'a Tensor,
    /// Which inputs actually need a gradient; rules may skip the rest.
    pub need: &'a [bool],
}

impl BackCtx<'_> {
    pub fn input_value(&self, i: usize) -> &Tensor {
        self.inputs[i].value()
    }
}

type BackwardFn = Box<dyn Fn(&Tensor, &BackCtx) -> Result<Vec<Option<Tensor>>>>;

struct Inner {
    id: u64,
    op: &'static str,
    value: Tensor,
    inputs: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    grad: RefCell<Option<Tensor>>,
    param: Option<Rc<Param>>,
    back_done: Cell<bool>,
}

/// Handle to a node of the computation graph.
#[derive(Clone)]
pub struct Var(Rc<Inner>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("op", &self.0.op)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    /// Graph leaf with no gradient (inputs, targets, constants).
    pub fn constant(value: Tensor) -> Var {
        Var(Rc::new(Inner {
            id: fresh_id(),
            op: "const",
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad: false,
            grad: RefCell::new(None),
            param: None,
            back_done: Cell::new(false),
        }))
    }

    /// Graph leaf bound to a parameter; reads the current value and routes
    /// gradient accumulation back into the param.
    pub fn param(p: &Rc<Param>) -> Var {
        Var(Rc::new(Inner {
            id: fresh_id(),
            op: "param",
            value: p.value().clone(),
            inputs: Vec::new(),
            backward: None,
            requires_grad: p.trainable(),
            grad: RefCell::new(None),
            param: Some(Rc::clone(p)),
            back_done: Cell::new(false),
        }))
    }

    pub(crate) fn from_parts(
        op: &'static str,
        value: Tensor,
        inputs: Vec<Var>,
        backward: BackwardFn,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| v.0.requires_grad);
        Var(Rc::new(Inner {
            id: fresh_id(),
            op,
            value,
            inputs,
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
            grad: RefCell::new(None),
            param: None,
            back_done: Cell::new(false),
        }))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn op_name(&self) -> &'static str {
        self.0.op
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Gradient accumulated on this node by the last backward pass.
    pub fn grad(&self) -> Option<Tensor> {
        self.0.grad.borrow().clone()
    }

    /// Reverse-mode pass from a scalar loss. Populates the `grad` of every
    /// ancestor node that requires gradients and accumulates into parameter
    /// leaves. A second call on the same loss is rejected; rebuild the graph
    /// (and zero param grads) for the next step.
    pub fn backward(&self) -> Result<()> {
        if !self.0.value.is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.0.value.shape()
            )));
        }
        if self.0.back_done.get() {
            return Err(Error::contract(
                "backward already ran on this loss; rebuild the graph before calling again",
            ));
        }
        self.0.back_done.set(true);

        let order = self.topo_order();
        *self.0.grad.borrow_mut() = Some(Tensor::scalar(1.0));

        for node in order.iter().rev() {
            let grad_out = match node.0.grad.borrow().clone() {
                Some(g) => g,
                None => continue,
            };
            if let Some(p) = &node.0.param {
                p.accumulate_grad(&grad_out);
            }
            let Some(rule) = &node.0.backward else {
                continue;
            };
            let need: Vec<bool> = node.0.inputs.iter().map(|v| v.0.requires_grad).collect();
            let ctx = BackCtx {
                inputs: &node.0.inputs,
                output: &node.0.value,
                need: &need,
            };
            let input_grads = rule(&grad_out, &ctx)?;
            debug_assert_eq!(input_grads.len(), node.0.inputs.len());
            for (input, g) in node.0.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !input.0.requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), input.0.value.shape(), "grad shape ({})", node.0.op);
                let mut slot = input.0.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Post-order over ancestors that participate in gradient flow.
    fn topo_order(&self) -> Vec<Var> {
        let mut order: Vec<Var> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        // Iterative DFS: (node, child cursor).
        let mut stack: Vec<(Var, usize)> = vec![(self.clone(), 0)];
        seen.insert(self.0.id);
        while let Some((node, cursor)) = stack.pop() {
            if cursor < node.0.inputs.len() {
                let child = node.0.inputs[cursor].clone();
                stack.push((node, cursor + 1));
                if child.0.requires_grad && seen.insert(child.0.id) {
                    stack.push((child, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}

// ---------------------------------------------------------------------------
// Shape helpers
// ---------------------------------------------------------------------------

fn dims2(t: &Tensor, op: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(format!("{op} expects a 2-D tensor, got {s:?}"))),
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Raw kernels (fixed accumulation order)
// ---------------------------------------------------------------------------

/// c[M×N] = a[M×K] · b[K×N]
fn matmul_kern(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// c[M×N] = a[M×K] · b[N×K]ᵀ
fn matmul_nt_kern(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// c[M×N] = a[K×M]ᵀ · b[K×N]
fn matmul_tn_kern(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let av = arow[i];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn transpose_kern(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

impl Var {
    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        dfdx: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var> {
        let data = self.value().data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(self.shape().to_vec(), data)
            .map_err(|e| annotate(e, op))?;
        Ok(Var::from_parts(
            op,
            value,
            vec![self.clone()],
            Box::new(move |g, ctx| {
                let x = ctx.input_value(0);
                let y = ctx.output;
                let data = g
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(y.data().iter()))
                    .map(|(&gi, (&xi, &yi))| gi * dfdx(xi, yi))
                    .collect();
                Ok(vec![Some(Tensor::from_raw(x.shape().to_vec(), data))])
            }),
        ))
    }

    fn binary(
        &self,
        other: &Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        dfda: impl Fn(f64, f64) -> f64 + 'static,
        dfdb: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var> {
        check_same_shape(self.value(), other.value(), op)?;
        let data = self
            .value()
            .data()
            .iter()
            .zip(other.value().data().iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        let value = Tensor::new(self.shape().to_vec(), data).map_err(|e| annotate(e, op))?;
        Ok(Var::from_parts(
            op,
            value,
            vec![self.clone(), other.clone()],
            Box::new(move |g, ctx| {
                let a = ctx.input_value(0);
                let b = ctx.input_value(1);
                let ga = if ctx.need[0] {
                    let data = g
                        .data()
                        .iter()
                        .zip(a.data().iter().zip(b.data().iter()))
                        .map(|(&gi, (&ai, &bi))| gi * dfda(ai, bi))
                        .collect();
                    Some(Tensor::from_raw(a.shape().to_vec(), data))
                } else {
                    None
                };
                let gb = if ctx.need[1] {
                    let data = g
                        .data()
                        .iter()
                        .zip(a.data().iter().zip(b.data().iter()))
                        .map(|(&gi, (&ai, &bi))| gi * dfdb(ai, bi))
                        .collect();
                    Some(Tensor::from_raw(b.shape().to_vec(), data))
                } else {
                    None
                };
                Ok(vec![ga, gb])
            }),
        ))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var> {
        self.unary("add_scalar", move |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Var> {
        self.unary("mul_scalar", move |x| x * c, move |_, _| c)
    }

    pub fn neg(&self) -> Result<Var> {
        self.mul_scalar(-1.0)
    }

    /// Elementwise power with a constant exponent.
    pub fn powf(&self, p: f64) -> Result<Var> {
        self.unary("power", move |x| x.powf(p), move |x, _| p * x.powf(p - 1.0))
    }

    pub fn exp(&self) -> Result<Var> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Result<Var> {
        self.unary("log", f64::ln, |x, _| 1.0 / x)
    }

    pub fn sigmoid(&self) -> Result<Var> {
        self.unary("sigmoid", sigmoid_scalar, |_, y| y * (1.0 - y))
    }

    /// Exponential linear unit. The derivative at exactly 0 is defined as 1.
    pub fn elu(&self, alpha: f64) -> Result<Var> {
        self.unary(
            "elu",
            move |x| if x > 0.0 { x } else { alpha * (x.exp() - 1.0) },
            move |x, _| if x >= 0.0 { 1.0 } else { alpha * x.exp() },
        )
    }

    /// Absolute value with subgradient 0 at 0.
    pub fn abs(&self) -> Result<Var> {
        self.unary(
            "abs",
            f64::abs,
            |x, _| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            },
        )
    }

    /// Adds a constant tensor (no gradient through the constant).
    pub fn add_const(&self, c: &Tensor) -> Result<Var> {
        check_same_shape(self.value(), c, "add_const")?;
        let data = self
            .value()
            .data()
            .iter()
            .zip(c.data().iter())
            .map(|(&a, &b)| a + b)
            .collect();
        let value = Tensor::new(self.shape().to_vec(), data).map_err(|e| annotate(e, "add_const"))?;
        Ok(Var::from_parts(
            "add_const",
            value,
            vec![self.clone()],
            Box::new(|g, _| Ok(vec![Some(g.clone())])),
        ))
    }

    /// Elementwise multiply by a constant tensor.
    pub fn mul_const(&self, c: &Tensor) -> Result<Var> {
        check_same_shape(self.value(), c, "mul_const")?;
        let data = self
            .value()
            .data()
            .iter()
            .zip(c.data().iter())
            .map(|(&a, &b)| a * b)
            .collect();
        let value = Tensor::new(self.shape().to_vec(), data).map_err(|e| annotate(e, "mul_const"))?;
        let c = c.clone();
        Ok(Var::from_parts(
            "mul_const",
            value,
            vec![self.clone()],
            Box::new(move |g, _| {
                let data = g
                    .data()
                    .iter()
                    .zip(c.data().iter())
                    .map(|(&gi, &ci)| gi * ci)
                    .collect();
                Ok(vec![Some(Tensor::from_raw(g.shape().to_vec(), data))])
            }),
        ))
    }
}

// ---------------------------------------------------------------------------
// Linear algebra and structure ops
// ---------------------------------------------------------------------------

impl Var {
    /// 2-D matrix product.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let (m, k) = dims2(self.value(), "matmul")?;
        let (k2, n) = dims2(other.value(), "matmul")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul: inner dims {k} vs {k2} (shapes {:?} x {:?})",
                self.shape(),
                other.shape()
            )));
        }
        let data = matmul_kern(self.value().data(), other.value().data(), m, k, n);
        let value = Tensor::new(vec![m, n], data).map_err(|e| annotate(e, "matmul"))?;
        Ok(Var::from_parts(
            "matmul",
            value,
            vec![self.clone(), other.clone()],
            Box::new(move |g, ctx| {
                let a = ctx.input_value(0);
                let b = ctx.input_value(1);
                let ga = ctx.need[0].then(|| {
                    Tensor::from_raw(vec![m, k], matmul_nt_kern(g.data(), b.data(), m, n, k))
                });
                let gb = ctx.need[1].then(|| {
                    Tensor::from_raw(vec![k, n], matmul_tn_kern(a.data(), g.data(), k, m, n))
                });
                Ok(vec![ga, gb])
            }),
        ))
    }

    /// `self · otherᵀ` for 2-D tensors; the natural form for `x · Wᵀ` layers
    /// whose weights are stored out×in.
    pub fn matmul_nt(&self, other: &Var) -> Result<Var> {
        let (m, k) = dims2(self.value(), "matmul_nt")?;
        let (n, k2) = dims2(other.value(), "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul_nt: inner dims {k} vs {k2}"
            )));
        }
        let data = matmul_nt_kern(self.value().data(), other.value().data(), m, k, n);
        let value = Tensor::new(vec![m, n], data).map_err(|e| annotate(e, "matmul_nt"))?;
        Ok(Var::from_parts(
            "matmul_nt",
            value,
            vec![self.clone(), other.clone()],
            Box::new(move |g, ctx| {
                // y = a bᵀ: da = g b ; db = gᵀ a
                let a = ctx.input_value(0);
                let b = ctx.input_value(1);
                let ga = ctx.need[0].then(|| {
                    Tensor::from_raw(vec![m, k], matmul_kern(g.data(), b.data(), m, n, k))
                });
                let gb = ctx.need[1].then(|| {
                    Tensor::from_raw(vec![n, k], matmul_tn_kern(g.data(), a.data(), n, m, k))
                });
                Ok(vec![ga, gb])
            }),
        ))
    }

    pub fn transpose(&self) -> Result<Var> {
        let (r, c) = dims2(self.value(), "transpose")?;
        let value = Tensor::from_raw(vec![c, r], transpose_kern(self.value().data(), r, c));
        Ok(Var::from_parts(
            "transpose",
            value,
            vec![self.clone()],
            Box::new(move |g, _| {
                Ok(vec![Some(Tensor::from_raw(
                    vec![r, c],
                    transpose_kern(g.data(), c, r),
                ))])
            }),
        ))
    }

    /// Column-wise concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols of zero tensors"));
        }
        let (rows, _) = dims2(parts[0].value(), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = dims2(p.value(), "concat_cols")?;
            if r != rows {
                return Err(Error::shape("concat_cols: row counts differ".to_string()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(widths.iter()) {
            let src = p.value().data();
            for r in 0..rows {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let value = Tensor::from_raw(vec![rows, total], data);
        let widths_b = widths.clone();
        Ok(Var::from_parts(
            "concat",
            value,
            parts.to_vec(),
            Box::new(move |g, ctx| {
                let mut grads = Vec::with_capacity(widths_b.len());
                let mut off = 0;
                for (i, &w) in widths_b.iter().enumerate() {
                    if ctx.need[i] {
                        let mut part = vec![0.0; rows * w];
                        for r in 0..rows {
                            part[r * w..(r + 1) * w]
                                .copy_from_slice(&g.data()[r * total + off..r * total + off + w]);
                        }
                        grads.push(Some(Tensor::from_raw(vec![rows, w], part)));
                    } else {
                        grads.push(None);
                    }
                    off += w;
                }
                Ok(grads)
            }),
        ))
    }

    /// Row-wise concatenation of 2-D tensors with equal column counts.
    pub fn concat_rows(parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows of zero tensors"));
        }
        let (_, cols) = dims2(parts[0].value(), "concat_rows")?;
        let mut row_counts = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for p in parts {
            let (r, c) = dims2(p.value(), "concat_rows")?;
            if c != cols {
                return Err(Error::shape("concat_rows: column counts differ".to_string()));
            }
            row_counts.push(r);
            data.extend_from_slice(p.value().data());
        }
        let total_rows: usize = row_counts.iter().sum();
        let value = Tensor::from_raw(vec![total_rows, cols], data);
        Ok(Var::from_parts(
            "concat",
            value,
            parts.to_vec(),
            Box::new(move |g, ctx| {
                let mut grads = Vec::with_capacity(row_counts.len());
                let mut off = 0;
                for (i, &r) in row_counts.iter().enumerate() {
                    if ctx.need[i] {
                        let part = g.data()[off * cols..(off + r) * cols].to_vec();
                        grads.push(Some(Tensor::from_raw(vec![r, cols], part)));
                    } else {
                        grads.push(None);
                    }
                    off += r;
                }
                Ok(grads)
            }),
        ))
    }

    /// Contiguous row range `[start, end)` of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = dims2(self.value(), "slice")?;
        if start > end || end > rows {
            return Err(Error::shape(format!(
                "slice rows {start}..{end} out of 0..{rows}"
            )));
        }
        let data = self.value().data()[start * cols..end * cols].to_vec();
        let value = Tensor::from_raw(vec![end - start, cols], data);
        Ok(Var::from_parts(
            "slice",
            value,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut full = vec![0.0; rows * cols];
                full[start * cols..end * cols].copy_from_slice(g.data());
                Ok(vec![Some(Tensor::from_raw(vec![rows, cols], full))])
            }),
        ))
    }

    /// Gathers rows of a 2-D tensor; backward scatter-adds.
    pub fn index_select_rows(&self, indices: &Rc<Vec<usize>>) -> Result<Var> {
        let (rows, cols) = dims2(self.value(), "index_select_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(format!(
                "index_select_rows: index {bad} out of {rows} rows"
            )));
        }
        let mut data = vec![0.0; indices.len() * cols];
        for (o, &i) in indices.iter().enumerate() {
            data[o * cols..(o + 1) * cols]
                .copy_from_slice(&self.value().data()[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::from_raw(vec![indices.len(), cols], data);
        let indices = Rc::clone(indices);
        Ok(Var::from_parts(
            "index_select_rows",
            value,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut full = vec![0.0; rows * cols];
                for (o, &i) in indices.iter().enumerate() {
                    let grow = &g.data()[o * cols..(o + 1) * cols];
                    let frow = &mut full[i * cols..(i + 1) * cols];
                    for (f, gv) in frow.iter_mut().zip(grow.iter()) {
                        *f += gv;
                    }
                }
                Ok(vec![Some(Tensor::from_raw(vec![rows, cols], full))])
            }),
        ))
    }

    /// Sums rows into `n_segments` groups; row `r` contributes to group
    /// `segments[r]`. Accumulation runs in row order.
    pub fn segment_sum_rows(&self, segments: &Rc<Vec<usize>>, n_segments: usize) -> Result<Var> {
        let (rows, cols) = dims2(self.value(), "segment_sum_rows")?;
        if segments.len() != rows {
            return Err(Error::shape(format!(
                "segment_sum_rows: {} segment ids for {} rows",
                segments.len(),
                rows
            )));
        }
        if let Some(&bad) = segments.iter().find(|&&s| s >= n_segments) {
            return Err(Error::shape(format!(
                "segment_sum_rows: segment {bad} out of {n_segments}"
            )));
        }
        let mut data = vec![0.0; n_segments * cols];
        for (r, &s) in segments.iter().enumerate() {
            let src = &self.value().data()[r * cols..(r + 1) * cols];
            let dst = &mut data[s * cols..(s + 1) * cols];
            for (d, v) in dst.iter_mut().zip(src.iter()) {
                *d += v;
            }
        }
        let value = Tensor::from_raw(vec![n_segments, cols], data);
        let segments = Rc::clone(segments);
        Ok(Var::from_parts(
            "segment_sum_rows",
            value,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut out = vec![0.0; rows * cols];
                for (r, &s) in segments.iter().enumerate() {
                    out[r * cols..(r + 1) * cols]
                        .copy_from_slice(&g.data()[s * cols..(s + 1) * cols]);
                }
                Ok(vec![Some(Tensor::from_raw(vec![rows, cols], out))])
            }),
        ))
    }

    /// Row sums of a 2-D tensor, as an R×1 column.
    pub fn row_sum(&self) -> Result<Var> {
        let (rows, cols) = dims2(self.value(), "row_sum")?;
        let data: Vec<f64> = (0..rows)
            .map(|r| self.value().data()[r * cols..(r + 1) * cols].iter().sum())
            .collect();
        let value = Tensor::from_raw(vec![rows, 1], data);
        Ok(Var::from_parts(
            "row_sum",
            value,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut out = vec![0.0; rows * cols];
                for r in 0..rows {
                    let gv = g.data()[r];
                    for c in 0..cols {
                        out[r * cols + c] = gv;
                    }
                }
                Ok(vec![Some(Tensor::from_raw(vec![rows, cols], out))])
            }),
        ))
    }

    /// Outer product of two column vectors: (M×1) ⊗ (N×1) → M×N.
    pub fn outer(&self, other: &Var) -> Result<Var> {
        let (m, c1) = dims2(self.value(), "outer")?;
        let (n, c2) = dims2(other.value(), "outer")?;
        if c1 != 1 || c2 != 1 {
            return Err(Error::shape("outer expects column vectors".to_string()));
        }
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let u = self.value().data()[i];
            for j in 0..n {
                data[i * n + j] = u * other.value().data()[j];
            }
        }
        let value = Tensor::new(vec![m, n], data).map_err(|e| annotate(e, "outer"))?;
        Ok(Var::from_parts(
            "outer",
            value,
            vec![self.clone(), other.clone()],
            Box::new(move |g, ctx| {
                let u = ctx.input_value(0);
                let v = ctx.input_value(1);
                let gu = ctx.need[0].then(|| {
                    let data: Vec<f64> = (0..m)
                        .map(|i| {
                            (0..n).map(|j| g.data()[i * n + j] * v.data()[j]).sum()
                        })
                        .collect();
                    Tensor::from_raw(vec![m, 1], data)
                });
                let gv = ctx.need[1].then(|| {
                    let data: Vec<f64> = (0..n)
                        .map(|j| {
                            (0..m).map(|i| g.data()[i * n + j] * u.data()[i]).sum()
                        })
                        .collect();
                    Tensor::from_raw(vec![n, 1], data)
                });
                Ok(vec![gu, gv])
            }),
        ))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum_all(&self) -> Result<Var> {
        let total: f64 = self.value().data().iter().sum();
        let value = Tensor::new(vec![], vec![total]).map_err(|e| annotate(e, "sum"))?;
        let shape = self.shape().to_vec();
        Ok(Var::from_parts(
            "sum",
            value,
            vec![self.clone()],
            Box::new(move |g, _| {
                let gv = g.data()[0];
                let n: usize = shape.iter().product();
                Ok(vec![Some(Tensor::from_raw(shape.clone(), vec![gv; n]))])
            }),
        ))
    }

    /// Mean of all entries, as a scalar.
    pub fn mean_all(&self) -> Result<Var> {
        let n = self.value().numel();
        if n == 0 {
            return Err(Error::contract("mean of empty tensor"));
        }
        self.sum_all()?.mul_scalar(1.0 / n as f64)
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value().numel() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        let value = Tensor::from_raw(shape, self.value().data().to_vec());
        let orig = self.shape().to_vec();
        Ok(Var::from_parts(
            "reshape",
            value,
            vec![self.clone()],
            Box::new(move |g, _| {
                Ok(vec![Some(Tensor::from_raw(
                    orig.clone(),
                    g.data().to_vec(),
                ))])
            }),
        ))
    }

    /// Divides every entry by a scalar node.
    pub fn div_scalar_node(&self, den: &Var) -> Result<Var> {
        if !den.value().is_scalar() {
            return Err(Error::shape("div_scalar_node: denominator not scalar".to_string()));
        }
        let d = den.value().data()[0];
        let data = self.value().data().iter().map(|&x| x / d).collect();
        let value = Tensor::new(self.shape().to_vec(), data).map_err(|e| annotate(e, "div"))?;
        Ok(Var::from_parts(
            "div",
            value,
            vec![self.clone(), den.clone()],
            Box::new(move |g, ctx| {
                let num = ctx.input_value(0);
                let ga = ctx.need[0].then(|| {
                    let data = g.data().iter().map(|&gi| gi / d).collect();
                    Tensor::from_raw(num.shape().to_vec(), data)
                });
                let gd = ctx.need[1].then(|| {
                    let s: f64 = g
                        .data()
                        .iter()
                        .zip(num.data().iter())
                        .map(|(&gi, &ni)| gi * ni)
                        .sum();
                    Tensor::from_raw(vec![], vec![-s / (d * d)])
                });
                Ok(vec![ga, gd])
            }),
        ))
    }

    /// Broadcasts a 1×C (or length-C) bias row over every row of an R×C tensor.
    pub fn add_row(&self, row: &Var) -> Result<Var> {
        let (r, c) = dims2(self.value(), "add_row")?;
        if row.value().numel() != c {
            return Err(Error::shape(format!(
                "add_row: bias of {} entries for {} columns",
                row.value().numel(),
                c
            )));
        }
        let mut data = self.value().data().to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += row.value().data()[j];
            }
        }
        let value = Tensor::new(vec![r, c], data).map_err(|e| annotate(e, "add_row"))?;
        let row_shape = row.shape().to_vec();
        Ok(Var::from_parts(
            "add_row",
            value,
            vec![self.clone(), row.clone()],
            Box::new(move |g, ctx| {
                let ga = ctx.need[0].then(|| g.clone());
                let gb = ctx.need[1].then(|| {
                    let mut acc = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            acc[j] += g.data()[i * c + j];
                        }
                    }
                    Tensor::from_raw(row_shape.clone(), acc)
                });
                Ok(vec![ga, gb])
            }),
        ))
    }

    /// Scatters per-edge scalars (E×1) into a dense T×T adjacency at
    /// positions `(from[e], to[e])`; untouched entries (the diagonal) stay 0.
    pub fn edges_to_dense(
        &self,
        from: &Rc<Vec<usize>>,
        to: &Rc<Vec<usize>>,
        n: usize,
    ) -> Result<Var> {
        let (e, c) = dims2(self.value(), "edges_to_dense")?;
        if c != 1 || from.len() != e || to.len() != e {
            return Err(Error::shape(
                "edges_to_dense expects E×1 values and matching index lists".to_string(),
            ));
        }
        let mut data = vec![0.0; n * n];
        for i in 0..e {
            data[from[i] * n + to[i]] = self.value().data()[i];
        }
        let value = Tensor::from_raw(vec![n, n], data);
        let from = Rc::clone(from);
        let to = Rc::clone(to);
        Ok(Var::from_parts(
            "edges_to_dense",
            value,
            vec![self.clone()],
            Box::new(move |g, _| {
                let data: Vec<f64> = (0..from.len())
                    .map(|i| g.data()[from[i] * n + to[i]])
                    .collect();
                Ok(vec![Some(Tensor::from_raw(vec![from.len(), 1], data))])
            }),
        ))
    }
}

fn annotate(e: Error, op: &str) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("{op}: {m}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_shapes() {
        // 2×3 · 3×1 → 2×1
        let a = Var::constant(t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = Var::constant(t2(3, 1, &[1.0, 1.0, 1.0]));
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.value().data(), &[6.0, 15.0]);
        // mismatched inner dim
        let bad = Var::constant(t2(2, 2, &[0.0; 4]));
        assert!(matches!(a.matmul(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let x = Var::constant(Tensor::new(vec![1], vec![0.0]).unwrap());
        let y = x.sigmoid().unwrap();
        assert_eq!(y.value().data()[0], 0.5);
    }

    #[test]
    fn elu_matches_scalar_oracle() {
        // Independent scalar-math oracle for ELU at a few points.
        let oracle = |x: f64, a: f64| if x > 0.0 { x } else { a * (x.exp() - 1.0) };
        let xs = [-2.0, -1.0, -0.1, 0.0, 0.3, 2.5];
        let v = Var::constant(Tensor::new(vec![xs.len()], xs.to_vec()).unwrap());
        let y = v.elu(1.0).unwrap();
        for (i, &x) in xs.iter().enumerate() {
            assert!((y.value().data()[i] - oracle(x, 1.0)).abs() < 1e-15);
        }
        // elu(-1) with alpha=1 → e^{-1} - 1
        assert!((y.value().data()[1] - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
        assert!((y.value().data()[1] + 0.6321).abs() < 1e-4);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let p = Param::new("x", t2(2, 3, &[0.5, -1.0, 2.0, 3.0, -0.5, 0.0]), true);
        let loss = Var::param(&p).sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(p.grad().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_square_sum_is_two_x() {
        let p = Param::new("x", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let x = Var::param(&p);
        let loss = x.mul(&x).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(p.grad().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_repeat() {
        let p = Param::new("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let x = Var::param(&p);
        assert!(matches!(x.backward(), Err(Error::Contract(_))));
        let loss = x.sum_all().unwrap();
        loss.backward().unwrap();
        assert!(matches!(loss.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn grad_accumulates_across_shared_nodes() {
        // loss = sum(x*x) + sum(x) → d/dx = 2x + 1
        let p = Param::new("x", Tensor::new(vec![2], vec![3.0, -1.0]).unwrap(), true);
        let x = Var::param(&p);
        let a = x.mul(&x).unwrap().sum_all().unwrap();
        let b = x.sum_all().unwrap();
        let loss = a.add(&b).unwrap();
        loss.backward().unwrap();
        assert_eq!(p.grad().data(), &[7.0, -1.0]);
    }

    #[test]
    fn zero_grad_resets_exactly() {
        let p = Param::new("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let loss = Var::param(&p).mul_scalar(2.0).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(p.grad().data(), &[2.0, 2.0]);
        p.zero_grad();
        assert_eq!(p.grad().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_finite_forward_is_numeric_error() {
        let x = Var::constant(Tensor::new(vec![1], vec![100.0]).unwrap());
        let e = x.exp().unwrap().exp().unwrap_err();
        assert!(matches!(e, Error::Numeric(_)));
    }

    #[test]
    fn segment_sum_and_gather_round_trip() {
        let x = Var::constant(t2(4, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let seg = Rc::new(vec![1usize, 0, 1, 0]);
        let s = x.segment_sum_rows(&seg, 2).unwrap();
        assert_eq!(s.value().data(), &[3.0 + 7.0, 4.0 + 8.0, 1.0 + 5.0, 2.0 + 6.0]);
        let idx = Rc::new(vec![2usize, 2, 0]);
        let g = x.index_select_rows(&idx).unwrap();
        assert_eq!(g.value().data(), &[5.0, 6.0, 5.0, 6.0, 1.0, 2.0]);
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let t = t2(3, 3, &[0.3, -0.7, 1.1, 0.9, -2.2, 0.01, 5.5, -0.3, 0.4]);
        let run = || {
            let x = Var::constant(t.clone());
            let y = x
                .matmul(&x)
                .unwrap()
                .sigmoid()
                .unwrap()
                .sum_all()
                .unwrap();
            y.value().data()[0]
        };
        let bits_a = run().to_bits();
        let bits_b = run().to_bits();
        assert_eq!(bits_a, bits_b);
    }
}
