//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node in an
//! append-only arena. Inputs always precede their consumers, so the arena
//! order is a topological order and the graph is acyclic by construction.
//! [`Tape::backward`] walks the arena in reverse and accumulates
//! `∂loss/∂param` into a [`ParamStore`].
//!
//! Gradients accumulate: calling `backward` twice without clearing the
//! store's buffers (see [`ParamStore::zero_grad`]) doubles them.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{numel, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// MLP nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    /// Tanh approximation of the Gaussian error linear unit.
    #[default]
    Gelu,
    Relu,
}

/// A user-supplied differentiable operation.
pub trait CustomOp<F: Real>: Send + Sync {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor<F>]) -> Result<Tensor<F>>;
    /// Returns one gradient buffer per input.
    fn backward(&self, inputs: &[&Tensor<F>], output: &Tensor<F>, grad_out: &[F]) -> Vec<Vec<F>>;
}

enum Op<F: Real> {
    Leaf {
        param: Option<ParamId>,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddChannel(Var, Var),
    Scale(Var, F),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        cols: Vec<F>,
    },
    ExtractPatches {
        x: Var,
        patch: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Softmax(Var),
    Gelu(Var),
    Relu(Var),
    Reshape(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Sum(Var),
    SqDiffSum {
        x: Var,
        target: Arc<Tensor<F>>,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<F>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<F>>,
    },
}

struct Node<F: Real> {
    value: Arc<Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records a forward computation for later differentiation.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_DEFAULT_EPS: f64 = 1e-5;

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf { param: None }, false)
    }

    /// Places a stored parameter on the tape without copying its values.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.shared_value(),
            op: Op::Leaf { param: Some(id) },
            requires_grad: p.trainable(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(Error::dim(format!(
                    "matmul requires [m,k] x [k,n], got {sa:?} x {sb:?}"
                )))
            }
        };
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            F::zero(),
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what} operands differ in shape: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<F>, f: impl Fn(F, F) -> F) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("shape preserved");
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a length-`D` vector to every row of `x[..×D]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if numel(self.shape(bias)) != d {
            return Err(Error::dim(format!(
                "row bias of shape {:?} does not match rows of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.value(bias).data();
        let vx = self.value(x);
        let data = vx
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &c)| v + c))
            .collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(t, Op::AddRow(x, bias), rg))
    }

    /// Adds `bias[c]` to every element of channel `c` of `x[C×H×W]`.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || numel(self.shape(bias)) != sx[0] {
            return Err(Error::dim(format!(
                "channel bias {:?} does not match feature map {sx:?}",
                self.shape(bias)
            )));
        }
        let hw = sx[1] * sx[2];
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .zip(b)
            .flat_map(|(plane, &c)| plane.iter().map(move |&v| v + c))
            .collect();
        let t = Tensor::new(sx, data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(t, Op::AddChannel(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let t = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, s), rg)
    }

    /// Valid (unpadded) cross-correlation of `x[C×H×W]` with
    /// `w[C'×C×kh×kw]`, giving `[C'×H'×W']` with `H' = (H−kh)/stride + 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let g = ConvGeom::new(&sx, &sw, stride)?;
        let cols = g.im2col(self.value(x).data());
        let mut out = vec![F::zero(); g.c_out * g.positions()];
        F::gemm(
            g.c_out,
            g.patch_len(),
            g.positions(),
            self.value(w).data(),
            false,
            &cols,
            false,
            F::zero(),
            &mut out,
        );
        let t = Tensor::new(vec![g.c_out, g.h_out, g.w_out], out)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(t, Op::Conv2d { x, w, stride, cols }, rg))
    }

    /// Splits `x[C×H×W]` into non-overlapping `p×p` patches, one row per
    /// patch in row-major grid order, each flattened channel-major to
    /// length `C·p²`.
    pub fn extract_patches(&mut self, x: Var, patch: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let [c, h, w] = sx[..] else {
            return Err(Error::dim(format!("patchify expects [C,H,W], got {sx:?}")));
        };
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::dim(format!(
                "image {h}x{w} is not divisible into {patch}x{patch} patches"
            )));
        }
        let (gh, gw) = (h / patch, w / patch);
        let row_len = c * patch * patch;
        let src = self.value(x).data();
        let mut out = vec![F::zero(); gh * gw * row_len];
        for_each_patch_elem(c, h, w, patch, |dst, s| out[dst] = src[s]);
        let t = Tensor::new(vec![gh * gw, row_len], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::ExtractPatches { x, patch }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.layer_norm_eps(x, gain, bias, F::from_f64_lossy(LN_DEFAULT_EPS))
    }

    /// Row-wise normalization over the last extent followed by `gain·x̂ + bias`.
    pub fn layer_norm_eps(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let d = self.value(x).last_dim();
        if numel(self.shape(gain)) != d || numel(self.shape(bias)) != d {
            return Err(Error::dim(format!(
                "layer_norm over rows of length {d} with gain {:?} and bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let vx = self.value(x);
        let rows = vx.rows();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let dn = F::from_usize(d).unwrap();
        let mut xhat = vec![F::zero(); vx.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); vx.len()];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<F>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
            let rs = (var + eps).sqrt().recip();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + b[j];
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row-wise softmax over the last extent (max-subtracted).
    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let d = vx.last_dim();
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let t = Tensor::new(vx.shape().to_vec(), out).expect("shape preserved");
        let rg = self.rg(x);
        self.push(t, Op::Softmax(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu_scalar);
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(F::zero()));
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        match act {
            Activation::Gelu => self.gelu(x),
            Activation::Relu => self.relu(x),
        }
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = (*self.nodes[x.0].value).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = match self.shape(x) {
            [r, c] => (*r, *c),
            s => return Err(Error::dim(format!("transpose expects a matrix, got {s:?}"))),
        };
        let src = self.value(x).data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows of nothing"))?;
        let cols = matrix_shape(self.shape(first))?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = matrix_shape(self.shape(p))?;
            if c != cols {
                return Err(Error::dim(format!(
                    "concat_rows: column counts {cols} and {c} differ"
                )));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![rows, cols], data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat_cols of nothing"))?;
        let rows = matrix_shape(self.shape(first))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = matrix_shape(self.shape(p))?;
            if r != rows {
                return Err(Error::dim(format!(
                    "concat_cols: row counts {rows} and {r} differ"
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![rows, total], data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = matrix_shape(self.shape(x))?;
        if len == 0 || start + len > r {
            return Err(Error::dim(format!(
                "row slice {start}..{} out of range for {r} rows",
                start + len
            )));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![len, c], data)?, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = matrix_shape(self.shape(x))?;
        if len == 0 || start + len > c {
            return Err(Error::dim(format!(
                "column slice {start}..{} out of range for {c} columns",
                start + len
            )));
        }
        let src = self.value(x).data();
        let data = (0..r)
            .flat_map(|i| src[i * c + start..i * c + start + len].iter().copied())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![r, len], data)?, Op::SliceCols { x, start }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `Σ (x − target)²` against a constant target of the same shape.
    pub fn sq_diff_sum(&mut self, x: Var, target: Arc<Tensor<F>>) -> Result<Var> {
        if self.shape(x) != target.shape() {
            return Err(Error::dim(format!(
                "sq_diff_sum: {:?} vs target {:?}",
                self.shape(x),
                target.shape()
            )));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::SqDiffSum { x, target }, rg))
    }

    /// `−log softmax(logits)[label]`, computed through log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let vl = self.value(logits);
        let k = vl.len();
        if label >= k {
            return Err(Error::data(format!("label {label} out of range for {k} classes")));
        }
        if !vl.all_finite() {
            return Err(Error::NonFinite {
                what: "cross_entropy logits".into(),
            });
        }
        let z = vl.data();
        let max = z.iter().copied().fold(F::neg_infinity(), F::max);
        let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
        let probs: Vec<F> = z.iter().map(|&v| (v - lse).exp()).collect();
        let loss = lse - z[label];
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            rg,
        ))
    }

    pub fn custom(&mut self, inputs: &[Var], op: Box<dyn CustomOp<F>>) -> Result<Var> {
        let values: Vec<&Tensor<F>> = inputs.iter().map(|&v| self.value(v)).collect();
        let t = op.forward(&values)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            t,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        ))
    }

    /// Computes `∂loss/∂param` for every parameter leaf on the tape.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Gradient(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n_params = self
            .nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Leaf { param: Some(id) } => Some(id.index() + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0);
        let mut by_param: Vec<Option<Vec<F>>> = vec![None; n_params];
        let mut grads: Vec<Option<Vec<F>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            if let Op::Leaf { param: Some(id) } = node.op {
                match &mut by_param[id.index()] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += *v),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { by_param })
    }

    /// Accumulates `∂loss/∂param` into `store`'s gradient buffers.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<F>) -> Result<()> {
        let grads = self.gradients(loss)?;
        store.accumulate(&grads);
        Ok(())
    }

    fn propagate(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    // dA = dC · Bᵀ
                    let buf = self.grad_buf(grads, *a);
                    F::gemm(m, n, k, g, false, self.value(*b).data(), true, F::one(), buf);
                }
                if self.rg(*b) {
                    // dB = Aᵀ · dC
                    let buf = self.grad_buf(grads, *b);
                    F::gemm(k, m, n, self.value(*a).data(), true, g, false, F::one(), buf);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |buf| add_into(buf, g));
                self.acc(grads, *b, |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |buf| add_into(buf, g));
                self.acc(grads, *b, |buf| buf.iter_mut().zip(g).for_each(|(o, v)| *o -= *v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |buf| {
                    for ((o, gv), y) in buf.iter_mut().zip(g).zip(vb) {
                        *o += *gv * *y;
                    }
                });
                self.acc(grads, *b, |buf| {
                    for ((o, gv), x) in buf.iter_mut().zip(g).zip(va) {
                        *o += *gv * *x;
                    }
                });
            }
            Op::AddRow(x, bias) => {
                self.acc(grads, *x, |buf| add_into(buf, g));
                let d = numel(self.shape(*bias));
                self.acc(grads, *bias, |buf| {
                    for row in g.chunks(d) {
                        add_into(buf, row);
                    }
                });
            }
            Op::AddChannel(x, bias) => {
                self.acc(grads, *x, |buf| add_into(buf, g));
                let s = self.shape(*x);
                let hw = s[1] * s[2];
                self.acc(grads, *bias, |buf| {
                    for (o, plane) in buf.iter_mut().zip(g.chunks(hw)) {
                        *o += plane.iter().copied().sum::<F>();
                    }
                });
            }
            Op::Scale(x, s) => {
                self.acc(grads, *x, |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, v)| *o += *v * *s)
                });
            }
            Op::Conv2d { x, w, stride, cols } => {
                let geom = ConvGeom::new(self.shape(*x), self.shape(*w), *stride)
                    .expect("validated at forward");
                let (co, k, p) = (geom.c_out, geom.patch_len(), geom.positions());
                if self.rg(*w) {
                    let buf = self.grad_buf(grads, *w);
                    F::gemm(co, p, k, g, false, cols, true, F::one(), buf);
                }
                if self.rg(*x) {
                    let mut dcols = vec![F::zero(); k * p];
                    F::gemm(k, co, p, self.value(*w).data(), true, g, false, F::zero(), &mut dcols);
                    let buf = self.grad_buf(grads, *x);
                    geom.col2im_add(&dcols, buf);
                }
            }
            Op::ExtractPatches { x, patch } => {
                let s = self.shape(*x).to_vec();
                self.acc(grads, *x, |buf| {
                    for_each_patch_elem(s[0], s[1], s[2], *patch, |dst, src| buf[src] += g[dst]);
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = numel(self.shape(*gain));
                let gv = self.value(*gain).data();
                let dn = F::from_usize(d).unwrap();
                self.acc(grads, *gain, |buf| {
                    for (grow, xrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            buf[j] += grow[j] * xrow[j];
                        }
                    }
                });
                self.acc(grads, *bias, |buf| {
                    for grow in g.chunks(d) {
                        add_into(buf, grow);
                    }
                });
                self.acc(grads, *x, |buf| {
                    let mut dxhat = vec![F::zero(); d];
                    for (r, (grow, xrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_d = F::zero();
                        let mut mean_dx = F::zero();
                        for j in 0..d {
                            dxhat[j] = grow[j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xrow[j];
                        }
                        mean_d = mean_d / dn;
                        mean_dx = mean_dx / dn;
                        let out = &mut buf[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += rstd[r] * (dxhat[j] - mean_d - xrow[j] * mean_dx);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let d = out.last_dim();
                self.acc(grads, *x, |buf| {
                    for ((orow, grow), yrow) in
                        buf.chunks_mut(d).zip(g.chunks(d)).zip(out.data().chunks(d))
                    {
                        let dot: F = grow.iter().zip(yrow).map(|(a, b)| *a * *b).sum();
                        for j in 0..d {
                            orow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                self.acc(grads, *x, |buf| {
                    for ((o, gv), xv) in buf.iter_mut().zip(g).zip(vx) {
                        *o += *gv * gelu_grad(*xv);
                    }
                });
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                self.acc(grads, *x, |buf| {
                    for ((o, gv), xv) in buf.iter_mut().zip(g).zip(vx) {
                        if *xv > F::zero() {
                            *o += *gv;
                        }
                    }
                });
            }
            Op::Reshape(x) => self.acc(grads, *x, |buf| add_into(buf, g)),
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                self.acc(grads, *x, |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc(grads, p, |buf| add_into(buf, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.last_dim();
                let mut col = 0;
                for &p in parts {
                    let (r, w) = (self.shape(p)[0], self.shape(p)[1]);
                    self.acc(grads, p, |buf| {
                        for i in 0..r {
                            add_into(&mut buf[i * w..(i + 1) * w], &g[i * total + col..i * total + col + w]);
                        }
                    });
                    col += w;
                }
            }
            Op::SliceRows { x, start } => {
                let c = self.shape(*x)[1];
                self.acc(grads, *x, |buf| add_into(&mut buf[start * c..start * c + g.len()], g));
            }
            Op::SliceCols { x, start } => {
                let c = self.shape(*x)[1];
                let w = out.last_dim();
                self.acc(grads, *x, |buf| {
                    for (i, grow) in g.chunks(w).enumerate() {
                        add_into(&mut buf[i * c + start..i * c + start + w], grow);
                    }
                });
            }
            Op::Sum(x) => self.acc(grads, *x, |buf| buf.iter_mut().for_each(|o| *o += g[0])),
            Op::SqDiffSum { x, target } => {
                let vx = self.value(*x).data();
                let two = F::from_f64_lossy(2.0);
                self.acc(grads, *x, |buf| {
                    for ((o, a), b) in buf.iter_mut().zip(vx).zip(target.data()) {
                        *o += two * (*a - *b) * g[0];
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                self.acc(grads, *logits, |buf| {
                    for (j, (o, p)) in buf.iter_mut().zip(probs).enumerate() {
                        let t = if j == *label { F::one() } else { F::zero() };
                        *o += (*p - t) * g[0];
                    }
                });
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<F>> = inputs.iter().map(|&v| self.value(v)).collect();
                let ins = op.backward(&values, out, g);
                for (&v, gi) in inputs.iter().zip(ins) {
                    self.acc(grads, v, |buf| add_into(buf, &gi));
                }
            }
        }
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Vec<F>>], v: Var) -> &'a mut [F] {
        let n = self.value(v).len();
        grads[v.0].get_or_insert_with(|| vec![F::zero(); n])
    }

    fn acc(&self, grads: &mut [Option<Vec<F>>], v: Var, f: impl FnOnce(&mut [F])) {
        if self.rg(v) {
            f(self.grad_buf(grads, v));
        }
    }
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s);
}

fn matrix_shape(s: &[usize]) -> Result<(usize, usize)> {
    match s {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::dim(format!("expected a matrix, got shape {s:?}"))),
    }
}

/// Visits `(patch-matrix index, image index)` pairs of a patch extraction.
fn for_each_patch_elem(c: usize, h: usize, w: usize, p: usize, mut f: impl FnMut(usize, usize)) {
    let gw = w / p;
    let row_len = c * p * p;
    for gy in 0..h / p {
        for gx in 0..gw {
            let base = (gy * gw + gx) * row_len;
            for ch in 0..c {
                for i in 0..p {
                    for j in 0..p {
                        let dst = base + (ch * p + i) * p + j;
                        let src = (ch * h + gy * p + i) * w + gx * p + j;
                        f(dst, src);
                    }
                }
            }
        }
    }
}

pub(crate) fn softmax_in_place<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu_scalar<F: Real>(x: F) -> F {
    let c = F::from_f64_lossy(GELU_C);
    let a = F::from_f64_lossy(GELU_A);
    let half = F::from_f64_lossy(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::from_f64_lossy(GELU_C);
    let a = F::from_f64_lossy(GELU_A);
    let half = F::from_f64_lossy(0.5);
    let three = F::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x)
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn new(sx: &[usize], sw: &[usize], stride: usize) -> Result<Self> {
        let ([c_in, h, w], [c_out, c_k, kh, kw]) = (sx, sw) else {
            return Err(Error::dim(format!(
                "conv2d expects input [C,H,W] and kernel [C',C,kh,kw], got {sx:?} and {sw:?}"
            )));
        };
        if c_in != c_k {
            return Err(Error::dim(format!(
                "conv2d input has {c_in} channels, kernel expects {c_k}"
            )));
        }
        if kh > h || kw > w {
            return Err(Error::dim(format!(
                "conv2d kernel {kh}x{kw} larger than input {h}x{w}"
            )));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d stride must be positive"));
        }
        Ok(Self {
            c_in: *c_in,
            h: *h,
            w: *w,
            c_out: *c_out,
            kh: *kh,
            kw: *kw,
            stride,
            h_out: (h - kh) / stride + 1,
            w_out: (w - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    /// `cols[(c·kh + i)·kw + j][oy·W' + ox] = x[c][oy·s + i][ox·s + j]`
    fn im2col<F: Real>(&self, x: &[F]) -> Vec<F> {
        let p = self.positions();
        let mut cols = vec![F::zero(); self.patch_len() * p];
        for c in 0..self.c_in {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * p;
                    for oy in 0..self.h_out {
                        let src = (c * self.h + oy * self.stride + i) * self.w + j;
                        let dst = row + oy * self.w_out;
                        for ox in 0..self.w_out {
                            cols[dst + ox] = x[src + ox * self.stride];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im_add<F: Real>(&self, cols: &[F], dx: &mut [F]) {
        let p = self.positions();
        for c in 0..self.c_in {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * p;
                    for oy in 0..self.h_out {
                        let dst = (c * self.h + oy * self.stride + i) * self.w + j;
                        let src = row + oy * self.w_out;
                        for ox in 0..self.w_out {
                            dx[dst + ox * self.stride] += cols[src + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Output extent of a valid convolution.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    (kernel <= input && stride > 0).then(|| (input - kernel) / stride + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Tensor<f64>)]) -> (ParamStore<f64>, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = values
            .iter()
            .map(|(n, t)| s.insert(*n, t.clone()).unwrap())
            .collect();
        (s, ids)
    }

    #[test]
    fn matmul_identity_and_zero() {
        let a = Tensor::<f64>::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.0]]);
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(3));
        let av = tape.constant(a.clone());
        let y = tape.matmul(i, av).unwrap();
        assert_eq!(tape.value(y), &a);

        let b = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let z = tape.constant(Tensor::zeros(&[2, 1]));
        let y = tape.matmul(b, z).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn conv_scalar_kernel_scales_input() {
        let x = Tensor::<f64>::from_fn(&[1, 3, 4], |i| i as f64 - 2.5);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.75));
        let y = tape.conv2d(xv, w, 1).unwrap();
        assert_eq!(tape.value(y), &x.map(|v| 1.75 * v));

        let wz = tape.constant(Tensor::zeros(&[2, 1, 2, 2]));
        let y = tape.conv2d(xv, wz, 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 2, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_rejects_large_kernel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 3]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 4, 2]));
        assert!(matches!(tape.conv2d(x, w, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_matches_direct_sum() {
        let x = Tensor::<f64>::from_fn(&[2, 5, 6], |i| ((i * 7) % 11) as f64 * 0.1 - 0.4);
        let w = Tensor::<f64>::from_fn(&[3, 2, 2, 3], |i| ((i * 5) % 7) as f64 * 0.2 - 0.5);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let y = tape.conv2d(xv, wv, 2).unwrap();
        assert_eq!(tape.shape(y), &[3, 2, 2]);
        let yv = tape.value(y);
        for o in 0..3 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut s = 0.0;
                    for c in 0..2 {
                        for i in 0..2 {
                            for j in 0..3 {
                                s += x.data()[(c * 5 + oy * 2 + i) * 6 + ox * 2 + j]
                                    * w.data()[((o * 2 + c) * 2 + i) * 3 + j];
                            }
                        }
                    }
                    let got = yv.data()[(o * 2 + oy) * 2 + ox];
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn layer_norm_cases() {
        let mut tape = Tape::<f64>::new();
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(Tensor::from_rows(&[&[1.0, 3.0], &[5.0, 5.0]]));
        let y = tape.layer_norm(x, g, b).unwrap();
        let v = tape.value(y).data();
        // variance 1 with eps 1e-5: x̂ = ±1/sqrt(1 + 1e-5)
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((v[0] + expect).abs() < 1e-12 && (v[1] - expect).abs() < 1e-12);
        assert_eq!(&v[2..], &[0.0, 0.0]);

        let bad = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.layer_norm(x, bad, b).is_err());
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_rows(&[
            &[0.0, 0.0, 0.0],
            &[2f64.ln(), 0.0, f64::NEG_INFINITY],
            &[1000.0, 0.0, 0.0],
        ]));
        let y = tape.softmax(x);
        let v = tape.value(y).data();
        for p in &v[..3] {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((v[3] - 2.0 / 3.0).abs() < 1e-15 && (v[4] - 1.0 / 3.0).abs() < 1e-15);
        assert!((v[6] - 1.0).abs() < 1e-15 && v[7] < 1e-300);
        assert!(tape.value(y).all_finite());
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(10.0f64) - 10.0).abs() < 1e-12);
        assert!(gelu_scalar(-10.0f64).abs() < 1e-12);
    }

    #[test]
    fn backward_sum_and_square() {
        let (mut s, ids) = store_with(&[("p", Tensor::from_rows(&[&[1.0, 2.0]]))]);
        let mut tape = Tape::new();
        let p = tape.param(&s, ids[0]);
        let l = tape.sum(p);
        tape.backward(l, &mut s).unwrap();
        assert_eq!(s.get(ids[0]).grad().unwrap(), &[1.0, 1.0]);
        s.zero_grad();

        let mut tape = Tape::new();
        let p = tape.param(&s, ids[0]);
        let sq = tape.mul(p, p).unwrap();
        let l = tape.sum(sq);
        tape.backward(l, &mut s).unwrap();
        assert_eq!(s.get(ids[0]).grad().unwrap(), &[2.0, 4.0]);
        // a second call without clearing accumulates
        tape.backward(l, &mut s).unwrap();
        assert_eq!(s.get(ids[0]).grad().unwrap(), &[4.0, 8.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let (mut s, ids) = store_with(&[("p", Tensor::zeros(&[2]))]);
        let mut tape = Tape::new();
        let p = tape.param(&s, ids[0]);
        assert!(matches!(tape.backward(p, &mut s), Err(Error::Gradient(_))));
    }

    #[test]
    fn frozen_params_get_no_grad() {
        let (mut s, ids) = store_with(&[("a", Tensor::full(&[2], 1.0)), ("b", Tensor::full(&[2], 3.0))]);
        s.set_trainable(ids[1], false);
        let mut tape = Tape::new();
        let a = tape.param(&s, ids[0]);
        let b = tape.param(&s, ids[1]);
        let m = tape.mul(a, b).unwrap();
        let l = tape.sum(m);
        tape.backward(l, &mut s).unwrap();
        assert_eq!(s.get(ids[0]).grad().unwrap(), &[3.0, 3.0]);
        assert!(s.get(ids[1]).grad().is_none());
    }

    #[test]
    fn patches_are_row_major_over_grid() {
        let img = Tensor::<f64>::from_fn(&[1, 4, 4], |i| i as f64);
        let mut tape = Tape::new();
        let x = tape.constant(img);
        let p = tape.extract_patches(x, 2).unwrap();
        assert_eq!(tape.shape(p), &[4, 4]);
        assert_eq!(tape.value(p).row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(tape.value(p).row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(tape.value(p).row(3), &[10.0, 11.0, 14.0, 15.0]);
        assert!(tape.extract_patches(x, 3).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::new(vec![2], vec![0.3, 0.3]).unwrap());
        let l = tape.cross_entropy(z, 1).unwrap();
        assert!((tape.scalar(l) - 2f64.ln()).abs() < 1e-15);
        let z = tape.constant(Tensor::new(vec![2], vec![10.0, -10.0]).unwrap());
        let l = tape.cross_entropy(z, 0).unwrap();
        assert!(tape.scalar(l) < 1e-4);
        assert!(tape.cross_entropy(z, 2).is_err());
    }
}
