//! Operation records and their forward/backward kernels.
//!
//! Forward constructors live as methods on [`Tensor`]; `backward_node`
//! dispatches one node's gradient into its parents. Binary elementwise ops
//! support two shapes of right operand: an exact match, or a broadcast where
//! the right shape is a trailing suffix of the left (a single element
//! broadcasts everywhere).

use std::rc::Rc;

use super::gemm::gemm;
use super::{Result, Tape, TapeInner, Tensor, TensorError};

#[derive(Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

#[derive(Clone)]
pub(crate) struct RbfGrid {
    pub points: Rc<Vec<f64>>,
    pub inv_width: f64,
}

#[derive(Clone)]
pub(crate) struct BsplineGrid {
    pub knots: Rc<Vec<f64>>,
    pub degree: usize,
    pub n_basis: usize,
}

pub(crate) enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AffineScalar { p: usize, mul: f64, add: f64 },
    Relu { p: usize },
    Sigmoid { p: usize },
    Tanh { p: usize },
    Gelu { p: usize },
    Silu { p: usize },
    Softplus { p: usize },
    MatMul { a: usize, b: usize, tb: bool, m: usize, k: usize, n: usize },
    BatchMatMul { a: usize, b: usize, tb: bool, batch: usize, m: usize, k: usize, n: usize },
    Reshape { p: usize },
    SwapAxes12 { p: usize },
    SliceCols { p: usize, start: usize, width: usize },
    SelectAxis1 { p: usize, index: usize },
    MeanAxis1 { p: usize },
    Sum { p: usize },
    Softmax { p: usize },
    LogSumExp { p: usize },
    CrossEntropy { logits: usize, labels: Vec<u32>, probs: Vec<f64> },
    LayerNorm { x: usize, gamma: usize, beta: usize, mean: Vec<f64>, inv_std: Vec<f64> },
    Conv2d { x: usize, kernels: usize, bias: usize, geom: ConvGeom },
    MaxPool2 { p: usize, argmax: Vec<u32> },
    Dropout { p: usize, mask: Vec<f64> },
    RbfBasis { p: usize, grid: RbfGrid },
    BsplineBasis { p: usize, grid: BsplineGrid },
}

// ── scalar math helpers ─────────────────────────────────────────────────

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn silu_deriv(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn suffix_broadcast_ok(lhs: &[usize], rhs: &[usize]) -> bool {
    let rn: usize = rhs.iter().product();
    if rn == 1 {
        return true;
    }
    rhs.len() <= lhs.len() && rhs == &lhs[lhs.len() - rhs.len()..]
}

fn ew_forward(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    if b.len() == 1 {
        let s = b[0];
        a.iter().map(|&x| f(x, s)).collect()
    } else if b.len() == a.len() {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    } else {
        let mut out = Vec::with_capacity(a.len());
        for chunk in a.chunks_exact(b.len()) {
            out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
        }
        out
    }
}

/// Folds a full-size gradient down onto a (possibly broadcast) operand.
fn reduce_into(acc: &mut [f64], full: impl Iterator<Item = f64>) {
    let n = acc.len();
    for (i, v) in full.enumerate() {
        if n == 1 {
            acc[0] += v;
        } else {
            acc[i % n] += v;
        }
    }
}

// ── forward constructors ────────────────────────────────────────────────

impl Tensor {
    fn binary(&self, rhs: &Tensor, name: &'static str) -> Result<(Tape, Vec<usize>, bool)> {
        let tape = self.same_tape(rhs);
        let inner = tape.inner.borrow();
        let (a, b) = (&inner.nodes[self.id], &inner.nodes[rhs.id]);
        if !suffix_broadcast_ok(&a.shape, &b.shape) {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        Ok((
            tape.clone(),
            a.shape.clone(),
            a.requires_grad || b.requires_grad,
        ))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        let (tape, shape, rg) = self.binary(rhs, "add")?;
        let data = {
            let inner = tape.inner.borrow();
            ew_forward(
                &inner.nodes[self.id].data,
                &inner.nodes[rhs.id].data,
                |x, y| x + y,
            )
        };
        Ok(tape.push(data, shape, rg, Op::Add { a: self.id, b: rhs.id }))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        let (tape, shape, rg) = self.binary(rhs, "sub")?;
        let data = {
            let inner = tape.inner.borrow();
            ew_forward(
                &inner.nodes[self.id].data,
                &inner.nodes[rhs.id].data,
                |x, y| x - y,
            )
        };
        Ok(tape.push(data, shape, rg, Op::Sub { a: self.id, b: rhs.id }))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (tape, shape, rg) = self.binary(rhs, "mul")?;
        let data = {
            let inner = tape.inner.borrow();
            ew_forward(
                &inner.nodes[self.id].data,
                &inner.nodes[rhs.id].data,
                |x, y| x * y,
            )
        };
        Ok(tape.push(data, shape, rg, Op::Mul { a: self.id, b: rhs.id }))
    }

    /// `mul * x + add`, elementwise.
    pub fn affine(&self, mul: f64, add: f64) -> Tensor {
        self.unary_with(|x| mul * x + add, Op::AffineScalar { p: self.id, mul, add })
    }

    /// `1 - x`, the complement used by gate mixing.
    pub fn one_minus(&self) -> Tensor {
        self.affine(-1.0, 1.0)
    }

    fn unary_with(&self, f: impl Fn(f64) -> f64, op: Op) -> Tensor {
        let (data, shape, rg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            (
                n.data.iter().map(|&x| f(x)).collect::<Vec<f64>>(),
                n.shape.clone(),
                n.requires_grad,
            )
        };
        self.tape.push(data, shape, rg, op)
    }

    pub fn relu(&self) -> Tensor {
        self.unary_with(|x| x.max(0.0), Op::Relu { p: self.id })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary_with(sigmoid, Op::Sigmoid { p: self.id })
    }

    pub fn tanh(&self) -> Tensor {
        self.unary_with(f64::tanh, Op::Tanh { p: self.id })
    }

    pub fn gelu(&self) -> Tensor {
        self.unary_with(gelu, Op::Gelu { p: self.id })
    }

    pub fn silu(&self) -> Tensor {
        self.unary_with(|x| x * sigmoid(x), Op::Silu { p: self.id })
    }

    pub fn softplus(&self) -> Tensor {
        self.unary_with(softplus, Op::Softplus { p: self.id })
    }

    /// `self[m,k] * rhs[k,n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.matmul_impl(rhs, false)
    }

    /// `self[m,k] * rhs[n,k]^T`; the layout used by weight matrices stored
    /// as `[out, in]`.
    pub fn matmul_t(&self, rhs: &Tensor) -> Result<Tensor> {
        self.matmul_impl(rhs, true)
    }

    fn matmul_impl(&self, rhs: &Tensor, tb: bool) -> Result<Tensor> {
        let tape = self.same_tape(rhs);
        let (m, k, n, rg) = {
            let inner = tape.inner.borrow();
            let (a, b) = (&inner.nodes[self.id], &inner.nodes[rhs.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 {
                return Err(TensorError::Invalid(format!(
                    "matmul expects 2-d operands, got {:?} x {:?}",
                    a.shape, b.shape
                )));
            }
            let (m, k) = (a.shape[0], a.shape[1]);
            let (bk, n) = if tb {
                (b.shape[1], b.shape[0])
            } else {
                (b.shape[0], b.shape[1])
            };
            if k != bk {
                return Err(TensorError::InnerDimMismatch {
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            (m, k, n, a.requires_grad || b.requires_grad)
        };
        let mut out = vec![0.0; m * n];
        {
            let inner = tape.inner.borrow();
            gemm(
                m,
                k,
                n,
                1.0,
                &inner.nodes[self.id].data,
                false,
                &inner.nodes[rhs.id].data,
                tb,
                0.0,
                &mut out,
            );
        }
        Ok(tape.push(
            out,
            vec![m, n],
            rg,
            Op::MatMul { a: self.id, b: rhs.id, tb, m, k, n },
        ))
    }

    /// Batched `[g,m,k] x [g,k,n]` (or `[g,n,k]` when `tb`).
    pub fn batch_matmul(&self, rhs: &Tensor, tb: bool) -> Result<Tensor> {
        let tape = self.same_tape(rhs);
        let (g, m, k, n, rg) = {
            let inner = tape.inner.borrow();
            let (a, b) = (&inner.nodes[self.id], &inner.nodes[rhs.id]);
            if a.shape.len() != 3 || b.shape.len() != 3 || a.shape[0] != b.shape[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_matmul",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let (g, m, k) = (a.shape[0], a.shape[1], a.shape[2]);
            let (bk, n) = if tb {
                (b.shape[2], b.shape[1])
            } else {
                (b.shape[1], b.shape[2])
            };
            if k != bk {
                return Err(TensorError::InnerDimMismatch {
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            (g, m, k, n, a.requires_grad || b.requires_grad)
        };
        let mut out = vec![0.0; g * m * n];
        {
            let inner = tape.inner.borrow();
            let av = &inner.nodes[self.id].data;
            let bv = &inner.nodes[rhs.id].data;
            for gi in 0..g {
                gemm(
                    m,
                    k,
                    n,
                    1.0,
                    &av[gi * m * k..(gi + 1) * m * k],
                    false,
                    &bv[gi * k * n..(gi + 1) * k * n],
                    tb,
                    0.0,
                    &mut out[gi * m * n..(gi + 1) * m * n],
                );
            }
        }
        Ok(tape.push(
            out,
            vec![g, m, n],
            rg,
            Op::BatchMatMul { a: self.id, b: rhs.id, tb, batch: g, m, k, n },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let (data, old, rg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            (n.data.clone(), n.shape.clone(), n.requires_grad)
        };
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: old,
                rhs: shape.to_vec(),
            });
        }
        Ok(self
            .tape
            .push(data, shape.to_vec(), rg, Op::Reshape { p: self.id }))
    }

    /// Swaps axes 1 and 2 of a 4-d tensor (`[a,b,c,d] -> [a,c,b,d]`).
    pub fn swap_axes_1_2(&self) -> Result<Tensor> {
        let (data, shape, rg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            if n.shape.len() != 4 {
                return Err(TensorError::Invalid(format!(
                    "swap_axes_1_2 expects a 4-d tensor, got {:?}",
                    n.shape
                )));
            }
            let s = &n.shape;
            let mut out = vec![0.0; n.data.len()];
            swap12(&n.data, &mut out, s[0], s[1], s[2], s[3], false);
            (out, vec![s[0], s[2], s[1], s[3]], n.requires_grad)
        };
        Ok(self
            .tape
            .push(data, shape, rg, Op::SwapAxes12 { p: self.id }))
    }

    /// Takes columns `start..start+width` of a 2-d tensor.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Tensor> {
        let (data, rows, rg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            if n.shape.len() != 2 || start + width > n.shape[1] {
                return Err(TensorError::Invalid(format!(
                    "slice_cols {start}..{} out of range for shape {:?}",
                    start + width,
                    n.shape
                )));
            }
            let w = n.shape[1];
            let mut out = Vec::with_capacity(n.shape[0] * width);
            for r in 0..n.shape[0] {
                out.extend_from_slice(&n.data[r * w + start..r * w + start + width]);
            }
            (out, n.shape[0], n.requires_grad)
        };
        Ok(self.tape.push(
            data,
            vec![rows, width],
            rg,
            Op::SliceCols { p: self.id, start, width },
        ))
    }

    /// Picks index `t` along axis 1 of a 3-d tensor: `[b,t,f] -> [b,f]`.
    pub fn select_axis1(&self, index: usize) -> Result<Tensor> {
        let (data, b, f, rg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            if n.shape.len() != 3 || index >= n.shape[1] {
                return Err(TensorError::Invalid(format!(
                    "select_axis1 index {index} out of range for shape {:?}",
                    n.shape
                )));
            }
            let (b, t, f) = (n.shape[0], n.shape[1], n.shape[2]);
            let mut out = Vec::with_capacity(b * f);
            for bi in 0..b {
                let off = (bi * t + index) * f;
                out.extend_from_slice(&n.data[off..off + f]);
            }
            (out, b, f, n.requires_grad)
        };
        Ok(self.tape.push(
            data,
            vec![b, f],
            rg,
            Op::SelectAxis1 { p: self.id, index },
        ))
    }

    /// Mean over axis 1 of a 3-d tensor: `[b,t,f] -> [b,f]`.
    pub fn mean_axis1(&self) -> Result<Tensor> {
        let (data, b, f, rg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            if n.shape.len() != 3 {
                return Err(TensorError::Invalid(format!(
                    "mean_axis1 expects a 3-d tensor, got {:?}",
                    n.shape
                )));
            }
            let (b, t, f) = (n.shape[0], n.shape[1], n.shape[2]);
            let mut out = vec![0.0; b * f];
            for bi in 0..b {
                for ti in 0..t {
                    let off = (bi * t + ti) * f;
                    for fi in 0..f {
                        out[bi * f + fi] += n.data[off + fi];
                    }
                }
            }
            let inv = 1.0 / t as f64;
            out.iter_mut().for_each(|v| *v *= inv);
            (out, b, f, n.requires_grad)
        };
        Ok(self
            .tape
            .push(data, vec![b, f], rg, Op::MeanAxis1 { p: self.id }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Tensor {
        let (s, rg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            (n.data.iter().sum::<f64>(), n.requires_grad)
        };
        self.tape.push(vec![s], vec![1], rg, Op::Sum { p: self.id })
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax_last(&self) -> Tensor {
        let (data, shape, rg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            let d = *n.shape.last().expect("softmax on 0-d tensor");
            let mut out = Vec::with_capacity(n.data.len());
            for row in n.data.chunks_exact(d) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                out.extend(exps.iter().map(|e| e / z));
            }
            (out, n.shape.clone(), n.requires_grad)
        };
        self.tape.push(data, shape, rg, Op::Softmax { p: self.id })
    }

    /// Log-sum-exp over the last axis; `[.., d] -> [..]`.
    pub fn logsumexp_last(&self) -> Tensor {
        let (data, shape, rg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            let d = *n.shape.last().expect("logsumexp on 0-d tensor");
            let mut out = Vec::with_capacity(n.data.len() / d);
            for row in n.data.chunks_exact(d) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = row.iter().map(|&x| (x - m).exp()).sum();
                out.push(m + s.ln());
            }
            let mut shape = n.shape.clone();
            shape.pop();
            if shape.is_empty() {
                shape.push(1);
            }
            (out, shape, n.requires_grad)
        };
        self.tape
            .push(data, shape, rg, Op::LogSumExp { p: self.id })
    }

    /// Mean negative log-likelihood of integer labels under the softmax of
    /// `self` (`[batch, classes]`).
    pub fn softmax_cross_entropy(&self, labels: &[u8]) -> Result<Tensor> {
        let (loss, probs, labels32, rg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            if n.shape.len() != 2 || n.shape[0] != labels.len() {
                return Err(TensorError::Invalid(format!(
                    "cross_entropy: logits {:?} incompatible with {} labels",
                    n.shape,
                    labels.len()
                )));
            }
            let classes = n.shape[1];
            for (i, &l) in labels.iter().enumerate() {
                if l as usize >= classes {
                    return Err(TensorError::Invalid(format!(
                        "cross_entropy: label {l} at index {i} out of range 0..{classes}"
                    )));
                }
            }
            let mut probs = Vec::with_capacity(n.data.len());
            let mut total = 0.0;
            for (row, &l) in n.data.chunks_exact(classes).zip(labels) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = row.iter().map(|&x| (x - m).exp()).sum();
                let lse = m + s.ln();
                total += lse - row[l as usize];
                probs.extend(row.iter().map(|&x| (x - lse).exp()));
            }
            (
                total / labels.len() as f64,
                probs,
                labels.iter().map(|&l| l as u32).collect::<Vec<u32>>(),
                n.requires_grad,
            )
        };
        Ok(self.tape.push(
            vec![loss],
            vec![1],
            rg,
            Op::CrossEntropy { logits: self.id, labels: labels32, probs },
        ))
    }

    /// Standardizes the last axis to zero mean and unit variance, then
    /// applies scale and shift.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let tape = self.same_tape(gamma);
        let _ = self.same_tape(beta);
        let (data, shape, mean, inv_std, rg) = {
            let inner = tape.inner.borrow();
            let x = &inner.nodes[self.id];
            let g = &inner.nodes[gamma.id];
            let b = &inner.nodes[beta.id];
            let d = *x.shape.last().unwrap_or(&0);
            if d == 0 || g.data.len() != d || b.data.len() != d {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: x.shape.clone(),
                    rhs: g.shape.clone(),
                });
            }
            let rows = x.data.len() / d;
            let mut out = Vec::with_capacity(x.data.len());
            let mut means = Vec::with_capacity(rows);
            let mut invs = Vec::with_capacity(rows);
            for row in x.data.chunks_exact(d) {
                let mu = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                means.push(mu);
                invs.push(inv);
                out.extend(
                    row.iter()
                        .enumerate()
                        .map(|(i, &v)| (v - mu) * inv * g.data[i] + b.data[i]),
                );
            }
            (
                out,
                x.shape.clone(),
                means,
                invs,
                x.requires_grad || g.requires_grad || b.requires_grad,
            )
        };
        Ok(tape.push(
            data,
            shape,
            rg,
            Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, mean, inv_std },
        ))
    }

    /// 2-d cross-correlation with bias; `self` is `[b, cin, h, w]`, kernels
    /// `[cout, cin, k, k]`, bias `[cout]`.
    pub fn conv2d(
        &self,
        kernels: &Tensor,
        bias: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        let tape = self.same_tape(kernels);
        let _ = self.same_tape(bias);
        let (geom, rg) = {
            let inner = tape.inner.borrow();
            let x = &inner.nodes[self.id];
            let kn = &inner.nodes[kernels.id];
            if x.shape.len() != 4 || kn.shape.len() != 4 || x.shape[1] != kn.shape[1] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: x.shape.clone(),
                    rhs: kn.shape.clone(),
                });
            }
            if kn.shape[2] != kn.shape[3] {
                return Err(TensorError::Invalid(format!(
                    "conv2d: only square kernels supported, got {:?}",
                    kn.shape
                )));
            }
            let k = kn.shape[2];
            let (h, w) = (x.shape[2], x.shape[3]);
            if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
                return Err(TensorError::Invalid(format!(
                    "conv2d: invalid geometry {h}x{w} pad {pad} kernel {k} stride {stride}"
                )));
            }
            let geom = ConvGeom {
                batch: x.shape[0],
                in_ch: x.shape[1],
                h,
                w,
                out_ch: kn.shape[0],
                k,
                stride,
                pad,
                oh: (h + 2 * pad - k) / stride + 1,
                ow: (w + 2 * pad - k) / stride + 1,
            };
            let brg = inner.nodes[bias.id].requires_grad;
            (geom, x.requires_grad || kn.requires_grad || brg)
        };
        let out = {
            let inner = tape.inner.borrow();
            conv2d_forward(
                &inner.nodes[self.id].data,
                &inner.nodes[kernels.id].data,
                &inner.nodes[bias.id].data,
                &geom,
            )
        };
        Ok(tape.push(
            out,
            vec![geom.batch, geom.out_ch, geom.oh, geom.ow],
            rg,
            Op::Conv2d { x: self.id, kernels: kernels.id, bias: bias.id, geom },
        ))
    }

    /// 2x2 max pooling with stride 2. Odd trailing rows/columns are
    /// truncated. Ties route the gradient to the first matching index in
    /// row-major window order.
    pub fn max_pool2(&self) -> Result<Tensor> {
        let (data, shape, argmax, rg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            if n.shape.len() != 4 {
                return Err(TensorError::Invalid(format!(
                    "max_pool2 expects [b,c,h,w], got {:?}",
                    n.shape
                )));
            }
            let (b, c, h, w) = (n.shape[0], n.shape[1], n.shape[2], n.shape[3]);
            let (oh, ow) = (h / 2, w / 2);
            assert!(n.data.len() < u32::MAX as usize);
            let mut out = Vec::with_capacity(b * c * oh * ow);
            let mut arg = Vec::with_capacity(b * c * oh * ow);
            for bc in 0..b * c {
                let plane = &n.data[bc * h * w..(bc + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = (oy * 2 + dy) * w + ox * 2 + dx;
                                if plane[idx] > best {
                                    best = plane[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out.push(best);
                        arg.push((bc * h * w + best_idx) as u32);
                    }
                }
            }
            (out, vec![b, c, oh, ow], arg, n.requires_grad)
        };
        Ok(self
            .tape
            .push(data, shape, rg, Op::MaxPool2 { p: self.id, argmax }))
    }

    /// Applies a precomputed dropout mask (entries are 0 or the inverse
    /// keep-probability scale).
    pub(crate) fn apply_dropout_mask(&self, mask: Vec<f64>) -> Tensor {
        let (data, shape, rg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            assert_eq!(mask.len(), n.data.len());
            (
                n.data.iter().zip(&mask).map(|(&x, &m)| x * m).collect(),
                n.shape.clone(),
                n.requires_grad,
            )
        };
        self.tape
            .push(data, shape, rg, Op::Dropout { p: self.id, mask })
    }

    /// Gaussian radial basis values of each element against a fixed grid:
    /// `[.., n] -> [.., n, g]`.
    pub fn rbf_basis(&self, points: Rc<Vec<f64>>, width: f64) -> Result<Tensor> {
        if points.len() < 2 || width <= 0.0 {
            return Err(TensorError::Invalid(
                "rbf_basis: need at least two grid points and positive width".into(),
            ));
        }
        let grid = RbfGrid {
            points,
            inv_width: 1.0 / width,
        };
        let (data, shape, rg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            let g = grid.points.len();
            let mut out = Vec::with_capacity(n.data.len() * g);
            for &x in &n.data {
                for &p in grid.points.iter() {
                    let z = (x - p) * grid.inv_width;
                    out.push((-z * z).exp());
                }
            }
            let mut shape = n.shape.clone();
            shape.push(g);
            (out, shape, n.requires_grad)
        };
        Ok(self
            .tape
            .push(data, shape, rg, Op::RbfBasis { p: self.id, grid }))
    }

    /// B-spline basis values of each element on an extended uniform knot
    /// vector: `[.., n] -> [.., n, n_basis]`.
    pub fn bspline_basis(&self, knots: Rc<Vec<f64>>, degree: usize) -> Result<Tensor> {
        if knots.len() < 2 * degree + 2 {
            return Err(TensorError::Invalid(format!(
                "bspline_basis: {} knots too few for degree {degree}",
                knots.len()
            )));
        }
        let n_basis = knots.len() - degree - 1;
        let grid = BsplineGrid {
            knots,
            degree,
            n_basis,
        };
        let (data, shape, rg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            let mut out = vec![0.0; n.data.len() * n_basis];
            for (e, &x) in n.data.iter().enumerate() {
                let (first, vals) = bspline_nonzero(&grid.knots, grid.degree, x);
                for (j, &v) in vals.iter().enumerate() {
                    out[e * n_basis + first + j] = v;
                }
            }
            let mut shape = n.shape.clone();
            shape.push(n_basis);
            (out, shape, n.requires_grad)
        };
        Ok(self
            .tape
            .push(data, shape, rg, Op::BsplineBasis { p: self.id, grid }))
    }
}

// ── kernels shared by forward and backward ──────────────────────────────

fn swap12(src: &[f64], dst: &mut [f64], d0: usize, d1: usize, d2: usize, d3: usize, invert: bool) {
    // forward: dst[i0,i2,i1,i3] = src[i0,i1,i2,i3]; invert swaps roles.
    for i0 in 0..d0 {
        for i1 in 0..d1 {
            for i2 in 0..d2 {
                let s = ((i0 * d1 + i1) * d2 + i2) * d3;
                let d = ((i0 * d2 + i2) * d1 + i1) * d3;
                let (from, to) = if invert { (d, s) } else { (s, d) };
                dst[to..to + d3].copy_from_slice(&src[from..from + d3]);
            }
        }
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ohw = g.oh * g.ow;
    let mut row = 0usize;
    for ci in 0..g.in_ch {
        let base = ci * g.h * g.w;
        for ky in 0..g.k {
            for kx in 0..g.k {
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_off = row * ohw + oy * g.ow;
                    if iy < 0 || iy >= g.h as isize {
                        cols[out_off..out_off + g.ow].fill(0.0);
                        continue;
                    }
                    let in_row = base + iy as usize * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        cols[out_off + ox] = if ix >= 0 && ix < g.w as isize {
                            x[in_row + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add(cols: &[f64], g: &ConvGeom, x_grad: &mut [f64]) {
    let ohw = g.oh * g.ow;
    let mut row = 0usize;
    for ci in 0..g.in_ch {
        let base = ci * g.h * g.w;
        for ky in 0..g.k {
            for kx in 0..g.k {
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let in_row = base + iy as usize * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            x_grad[in_row + ix as usize] += cols[row * ohw + oy * g.ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn conv2d_forward(x: &[f64], k: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    use rayon::prelude::*;
    let ohw = g.oh * g.ow;
    let ckk = g.in_ch * g.k * g.k;
    let sample_in = g.in_ch * g.h * g.w;
    let sample_out = g.out_ch * ohw;
    let mut out = vec![0.0; g.batch * sample_out];
    out.par_chunks_mut(sample_out)
        .enumerate()
        .for_each(|(b, out_b)| {
            let mut cols = vec![0.0; ckk * ohw];
            im2col(&x[b * sample_in..(b + 1) * sample_in], g, &mut cols);
            gemm(g.out_ch, ckk, ohw, 1.0, k, false, &cols, false, 0.0, out_b);
            for (c, row) in out_b.chunks_exact_mut(ohw).enumerate() {
                let bv = bias[c];
                row.iter_mut().for_each(|v| *v += bv);
            }
        });
    out
}

/// Finds the knot span and the `degree+1` non-zero basis values at `x`.
/// Outside the knot range the boundary span is used, which extrapolates the
/// boundary polynomial.
pub(crate) fn bspline_nonzero(knots: &[f64], degree: usize, x: f64) -> (usize, Vec<f64>) {
    let n_basis = knots.len() - degree - 1;
    let lo = degree;
    let hi = n_basis; // valid spans are lo..hi
    let mut span = lo;
    while span + 1 < hi && x >= knots[span + 1] {
        span += 1;
    }
    let mut vals = vec![0.0; degree + 1];
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    vals[0] = 1.0;
    for j in 1..=degree {
        left[j] = x - knots[span + 1 - j];
        right[j] = knots[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = vals[r] / (right[r + 1] + left[j - r]);
            vals[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        vals[j] = saved;
    }
    (span - degree, vals)
}

/// Derivatives of the `degree+1` non-zero basis functions at `x`.
fn bspline_nonzero_deriv(knots: &[f64], degree: usize, x: f64) -> (usize, Vec<f64>) {
    assert!(degree >= 1);
    let (first_lo, lower) = {
        // degree-1 bases evaluated on the same knot vector
        let n_basis = knots.len() - degree - 1;
        let lo = degree;
        let hi = n_basis;
        let mut span = lo;
        while span + 1 < hi && x >= knots[span + 1] {
            span += 1;
        }
        let mut vals = vec![0.0; degree];
        let mut left = vec![0.0; degree];
        let mut right = vec![0.0; degree];
        vals[0] = 1.0;
        for j in 1..degree {
            left[j] = x - knots[span + 1 - j];
            right[j] = knots[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = vals[r] / (right[r + 1] + left[j - r]);
                vals[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            vals[j] = saved;
        }
        (span - (degree - 1), vals)
    };
    // dB_{i,p} = p * ( B_{i,p-1}/(t[i+p]-t[i]) - B_{i+1,p-1}/(t[i+p+1]-t[i+1]) )
    let first = first_lo - 1; // derivative support covers one extra basis on the left
    let p = degree as f64;
    let b_low = |i: usize| -> f64 {
        if i >= first_lo && i < first_lo + degree {
            lower[i - first_lo]
        } else {
            0.0
        }
    };
    let mut out = vec![0.0; degree + 1];
    for (j, o) in out.iter_mut().enumerate() {
        let i = first + j;
        let d1 = knots[i + degree] - knots[i];
        let d2 = knots[i + degree + 1] - knots[i + 1];
        let t1 = if d1 > 0.0 { b_low(i) / d1 } else { 0.0 };
        let t2 = if d2 > 0.0 { b_low(i + 1) / d2 } else { 0.0 };
        *o = p * (t1 - t2);
    }
    (first, out)
}

// ── backward dispatch ───────────────────────────────────────────────────

fn add_grad(grads: &mut [Option<Vec<f64>>], nodes_len: usize, pid: usize, len: usize) -> &mut [f64] {
    debug_assert!(pid < nodes_len);
    grads[pid].get_or_insert_with(|| vec![0.0; len]).as_mut_slice()
}

pub(crate) fn backward_node(inner: &mut TapeInner, id: usize, g: &[f64]) {
    let TapeInner { nodes, grads } = inner;
    let nlen = nodes.len();
    let wants = |pid: usize| nodes[pid].requires_grad;
    let plen = |pid: usize| nodes[pid].data.len();

    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            let (a, b) = (*a, *b);
            if wants(a) {
                let ga = add_grad(grads, nlen, a, plen(a));
                ga.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
            }
            if wants(b) {
                let gb = add_grad(grads, nlen, b, plen(b));
                reduce_into(gb, g.iter().cloned());
            }
        }
        Op::Sub { a, b } => {
            let (a, b) = (*a, *b);
            if wants(a) {
                let ga = add_grad(grads, nlen, a, plen(a));
                ga.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
            }
            if wants(b) {
                let gb = add_grad(grads, nlen, b, plen(b));
                reduce_into(gb, g.iter().map(|&v| -v));
            }
        }
        Op::Mul { a, b } => {
            let (a, b) = (*a, *b);
            if wants(a) {
                let bn = plen(b);
                let bd = &nodes[b].data;
                let contrib: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| v * bd[if bn == 1 { 0 } else { i % bn }])
                    .collect();
                let ga = add_grad(grads, nlen, a, plen(a));
                ga.iter_mut().zip(&contrib).for_each(|(d, &v)| *d += v);
            }
            if wants(b) {
                let ad = &nodes[a].data;
                let contrib: Vec<f64> = g.iter().zip(ad).map(|(&v, &x)| v * x).collect();
                let gb = add_grad(grads, nlen, b, plen(b));
                reduce_into(gb, contrib.into_iter());
            }
        }
        Op::AffineScalar { p, mul, .. } => {
            let (p, mul) = (*p, *mul);
            if wants(p) {
                let gp = add_grad(grads, nlen, p, plen(p));
                gp.iter_mut().zip(g).for_each(|(d, &v)| *d += v * mul);
            }
        }
        Op::Relu { p } => {
            let p = *p;
            if wants(p) {
                let y = &nodes[id].data;
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(y)
                    .map(|(&v, &o)| if o > 0.0 { v } else { 0.0 })
                    .collect();
                let gp = add_grad(grads, nlen, p, plen(p));
                gp.iter_mut().zip(&contrib).for_each(|(d, &v)| *d += v);
            }
        }
        Op::Sigmoid { p } => {
            let p = *p;
            if wants(p) {
                let y = &nodes[id].data;
                let contrib: Vec<f64> =
                    g.iter().zip(y).map(|(&v, &o)| v * o * (1.0 - o)).collect();
                let gp = add_grad(grads, nlen, p, plen(p));
                gp.iter_mut().zip(&contrib).for_each(|(d, &v)| *d += v);
            }
        }
        Op::Tanh { p } => {
            let p = *p;
            if wants(p) {
                let y = &nodes[id].data;
                let contrib: Vec<f64> =
                    g.iter().zip(y).map(|(&v, &o)| v * (1.0 - o * o)).collect();
                let gp = add_grad(grads, nlen, p, plen(p));
                gp.iter_mut().zip(&contrib).for_each(|(d, &v)| *d += v);
            }
        }
        Op::Gelu { p } => {
            let p = *p;
            if wants(p) {
                let x = &nodes[p].data;
                let contrib: Vec<f64> =
                    g.iter().zip(x).map(|(&v, &xi)| v * gelu_deriv(xi)).collect();
                let gp = add_grad(grads, nlen, p, plen(p));
                gp.iter_mut().zip(&contrib).for_each(|(d, &v)| *d += v);
            }
        }
        Op::Silu { p } => {
            let p = *p;
            if wants(p) {
                let x = &nodes[p].data;
                let contrib: Vec<f64> =
                    g.iter().zip(x).map(|(&v, &xi)| v * silu_deriv(xi)).collect();
                let gp = add_grad(grads, nlen, p, plen(p));
                gp.iter_mut().zip(&contrib).for_each(|(d, &v)| *d += v);
            }
        }
        Op::Softplus { p } => {
            let p = *p;
            if wants(p) {
                let x = &nodes[p].data;
                let contrib: Vec<f64> =
                    g.iter().zip(x).map(|(&v, &xi)| v * sigmoid(xi)).collect();
                let gp = add_grad(grads, nlen, p, plen(p));
                gp.iter_mut().zip(&contrib).for_each(|(d, &v)| *d += v);
            }
        }
        Op::MatMul { a, b, tb, m, k, n } => {
            let (a, b, tb, m, k, n) = (*a, *b, *tb, *m, *k, *n);
            if wants(a) {
                let bd: Vec<f64> = nodes[b].data.clone();
                let ga = add_grad(grads, nlen, a, m * k);
                if tb {
                    // dA += G * B   (G[m,n], B[n,k])
                    gemm(m, n, k, 1.0, g, false, &bd, false, 1.0, ga);
                } else {
                    // dA += G * B^T (B stored [k,n])
                    gemm(m, n, k, 1.0, g, false, &bd, true, 1.0, ga);
                }
            }
            if wants(b) {
                let ad: Vec<f64> = nodes[a].data.clone();
                if tb {
                    // dB += G^T * A (dB stored [n,k])
                    let gb = add_grad(grads, nlen, b, n * k);
                    gemm(n, m, k, 1.0, g, true, &ad, false, 1.0, gb);
                } else {
                    // dB += A^T * G (dB stored [k,n])
                    let gb = add_grad(grads, nlen, b, k * n);
                    gemm(k, m, n, 1.0, &ad, true, g, false, 1.0, gb);
                }
            }
        }
        Op::BatchMatMul { a, b, tb, batch, m, k, n } => {
            let (a, b, tb, batch, m, k, n) = (*a, *b, *tb, *batch, *m, *k, *n);
            if wants(a) {
                let bd = nodes[b].data.clone();
                let ga = add_grad(grads, nlen, a, batch * m * k);
                for gi in 0..batch {
                    let gs = &g[gi * m * n..(gi + 1) * m * n];
                    let bs = &bd[gi * k * n..(gi + 1) * k * n];
                    let gas = &mut ga[gi * m * k..(gi + 1) * m * k];
                    gemm(m, n, k, 1.0, gs, false, bs, !tb, 1.0, gas);
                }
            }
            if wants(b) {
                let ad = nodes[a].data.clone();
                let gb = add_grad(grads, nlen, b, batch * k * n);
                for gi in 0..batch {
                    let gs = &g[gi * m * n..(gi + 1) * m * n];
                    let as_ = &ad[gi * m * k..(gi + 1) * m * k];
                    let gbs = &mut gb[gi * k * n..(gi + 1) * k * n];
                    if tb {
                        gemm(n, m, k, 1.0, gs, true, as_, false, 1.0, gbs);
                    } else {
                        gemm(k, m, n, 1.0, as_, true, gs, false, 1.0, gbs);
                    }
                }
            }
        }
        Op::Reshape { p } => {
            let p = *p;
            if wants(p) {
                let gp = add_grad(grads, nlen, p, plen(p));
                gp.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
            }
        }
        Op::SwapAxes12 { p } => {
            let p = *p;
            if wants(p) {
                let s = nodes[p].shape.clone();
                let mut back = vec![0.0; g.len()];
                // inverse of [d0,d1,d2,d3]->[d0,d2,d1,d3] is the same swap on
                // the swapped shape
                swap12(g, &mut back, s[0], s[2], s[1], s[3], false);
                let gp = add_grad(grads, nlen, p, plen(p));
                gp.iter_mut().zip(&back).for_each(|(d, &v)| *d += v);
            }
        }
        Op::SliceCols { p, start, width } => {
            let (p, start, width) = (*p, *start, *width);
            if wants(p) {
                let w = nodes[p].shape[1];
                let gp = add_grad(grads, nlen, p, plen(p));
                for (r, row) in g.chunks_exact(width).enumerate() {
                    let off = r * w + start;
                    gp[off..off + width]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(d, &v)| *d += v);
                }
            }
        }
        Op::SelectAxis1 { p, index } => {
            let (p, index) = (*p, *index);
            if wants(p) {
                let (t, f) = (nodes[p].shape[1], nodes[p].shape[2]);
                let gp = add_grad(grads, nlen, p, plen(p));
                for (bi, row) in g.chunks_exact(f).enumerate() {
                    let off = (bi * t + index) * f;
                    gp[off..off + f].iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                }
            }
        }
        Op::MeanAxis1 { p } => {
            let p = *p;
            if wants(p) {
                let (t, f) = (nodes[p].shape[1], nodes[p].shape[2]);
                let inv = 1.0 / t as f64;
                let gp = add_grad(grads, nlen, p, plen(p));
                for (bi, row) in g.chunks_exact(f).enumerate() {
                    for ti in 0..t {
                        let off = (bi * t + ti) * f;
                        gp[off..off + f]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(d, &v)| *d += v * inv);
                    }
                }
            }
        }
        Op::Sum { p } => {
            let p = *p;
            if wants(p) {
                let v = g[0];
                let gp = add_grad(grads, nlen, p, plen(p));
                gp.iter_mut().for_each(|d| *d += v);
            }
        }
        Op::Softmax { p } => {
            let p = *p;
            if wants(p) {
                let y = nodes[id].data.clone();
                let d = *nodes[id].shape.last().unwrap();
                let gp = add_grad(grads, nlen, p, plen(p));
                for ((grow, yrow), out) in g
                    .chunks_exact(d)
                    .zip(y.chunks_exact(d))
                    .zip(gp.chunks_exact_mut(d))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for i in 0..d {
                        out[i] += yrow[i] * (grow[i] - dot);
                    }
                }
            }
        }
        Op::LogSumExp { p } => {
            let p = *p;
            if wants(p) {
                let y = nodes[id].data.clone();
                let d = *nodes[p].shape.last().unwrap();
                let x = nodes[p].data.clone();
                let gp = add_grad(grads, nlen, p, plen(p));
                for (r, (xrow, out)) in x.chunks_exact(d).zip(gp.chunks_exact_mut(d)).enumerate() {
                    let gv = g[r];
                    let lse = y[r];
                    for i in 0..d {
                        out[i] += gv * (xrow[i] - lse).exp();
                    }
                }
            }
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let logits = *logits;
            if wants(logits) {
                let bsz = labels.len();
                let d = probs.len() / bsz;
                let scale = g[0] / bsz as f64;
                let labels = labels.clone();
                let probs = probs.clone();
                let gp = add_grad(grads, nlen, logits, bsz * d);
                for (b, (prow, out)) in probs
                    .chunks_exact(d)
                    .zip(gp.chunks_exact_mut(d))
                    .enumerate()
                {
                    for i in 0..d {
                        let onehot = if i as u32 == labels[b] { 1.0 } else { 0.0 };
                        out[i] += scale * (prow[i] - onehot);
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, mean, inv_std } => {
            let (x, gamma, beta) = (*x, *gamma, *beta);
            let d = nodes[gamma].data.len();
            let mean = mean.clone();
            let inv_std = inv_std.clone();
            let xd = nodes[x].data.clone();
            let gd = nodes[gamma].data.clone();
            if wants(x) {
                let gp = add_grad(grads, nlen, x, xd.len());
                for (r, (grow, out)) in g.chunks_exact(d).zip(gp.chunks_exact_mut(d)).enumerate() {
                    let inv = inv_std[r];
                    let mu = mean[r];
                    let xrow = &xd[r * d..(r + 1) * d];
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for i in 0..d {
                        let dyg = grow[i] * gd[i];
                        let xh = (xrow[i] - mu) * inv;
                        s1 += dyg;
                        s2 += dyg * xh;
                    }
                    let dn = d as f64;
                    for i in 0..d {
                        let dyg = grow[i] * gd[i];
                        let xh = (xrow[i] - mu) * inv;
                        out[i] += inv * (dyg - s1 / dn - xh * s2 / dn);
                    }
                }
            }
            if wants(gamma) {
                let gp = add_grad(grads, nlen, gamma, d);
                for (r, grow) in g.chunks_exact(d).enumerate() {
                    let inv = inv_std[r];
                    let mu = mean[r];
                    let xrow = &xd[r * d..(r + 1) * d];
                    for i in 0..d {
                        gp[i] += grow[i] * (xrow[i] - mu) * inv;
                    }
                }
            }
            if wants(beta) {
                let gp = add_grad(grads, nlen, beta, d);
                for grow in g.chunks_exact(d) {
                    for i in 0..d {
                        gp[i] += grow[i];
                    }
                }
            }
        }
        Op::Conv2d { x, kernels, bias, geom } => {
            let (x, kernels, bias, geom) = (*x, *kernels, *bias, *geom);
            conv2d_backward(nodes, grads, nlen, x, kernels, bias, &geom, g);
        }
        Op::MaxPool2 { p, argmax } => {
            let p = *p;
            if wants(p) {
                let argmax = argmax.clone();
                let gp = add_grad(grads, nlen, p, plen(p));
                for (i, &v) in g.iter().enumerate() {
                    gp[argmax[i] as usize] += v;
                }
            }
        }
        Op::Dropout { p, mask } => {
            let p = *p;
            if wants(p) {
                let mask = mask.clone();
                let gp = add_grad(grads, nlen, p, plen(p));
                gp.iter_mut()
                    .zip(g)
                    .zip(&mask)
                    .for_each(|((d, &v), &m)| *d += v * m);
            }
        }
        Op::RbfBasis { p, grid } => {
            let p = *p;
            if wants(p) {
                let grid = grid.clone();
                let x = nodes[p].data.clone();
                let nb = grid.points.len();
                let gp = add_grad(grads, nlen, p, x.len());
                for (e, out) in gp.iter_mut().enumerate() {
                    let xe = x[e];
                    let grow = &g[e * nb..(e + 1) * nb];
                    let mut acc = 0.0;
                    for (j, &pt) in grid.points.iter().enumerate() {
                        let z = (xe - pt) * grid.inv_width;
                        let phi = (-z * z).exp();
                        acc += grow[j] * phi * (-2.0 * z * grid.inv_width);
                    }
                    *out += acc;
                }
            }
        }
        Op::BsplineBasis { p, grid } => {
            let p = *p;
            if wants(p) {
                let grid = grid.clone();
                let x = nodes[p].data.clone();
                let nb = grid.n_basis;
                let gp = add_grad(grads, nlen, p, x.len());
                for (e, out) in gp.iter_mut().enumerate() {
                    let (first, dvals) = bspline_nonzero_deriv(&grid.knots, grid.degree, x[e]);
                    let grow = &g[e * nb..(e + 1) * nb];
                    let mut acc = 0.0;
                    for (j, &dv) in dvals.iter().enumerate() {
                        let idx = first + j;
                        if idx < nb {
                            acc += grow[idx] * dv;
                        }
                    }
                    *out += acc;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    nlen: usize,
    x: usize,
    kernels: usize,
    bias: usize,
    g: &ConvGeom,
    gout: &[f64],
) {
    use rayon::prelude::*;
    let ohw = g.oh * g.ow;
    let ckk = g.in_ch * g.k * g.k;
    let sample_in = g.in_ch * g.h * g.w;
    let sample_out = g.out_ch * ohw;
    let xd = nodes[x].data.clone();
    let kd = nodes[kernels].data.clone();

    if nodes[bias].requires_grad {
        let gb = add_grad(grads, nlen, bias, g.out_ch);
        for out_b in gout.chunks_exact(sample_out) {
            for (c, row) in out_b.chunks_exact(ohw).enumerate() {
                gb[c] += row.iter().sum::<f64>();
            }
        }
    }

    if nodes[kernels].requires_grad {
        // fixed-size batch chunks accumulated in chunk order keep the sum
        // independent of thread scheduling
        const CHUNK: usize = 16;
        let partials: Vec<Vec<f64>> = (0..g.batch)
            .collect::<Vec<_>>()
            .par_chunks(CHUNK)
            .map(|bs| {
                let mut local = vec![0.0; g.out_ch * ckk];
                let mut cols = vec![0.0; ckk * ohw];
                for &b in bs {
                    im2col(&xd[b * sample_in..(b + 1) * sample_in], g, &mut cols);
                    let gb = &gout[b * sample_out..(b + 1) * sample_out];
                    gemm(g.out_ch, ohw, ckk, 1.0, gb, false, &cols, true, 1.0, &mut local);
                }
                local
            })
            .collect();
        let gk = add_grad(grads, nlen, kernels, g.out_ch * ckk);
        for part in partials {
            gk.iter_mut().zip(&part).for_each(|(d, &v)| *d += v);
        }
    }

    if nodes[x].requires_grad {
        let mut gx = vec![0.0; g.batch * sample_in];
        gx.par_chunks_mut(sample_in).enumerate().for_each(|(b, gx_b)| {
            let mut dcols = vec![0.0; ckk * ohw];
            let gb = &gout[b * sample_out..(b + 1) * sample_out];
            gemm(ckk, g.out_ch, ohw, 1.0, &kd, true, gb, false, 0.0, &mut dcols);
            col2im_add(&dcols, g, gx_b);
        });
        let gxp = add_grad(grads, nlen, x, g.batch * sample_in);
        gxp.iter_mut().zip(&gx).for_each(|(d, &v)| *d += v);
    }
}

use super::Node;
