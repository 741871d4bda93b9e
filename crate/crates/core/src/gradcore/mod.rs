//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node that owns its forward value.
//! Nodes are appended after their parents, so index order is a topological
//! order and [`Graph::backward`] simply walks the tape in reverse.
//!
//! ```
//! use stec_core::gradcore::Graph;
//! use stec_core::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param("x", Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(g.value(y).item(), 9.0);
//! assert_eq!(grads.by_name("x").unwrap().item(), 6.0);
//! ```

pub mod check;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::tensor::{gemm, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("node {node} ({op}): shape mismatch, {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("node {node}: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { node: usize, shape: Vec<usize> },
    #[error("node {node}: batch norm in train mode needs at least 2 rows, got {rows}")]
    BatchTooSmall { node: usize, rows: usize },
    #[error("node {node} ({op}): {detail}")]
    InvalidArgument {
        node: usize,
        op: &'static str,
        detail: String,
    },
}

pub type Result<T> = std::result::Result<T, GradError>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        inv_std: Vec<f64>,
        mean: Vec<f64>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
        eps: f64,
    },
    LogSoftmaxRows {
        x: Var,
        mask: Option<Vec<bool>>,
    },
    Gather {
        x: Var,
        flat: Vec<usize>,
    },
    Select {
        x: Var,
        rows: Vec<usize>,
        cols: Vec<usize>,
    },
    ConcatCols(Var, Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Im2Col {
        x: Var,
        geom: ConvGeom,
    },
    GroupMean {
        x: Var,
        group: usize,
    },
}

/// Geometry of a square-kernel 2-D convolution over NHWC input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// For every (patch row, patch column) the flat input index, or `None` for padding.
    fn for_each_tap(&self, mut f: impl FnMut(usize, Option<usize>)) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let plen = self.patch_len();
        for b in 0..self.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = (b * oh + oy) * ow + ox;
                    let mut col = 0;
                    for ky in 0..self.kernel {
                        for kx in 0..self.kernel {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            let inside = iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.height
                                && (ix as usize) < self.width;
                            for c in 0..self.channels {
                                let src = inside.then(|| {
                                    ((b * self.height + iy as usize) * self.width + ix as usize)
                                        * self.channels
                                        + c
                                });
                                f(row * plen + col, src);
                                col += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    name: Option<String>,
}

/// Result of batch normalization in train mode: the output node plus the
/// batch statistics needed to update running estimates.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<f64>,
}

/// Gradients from one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Grads {
    by_var: BTreeMap<Var, Tensor>,
    by_name: BTreeMap<String, Tensor>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_var.get(&v)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn named(&self) -> &BTreeMap<String, Tensor> {
        &self.by_name
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor> {
        self.by_name
    }
}

/// A recorded computation.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
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

    /// A constant leaf: no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false, None)
    }

    /// A named differentiable leaf.
    pub fn param(&mut self, name: &str, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true, Some(name.to_string()))
    }

    /// A constant copy of `v`; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.input(t)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: Option<String>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name,
        });
        Var(self.nodes.len() - 1)
    }

    fn next_id(&self) -> usize {
        self.nodes.len()
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn mismatch(&self, op: &'static str, detail: String) -> GradError {
        GradError::ShapeMismatch {
            node: self.next_id(),
            op,
            detail,
        }
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(self.mismatch(op, format!("expected a matrix, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(self.mismatch("matmul", format!("[{m}x{k}] · [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let t = Tensor::new(vec![m, n], out).expect("matmul shape");
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), rg, None))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(self.mismatch("matmul_nt", format!("[{m}x{k}] · [{n}x{k2}]ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.value(a).data(), false, self.value(b).data(), true, 0.0, &mut out);
        let t = Tensor::new(vec![m, n], out).expect("matmul shape");
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MatMulNT(a, b), rg, None))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("elementwise shape");
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, op, rg, None))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "add_row")?;
        if self.shape(bias) != [n] {
            return Err(self.mismatch("add_row", format!("bias {:?} for [{m}x{n}]", self.shape(bias))));
        }
        let bv = self.value(bias).data();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(bv) {
                *x += b;
            }
        }
        let t = Tensor::new(vec![m, n], data).expect("add_row shape");
        let rg = self.rg(&[a, bias]);
        Ok(self.push(t, Op::AddRow(a, bias), rg, None))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(t, op, rg, None)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        // Reuses Mul so the gradient is 2x through both parents.
        let t = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(t, Op::Mul(a, a), rg, None)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(t, Op::Sum(a), rg, None)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Batch normalization using the statistics of this batch.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (m, n) = self.dims2(x, "batch_norm")?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(self.mismatch(
                "batch_norm",
                format!("gamma {:?} beta {:?} for width {n}", self.shape(gamma), self.shape(beta)),
            ));
        }
        if m < 2 {
            return Err(GradError::BatchTooSmall {
                node: self.next_id(),
                rows: m,
            });
        }
        let xv = self.value(x).data();
        let mut mean = vec![0.0; n];
        for row in xv.chunks(n) {
            for (acc, v) in mean.iter_mut().zip(row) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        let mut var = vec![0.0; n];
        for row in xv.chunks(n) {
            for j in 0..n {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        let biased: Vec<f64> = var.iter().map(|v| v / m as f64).collect();
        let unbiased: Vec<f64> = var.iter().map(|v| v / (m - 1) as f64).collect();
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; m * n];
        for (i, row) in xv.chunks(n).enumerate() {
            for j in 0..n {
                xhat[i * n + j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = gv[j] * xhat[i * n + j] + bv[j];
            }
        }
        let t = Tensor::new(vec![m, n], out).expect("bn shape");
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
            None,
        );
        Ok((
            v,
            BatchStats {
                mean,
                var: unbiased,
            },
        ))
    }

    /// Batch normalization with frozen statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (m, n) = self.dims2(x, "batch_norm_eval")?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] || running_mean.len() != n || running_var.len() != n {
            return Err(self.mismatch("batch_norm_eval", format!("parameter widths do not match {n}")));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = gv[j] * (xv[i * n + j] - running_mean[j]) * inv_std[j] + bv[j];
            }
        }
        let t = Tensor::new(vec![m, n], out).expect("bn shape");
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                inv_std,
                mean: running_mean.to_vec(),
            },
            rg,
            None,
        ))
    }

    /// Divides each row by `max(‖row‖, eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2(x, "l2_normalize_rows")?;
        let xv = self.value(x).data();
        let norms: Vec<f64> = xv.chunks(n).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let d = norms[i].max(eps);
            for j in 0..n {
                out[i * n + j] = xv[i * n + j] / d;
            }
        }
        let t = Tensor::new(vec![m, n], out).expect("normalize shape");
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::L2NormalizeRows { x, norms, eps }, rg, None))
    }

    /// Row-wise log-softmax. Entries where `mask` is `false` are excluded from
    /// the normalizer; their output is 0 and they receive no gradient.
    pub fn log_softmax_rows(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let (m, n) = self.dims2(x, "log_softmax_rows")?;
        if let Some(mk) = &mask {
            if mk.len() != m * n {
                return Err(self.mismatch("log_softmax_rows", format!("mask of {} for [{m}x{n}]", mk.len())));
            }
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let keep = |j: usize| mask.as_ref().is_none_or(|mk| mk[i * n + j]);
            let row = &xv[i * n..(i + 1) * n];
            let mx = (0..n).filter(|&j| keep(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                return Err(GradError::InvalidArgument {
                    node: self.next_id(),
                    op: "log_softmax_rows",
                    detail: format!("row {i} has no unmasked entries"),
                });
            }
            let lse = mx + (0..n).filter(|&j| keep(j)).map(|j| (row[j] - mx).exp()).sum::<f64>().ln();
            for j in 0..n {
                if keep(j) {
                    out[i * n + j] = row[j] - lse;
                }
            }
        }
        let t = Tensor::new(vec![m, n], out).expect("softmax shape");
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::LogSoftmaxRows { x, mask }, rg, None))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let ls = self.log_softmax_rows(x, None)?;
        Ok(self.exp(ls))
    }

    /// Picks `(row, col)` entries of a matrix into a vector.
    pub fn gather(&mut self, x: Var, index: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = self.dims2(x, "gather")?;
        if let Some(&(r, c)) = index.iter().find(|(r, c)| *r >= m || *c >= n) {
            return Err(self.mismatch("gather", format!("index ({r},{c}) outside [{m}x{n}]")));
        }
        let flat: Vec<usize> = index.iter().map(|(r, c)| r * n + c).collect();
        let xv = self.value(x).data();
        let t = Tensor::vector(flat.iter().map(|&i| xv[i]).collect());
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Gather { x, flat }, rg, None))
    }

    /// `y[i, j] = x[rows[i], cols[j]]`.
    pub fn select(&mut self, x: Var, rows: &[usize], cols: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x, "select")?;
        if rows.iter().any(|&r| r >= m) || cols.iter().any(|&c| c >= n) {
            return Err(self.mismatch("select", format!("index outside [{m}x{n}]")));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * cols.len());
        for &r in rows {
            for &c in cols {
                out.push(xv[r * n + c]);
            }
        }
        let t = Tensor::new(vec![rows.len(), cols.len()], out).expect("select shape");
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::Select {
                x,
                rows: rows.to_vec(),
                cols: cols.to_vec(),
            },
            rg,
            None,
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.dims2(a, "concat_cols")?;
        let (m2, q) = self.dims2(b, "concat_cols")?;
        if m != m2 {
            return Err(self.mismatch("concat_cols", format!("[{m}x{p}] with [{m2}x{q}]")));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            out.extend_from_slice(&av[i * p..(i + 1) * p]);
            out.extend_from_slice(&bv[i * q..(i + 1) * q]);
        }
        let t = Tensor::new(vec![m, p + q], out).expect("concat shape");
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::ConcatCols(a, b), rg, None))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let rows = self.value(x).rows();
        if self.value(x).ndim() < 2 || start > end || end > rows {
            return Err(self.mismatch("slice_rows", format!("{start}..{end} of {:?}", self.shape(x))));
        }
        let t = self.value(x).slice_rows(start, end);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SliceRows { x, start }, rg, None))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self
            .value(x)
            .clone()
            .reshape(shape)
            .map_err(|e| self.mismatch("reshape", e.to_string()))?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg, None))
    }

    /// Unfolds NHWC input into one row per output location.
    pub fn im2col(&mut self, x: Var, geom: ConvGeom) -> Result<Var> {
        let want = [geom.batch, geom.height, geom.width, geom.channels];
        if self.shape(x) != want {
            return Err(self.mismatch("im2col", format!("{:?} vs geometry {want:?}", self.shape(x))));
        }
        if geom.kernel == 0 || geom.stride == 0 || geom.height + 2 * geom.pad < geom.kernel {
            return Err(GradError::InvalidArgument {
                node: self.next_id(),
                op: "im2col",
                detail: format!("degenerate geometry {geom:?}"),
            });
        }
        let rows = geom.batch * geom.out_height() * geom.out_width();
        let mut out = vec![0.0; rows * geom.patch_len()];
        let xv = self.value(x).data();
        geom.for_each_tap(|dst, src| {
            if let Some(s) = src {
                out[dst] = xv[s];
            }
        });
        let t = Tensor::new(vec![rows, geom.patch_len()], out).expect("im2col shape");
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Im2Col { x, geom }, rg, None))
    }

    /// Averages consecutive groups of `group` rows: `[B·G × C] → [B × C]`.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "group_mean")?;
        if group == 0 || m % group != 0 {
            return Err(self.mismatch("group_mean", format!("{m} rows in groups of {group}")));
        }
        let b = m / group;
        let xv = self.value(x).data();
        let mut out = vec![0.0; b * n];
        for i in 0..m {
            let dst = &mut out[(i / group) * n..(i / group + 1) * n];
            for (d, v) in dst.iter_mut().zip(&xv[i * n..(i + 1) * n]) {
                *d += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= group as f64);
        let t = Tensor::new(vec![b, n], out).expect("group_mean shape");
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::GroupMean { x, group }, rg, None))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(GradError::NonScalarLoss {
                node: loss.0,
                shape: lv.shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        let mut out = Grads::default();
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut adj);
            if matches!(node.op, Op::Leaf) {
                if let Some(name) = &node.name {
                    out.by_name.insert(name.clone(), g.clone());
                }
                out.by_var.insert(Var(id), g);
            }
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let like = |v: Var, data: Vec<f64>| Tensor::new(self.value(v).shape().to_vec(), data).expect("grad shape");
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, g.data(), false, self.value(*b).data(), true, 0.0, &mut da);
                    acc(*a, like(*a, da));
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, self.value(*a).data(), true, g.data(), false, 0.0, &mut db);
                    acc(*b, like(*b, db));
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).rows();
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, g.data(), false, self.value(*b).data(), false, 0.0, &mut da);
                    acc(*a, like(*a, da));
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, 1.0, g.data(), true, self.value(*a).data(), false, 0.0, &mut db);
                    acc(*b, like(*b, db));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                acc(*a, like(*a, g.data().iter().zip(vb).map(|(g, y)| g * y).collect()));
                acc(*b, like(*b, g.data().iter().zip(va).map(|(g, x)| g * x).collect()));
            }
            Op::AddRow(a, bias) => {
                acc(*a, g.clone());
                let n = g.cols();
                let mut db = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                acc(*bias, like(*bias, db));
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| x * c)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Relu(a) => {
                let va = self.value(*a).data();
                acc(*a, like(*a, g.data().iter().zip(va).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect()));
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, like(*a, g.data().iter().zip(y).map(|(g, y)| g * y).collect()));
            }
            Op::Log(a) => {
                let va = self.value(*a).data();
                acc(*a, like(*a, g.data().iter().zip(va).map(|(g, x)| g / x).collect()));
            }
            Op::Sum(a) => {
                let s = g.item();
                acc(*a, Tensor::full(self.value(*a).shape(), s));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = inv_std.len();
                let m = g.len() / n;
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        let dy = g.data()[i * n + j];
                        dgamma[j] += dy * xhat[i * n + j];
                        dbeta[j] += dy;
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; m * n];
                    let mf = m as f64;
                    for j in 0..n {
                        // dxhat = dy * gamma; sums over the batch of dxhat and dxhat*xhat
                        let s1 = dbeta[j] * gv[j];
                        let s2 = dgamma[j] * gv[j];
                        for i in 0..m {
                            let dxh = g.data()[i * n + j] * gv[j];
                            dx[i * n + j] = inv_std[j] / mf * (mf * dxh - s1 - xhat[i * n + j] * s2);
                        }
                    }
                    acc(*x, like(*x, dx));
                }
                acc(*gamma, like(*gamma, dgamma));
                acc(*beta, like(*beta, dbeta));
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                inv_std,
                mean,
            } => {
                let n = inv_std.len();
                let m = g.len() / n;
                let gv = self.value(*gamma).data();
                let xv = self.value(*x).data();
                let mut dx = vec![0.0; m * n];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        let dy = g.data()[i * n + j];
                        dx[i * n + j] = dy * gv[j] * inv_std[j];
                        dgamma[j] += dy * (xv[i * n + j] - mean[j]) * inv_std[j];
                        dbeta[j] += dy;
                    }
                }
                acc(*x, like(*x, dx));
                acc(*gamma, like(*gamma, dgamma));
                acc(*beta, like(*beta, dbeta));
            }
            Op::L2NormalizeRows { x, norms, eps } => {
                let n = g.cols();
                let y = node.value.data();
                let mut dx = vec![0.0; g.len()];
                for (i, &r) in norms.iter().enumerate() {
                    let row = i * n..(i + 1) * n;
                    if r > *eps {
                        let ydg: f64 = y[row.clone()].iter().zip(&g.data()[row.clone()]).map(|(a, b)| a * b).sum();
                        for j in row {
                            dx[j] = (g.data()[j] - ydg * y[j]) / r;
                        }
                    } else {
                        for j in row {
                            dx[j] = g.data()[j] / eps;
                        }
                    }
                }
                acc(*x, like(*x, dx));
            }
            Op::LogSoftmaxRows { x, mask } => {
                let n = g.cols();
                let y = node.value.data();
                let mut dx = vec![0.0; g.len()];
                for i in 0..g.rows() {
                    let keep = |j: usize| mask.as_ref().is_none_or(|mk| mk[i * n + j]);
                    let gs: f64 = (0..n).filter(|&j| keep(j)).map(|j| g.data()[i * n + j]).sum();
                    for j in (0..n).filter(|&j| keep(j)) {
                        dx[i * n + j] = g.data()[i * n + j] - y[i * n + j].exp() * gs;
                    }
                }
                acc(*x, like(*x, dx));
            }
            Op::Gather { x, flat } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (k, &i) in flat.iter().enumerate() {
                    dx[i] += g.data()[k];
                }
                acc(*x, like(*x, dx));
            }
            Op::Select { x, rows, cols } => {
                let n = self.value(*x).cols();
                let mut dx = vec![0.0; self.value(*x).len()];
                for (i, &r) in rows.iter().enumerate() {
                    for (j, &c) in cols.iter().enumerate() {
                        dx[r * n + c] += g.data()[i * cols.len() + j];
                    }
                }
                acc(*x, like(*x, dx));
            }
            Op::ConcatCols(a, b) => {
                let p = self.value(*a).cols();
                let q = self.value(*b).cols();
                let mut da = Vec::with_capacity(g.rows() * p);
                let mut db = Vec::with_capacity(g.rows() * q);
                for row in g.data().chunks(p + q) {
                    da.extend_from_slice(&row[..p]);
                    db.extend_from_slice(&row[p..]);
                }
                acc(*a, like(*a, da));
                acc(*b, like(*b, db));
            }
            Op::SliceRows { x, start } => {
                let c = g.cols();
                let mut dx = vec![0.0; self.value(*x).len()];
                dx[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(*x, like(*x, dx));
            }
            Op::Reshape(x) => acc(*x, like(*x, g.data().to_vec())),
            Op::Im2Col { x, geom } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                geom.for_each_tap(|dst, src| {
                    if let Some(s) = src {
                        dx[s] += g.data()[dst];
                    }
                });
                acc(*x, like(*x, dx));
            }
            Op::GroupMean { x, group } => {
                let n = g.cols();
                let m = self.value(*x).rows();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = g.data()[(i / group) * n + j] / *group as f64;
                    }
                }
                acc(*x, like(*x, dx));
            }
        }
    }
}

/// Builds a graph from named inputs, then differentiates its scalar output.
///
/// Every input is registered as a differentiable leaf under its name. The
/// builder returns the loss node; the result pairs the loss value with the
/// gradient for each input.
pub fn forward_backward<F>(inputs: &[(&str, Tensor)], build: F) -> Result<(Tensor, BTreeMap<String, Tensor>)>
where
    F: FnOnce(&mut Graph, &BTreeMap<String, Var>) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: BTreeMap<String, Var> = inputs
        .iter()
        .map(|(name, t)| (name.to_string(), g.param(name, t.clone())))
        .collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let mut named = grads.into_named();
    for name in vars.keys() {
        named
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.value(vars[name]).shape()));
    }
    Ok((g.value(loss).clone(), named))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn square_value_and_grad() {
        let (v, g) = forward_backward(&[("x", Tensor::scalar(3.0))], |g, v| {
            let x = v["x"];
            Ok(g.square(x))
        })
        .unwrap();
        assert_eq!(v.item(), 9.0);
        assert_eq!(g["x"].item(), 6.0);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform_with_zero_sum_grad() {
        let mut g = Graph::new();
        let x = g.param("x", m(1, 4, &[0.7; 4]));
        let p = g.softmax_rows(x).unwrap();
        for v in g.value(p).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert!(grads.by_name("x").unwrap().data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param("x", m(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(GradError::NonScalarLoss { .. })));
    }

    #[test]
    fn matmul_shape_mismatch_names_node() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(GradError::ShapeMismatch { node, op, .. }) => {
                assert_eq!(node, 2);
                assert_eq!(op, "matmul");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn batch_norm_requires_two_rows() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 3]));
        let ga = g.input(Tensor::full(&[3], 1.0));
        let be = g.input(Tensor::zeros(&[3]));
        assert!(matches!(
            g.batch_norm_train(x, ga, be, BN_EPS),
            Err(GradError::BatchTooSmall { rows: 1, .. })
        ));
    }

    #[test]
    fn batch_norm_standardized_input_is_fixed_point() {
        // columns have mean 0 and biased variance 1
        let x = m(4, 2, &[1.0, -1.0, -1.0, 1.0, 1.0, 1.0, -1.0, -1.0]);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let ga = g.input(Tensor::full(&[2], 1.0));
        let be = g.input(Tensor::zeros(&[2]));
        let (y, _) = g.batch_norm_train(xv, ga, be, BN_EPS).unwrap();
        assert!(g.value(y).max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn batch_norm_constant_column_maps_to_beta() {
        let x = m(3, 2, &[5.0, 1.0, 5.0, 2.0, 5.0, 3.0]);
        let mut g = Graph::new();
        let xv = g.input(x);
        let ga = g.input(Tensor::vector(vec![2.0, 1.0]));
        let be = g.input(Tensor::vector(vec![0.25, 0.0]));
        let (y, stats) = g.batch_norm_train(xv, ga, be, BN_EPS).unwrap();
        for i in 0..3 {
            assert_eq!(g.value(y).get2(i, 0), 0.25);
        }
        assert_eq!(stats.var[0], 0.0);
    }

    #[test]
    fn batch_norm_eval_differs_from_train_on_shifted_batch() {
        let x = m(3, 1, &[10.0, 11.0, 12.0]);
        let mut g = Graph::new();
        let xv = g.input(x);
        let ga = g.input(Tensor::vector(vec![1.0]));
        let be = g.input(Tensor::vector(vec![0.0]));
        let (train, _) = g.batch_norm_train(xv, ga, be, BN_EPS).unwrap();
        // running stats frozen at their initial values
        let eval = g.batch_norm_eval(xv, ga, be, &[0.0], &[1.0], BN_EPS).unwrap();
        let t = g.value(train).data().to_vec();
        let e = g.value(eval).data().to_vec();
        // train: (x - 11) / sqrt(2/3 + eps); eval: x / sqrt(1 + eps)
        let s = (2.0f64 / 3.0 + BN_EPS).sqrt();
        assert!((t[0] + 1.0 / s).abs() < 1e-12);
        assert!((e[0] - 10.0 / (1.0 + BN_EPS).sqrt()).abs() < 1e-12);
        assert!(t.iter().zip(&e).all(|(a, b)| (a - b).abs() > 1.0));
    }

    #[test]
    fn masked_log_softmax_ignores_masked_entries() {
        let mut g = Graph::new();
        let x = g.param("x", m(1, 3, &[100.0, 0.0, 0.0]));
        let ls = g.log_softmax_rows(x, Some(vec![false, true, true])).unwrap();
        let v = g.value(ls).data().to_vec();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 0.5f64.ln()).abs() < 1e-15);
        let s = g.sum(ls);
        let gr = g.backward(s).unwrap();
        assert_eq!(gr.by_name("x").unwrap().data()[0], 0.0);
    }

    #[test]
    fn gradients_accumulate_for_shared_nodes() {
        let (_, g) = forward_backward(&[("x", Tensor::vector(vec![2.0, -3.0]))], |g, v| {
            let x = v["x"];
            let y = g.add(x, x)?;
            let z = g.mul(y, x)?;
            Ok(g.sum(z))
        })
        .unwrap();
        // d/dx sum(2x^2) = 4x
        assert_eq!(g["x"].data(), &[8.0, -12.0]);
    }

    #[test]
    fn im2col_identity_kernel_reproduces_input() {
        let geom = ConvGeom {
            batch: 1,
            height: 2,
            width: 2,
            channels: 1,
            kernel: 1,
            stride: 1,
            pad: 0,
        };
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let c = g.im2col(x, geom).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(g.shape(c), &[4, 1]);
    }
}
