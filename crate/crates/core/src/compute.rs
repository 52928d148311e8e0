//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! All learned blocks in this crate run on a [`Graph`]: a Wengert tape of
//! coarse operations (linear maps, softmax, attention pieces, kernel-point
//! convolution) over flat `f64` buffers. A forward pass appends nodes to the
//! tape; [`Graph::backward`] replays it in reverse and populates gradients
//! for every `requires_grad` ancestor of a scalar loss.
//!
//! Gradients are verified against central finite differences by
//! [`finite_diff_check`], which is the build gate for every loss and block.

use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ComputeError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got {num} elements")]
    NonScalarLoss { num: usize },
    #[error("stale tape: backward was already run on this graph")]
    StaleTape,
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("oracle error: {0}")]
    Oracle(String),
    #[error("parameter container error: {0}")]
    Container(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ComputeError>;

/// Handle to a tensor living on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// One link of a kernel-point convolution: output point takes neighbor
/// `src` through kernel `kernel` with geometric influence `h`.
#[derive(Debug, Clone, Copy)]
pub struct KpLink {
    pub src: u32,
    pub kernel: u16,
    pub h: f64,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Linear {
        x: TensorId,
        w: TensorId,
        b: TensorId,
    },
    MatMul {
        a: TensorId,
        b: TensorId,
    },
    Transpose {
        x: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        x: TensorId,
        c: f64,
    },
    AddConst {
        x: TensorId,
    },
    Relu {
        x: TensorId,
    },
    Tanh {
        x: TensorId,
    },
    Sigmoid {
        x: TensorId,
    },
    Exp {
        x: TensorId,
    },
    Ln {
        x: TensorId,
    },
    Sqrt {
        x: TensorId,
    },
    SoftmaxRows {
        x: TensorId,
    },
    LogSumExpRows {
        x: TensorId,
    },
    SubColVec {
        x: TensorId,
        v: TensorId,
    },
    SubRowVec {
        x: TensorId,
        v: TensorId,
    },
    MulColVec {
        x: TensorId,
        v: TensorId,
    },
    Sum {
        x: TensorId,
    },
    GatherRows {
        x: TensorId,
        idx: Vec<usize>,
    },
    HStack {
        a: TensorId,
        b: TensorId,
    },
    RowMaxMasked {
        x: TensorId,
        argmax: Vec<usize>,
    },
    MaxPair {
        a: TensorId,
        b: TensorId,
    },
    PadDustbin {
        x: TensorId,
        alpha: TensorId,
    },
    RotaryApply {
        theta: TensorId,
        x: TensorId,
    },
    KpConv {
        feats: TensorId,
        w: TensorId,
        links: std::rc::Rc<Vec<Vec<KpLink>>>,
    },
    NormRows {
        x: TensorId,
        eps: f64,
    },
    Reshape {
        x: TensorId,
    },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Tape-based computation graph. Append-only during the forward pass;
/// consumed once by `backward`.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
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

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last backward pass, if this tensor participated.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn leaf(
        &mut self,
        values: Vec<f64>,
        shape: &[usize],
        requires_grad: bool,
    ) -> Result<TensorId> {
        if numel(shape) != values.len() {
            return Err(ComputeError::ShapeMismatch {
                op: "leaf",
                detail: format!("shape {:?} vs {} values", shape, values.len()),
            });
        }
        self.push(shape.to_vec(), values, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, values: Vec<f64>, shape: &[usize]) -> Result<TensorId> {
        self.leaf(values, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> Result<TensorId> {
        self.constant(vec![v], &[1])
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        values: Vec<f64>,
        requires_grad: bool,
        op: Op,
    ) -> Result<TensorId> {
        let opname = op_name(&op);
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ComputeError::NonFinite { op: opname });
        }
        self.nodes.push(Node {
            shape,
            values,
            requires_grad,
            op,
        });
        Ok(TensorId(self.nodes.len() - 1))
    }

    fn rows_cols(&self, id: TensorId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(ComputeError::ShapeMismatch {
                op,
                detail: format!("expected matrix, got shape {:?}", s),
            });
        }
        Ok((s[0], s[1]))
    }

    // ── forward ops ─────────────────────────────────────────────────────

    /// y = x W + b, with x: [n x d_in], W: [d_in x d_out], b: [d_out].
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let (n, din) = self.rows_cols(x, "linear")?;
        let (wr, dout) = self.rows_cols(w, "linear")?;
        if wr != din || self.shape(b) != [dout] {
            return Err(ComputeError::ShapeMismatch {
                op: "linear",
                detail: format!(
                    "x {:?} W {:?} b {:?}",
                    self.shape(x),
                    self.shape(w),
                    self.shape(b)
                ),
            });
        }
        let xv = self.values(x);
        let wv = self.values(w);
        let bv = self.values(b);
        let mut out = vec![0.0; n * dout];
        for i in 0..n {
            let xrow = &xv[i * din..(i + 1) * din];
            let orow = &mut out[i * dout..(i + 1) * dout];
            orow.copy_from_slice(bv);
            for (k, &xk) in xrow.iter().enumerate() {
                if xk == 0.0 {
                    continue;
                }
                let wrow = &wv[k * dout..(k + 1) * dout];
                for j in 0..dout {
                    orow[j] += xk * wrow[j];
                }
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        self.push(vec![n, dout], out, rg, Op::Linear { x, w, b })
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (n, m) = self.rows_cols(a, "matmul")?;
        let (m2, p) = self.rows_cols(b, "matmul")?;
        if m != m2 {
            return Err(ComputeError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            });
        }
        let av = self.values(a);
        let bv = self.values(b);
        let mut out = vec![0.0; n * p];
        for i in 0..n {
            for k in 0..m {
                let aik = av[i * m + k];
                if aik == 0.0 {
                    continue;
                }
                let brow = &bv[k * p..(k + 1) * p];
                let orow = &mut out[i * p..(i + 1) * p];
                for j in 0..p {
                    orow[j] += aik * brow[j];
                }
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(vec![n, p], out, rg, Op::MatMul { a, b })
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, m) = self.rows_cols(x, "transpose")?;
        let xv = self.values(x);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = xv[i * m + j];
            }
        }
        let rg = self.requires_grad(x);
        self.push(vec![m, n], out, rg, Op::Transpose { x })
    }

    fn elementwise2(
        &mut self,
        a: TensorId,
        b: TensorId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
        name: &'static str,
    ) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(ComputeError::ShapeMismatch {
                op: name,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, rg, op)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise2(a, b, Op::Add { a, b }, |x, y| x + y, "add")
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise2(a, b, Op::Sub { a, b }, |x, y| x - y, "sub")
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise2(a, b, Op::Mul { a, b }, |x, y| x * y, "mul")
    }

    /// Elementwise max; ties route the gradient to `a`.
    pub fn max_pair(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise2(
            a,
            b,
            Op::MaxPair { a, b },
            |x, y| if x >= y { x } else { y },
            "max_pair",
        )
    }

    fn elementwise1(&mut self, x: TensorId, op: Op, f: impl Fn(f64) -> f64) -> Result<TensorId> {
        let out: Vec<f64> = self.values(x).iter().map(|&v| f(v)).collect();
        let rg = self.requires_grad(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, rg, op)
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        self.elementwise1(x, Op::Scale { x, c }, |v| v * c)
    }

    pub fn add_const(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        self.elementwise1(x, Op::AddConst { x }, |v| v + c)
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        self.elementwise1(x, Op::Relu { x }, |v| v.max(0.0))
    }

    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId> {
        self.elementwise1(x, Op::Tanh { x }, f64::tanh)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        self.elementwise1(x, Op::Sigmoid { x }, |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn exp(&mut self, x: TensorId) -> Result<TensorId> {
        self.elementwise1(x, Op::Exp { x }, f64::exp)
    }

    pub fn ln(&mut self, x: TensorId) -> Result<TensorId> {
        if self.values(x).iter().any(|&v| v <= 0.0) {
            return Err(ComputeError::Domain {
                op: "ln",
                detail: "non-positive input".into(),
            });
        }
        self.elementwise1(x, Op::Ln { x }, f64::ln)
    }

    pub fn sqrt(&mut self, x: TensorId) -> Result<TensorId> {
        if self.values(x).iter().any(|&v| v < 0.0) {
            return Err(ComputeError::Domain {
                op: "sqrt",
                detail: "negative input".into(),
            });
        }
        self.elementwise1(x, Op::Sqrt { x }, f64::sqrt)
    }

    /// Row-stochastic softmax computed with max-shifted exponentials.
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, m) = self.rows_cols(x, "softmax_rows")?;
        let xv = self.values(x);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &xv[i * m..(i + 1) * m];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..m {
                let e = (row[j] - mx).exp();
                out[i * m + j] = e;
                sum += e;
            }
            for j in 0..m {
                out[i * m + j] /= sum;
            }
        }
        let rg = self.requires_grad(x);
        self.push(vec![n, m], out, rg, Op::SoftmaxRows { x })
    }

    /// Numerically stable log sum exp along each row; output shape [n].
    pub fn log_sum_exp_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, m) = self.rows_cols(x, "log_sum_exp_rows")?;
        let xv = self.values(x);
        let mut out = vec![0.0; n];
        for i in 0..n {
            let row = &xv[i * m..(i + 1) * m];
            if m == 1 {
                out[i] = row[0];
                continue;
            }
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            // summing in sorted order makes the result invariant to the
            // ordering of the inputs (bitwise), not just up to rounding
            let mut terms: Vec<f64> = row.iter().map(|&v| (v - mx).exp()).collect();
            terms.sort_by(f64::total_cmp);
            out[i] = mx + terms.iter().sum::<f64>().ln();
        }
        let rg = self.requires_grad(x);
        self.push(vec![n], out, rg, Op::LogSumExpRows { x })
    }

    /// out[i][j] = x[i][j] - v[i]  (subtract a per-row scalar).
    pub fn sub_col_vec(&mut self, x: TensorId, v: TensorId) -> Result<TensorId> {
        let (n, m) = self.rows_cols(x, "sub_col_vec")?;
        if self.shape(v) != [n] {
            return Err(ComputeError::ShapeMismatch {
                op: "sub_col_vec",
                detail: format!("x {:?} v {:?}", self.shape(x), self.shape(v)),
            });
        }
        let xv = self.values(x);
        let vv = self.values(v);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = xv[i * m + j] - vv[i];
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(v);
        self.push(vec![n, m], out, rg, Op::SubColVec { x, v })
    }

    /// out[i][j] = x[i][j] - v[j]  (subtract a per-column scalar).
    pub fn sub_row_vec(&mut self, x: TensorId, v: TensorId) -> Result<TensorId> {
        let (n, m) = self.rows_cols(x, "sub_row_vec")?;
        if self.shape(v) != [m] {
            return Err(ComputeError::ShapeMismatch {
                op: "sub_row_vec",
                detail: format!("x {:?} v {:?}", self.shape(x), self.shape(v)),
            });
        }
        let xv = self.values(x);
        let vv = self.values(v);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = xv[i * m + j] - vv[j];
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(v);
        self.push(vec![n, m], out, rg, Op::SubRowVec { x, v })
    }

    /// out[i][j] = x[i][j] * v[i]  (scale row i by v[i]).
    pub fn mul_col_vec(&mut self, x: TensorId, v: TensorId) -> Result<TensorId> {
        let (n, m) = self.rows_cols(x, "mul_col_vec")?;
        if self.shape(v) != [n] {
            return Err(ComputeError::ShapeMismatch {
                op: "mul_col_vec",
                detail: format!("x {:?} v {:?}", self.shape(x), self.shape(v)),
            });
        }
        let xv = self.values(x);
        let vv = self.values(v);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = xv[i * m + j] * vv[i];
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(v);
        self.push(vec![n, m], out, rg, Op::MulColVec { x, v })
    }

    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let s: f64 = self.values(x).iter().sum();
        let rg = self.requires_grad(x);
        self.push(vec![1], vec![s], rg, Op::Sum { x })
    }

    pub fn mean(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.values(x).len().max(1);
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn gather_rows(&mut self, x: TensorId, idx: &[usize]) -> Result<TensorId> {
        let (n, m) = self.rows_cols(x, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(ComputeError::Domain {
                op: "gather_rows",
                detail: format!("row {} out of {}", bad, n),
            });
        }
        let xv = self.values(x);
        let mut out = Vec::with_capacity(idx.len() * m);
        for &r in idx {
            out.extend_from_slice(&xv[r * m..(r + 1) * m]);
        }
        let rg = self.requires_grad(x);
        self.push(
            vec![idx.len(), m],
            out,
            rg,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn hstack(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (n, p) = self.rows_cols(a, "hstack")?;
        let (n2, q) = self.rows_cols(b, "hstack")?;
        if n != n2 {
            return Err(ComputeError::ShapeMismatch {
                op: "hstack",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let av = self.values(a);
        let bv = self.values(b);
        let mut out = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            out.extend_from_slice(&av[i * p..(i + 1) * p]);
            out.extend_from_slice(&bv[i * q..(i + 1) * q]);
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(vec![n, p + q], out, rg, Op::HStack { a, b })
    }

    /// Per-row max over entries where `mask` is true; gradient flows to the
    /// argmax (first on ties). Errors if a row has no unmasked entry.
    pub fn row_max_masked(&mut self, x: TensorId, mask: &[bool]) -> Result<TensorId> {
        let (n, m) = self.rows_cols(x, "row_max_masked")?;
        if mask.len() != n * m {
            return Err(ComputeError::ShapeMismatch {
                op: "row_max_masked",
                detail: format!("mask len {} vs {}", mask.len(), n * m),
            });
        }
        let xv = self.values(x);
        let mut out = vec![0.0; n];
        let mut argmax = vec![0usize; n];
        for i in 0..n {
            let mut best: Option<(f64, usize)> = None;
            for j in 0..m {
                if mask[i * m + j] {
                    let v = xv[i * m + j];
                    if best.map_or(true, |(bv, _)| v > bv) {
                        best = Some((v, j));
                    }
                }
            }
            let (bv, bj) = best.ok_or_else(|| ComputeError::Domain {
                op: "row_max_masked",
                detail: format!("row {} fully masked", i),
            })?;
            out[i] = bv;
            argmax[i] = i * m + bj;
        }
        let rg = self.requires_grad(x);
        self.push(vec![n], out, rg, Op::RowMaxMasked { x, argmax })
    }

    /// Append a dustbin row and column filled with the scalar `alpha`.
    pub fn pad_dustbin(&mut self, x: TensorId, alpha: TensorId) -> Result<TensorId> {
        let (n, m) = self.rows_cols(x, "pad_dustbin")?;
        if self.values(alpha).len() != 1 {
            return Err(ComputeError::ShapeMismatch {
                op: "pad_dustbin",
                detail: "alpha must be scalar".into(),
            });
        }
        let a = self.values(alpha)[0];
        let xv = self.values(x);
        let (rn, rm) = (n + 1, m + 1);
        let mut out = vec![a; rn * rm];
        for i in 0..n {
            out[i * rm..i * rm + m].copy_from_slice(&xv[i * m..(i + 1) * m]);
        }
        let rg = self.requires_grad(x) || self.requires_grad(alpha);
        self.push(vec![rn, rm], out, rg, Op::PadDustbin { x, alpha })
    }

    /// Apply per-row blockwise 2x2 rotations: theta [n x d/2], x [n x d].
    pub fn rotary_apply(&mut self, theta: TensorId, x: TensorId) -> Result<TensorId> {
        let (n, d) = self.rows_cols(x, "rotary_apply")?;
        let (tn, th) = self.rows_cols(theta, "rotary_apply")?;
        if d % 2 != 0 || tn != n || th != d / 2 {
            return Err(ComputeError::ShapeMismatch {
                op: "rotary_apply",
                detail: format!("theta {:?} x {:?}", self.shape(theta), self.shape(x)),
            });
        }
        let tv = self.values(theta);
        let xv = self.values(x);
        let half = d / 2;
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for k in 0..half {
                let th = tv[i * half + k];
                let (s, c) = th.sin_cos();
                let a = xv[i * d + 2 * k];
                let b = xv[i * d + 2 * k + 1];
                out[i * d + 2 * k] = a * c - b * s;
                out[i * d + 2 * k + 1] = a * s + b * c;
            }
        }
        let rg = self.requires_grad(theta) || self.requires_grad(x);
        self.push(vec![n, d], out, rg, Op::RotaryApply { theta, x })
    }

    /// Kernel-point convolution: out[i] = sum over links (j,k,h) of
    /// h * feats[j] . W_k, with W stored as [K*d_in x d_out].
    pub fn kpconv(
        &mut self,
        feats: TensorId,
        w: TensorId,
        links: std::rc::Rc<Vec<Vec<KpLink>>>,
        kernels: usize,
    ) -> Result<TensorId> {
        let (n_in, din) = self.rows_cols(feats, "kpconv")?;
        let (wr, dout) = self.rows_cols(w, "kpconv")?;
        if wr != kernels * din {
            return Err(ComputeError::ShapeMismatch {
                op: "kpconv",
                detail: format!("W {:?} vs K={} d_in={}", self.shape(w), kernels, din),
            });
        }
        let fv = self.values(feats);
        let wv = self.values(w);
        let n_out = links.len();
        let mut out = vec![0.0; n_out * dout];
        let mut u = vec![0.0; kernels * din];
        let mut active = Vec::with_capacity(kernels);
        for (i, ls) in links.iter().enumerate() {
            u.iter_mut().for_each(|v| *v = 0.0);
            active.clear();
            for l in ls {
                if l.src as usize >= n_in || l.kernel as usize >= kernels {
                    return Err(ComputeError::Domain {
                        op: "kpconv",
                        detail: "link index out of range".into(),
                    });
                }
                let k = l.kernel as usize;
                if !active.contains(&k) {
                    active.push(k);
                }
                let frow = &fv[l.src as usize * din..(l.src as usize + 1) * din];
                let urow = &mut u[k * din..(k + 1) * din];
                for (uv, &f) in urow.iter_mut().zip(frow) {
                    *uv += l.h * f;
                }
            }
            let orow = &mut out[i * dout..(i + 1) * dout];
            for &k in &active {
                for a in 0..din {
                    let ua = u[k * din + a];
                    if ua == 0.0 {
                        continue;
                    }
                    let wrow = &wv[(k * din + a) * dout..(k * din + a + 1) * dout];
                    for j in 0..dout {
                        orow[j] += ua * wrow[j];
                    }
                }
            }
        }
        let rg = self.requires_grad(feats) || self.requires_grad(w);
        self.push(vec![n_out, dout], out, rg, Op::KpConv { feats, w, links })
    }

    /// Per-row normalization (x - mean) / sqrt(var + eps), no learned affine.
    pub fn norm_rows(&mut self, x: TensorId, eps: f64) -> Result<TensorId> {
        let (n, m) = self.rows_cols(x, "norm_rows")?;
        let xv = self.values(x);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &xv[i * m..(i + 1) * m];
            let mu: f64 = row.iter().sum::<f64>() / m as f64;
            let var: f64 = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
            let s = (var + eps).sqrt();
            for j in 0..m {
                out[i * m + j] = (row[j] - mu) / s;
            }
        }
        let rg = self.requires_grad(x);
        self.push(vec![n, m], out, rg, Op::NormRows { x, eps })
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        if numel(shape) != self.values(x).len() {
            return Err(ComputeError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape(x), shape),
            });
        }
        let values = self.values(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(shape.to_vec(), values, rg, Op::Reshape { x })
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Populate gradients of every `requires_grad` ancestor of `loss`.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(ComputeError::StaleTape);
        }
        let nv = self.values(loss).len();
        if nv != 1 {
            return Err(ComputeError::NonScalarLoss { num: nv });
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let go = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            self.propagate(i, &op, &go)?;
            self.grads[i] = Some(go);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, delta: &[f64]) {
        if !self.nodes[id.0].requires_grad && !matches!(self.nodes[id.0].op, Op::Leaf) {
            // non-grad interior nodes still carry gradient so their own
            // inputs can receive it
        }
        if !self.needs_grad_path(id) {
            return;
        }
        let slot = &mut self.grads[id.0];
        match slot {
            Some(g) => {
                for (gv, &d) in g.iter_mut().zip(delta) {
                    *gv += d;
                }
            }
            None => {
                *slot = Some(delta.to_vec());
            }
        }
    }

    fn needs_grad_path(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&mut self, out: usize, op: &Op, go: &[f64]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (n, din) = (self.shape(*x)[0], self.shape(*x)[1]);
                let dout = self.shape(*w)[1];
                if self.needs_grad_path(*x) {
                    let wv = self.values(*w);
                    let mut dx = vec![0.0; n * din];
                    for i in 0..n {
                        for k in 0..din {
                            let wrow = &wv[k * dout..(k + 1) * dout];
                            let grow = &go[i * dout..(i + 1) * dout];
                            dx[i * din + k] = wrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                        }
                    }
                    self.accumulate(*x, &dx);
                }
                if self.needs_grad_path(*w) {
                    let xv = self.values(*x);
                    let mut dw = vec![0.0; din * dout];
                    for i in 0..n {
                        for k in 0..din {
                            let xik = xv[i * din + k];
                            if xik == 0.0 {
                                continue;
                            }
                            let grow = &go[i * dout..(i + 1) * dout];
                            let drow = &mut dw[k * dout..(k + 1) * dout];
                            for j in 0..dout {
                                drow[j] += xik * grow[j];
                            }
                        }
                    }
                    self.accumulate(*w, &dw);
                }
                if self.needs_grad_path(*b) {
                    let mut db = vec![0.0; dout];
                    for i in 0..n {
                        for j in 0..dout {
                            db[j] += go[i * dout + j];
                        }
                    }
                    self.accumulate(*b, &db);
                }
            }
            Op::MatMul { a, b } => {
                let (n, m) = (self.shape(*a)[0], self.shape(*a)[1]);
                let p = self.shape(*b)[1];
                if self.needs_grad_path(*a) {
                    let bv = self.values(*b);
                    let mut da = vec![0.0; n * m];
                    for i in 0..n {
                        for k in 0..m {
                            let brow = &bv[k * p..(k + 1) * p];
                            let grow = &go[i * p..(i + 1) * p];
                            da[i * m + k] = brow.iter().zip(grow).map(|(&x, &y)| x * y).sum();
                        }
                    }
                    self.accumulate(*a, &da);
                }
                if self.needs_grad_path(*b) {
                    let av = self.values(*a);
                    let mut db = vec![0.0; m * p];
                    for i in 0..n {
                        for k in 0..m {
                            let aik = av[i * m + k];
                            if aik == 0.0 {
                                continue;
                            }
                            let grow = &go[i * p..(i + 1) * p];
                            let drow = &mut db[k * p..(k + 1) * p];
                            for j in 0..p {
                                drow[j] += aik * grow[j];
                            }
                        }
                    }
                    self.accumulate(*b, &db);
                }
            }
            Op::Transpose { x } => {
                if self.needs_grad_path(*x) {
                    let (m, n) = (self.nodes[out].shape[0], self.nodes[out].shape[1]);
                    let mut dx = vec![0.0; n * m];
                    for i in 0..m {
                        for j in 0..n {
                            dx[j * m + i] = go[i * n + j];
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::Add { a, b } => {
                if self.needs_grad_path(*a) {
                    self.accumulate(*a, go);
                }
                if self.needs_grad_path(*b) {
                    self.accumulate(*b, go);
                }
            }
            Op::Sub { a, b } => {
                if self.needs_grad_path(*a) {
                    self.accumulate(*a, go);
                }
                if self.needs_grad_path(*b) {
                    let neg: Vec<f64> = go.iter().map(|&v| -v).collect();
                    self.accumulate(*b, &neg);
                }
            }
            Op::Mul { a, b } => {
                if self.needs_grad_path(*a) {
                    let d: Vec<f64> = go
                        .iter()
                        .zip(self.values(*b))
                        .map(|(&g, &v)| g * v)
                        .collect();
                    self.accumulate(*a, &d);
                }
                if self.needs_grad_path(*b) {
                    let d: Vec<f64> = go
                        .iter()
                        .zip(self.values(*a))
                        .map(|(&g, &v)| g * v)
                        .collect();
                    self.accumulate(*b, &d);
                }
            }
            Op::MaxPair { a, b } => {
                let av = self.values(*a).to_vec();
                let bv = self.values(*b).to_vec();
                if self.needs_grad_path(*a) {
                    let d: Vec<f64> = go
                        .iter()
                        .zip(av.iter().zip(&bv))
                        .map(|(&g, (&x, &y))| if x >= y { g } else { 0.0 })
                        .collect();
                    self.accumulate(*a, &d);
                }
                if self.needs_grad_path(*b) {
                    let d: Vec<f64> = go
                        .iter()
                        .zip(av.iter().zip(&bv))
                        .map(|(&g, (&x, &y))| if x >= y { 0.0 } else { g })
                        .collect();
                    self.accumulate(*b, &d);
                }
            }
            Op::Scale { x, c } => {
                if self.needs_grad_path(*x) {
                    let d: Vec<f64> = go.iter().map(|&g| g * c).collect();
                    self.accumulate(*x, &d);
                }
            }
            Op::AddConst { x } => {
                if self.needs_grad_path(*x) {
                    self.accumulate(*x, go);
                }
            }
            Op::Relu { x } => {
                if self.needs_grad_path(*x) {
                    let d: Vec<f64> = go
                        .iter()
                        .zip(self.values(*x))
                        .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    self.accumulate(*x, &d);
                }
            }
            Op::Tanh { x } => {
                if self.needs_grad_path(*x) {
                    let yv = self.nodes[out].values.clone();
                    let d: Vec<f64> = go
                        .iter()
                        .zip(&yv)
                        .map(|(&g, &y)| g * (1.0 - y * y))
                        .collect();
                    self.accumulate(*x, &d);
                }
            }
            Op::Sigmoid { x } => {
                if self.needs_grad_path(*x) {
                    let yv = self.nodes[out].values.clone();
                    let d: Vec<f64> = go
                        .iter()
                        .zip(&yv)
                        .map(|(&g, &y)| g * y * (1.0 - y))
                        .collect();
                    self.accumulate(*x, &d);
                }
            }
            Op::Exp { x } => {
                if self.needs_grad_path(*x) {
                    let yv = self.nodes[out].values.clone();
                    let d: Vec<f64> = go.iter().zip(&yv).map(|(&g, &y)| g * y).collect();
                    self.accumulate(*x, &d);
                }
            }
            Op::Ln { x } => {
                if self.needs_grad_path(*x) {
                    let d: Vec<f64> = go
                        .iter()
                        .zip(self.values(*x))
                        .map(|(&g, &v)| g / v)
                        .collect();
                    self.accumulate(*x, &d);
                }
            }
            Op::Sqrt { x } => {
                if self.needs_grad_path(*x) {
                    let yv = self.nodes[out].values.clone();
                    let d: Vec<f64> = go
                        .iter()
                        .zip(&yv)
                        .map(|(&g, &y)| if y == 0.0 { 0.0 } else { g * 0.5 / y })
                        .collect();
                    self.accumulate(*x, &d);
                }
            }
            Op::SoftmaxRows { x } => {
                if self.needs_grad_path(*x) {
                    let (n, m) = (self.nodes[out].shape[0], self.nodes[out].shape[1]);
                    let yv = self.nodes[out].values.clone();
                    let mut dx = vec![0.0; n * m];
                    for i in 0..n {
                        let yrow = &yv[i * m..(i + 1) * m];
                        let grow = &go[i * m..(i + 1) * m];
                        let dot: f64 = yrow.iter().zip(grow).map(|(&y, &g)| y * g).sum();
                        for j in 0..m {
                            dx[i * m + j] = yrow[j] * (grow[j] - dot);
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::LogSumExpRows { x } => {
                if self.needs_grad_path(*x) {
                    let (n, m) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let xv = self.values(*x).to_vec();
                    let yv = self.nodes[out].values.clone();
                    let mut dx = vec![0.0; n * m];
                    for i in 0..n {
                        for j in 0..m {
                            dx[i * m + j] = go[i] * (xv[i * m + j] - yv[i]).exp();
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::SubColVec { x, v } => {
                let (n, m) = (self.shape(*x)[0], self.shape(*x)[1]);
                if self.needs_grad_path(*x) {
                    self.accumulate(*x, go);
                }
                if self.needs_grad_path(*v) {
                    let mut dv = vec![0.0; n];
                    for i in 0..n {
                        for j in 0..m {
                            dv[i] -= go[i * m + j];
                        }
                    }
                    self.accumulate(*v, &dv);
                }
            }
            Op::SubRowVec { x, v } => {
                let (n, m) = (self.shape(*x)[0], self.shape(*x)[1]);
                if self.needs_grad_path(*x) {
                    self.accumulate(*x, go);
                }
                if self.needs_grad_path(*v) {
                    let mut dv = vec![0.0; m];
                    for i in 0..n {
                        for j in 0..m {
                            dv[j] -= go[i * m + j];
                        }
                    }
                    self.accumulate(*v, &dv);
                }
            }
            Op::MulColVec { x, v } => {
                let (n, m) = (self.shape(*x)[0], self.shape(*x)[1]);
                if self.needs_grad_path(*x) {
                    let vv = self.values(*v);
                    let mut dx = vec![0.0; n * m];
                    for i in 0..n {
                        for j in 0..m {
                            dx[i * m + j] = go[i * m + j] * vv[i];
                        }
                    }
                    self.accumulate(*x, &dx);
                }
                if self.needs_grad_path(*v) {
                    let xv = self.values(*x);
                    let mut dv = vec![0.0; n];
                    for i in 0..n {
                        for j in 0..m {
                            dv[i] += go[i * m + j] * xv[i * m + j];
                        }
                    }
                    self.accumulate(*v, &dv);
                }
            }
            Op::Sum { x } => {
                if self.needs_grad_path(*x) {
                    let d = vec![go[0]; self.values(*x).len()];
                    self.accumulate(*x, &d);
                }
            }
            Op::GatherRows { x, idx } => {
                if self.needs_grad_path(*x) {
                    let m = self.shape(*x)[1];
                    let mut dx = vec![0.0; self.values(*x).len()];
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..m {
                            dx[src * m + j] += go[r * m + j];
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::HStack { a, b } => {
                let (n, p) = (self.shape(*a)[0], self.shape(*a)[1]);
                let q = self.shape(*b)[1];
                if self.needs_grad_path(*a) {
                    let mut da = vec![0.0; n * p];
                    for i in 0..n {
                        da[i * p..(i + 1) * p].copy_from_slice(&go[i * (p + q)..i * (p + q) + p]);
                    }
                    self.accumulate(*a, &da);
                }
                if self.needs_grad_path(*b) {
                    let mut db = vec![0.0; n * q];
                    for i in 0..n {
                        db[i * q..(i + 1) * q]
                            .copy_from_slice(&go[i * (p + q) + p..(i + 1) * (p + q)]);
                    }
                    self.accumulate(*b, &db);
                }
            }
            Op::RowMaxMasked { x, argmax } => {
                if self.needs_grad_path(*x) {
                    let mut dx = vec![0.0; self.values(*x).len()];
                    for (i, &pos) in argmax.iter().enumerate() {
                        dx[pos] += go[i];
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::PadDustbin { x, alpha } => {
                let (n, m) = (self.shape(*x)[0], self.shape(*x)[1]);
                let rm = m + 1;
                if self.needs_grad_path(*x) {
                    let mut dx = vec![0.0; n * m];
                    for i in 0..n {
                        dx[i * m..(i + 1) * m].copy_from_slice(&go[i * rm..i * rm + m]);
                    }
                    self.accumulate(*x, &dx);
                }
                if self.needs_grad_path(*alpha) {
                    let mut da = 0.0;
                    for i in 0..n {
                        da += go[i * rm + m];
                    }
                    for j in 0..rm {
                        da += go[n * rm + j];
                    }
                    self.accumulate(*alpha, &[da]);
                }
            }
            Op::RotaryApply { theta, x } => {
                let (n, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let half = d / 2;
                let tv = self.values(*theta).to_vec();
                let xv = self.values(*x).to_vec();
                let yv = self.nodes[out].values.clone();
                if self.needs_grad_path(*theta) {
                    let mut dt = vec![0.0; n * half];
                    for i in 0..n {
                        for k in 0..half {
                            let g0 = go[i * d + 2 * k];
                            let g1 = go[i * d + 2 * k + 1];
                            let y0 = yv[i * d + 2 * k];
                            let y1 = yv[i * d + 2 * k + 1];
                            dt[i * half + k] = -g0 * y1 + g1 * y0;
                        }
                    }
                    self.accumulate(*theta, &dt);
                }
                if self.needs_grad_path(*x) {
                    let mut dx = vec![0.0; n * d];
                    for i in 0..n {
                        for k in 0..half {
                            let (s, c) = tv[i * half + k].sin_cos();
                            let g0 = go[i * d + 2 * k];
                            let g1 = go[i * d + 2 * k + 1];
                            dx[i * d + 2 * k] = g0 * c + g1 * s;
                            dx[i * d + 2 * k + 1] = -g0 * s + g1 * c;
                        }
                    }
                    let _ = xv;
                    self.accumulate(*x, &dx);
                }
            }
            Op::KpConv { feats, w, links } => {
                let din = self.shape(*feats)[1];
                let dout = self.shape(*w)[1];
                let kernels = self.shape(*w)[0] / din;
                let need_f = self.needs_grad_path(*feats);
                let need_w = self.needs_grad_path(*w);
                if !need_f && !need_w {
                    return Ok(());
                }
                let fv = self.values(*feats).to_vec();
                let wv = self.values(*w).to_vec();
                let mut df = vec![0.0; fv.len()];
                let mut dw = vec![0.0; wv.len()];
                let mut u = vec![0.0; kernels * din];
                let mut t = vec![0.0; kernels * din];
                for (i, ls) in links.iter().enumerate() {
                    let grow = &go[i * dout..(i + 1) * dout];
                    u.iter_mut().for_each(|v| *v = 0.0);
                    t.iter_mut().for_each(|v| *v = 0.0);
                    let mut active: Vec<usize> = Vec::new();
                    for l in ls.iter() {
                        let k = l.kernel as usize;
                        if !active.contains(&k) {
                            active.push(k);
                        }
                        if need_w {
                            let frow = &fv[l.src as usize * din..(l.src as usize + 1) * din];
                            let urow = &mut u[k * din..(k + 1) * din];
                            for (uv, &f) in urow.iter_mut().zip(frow) {
                                *uv += l.h * f;
                            }
                        }
                    }
                    for &k in &active {
                        // t_k = grow . W_k^T
                        if need_f {
                            for a in 0..din {
                                let wrow = &wv[(k * din + a) * dout..(k * din + a + 1) * dout];
                                t[k * din + a] = wrow.iter().zip(grow).map(|(&x, &y)| x * y).sum();
                            }
                        }
                        if need_w {
                            for a in 0..din {
                                let ua = u[k * din + a];
                                if ua == 0.0 {
                                    continue;
                                }
                                let drow = &mut dw[(k * din + a) * dout..(k * din + a + 1) * dout];
                                for j in 0..dout {
                                    drow[j] += ua * grow[j];
                                }
                            }
                        }
                    }
                    if need_f {
                        for l in ls.iter() {
                            let k = l.kernel as usize;
                            let trow = &t[k * din..(k + 1) * din];
                            let drow = &mut df[l.src as usize * din..(l.src as usize + 1) * din];
                            for (dv, &tv) in drow.iter_mut().zip(trow) {
                                *dv += l.h * tv;
                            }
                        }
                    }
                }
                if need_f {
                    self.accumulate(*feats, &df);
                }
                if need_w {
                    self.accumulate(*w, &dw);
                }
            }
            Op::NormRows { x, eps } => {
                if self.needs_grad_path(*x) {
                    let (n, m) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let xv = self.values(*x).to_vec();
                    let yv = self.nodes[out].values.clone();
                    let mut dx = vec![0.0; n * m];
                    for i in 0..n {
                        let row = &xv[i * m..(i + 1) * m];
                        let mu: f64 = row.iter().sum::<f64>() / m as f64;
                        let var: f64 =
                            row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
                        let s = (var + eps).sqrt();
                        let grow = &go[i * m..(i + 1) * m];
                        let yrow = &yv[i * m..(i + 1) * m];
                        let gmean: f64 = grow.iter().sum::<f64>() / m as f64;
                        let gydot: f64 =
                            grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum::<f64>() / m as f64;
                        for j in 0..m {
                            dx[i * m + j] = (grow[j] - gmean - yrow[j] * gydot) / s;
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::Reshape { x } => {
                if self.needs_grad_path(*x) {
                    self.accumulate(*x, go);
                }
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Linear { .. } => "linear",
        Op::MatMul { .. } => "matmul",
        Op::Transpose { .. } => "transpose",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::AddConst { .. } => "add_const",
        Op::Relu { .. } => "relu",
        Op::Tanh { .. } => "tanh",
        Op::Sigmoid { .. } => "sigmoid",
        Op::Exp { .. } => "exp",
        Op::Ln { .. } => "ln",
        Op::Sqrt { .. } => "sqrt",
        Op::SoftmaxRows { .. } => "softmax_rows",
        Op::LogSumExpRows { .. } => "log_sum_exp_rows",
        Op::SubColVec { .. } => "sub_col_vec",
        Op::SubRowVec { .. } => "sub_row_vec",
        Op::MulColVec { .. } => "mul_col_vec",
        Op::Sum { .. } => "sum",
        Op::GatherRows { .. } => "gather_rows",
        Op::HStack { .. } => "hstack",
        Op::RowMaxMasked { .. } => "row_max_masked",
        Op::MaxPair { .. } => "max_pair",
        Op::PadDustbin { .. } => "pad_dustbin",
        Op::RotaryApply { .. } => "rotary_apply",
        Op::KpConv { .. } => "kpconv",
        Op::NormRows { .. } => "norm_rows",
        Op::Reshape { .. } => "reshape",
    }
}

// ── parameter store ─────────────────────────────────────────────────────

/// Named parameter container shared by all learned blocks.
///
/// Serialized byte layout (all integers and floats little-endian):
///   magic  8 bytes  b"LKPARAMS"
///   version u32     currently 1
///   count   u32     number of parameters
///   then per parameter, in insertion order:
///     name_len u16, name utf-8 bytes,
///     ndim u8, dims u32 * ndim,
///     values f64 * prod(dims)
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

const CONTAINER_MAGIC: &[u8; 8] = b"LKPARAMS";
const CONTAINER_VERSION: u32 = 1;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) {
        assert_eq!(
            numel(&shape),
            values.len(),
            "param {name} shape/value mismatch"
        );
        if let Some(&i) = self.index.get(name) {
            self.shapes[i] = shape;
            self.values[i] = values;
        } else {
            self.index.insert(name.to_string(), self.names.len());
            self.names.push(name.to_string());
            self.shapes.push(shape);
            self.values.push(values);
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.index
            .get(name)
            .map(|&i| (self.shapes[i].as_slice(), self.values[i].as_slice()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        let i = *self.index.get(name)?;
        Some(&mut self.values[i])
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn num_values(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CONTAINER_MAGIC);
        buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.names.len() as u32).to_le_bytes());
        for i in 0..self.names.len() {
            let nb = self.names[i].as_bytes();
            buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            buf.extend_from_slice(nb);
            buf.push(self.shapes[i].len() as u8);
            for &d in &self.shapes[i] {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &self.values[i] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let data = std::fs::read(path)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > data.len() {
                return Err(ComputeError::Container(format!(
                    "truncated at byte {}",
                    *pos
                )));
            }
            let s = &data[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 8)? != CONTAINER_MAGIC {
            return Err(ComputeError::Container("bad magic".into()));
        }
        let ver = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if ver != CONTAINER_VERSION {
            return Err(ComputeError::Container(format!(
                "unsupported version {ver}"
            )));
        }
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let nlen = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, nlen)?.to_vec())
                .map_err(|_| ComputeError::Container("bad utf8 name".into()))?;
            let ndim = take(&mut pos, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let n = numel(&shape);
            let mut values = Vec::with_capacity(n);
            for _ in 0..n {
                values.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
            }
            store.insert(&name, shape, values);
        }
        if pos != data.len() {
            return Err(ComputeError::Container(format!(
                "{} trailing bytes",
                data.len() - pos
            )));
        }
        Ok(store)
    }
}

/// Per-forward-pass binding of store parameters to graph leaves.
///
/// Each parameter is materialized as a single `requires_grad` leaf the first
/// time a block asks for it; after `backward` the trainer reads the gradient
/// back through the recorded ids.
#[derive(Debug, Default)]
pub struct Binding {
    bound: Vec<(String, TensorId)>,
    index: HashMap<String, TensorId>,
    pub trainable: Option<fn(&str) -> bool>,
}

impl Binding {
    pub fn new() -> Self {
        Self::default()
    }

    /// Bind with a trainability filter; non-trainable parameters enter the
    /// graph as constants (frozen).
    pub fn with_filter(filter: fn(&str) -> bool) -> Self {
        Binding {
            trainable: Some(filter),
            ..Default::default()
        }
    }

    pub fn param(&mut self, g: &mut Graph, store: &ParamStore, name: &str) -> Result<TensorId> {
        if let Some(&id) = self.index.get(name) {
            return Ok(id);
        }
        let (shape, values) = store
            .get(name)
            .ok_or_else(|| ComputeError::Container(format!("missing parameter {name}")))?;
        let rg = self.trainable.map_or(true, |f| f(name));
        let id = g.leaf(values.to_vec(), shape, rg)?;
        self.bound.push((name.to_string(), id));
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn bound(&self) -> &[(String, TensorId)] {
        &self.bound
    }
}

// ── finite differences ──────────────────────────────────────────────────

/// Central finite-difference gradient check for a scalar function of a
/// single input tensor. Returns the max over all coordinates of
/// |analytic - central difference| / max(1, |central difference|).
///
/// `f` must be deterministic: it is evaluated twice at the base point and a
/// mismatch is reported as an oracle error.
pub fn finite_diff_check<F>(f: F, x0: &[f64], shape: &[usize], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, TensorId) -> Result<TensorId>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(ComputeError::Domain {
            op: "finite_diff_check",
            detail: format!("eps {eps} out of range"),
        });
    }
    let eval = |x: &[f64], grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
        let mut g = Graph::new();
        let xid = g.leaf(x.to_vec(), shape, grad)?;
        let loss = f(&mut g, xid)?;
        let lv = g.values(loss);
        if lv.len() != 1 {
            return Err(ComputeError::NonScalarLoss { num: lv.len() });
        }
        let lval = lv[0];
        if grad {
            g.backward(loss)?;
            let gx = g
                .grad(xid)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; x.len()]);
            Ok((lval, Some(gx)))
        } else {
            Ok((lval, None))
        }
    };

    let (l1, grad) = eval(x0, true)?;
    let (l2, _) = eval(x0, false)?;
    if l1.to_bits() != l2.to_bits() {
        return Err(ComputeError::Oracle(format!(
            "non-deterministic function: {l1} vs {l2}"
        )));
    }
    let analytic = grad.unwrap();

    let mut max_err = 0.0f64;
    let mut xp = x0.to_vec();
    for i in 0..x0.len() {
        let orig = xp[i];
        xp[i] = orig + eps;
        let (fp, _) = eval(&xp, false)?;
        xp[i] = orig - eps;
        let (fm, _) = eval(&xp, false)?;
        xp[i] = orig;
        let fd = (fp - fm) / (2.0 * eps);
        let err = (analytic[i] - fd).abs() / fd.abs().max(1.0);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}
