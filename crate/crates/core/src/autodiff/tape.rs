//! Dynamic reverse-mode tape.
//!
//! Every op appends a node holding its output value and enough saved state to
//! run its vector-Jacobian product. The tape is rebuilt for every training
//! step; [`Tape::backward`] consumes it.

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, Conv2dGeom};
use super::{ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Compressed sparse row matrix with constant entries.
#[derive(Clone, Debug, Default)]
pub struct Csr {
    pub rows: usize,
    pub cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    /// Builds from per-row `(column, weight)` lists.
    pub fn from_rows(cols: usize, rows: &[Vec<(usize, f64)>]) -> Self {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for row in rows {
            for &(c, v) in row {
                assert!(c < cols, "csr: column {c} out of range {cols}");
                indices.push(c);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Csr {
            rows: rows.len(),
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.indptr[r], self.indptr[r + 1]);
        self.indices[a..b]
            .iter()
            .copied()
            .zip(self.values[a..b].iter().copied())
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }
}

/// Input/output pairs for each kernel offset of a sparse convolution.
#[derive(Clone, Debug, Default)]
pub struct Rulebook {
    pub n_in: usize,
    pub n_out: usize,
    /// `offsets[k]` lists `(input_row, output_row)` pairs for kernel tap `k`.
    pub offsets: Vec<Vec<(usize, usize)>>,
}

/// Pinhole camera parameters for one projected row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pinhole {
    pub rot: [f64; 9],
    pub trans: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Minimum camera-space depth for a point to be projectable.
pub const MIN_DEPTH: f64 = 1e-6;

impl Pinhole {
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rot;
        [
            r[0] * p[0] + r[1] * p[1] + r[2] * p[2] + self.trans[0],
            r[3] * p[0] + r[4] * p[1] + r[5] * p[2] + self.trans[1],
            r[6] * p[0] + r[7] * p[1] + r[8] * p[2] + self.trans[2],
        ]
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRows(Var, Var),
    Affine(Var, f64),
    MatMul(Var, Var),
    Relu(Var),
    Exp(Var),
    Sin(Var),
    Cos(Var),
    Sigmoid(Var),
    Softplus(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Concat(Vec<Var>),
    Gather(Var, Rc<Vec<usize>>),
    ScatterAdd(Var, Rc<Vec<usize>>),
    Reshape(Var),
    Transpose(Var),
    Spmm(Rc<Csr>, Var),
    Conv2d(Var, Var, Var, Conv2dGeom),
    MaxPool2d(Var, Rc<Vec<usize>>),
    Sample2d {
        map: Var,
        coords: Var,
        batch: Rc<Vec<usize>>,
        valid: Rc<Vec<bool>>,
    },
    Sample3d {
        grid: Var,
        coords: Var,
    },
    SparseConv3d {
        x: Var,
        w: Var,
        b: Var,
        rules: Rc<Rulebook>,
    },
    Project {
        points: Var,
        cams: Rc<Vec<Pinhole>>,
    },
    BatchedDot(Var, Var),
    BatchedWeightedSum(Var, Var),
    Composite {
        sigma: Var,
        color: Var,
        delta: Rc<Vec<f64>>,
        spans: Rc<Vec<(usize, usize)>>,
        background: [f64; 3],
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Not `Sync`; concurrent inference uses one tape per
/// worker over a shared, read-only [`ParamStore`].
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<(Var, ParamId)>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> ! {
    panic!("{op}: shape mismatch {a:?} vs {b:?}")
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; nothing on it requires grad.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(nodes.len() - 1)
    }

    /// Constant input (never differentiated).
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Leaf that gradients flow into; read them back with [`Tape::gradients`].
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf bound to a stored parameter; `backward` accumulates into it.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push_leaf(store.value(id).clone(), true);
        self.params.borrow_mut().push((v, id));
        v
    }

    // ---- elementwise -------------------------------------------------------

    /// Elementwise sum; `b` may also be a vector broadcast over the rows of `a`.
    pub fn add(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            let data = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(x, y)| x + y)
                .collect();
            self.push(
                Tensor::new(av.shape().to_vec(), data),
                Op::Add(a, b),
                &[a, b],
            )
        } else if bv.ndim() == 1 && bv.len() == av.last_dim() {
            let c = bv.len();
            let mut data = av.data().to_vec();
            for row in data.chunks_mut(c) {
                for (x, y) in row.iter_mut().zip(bv.data()) {
                    *x += y;
                }
            }
            self.push(
                Tensor::new(av.shape().to_vec(), data),
                Op::AddRow(a, b),
                &[a, b],
            )
        } else {
            shape_err("add", av.shape(), bv.shape())
        }
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            shape_err("sub", av.shape(), bv.shape());
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x - y)
            .collect();
        self.push(
            Tensor::new(av.shape().to_vec(), data),
            Op::Sub(a, b),
            &[a, b],
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            shape_err("mul", av.shape(), bv.shape());
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        self.push(
            Tensor::new(av.shape().to_vec(), data),
            Op::Mul(a, b),
            &[a, b],
        )
    }

    /// Scales row `i` of `a` (viewed `[n, c]`) by `s[i]`.
    pub fn mul_rows(&self, a: Var, s: Var) -> Var {
        let (av, sv) = (self.value(a), self.value(s));
        if sv.len() != av.rows() {
            shape_err("mul_rows", av.shape(), sv.shape());
        }
        let c = av.last_dim();
        let mut data = av.data().to_vec();
        for (row, &k) in data.chunks_mut(c.max(1)).zip(sv.data()) {
            row.iter_mut().for_each(|x| *x *= k);
        }
        self.push(
            Tensor::new(av.shape().to_vec(), data),
            Op::MulRows(a, s),
            &[a, s],
        )
    }

    /// `scale · a + offset`, elementwise.
    pub fn affine(&self, a: Var, scale: f64, offset: f64) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| scale * x + offset).collect();
        self.push(
            Tensor::new(av.shape().to_vec(), data),
            Op::Affine(a, scale),
            &[a],
        )
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        self.push(Tensor::new(av.shape().to_vec(), data), op, &[a])
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn sin(&self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn square(&self, a: Var) -> Var {
        self.mul(a, a)
    }

    // ---- reductions and shape ----------------------------------------------

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&self, a: Var) -> Var {
        self.masked_softmax(a, None)
    }

    /// Softmax over the last axis where `keep[i] == false` entries get
    /// probability zero (logit −∞). A fully masked row yields all zeros.
    pub fn masked_softmax(&self, a: Var, keep: Option<&[bool]>) -> Var {
        let av = self.value(a);
        let c = av.last_dim();
        if let Some(k) = keep {
            if k.len() != av.len() {
                shape_err("masked_softmax", av.shape(), &[k.len()]);
            }
        }
        let mut out = vec![0.0; av.len()];
        for (r, (row, orow)) in av
            .data()
            .chunks(c.max(1))
            .zip(out.chunks_mut(c.max(1)))
            .enumerate()
        {
            let kept = |i: usize| keep.map_or(true, |k| k[r * c + i]);
            let mx = (0..c)
                .filter(|&i| kept(i))
                .map(|i| row[i])
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for i in 0..c {
                if kept(i) {
                    orow[i] = (row[i] - mx).exp();
                    z += orow[i];
                }
            }
            orow.iter_mut().for_each(|x| *x /= z);
        }
        self.push(Tensor::new(av.shape().to_vec(), out), Op::Softmax(a), &[a])
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.len().max(1) as f64;
        let s: f64 = av.data().iter().sum();
        self.push(Tensor::scalar(s / n), Op::Mean(a), &[a])
    }

    /// Mean over rows: `[n, c] -> [c]`.
    pub fn mean_rows(&self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.last_dim();
        let n = av.rows();
        assert!(n > 0, "mean_rows: empty input {:?}", av.shape());
        let mut out = vec![0.0; c];
        for row in av.data().chunks(c) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        self.push(Tensor::from_vec(out), Op::MeanRows(a), &[a])
    }

    /// Concatenation along the last axis; all inputs must share the row count.
    pub fn concat(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat: no inputs");
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let rows = vals[0].rows();
        for v in &vals {
            if v.rows() != rows {
                shape_err("concat", vals[0].shape(), v.shape());
            }
        }
        let width: usize = vals.iter().map(|v| v.last_dim()).sum();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for v in &vals {
                data.extend_from_slice(v.row(r));
            }
        }
        let mut shape = if vals[0].ndim() == 0 {
            vec![1]
        } else {
            vals[0].shape().to_vec()
        };
        *shape.last_mut().unwrap() = width;
        self.push(Tensor::new(shape, data), Op::Concat(parts.to_vec()), parts)
    }

    /// Selects rows of `a` (viewed `[n, c]`).
    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        let c = av.last_dim();
        let n = av.rows();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(
                i < n,
                "gather_rows: index {i} out of range for shape {:?}",
                av.shape()
            );
            data.extend_from_slice(av.row(i));
        }
        self.push(
            Tensor::matrix(idx.len(), c, data),
            Op::Gather(a, Rc::new(idx.to_vec())),
            &[a],
        )
    }

    /// Adds row `i` of `a` into output row `idx[i]` of an `[n_out, c]` result.
    pub fn scatter_add_rows(&self, a: Var, idx: &[usize], n_out: usize) -> Var {
        let av = self.value(a);
        let c = av.last_dim();
        if idx.len() != av.rows() {
            shape_err("scatter_add_rows", av.shape(), &[idx.len()]);
        }
        let mut data = vec![0.0; n_out * c];
        for (r, &o) in idx.iter().enumerate() {
            assert!(
                o < n_out,
                "scatter_add_rows: index {o} out of range {n_out}"
            );
            for (d, s) in data[o * c..(o + 1) * c].iter_mut().zip(av.row(r)) {
                *d += s;
            }
        }
        self.push(
            Tensor::matrix(n_out, c, data),
            Op::ScatterAdd(a, Rc::new(idx.to_vec())),
            &[a],
        )
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let av = self.value(a);
        let n: usize = shape.iter().product();
        if n != av.len() {
            shape_err("reshape", av.shape(), shape);
        }
        self.push(
            Tensor::new(shape.to_vec(), av.data().to_vec()),
            Op::Reshape(a),
            &[a],
        )
    }

    /// Transpose of a matrix.
    pub fn transpose(&self, a: Var) -> Var {
        let av = self.value(a);
        if av.ndim() != 2 {
            shape_err("transpose", av.shape(), &[]);
        }
        let (r, c) = (av.shape()[0], av.shape()[1]);
        let data = (0..c * r).map(|i| av.data()[(i % r) * c + i / r]).collect();
        self.push(Tensor::matrix(c, r, data), Op::Transpose(a), &[a])
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 2 || bv.ndim() != 2 || av.shape()[1] != bv.shape()[0] {
            shape_err("matmul", av.shape(), bv.shape());
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let data = kernels::matmul(av.data(), bv.data(), m, k, n);
        self.push(Tensor::matrix(m, n, data), Op::MatMul(a, b), &[a, b])
    }

    /// Constant sparse matrix times `x` (viewed `[cols, c]`).
    pub fn spmm(&self, m: Rc<Csr>, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.last_dim();
        if xv.rows() != m.cols {
            shape_err("spmm", &[m.rows, m.cols], xv.shape());
        }
        let mut data = vec![0.0; m.rows * c];
        for (r, out) in data.chunks_mut(c.max(1)).enumerate().take(m.rows) {
            for (col, w) in m.row(r) {
                for (o, v) in out.iter_mut().zip(xv.row(col)) {
                    *o += w * v;
                }
            }
        }
        let rows = m.rows;
        self.push(Tensor::matrix(rows, c, data), Op::Spmm(m, x), &[x])
    }

    /// `out[s, t] = q[s, :] · k[s, t, :]`.
    pub fn batched_dot(&self, q: Var, k: Var) -> Var {
        let (qv, kv) = (self.value(q), self.value(k));
        if qv.ndim() != 2
            || kv.ndim() != 3
            || kv.shape()[0] != qv.shape()[0]
            || kv.shape()[2] != qv.shape()[1]
        {
            shape_err("batched_dot", qv.shape(), kv.shape());
        }
        let (s, t, d) = (kv.shape()[0], kv.shape()[1], kv.shape()[2]);
        let mut data = vec![0.0; s * t];
        for i in 0..s {
            let qr = &qv.data()[i * d..(i + 1) * d];
            for j in 0..t {
                let kr = &kv.data()[(i * t + j) * d..(i * t + j + 1) * d];
                data[i * t + j] = qr.iter().zip(kr).map(|(a, b)| a * b).sum();
            }
        }
        self.push(Tensor::matrix(s, t, data), Op::BatchedDot(q, k), &[q, k])
    }

    /// `out[s, :] = Σ_t a[s, t] · v[s, t, :]`.
    pub fn batched_weighted_sum(&self, a: Var, v: Var) -> Var {
        let (av, vv) = (self.value(a), self.value(v));
        if av.ndim() != 2
            || vv.ndim() != 3
            || vv.shape()[0] != av.shape()[0]
            || vv.shape()[1] != av.shape()[1]
        {
            shape_err("batched_weighted_sum", av.shape(), vv.shape());
        }
        let (s, t, d) = (vv.shape()[0], vv.shape()[1], vv.shape()[2]);
        let mut data = vec![0.0; s * d];
        for i in 0..s {
            let out = &mut data[i * d..(i + 1) * d];
            for j in 0..t {
                let w = av.data()[i * t + j];
                if w == 0.0 {
                    continue;
                }
                let vr = &vv.data()[(i * t + j) * d..(i * t + j + 1) * d];
                for (o, x) in out.iter_mut().zip(vr) {
                    *o += w * x;
                }
            }
        }
        self.push(
            Tensor::matrix(s, d, data),
            Op::BatchedWeightedSum(a, v),
            &[a, v],
        )
    }

    // ---- convolution and sampling ------------------------------------------

    /// NHWC convolution: `x [n,h,w,cin]`, `w [kh,kw,cin,cout]`, `b [cout]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.ndim() != 4
            || wv.ndim() != 4
            || wv.shape()[2] != xv.shape()[3]
            || bv.len() != wv.shape()[3]
        {
            shape_err("conv2d", xv.shape(), wv.shape());
        }
        let s = xv.shape();
        let g = Conv2dGeom {
            n: s[0],
            h: s[1],
            w: s[2],
            cin: s[3],
            kh: wv.shape()[0],
            kw: wv.shape()[1],
            cout: wv.shape()[3],
            stride,
            pad,
        };
        assert!(
            g.h + 2 * pad >= g.kh && g.w + 2 * pad >= g.kw,
            "conv2d: kernel larger than padded input {s:?}"
        );
        let data = kernels::conv2d_forward(&g, xv.data(), wv.data(), bv.data());
        let shape = vec![g.n, g.out_h(), g.out_w(), g.cout];
        self.push(Tensor::new(shape, data), Op::Conv2d(x, w, b, g), &[x, w, b])
    }

    /// 2×2 max pooling with stride 2 over NHWC input (odd trailing rows/cols dropped).
    pub fn maxpool2d(&self, x: Var) -> Var {
        let xv = self.value(x);
        if xv.ndim() != 4 {
            shape_err("maxpool2d", xv.shape(), &[0, 0, 0, 0]);
        }
        let s = xv.shape();
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut data = vec![0.0; n * oh * ow * c];
        let mut arg = vec![0usize; data.len()];
        for b in 0..n {
            for y in 0..oh {
                for xx in 0..ow {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut bi = 0;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let i = ((b * h + 2 * y + dy) * w + 2 * xx + dx) * c + ch;
                            if xv.data()[i] > best {
                                best = xv.data()[i];
                                bi = i;
                            }
                        }
                        let o = ((b * oh + y) * ow + xx) * c + ch;
                        data[o] = best;
                        arg[o] = bi;
                    }
                }
            }
        }
        self.push(
            Tensor::new(vec![n, oh, ow, c], data),
            Op::MaxPool2d(x, Rc::new(arg)),
            &[x],
        )
    }

    /// Bilinear lookup in `map [b,h,w,c]` at `coords [m,2]` given as
    /// continuous `(x, y)` grid coordinates (node `(i, j)` at integer
    /// position). Coordinates are clamped to the grid; rows with
    /// `valid[i] == false` produce zeros. Differentiable in both the map and
    /// the coordinates.
    pub fn sample2d(&self, map: Var, coords: Var, batch: &[usize], valid: &[bool]) -> Var {
        let (mv, cv) = (self.value(map), self.value(coords));
        if mv.ndim() != 4
            || cv.last_dim() != 2
            || cv.rows() != batch.len()
            || valid.len() != batch.len()
        {
            shape_err("sample2d", mv.shape(), cv.shape());
        }
        let s = mv.shape();
        let (h, w, c) = (s[1], s[2], s[3]);
        let m = batch.len();
        let mut data = vec![0.0; m * c];
        for i in 0..m {
            if !valid[i] {
                continue;
            }
            let (x0, x1, fx, _) = lin_axis(cv.data()[2 * i], w);
            let (y0, y1, fy, _) = lin_axis(cv.data()[2 * i + 1], h);
            let b = batch[i];
            assert!(b < s[0], "sample2d: batch index {b} out of range {:?}", s);
            let out = &mut data[i * c..(i + 1) * c];
            for (yy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                for (xx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                    let wgt = wy * wx;
                    if wgt == 0.0 {
                        continue;
                    }
                    let base = ((b * h + yy) * w + xx) * c;
                    for (o, v) in out.iter_mut().zip(&mv.data()[base..base + c]) {
                        *o += wgt * v;
                    }
                }
            }
        }
        self.push(
            Tensor::matrix(m, c, data),
            Op::Sample2d {
                map,
                coords,
                batch: Rc::new(batch.to_vec()),
                valid: Rc::new(valid.to_vec()),
            },
            &[map, coords],
        )
    }

    /// Trilinear lookup in a dense `grid [d,h,w,c]` at `coords [m,3]` given as
    /// continuous `(x, y, z)` grid coordinates, clamped to the grid.
    pub fn sample3d(&self, grid: Var, coords: Var) -> Var {
        let (gv, cv) = (self.value(grid), self.value(coords));
        if gv.ndim() != 4 || cv.last_dim() != 3 {
            shape_err("sample3d", gv.shape(), cv.shape());
        }
        let s = gv.shape();
        let (d, h, w, c) = (s[0], s[1], s[2], s[3]);
        let m = cv.rows();
        let mut data = vec![0.0; m * c];
        for i in 0..m {
            let p = &cv.data()[3 * i..3 * i + 3];
            let (x0, x1, fx, _) = lin_axis(p[0], w);
            let (y0, y1, fy, _) = lin_axis(p[1], h);
            let (z0, z1, fz, _) = lin_axis(p[2], d);
            let out = &mut data[i * c..(i + 1) * c];
            for (zz, wz) in [(z0, 1.0 - fz), (z1, fz)] {
                for (yy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                    for (xx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                        let wgt = wz * wy * wx;
                        if wgt == 0.0 {
                            continue;
                        }
                        let base = ((zz * h + yy) * w + xx) * c;
                        for (o, v) in out.iter_mut().zip(&gv.data()[base..base + c]) {
                            *o += wgt * v;
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::matrix(m, c, data),
            Op::Sample3d { grid, coords },
            &[grid, coords],
        )
    }

    /// Sparse convolution over an occupied-site list: `x [n_in, cin]`,
    /// `w [k, cin, cout]`, `b [cout]` -> `[n_out, cout]`.
    pub fn sparse_conv3d(&self, x: Var, w: Var, b: Var, rules: Rc<Rulebook>) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if wv.ndim() != 3
            || xv.rows() != rules.n_in
            || xv.last_dim() != wv.shape()[1]
            || wv.shape()[0] != rules.offsets.len()
        {
            shape_err("sparse_conv3d", xv.shape(), wv.shape());
        }
        let (cin, cout) = (wv.shape()[1], wv.shape()[2]);
        let mut data = vec![0.0; rules.n_out * cout];
        for row in data.chunks_mut(cout) {
            row.copy_from_slice(bv.data());
        }
        for (k, pairs) in rules.offsets.iter().enumerate() {
            let wk = &wv.data()[k * cin * cout..(k + 1) * cin * cout];
            for &(i, o) in pairs {
                let xi = xv.row(i);
                let out = &mut data[o * cout..(o + 1) * cout];
                for (ci, &xval) in xi.iter().enumerate() {
                    if xval == 0.0 {
                        continue;
                    }
                    for (ov, wval) in out.iter_mut().zip(&wk[ci * cout..(ci + 1) * cout]) {
                        *ov += xval * wval;
                    }
                }
            }
        }
        let n_out = rules.n_out;
        self.push(
            Tensor::matrix(n_out, cout, data),
            Op::SparseConv3d { x, w, b, rules },
            &[x, w, b],
        )
    }

    /// Pinhole projection of `points [m,3]` with per-row cameras.
    /// Returns pixel coordinates `[m,2]` and camera depths; rows with depth
    /// `<= MIN_DEPTH` project to `(0, 0)` and carry no gradient.
    pub fn project(&self, points: Var, cams: Rc<Vec<Pinhole>>) -> (Var, Vec<f64>) {
        let pv = self.value(points);
        if pv.last_dim() != 3 || pv.rows() != cams.len() {
            shape_err("project", pv.shape(), &[cams.len(), 3]);
        }
        let m = cams.len();
        let mut data = vec![0.0; 2 * m];
        let mut depth = vec![0.0; m];
        for i in 0..m {
            let c = &cams[i];
            let p = pv.row(i);
            let q = c.to_camera([p[0], p[1], p[2]]);
            depth[i] = q[2];
            if q[2] > MIN_DEPTH {
                data[2 * i] = c.fx * q[0] / q[2] + c.cx;
                data[2 * i + 1] = c.fy * q[1] / q[2] + c.cy;
            }
        }
        let v = self.push(
            Tensor::matrix(m, 2, data),
            Op::Project { points, cams },
            &[points],
        );
        (v, depth)
    }

    /// Front-to-back alpha compositing.
    ///
    /// `sigma` holds one density per sample, `color [s,3]`, `delta` the
    /// per-sample segment lengths and `spans[r] = (start, len)` the samples of
    /// ray `r`. Output `[rays, 3]`; residual transmittance shows `background`.
    pub fn composite(
        &self,
        sigma: Var,
        color: Var,
        delta: Rc<Vec<f64>>,
        spans: Rc<Vec<(usize, usize)>>,
        background: [f64; 3],
    ) -> Var {
        let (sv, cv) = (self.value(sigma), self.value(color));
        let s = sv.len();
        if cv.len() != 3 * s || delta.len() != s {
            shape_err("composite", sv.shape(), cv.shape());
        }
        let mut data = vec![0.0; spans.len() * 3];
        for (r, &(start, len)) in spans.iter().enumerate() {
            assert!(
                start + len <= s,
                "composite: span {r} exceeds sample count {s}"
            );
            let mut log_t = 0.0;
            let out = &mut data[3 * r..3 * r + 3];
            for k in start..start + len {
                let tk = (-log_t as f64).exp();
                let tau = sv.data()[k] * delta[k];
                let w = tk * (1.0 - (-tau).exp());
                for ch in 0..3 {
                    out[ch] += w * cv.data()[3 * k + ch];
                }
                log_t += tau;
            }
            let t_end = (-log_t).exp();
            for ch in 0..3 {
                out[ch] += t_end * background[ch];
            }
        }
        let rays = spans.len();
        self.push(
            Tensor::matrix(rays, 3, data),
            Op::Composite {
                sigma,
                color,
                delta,
                spans,
                background,
            },
            &[sigma, color],
        )
    }

    // ---- backward ----------------------------------------------------------

    /// Gradients of scalar `loss` with respect to every node that requires grad.
    pub fn gradients(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.0].value;
        assert!(
            lv.len() == 1,
            "backward: loss must be a scalar, got shape {:?}",
            lv.shape()
        );
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if !nodes[loss.0].requires_grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            backprop(&nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    /// Runs reverse mode from `loss` and accumulates into the parameter grads.
    pub fn backward(self, loss: Var, store: &mut ParamStore) {
        let grads = self.gradients(loss);
        for &(v, id) in self.params.borrow().iter() {
            if let Some(g) = grads.get(v) {
                let p = store.get_mut(id);
                for (a, b) in p.grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }
}

/// Result of [`Tape::gradients`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

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

/// Linear interpolation stencil along one axis of `n` nodes:
/// `(i0, i1, frac, differentiable)`.
pub(crate) fn lin_axis(g: f64, n: usize) -> (usize, usize, f64, bool) {
    if n <= 1 {
        return (0, 0, 0.0, false);
    }
    let hi = (n - 1) as f64;
    let inside = (0.0..=hi).contains(&g);
    let gc = g.clamp(0.0, hi);
    let i0 = (gc.floor() as usize).min(n - 2);
    (i0, i0 + 1, gc - i0 as f64, inside)
}

fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, g: Vec<f64>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn acc_with(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let n = nodes[v.0].value.len();
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
    f(slot);
}

fn backprop(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[i].value;
    let val = |v: Var| -> &Tensor { &nodes[v.0].value };
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(grads, nodes, *a, g.to_vec());
            acc(grads, nodes, *b, g.to_vec());
        }
        Op::AddRow(a, b) => {
            acc(grads, nodes, *a, g.to_vec());
            let c = val(*b).len();
            acc_with(grads, nodes, *b, |gb| {
                for row in g.chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
            });
        }
        Op::Sub(a, b) => {
            acc(grads, nodes, *a, g.to_vec());
            acc(grads, nodes, *b, g.iter().map(|x| -x).collect());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc(
                grads,
                nodes,
                *a,
                g.iter().zip(bv.data()).map(|(x, y)| x * y).collect(),
            );
            acc(
                grads,
                nodes,
                *b,
                g.iter().zip(av.data()).map(|(x, y)| x * y).collect(),
            );
        }
        Op::MulRows(a, s) => {
            let (av, sv) = (val(*a), val(*s));
            let c = av.last_dim().max(1);
            let mut ga = g.to_vec();
            for (row, &k) in ga.chunks_mut(c).zip(sv.data()) {
                row.iter_mut().for_each(|x| *x *= k);
            }
            acc(grads, nodes, *a, ga);
            let gs = g
                .chunks(c)
                .zip(av.data().chunks(c))
                .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                .collect();
            acc(grads, nodes, *s, gs);
        }
        Op::Affine(a, s) => acc(grads, nodes, *a, g.iter().map(|x| x * s).collect()),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if nodes[a.0].requires_grad {
                acc(grads, nodes, *a, kernels::matmul_nt(g, bv.data(), m, k, n));
            }
            if nodes[b.0].requires_grad {
                acc(grads, nodes, *b, kernels::matmul_tn(av.data(), g, m, k, n));
            }
        }
        Op::Relu(a) => {
            let av = val(*a);
            acc(
                grads,
                nodes,
                *a,
                g.iter()
                    .zip(av.data())
                    .map(|(x, &y)| if y > 0.0 { *x } else { 0.0 })
                    .collect(),
            );
        }
        Op::Exp(a) => acc(
            grads,
            nodes,
            *a,
            g.iter().zip(out.data()).map(|(x, y)| x * y).collect(),
        ),
        Op::Sin(a) => acc(
            grads,
            nodes,
            *a,
            g.iter()
                .zip(val(*a).data())
                .map(|(x, y)| x * y.cos())
                .collect(),
        ),
        Op::Cos(a) => acc(
            grads,
            nodes,
            *a,
            g.iter()
                .zip(val(*a).data())
                .map(|(x, y)| -x * y.sin())
                .collect(),
        ),
        Op::Sigmoid(a) => acc(
            grads,
            nodes,
            *a,
            g.iter()
                .zip(out.data())
                .map(|(x, y)| x * y * (1.0 - y))
                .collect(),
        ),
        Op::Softplus(a) => acc(
            grads,
            nodes,
            *a,
            g.iter()
                .zip(val(*a).data())
                .map(|(x, &y)| x * sigmoid(y))
                .collect(),
        ),
        Op::Softmax(a) => {
            let c = out.last_dim().max(1);
            let mut ga = vec![0.0; g.len()];
            for ((gr, yr), orow) in g.chunks(c).zip(out.data().chunks(c)).zip(ga.chunks_mut(c)) {
                let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                for j in 0..c {
                    orow[j] = yr[j] * (gr[j] - dot);
                }
            }
            acc(grads, nodes, *a, ga);
        }
        Op::Sum(a) => acc(grads, nodes, *a, vec![g[0]; val(*a).len()]),
        Op::Mean(a) => {
            let n = val(*a).len();
            acc(grads, nodes, *a, vec![g[0] / n.max(1) as f64; n]);
        }
        Op::MeanRows(a) => {
            let av = val(*a);
            let n = av.rows() as f64;
            let mut ga = Vec::with_capacity(av.len());
            for _ in 0..av.rows() {
                ga.extend(g.iter().map(|x| x / n));
            }
            acc(grads, nodes, *a, ga);
        }
        Op::Concat(parts) => {
            let widths: Vec<usize> = parts.iter().map(|p| val(*p).last_dim()).collect();
            let total: usize = widths.iter().sum();
            let rows = out.rows();
            let mut off = 0;
            for (p, &wd) in parts.iter().zip(&widths) {
                if nodes[p.0].requires_grad {
                    let mut gp = Vec::with_capacity(rows * wd);
                    for r in 0..rows {
                        gp.extend_from_slice(&g[r * total + off..r * total + off + wd]);
                    }
                    acc(grads, nodes, *p, gp);
                }
                off += wd;
            }
        }
        Op::Gather(a, idx) => {
            let c = val(*a).last_dim();
            acc_with(grads, nodes, *a, |ga| {
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        ga[src * c + j] += g[r * c + j];
                    }
                }
            });
        }
        Op::ScatterAdd(a, idx) => {
            let c = out.last_dim();
            let mut ga = Vec::with_capacity(idx.len() * c);
            for &o in idx.iter() {
                ga.extend_from_slice(&g[o * c..(o + 1) * c]);
            }
            acc(grads, nodes, *a, ga);
        }
        Op::Reshape(a) => acc(grads, nodes, *a, g.to_vec()),
        Op::Transpose(a) => {
            let (r, c) = (out.shape()[1], out.shape()[0]);
            acc(
                grads,
                nodes,
                *a,
                (0..r * c).map(|i| g[(i % c) * r + i / c]).collect(),
            );
        }
        Op::Spmm(m, x) => {
            let c = out.last_dim();
            acc_with(grads, nodes, *x, |gx| {
                for r in 0..m.rows {
                    let gr = &g[r * c..(r + 1) * c];
                    for (col, w) in m.row(r) {
                        for (a, b) in gx[col * c..(col + 1) * c].iter_mut().zip(gr) {
                            *a += w * b;
                        }
                    }
                }
            });
        }
        Op::BatchedDot(q, k) => {
            let (qv, kv) = (val(*q), val(*k));
            let (s, t, d) = (kv.shape()[0], kv.shape()[1], kv.shape()[2]);
            if nodes[q.0].requires_grad {
                let mut gq = vec![0.0; s * d];
                for i in 0..s {
                    for j in 0..t {
                        let w = g[i * t + j];
                        let kr = &kv.data()[(i * t + j) * d..(i * t + j + 1) * d];
                        for (a, b) in gq[i * d..(i + 1) * d].iter_mut().zip(kr) {
                            *a += w * b;
                        }
                    }
                }
                acc(grads, nodes, *q, gq);
            }
            if nodes[k.0].requires_grad {
                let mut gk = vec![0.0; s * t * d];
                for i in 0..s {
                    let qr = &qv.data()[i * d..(i + 1) * d];
                    for j in 0..t {
                        let w = g[i * t + j];
                        for (a, b) in gk[(i * t + j) * d..(i * t + j + 1) * d].iter_mut().zip(qr) {
                            *a = w * b;
                        }
                    }
                }
                acc(grads, nodes, *k, gk);
            }
        }
        Op::BatchedWeightedSum(a, v) => {
            let (av, vv) = (val(*a), val(*v));
            let (s, t, d) = (vv.shape()[0], vv.shape()[1], vv.shape()[2]);
            if nodes[a.0].requires_grad {
                let mut ga = vec![0.0; s * t];
                for i in 0..s {
                    let gr = &g[i * d..(i + 1) * d];
                    for j in 0..t {
                        let vr = &vv.data()[(i * t + j) * d..(i * t + j + 1) * d];
                        ga[i * t + j] = gr.iter().zip(vr).map(|(x, y)| x * y).sum();
                    }
                }
                acc(grads, nodes, *a, ga);
            }
            if nodes[v.0].requires_grad {
                let mut gv = vec![0.0; s * t * d];
                for i in 0..s {
                    let gr = &g[i * d..(i + 1) * d];
                    for j in 0..t {
                        let w = av.data()[i * t + j];
                        for (x, y) in gv[(i * t + j) * d..(i * t + j + 1) * d].iter_mut().zip(gr) {
                            *x = w * y;
                        }
                    }
                }
                acc(grads, nodes, *v, gv);
            }
        }
        Op::Conv2d(x, w, b, geom) => {
            let (dx, dw, db) = kernels::conv2d_backward(geom, val(*x).data(), val(*w).data(), g);
            acc(grads, nodes, *x, dx);
            acc(grads, nodes, *w, dw);
            acc(grads, nodes, *b, db);
        }
        Op::MaxPool2d(x, arg) => {
            acc_with(grads, nodes, *x, |gx| {
                for (o, &src) in arg.iter().enumerate() {
                    gx[src] += g[o];
                }
            });
        }
        Op::Sample2d {
            map,
            coords,
            batch,
            valid,
        } => {
            let (mv, cv) = (val(*map), val(*coords));
            let s = mv.shape();
            let (h, w, c) = (s[1], s[2], s[3]);
            let want_map = nodes[map.0].requires_grad;
            let mut gmap = if want_map {
                vec![0.0; mv.len()]
            } else {
                Vec::new()
            };
            let mut gc = vec![0.0; cv.len()];
            for i in 0..batch.len() {
                if !valid[i] {
                    continue;
                }
                let (x0, x1, fx, dxok) = lin_axis(cv.data()[2 * i], w);
                let (y0, y1, fy, dyok) = lin_axis(cv.data()[2 * i + 1], h);
                let b = batch[i];
                let gr = &g[i * c..(i + 1) * c];
                let idx = |yy: usize, xx: usize| ((b * h + yy) * w + xx) * c;
                let corners = [
                    (
                        idx(y0, x0),
                        (1.0 - fx) * (1.0 - fy),
                        -(1.0 - fy),
                        -(1.0 - fx),
                    ),
                    (idx(y0, x1), fx * (1.0 - fy), 1.0 - fy, -fx),
                    (idx(y1, x0), (1.0 - fx) * fy, -fy, 1.0 - fx),
                    (idx(y1, x1), fx * fy, fy, fx),
                ];
                for (base, wgt, dwx, dwy) in corners {
                    let vals = &mv.data()[base..base + c];
                    let dot: f64 = vals.iter().zip(gr).map(|(a, b)| a * b).sum();
                    if dxok {
                        gc[2 * i] += dwx * dot;
                    }
                    if dyok {
                        gc[2 * i + 1] += dwy * dot;
                    }
                    if want_map && wgt != 0.0 {
                        for (a, b) in gmap[base..base + c].iter_mut().zip(gr) {
                            *a += wgt * b;
                        }
                    }
                }
            }
            if want_map {
                acc(grads, nodes, *map, gmap);
            }
            acc(grads, nodes, *coords, gc);
        }
        Op::Sample3d { grid, coords } => {
            let (gv, cv) = (val(*grid), val(*coords));
            let s = gv.shape();
            let (d, h, w, c) = (s[0], s[1], s[2], s[3]);
            let want_grid = nodes[grid.0].requires_grad;
            let mut ggrid = if want_grid {
                vec![0.0; gv.len()]
            } else {
                Vec::new()
            };
            let mut gc = vec![0.0; cv.len()];
            for i in 0..cv.rows() {
                let p = &cv.data()[3 * i..3 * i + 3];
                let (x0, x1, fx, okx) = lin_axis(p[0], w);
                let (y0, y1, fy, oky) = lin_axis(p[1], h);
                let (z0, z1, fz, okz) = lin_axis(p[2], d);
                let gr = &g[i * c..(i + 1) * c];
                for (zz, wz, dz) in [(z0, 1.0 - fz, -1.0), (z1, fz, 1.0)] {
                    for (yy, wy, dy) in [(y0, 1.0 - fy, -1.0), (y1, fy, 1.0)] {
                        for (xx, wx, dx) in [(x0, 1.0 - fx, -1.0), (x1, fx, 1.0)] {
                            let base = ((zz * h + yy) * w + xx) * c;
                            let vals = &gv.data()[base..base + c];
                            let dot: f64 = vals.iter().zip(gr).map(|(a, b)| a * b).sum();
                            if okx {
                                gc[3 * i] += dx * wy * wz * dot;
                            }
                            if oky {
                                gc[3 * i + 1] += dy * wx * wz * dot;
                            }
                            if okz {
                                gc[3 * i + 2] += dz * wx * wy * dot;
                            }
                            let wgt = wx * wy * wz;
                            if want_grid && wgt != 0.0 {
                                for (a, b) in ggrid[base..base + c].iter_mut().zip(gr) {
                                    *a += wgt * b;
                                }
                            }
                        }
                    }
                }
            }
            if want_grid {
                acc(grads, nodes, *grid, ggrid);
            }
            acc(grads, nodes, *coords, gc);
        }
        Op::SparseConv3d { x, w, b, rules } => {
            let (xv, wv) = (val(*x), val(*w));
            let (cin, cout) = (wv.shape()[1], wv.shape()[2]);
            if nodes[b.0].requires_grad {
                let mut gb = vec![0.0; cout];
                for row in g.chunks(cout) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                acc(grads, nodes, *b, gb);
            }
            let want_x = nodes[x.0].requires_grad;
            let want_w = nodes[w.0].requires_grad;
            let mut gx = if want_x {
                vec![0.0; xv.len()]
            } else {
                Vec::new()
            };
            let mut gw = if want_w {
                vec![0.0; wv.len()]
            } else {
                Vec::new()
            };
            let mut wt = vec![0.0; cin * cout];
            for (k, pairs) in rules.offsets.iter().enumerate() {
                let wk = &wv.data()[k * cin * cout..(k + 1) * cin * cout];
                if want_x {
                    for ci in 0..cin {
                        for co in 0..cout {
                            wt[co * cin + ci] = wk[ci * cout + co];
                        }
                    }
                }
                for &(i, o) in pairs {
                    let go = &g[o * cout..(o + 1) * cout];
                    if want_x {
                        let gxi = &mut gx[i * cin..(i + 1) * cin];
                        for (co, &gv) in go.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            for (a, &wv) in gxi.iter_mut().zip(&wt[co * cin..(co + 1) * cin]) {
                                *a += gv * wv;
                            }
                        }
                    }
                    if want_w {
                        let xi = xv.row(i);
                        for (ci, &xval) in xi.iter().enumerate() {
                            if xval == 0.0 {
                                continue;
                            }
                            let gwrow = &mut gw
                                [k * cin * cout + ci * cout..k * cin * cout + (ci + 1) * cout];
                            for (a, b) in gwrow.iter_mut().zip(go) {
                                *a += xval * b;
                            }
                        }
                    }
                }
            }
            if want_x {
                acc(grads, nodes, *x, gx);
            }
            if want_w {
                acc(grads, nodes, *w, gw);
            }
        }
        Op::Project { points, cams } => {
            let pv = val(*points);
            let mut gp = vec![0.0; pv.len()];
            for (i, c) in cams.iter().enumerate() {
                let p = pv.row(i);
                let q = c.to_camera([p[0], p[1], p[2]]);
                if q[2] <= MIN_DEPTH {
                    continue;
                }
                let (gu, gv) = (g[2 * i], g[2 * i + 1]);
                let iz = 1.0 / q[2];
                let dq = [
                    gu * c.fx * iz,
                    gv * c.fy * iz,
                    -(gu * c.fx * q[0] + gv * c.fy * q[1]) * iz * iz,
                ];
                let r = &c.rot;
                for a in 0..3 {
                    gp[3 * i + a] = r[a] * dq[0] + r[3 + a] * dq[1] + r[6 + a] * dq[2];
                }
            }
            acc(grads, nodes, *points, gp);
        }
        Op::Composite {
            sigma,
            color,
            delta,
            spans,
            background,
        } => {
            let (sv, cv) = (val(*sigma), val(*color));
            let mut gs = vec![0.0; sv.len()];
            let mut gcol = vec![0.0; cv.len()];
            for (r, &(start, len)) in spans.iter().enumerate() {
                let gr = &g[3 * r..3 * r + 3];
                let mut trans = Vec::with_capacity(len + 1);
                let mut log_t = 0.0;
                trans.push(1.0);
                for k in start..start + len {
                    log_t += sv.data()[k] * delta[k];
                    trans.push((-log_t as f64).exp());
                }
                // dC/dσ_k = δ_k (T_{k+1} c_k − Σ_{m>k} w_m c_m − T_end · bg)
                let t_end = trans[len];
                let mut tail = [
                    t_end * background[0],
                    t_end * background[1],
                    t_end * background[2],
                ];
                for j in (0..len).rev() {
                    let k = start + j;
                    let w = trans[j] - trans[j + 1];
                    let ck = &cv.data()[3 * k..3 * k + 3];
                    let mut d = 0.0;
                    for ch in 0..3 {
                        gcol[3 * k + ch] += w * gr[ch];
                        d += gr[ch] * (trans[j + 1] * ck[ch] - tail[ch]);
                    }
                    gs[k] += delta[k] * d;
                    for ch in 0..3 {
                        tail[ch] += w * ck[ch];
                    }
                }
            }
            acc(grads, nodes, *sigma, gs);
            acc(grads, nodes, *color, gcol);
        }
    }
}
