//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Graph`] is a tape built by a single forward pass. Parameters are read
//! by reference from a [`ParamStore`]; calling [`Graph::backward`] with one or
//! more seed gradients accumulates into a [`Grads`] buffer. Frozen parameters
//! and plain inputs do not require gradient, and subgraphs that depend only on
//! them are skipped during the backward sweep.

use alloc::vec;
use alloc::vec::Vec;

use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{dot, gemm_nn, gemm_nt, gemm_tn, Mat};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial geometry of a patch-extraction (im2col) step on an `h x w x c` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// Calls `f(src, dst, channels)` for every kernel tap that lands inside
    /// the input; taps in the zero padding are skipped.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let pl = self.patch_len();
        for oy in 0..oh {
            for ox in 0..ow {
                let out_row = oy * ow + ox;
                for ky in 0..self.kernel {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.in_h as isize {
                        continue;
                    }
                    for kx in 0..self.kernel {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.in_w as isize {
                            continue;
                        }
                        let src = (iy as usize * self.in_w + ix as usize) * self.channels;
                        let dst = out_row * pl + (ky * self.kernel + kx) * self.channels;
                        f(src, dst, self.channels);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Im2col {
        x: Var,
        geom: ConvGeometry,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    RowCosine(Var, Var),
    CrossEntropySum {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Mat,
    },
}

struct Node {
    op: Op,
    value: Option<Mat>,
    requires_grad: bool,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(pid)) => self.store.get(*pid),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Which side of zero every ReLU input sits on, in recording order.
    /// Two evaluations with equal patterns lie in the same linear piece of
    /// every ReLU.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(a),
                _ => None,
            })
            .flat_map(|a| self.value(a).data().iter().map(|&x| x > 0.0))
            .collect()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Mat, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(Op::Input, value, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let rg = self.store.is_trainable(id);
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = Mat::zeros(m, n);
        gemm_nn(
            self.value(a).data(),
            self.value(b).data(),
            out.data_mut(),
            m,
            k,
            n,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), out, rg)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_nt inner dimension mismatch");
        let mut out = Mat::zeros(m, n);
        gemm_nt(
            self.value(a).data(),
            self.value(b).data(),
            out.data_mut(),
            m,
            k,
            n,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMulNT(a, b), out, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), out, rg)
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "add_row expects a 1 x n row");
        let mut out = self.value(a).clone();
        let r = self.value(row).data();
        for i in 0..m {
            for (o, b) in out.row_mut(i).iter_mut().zip(r) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(Op::AddRow(a, row), out, rg)
    }

    /// Adds an `m x 1` column to every column of an `m x n` matrix.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let (m, _) = self.shape(a);
        assert_eq!(self.shape(col), (m, 1), "add_col expects an m x 1 column");
        let mut out = self.value(a).clone();
        let c = self.value(col).data();
        for (i, &ci) in c.iter().enumerate() {
            for o in out.row_mut(i) {
                *o += ci;
            }
        }
        let rg = self.rg(a) || self.rg(col);
        self.push(Op::AddCol(a, col), out, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_in_place(s);
        let rg = self.rg(a);
        self.push(Op::Scale(a, s), out, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let rg = self.rg(a);
        self.push(Op::Relu(a), out, rg)
    }

    /// Row-wise layer normalisation with affine `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (m, n) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, n));
        assert_eq!(self.shape(beta), (1, n));
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Mat::zeros(m, n);
        let mut out = Mat::zeros(m, n);
        let mut rstd = Vec::with_capacity(m);
        for i in 0..m {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            rstd.push(r);
            let xh = xhat.row_mut(i);
            for j in 0..n {
                xh[j] = (row[j] - mean) * r;
            }
            let o = out.row_mut(i);
            for j in 0..n {
                o[j] = g[j] * xh[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            out,
            rg,
        )
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` is masked out when
    /// `j > i + (cols - rows)`, i.e. a query may not look at later keys.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Var {
        let (m, n) = self.shape(x);
        assert!(!causal || n >= m, "causal softmax needs cols >= rows");
        let offset = n - m.min(n);
        let xv = self.value(x);
        let mut out = Mat::zeros(m, n);
        for i in 0..m {
            let limit = if causal { i + offset + 1 } else { n };
            let row = &xv.row(i)[..limit];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let o = out.row_mut(i);
            let mut sum = 0.0;
            for j in 0..limit {
                let e = libm::exp(row[j] - max);
                o[j] = e;
                sum += e;
            }
            for v in &mut o[..limit] {
                *v /= sum;
            }
        }
        let rg = self.rg(x);
        self.push(Op::Softmax(x), out, rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.shape(x);
        assert!(start + len <= n, "slice_cols out of range");
        let xv = self.value(x);
        let mut out = Mat::zeros(m, len);
        for i in 0..m {
            out.row_mut(i)
                .copy_from_slice(&xv.row(i)[start..start + len]);
        }
        let rg = self.rg(x);
        self.push(Op::SliceCols { x, start }, out, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut out = Mat::zeros(m, total);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), m, "concat_cols row mismatch");
            let w = pv.cols();
            for i in 0..m {
                out.row_mut(i)[off..off + w].copy_from_slice(pv.row(i));
            }
            off += w;
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(Op::ConcatCols(parts.to_vec()), out, rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.shape(x);
        assert!(start + len <= m, "slice_rows out of range");
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let out = Mat::from_vec(len, n, data).expect("shape");
        let rg = self.rg(x);
        self.push(Op::SliceRows { x, start }, out, rg)
    }

    /// Extracts convolution patches from an `(in_h*in_w) x channels` grid.
    pub fn im2col(&mut self, x: Var, geom: ConvGeometry) -> Var {
        assert_eq!(
            self.shape(x),
            (geom.in_h * geom.in_w, geom.channels),
            "im2col input shape"
        );
        let xv = self.value(x).data();
        let mut out = Mat::zeros(geom.out_h() * geom.out_w(), geom.patch_len());
        {
            let od = out.data_mut();
            geom.for_each_tap(|src, dst, c| {
                od[dst..dst + c].copy_from_slice(&xv[src..src + c]);
            });
        }
        let rg = self.rg(x);
        self.push(Op::Im2col { x, geom }, out, rg)
    }

    /// Row lookup into an embedding table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let (rows, d) = self.shape(table);
        let tv = self.value(table);
        let mut out = Mat::zeros(ids.len(), d);
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < rows, "gather id {id} out of range {rows}");
            out.row_mut(i).copy_from_slice(tv.row(id));
        }
        let rg = self.rg(table);
        self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            out,
            rg,
        )
    }

    /// Per-row cosine similarity of two equally shaped matrices, as an
    /// `m x 1` column. A zero row yields cosine 0.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Var {
        let (m, _) = self.shape(a);
        assert_eq!(self.shape(a), self.shape(b), "row_cosine shape mismatch");
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Mat::zeros(m, 1);
        for i in 0..m {
            let (x, y) = (av.row(i), bv.row(i));
            let nx = libm::sqrt(dot(x, x));
            let ny = libm::sqrt(dot(y, y));
            let c = if nx == 0.0 || ny == 0.0 {
                0.0
            } else {
                dot(x, y) / (nx * ny)
            };
            out.set(i, 0, c);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::RowCosine(a, b), out, rg)
    }

    /// Summed token negative log-likelihood; `None` targets are masked out.
    /// Produces a `1 x 1` value.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let (n, v) = self.shape(logits);
        assert_eq!(targets.len(), n, "one target per logit row");
        let lv = self.value(logits);
        let mut probs = Mat::zeros(n, v);
        let mut total = 0.0;
        for i in 0..n {
            let row = lv.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let p = probs.row_mut(i);
            for j in 0..v {
                let e = libm::exp(row[j] - max);
                p[j] = e;
                sum += e;
            }
            for x in p.iter_mut() {
                *x /= sum;
            }
            if let Some(t) = targets[i] {
                assert!(t < v, "target {t} out of vocabulary {v}");
                total += -(row[t] - max - libm::log(sum));
            }
        }
        let rg = self.rg(logits);
        self.push(
            Op::CrossEntropySum {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            Mat::filled(1, 1, total),
            rg,
        )
    }

    /// Reverse sweep. Each seed `(v, g)` adds `g` as the upstream gradient of
    /// `v`; parameter gradients are accumulated into `grads`.
    pub fn backward(&self, seeds: &[(Var, &Mat)], grads: &mut Grads) {
        let mut bufs: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(self.shape(*v), g.shape(), "seed gradient shape");
            if !self.nodes[v.0].requires_grad {
                continue;
            }
            match &mut bufs[v.0] {
                Some(b) => b.add_assign(g),
                slot @ None => *slot = Some((*g).clone()),
            }
            last = last.max(v.0 + 1);
        }
        for idx in (0..last).rev() {
            let Some(g) = bufs[idx].take() else {
                continue;
            };
            self.backward_node(idx, &g, &mut bufs, grads);
        }
    }

    fn acc<'a>(&self, bufs: &'a mut [Option<Mat>], v: Var) -> Option<&'a mut Mat> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let (r, c) = self.shape(v);
        Some(bufs[v.0].get_or_insert_with(|| Mat::zeros(r, c)))
    }

    fn backward_node(&self, idx: usize, g: &Mat, bufs: &mut [Option<Mat>], grads: &mut Grads) {
        match &self.nodes[idx].op {
            Op::Input => {}
            Op::Param(pid) => grads.get_mut(*pid).add_assign(g),
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                if let Some(da) = self.acc(bufs, *a) {
                    gemm_nt(g.data(), self.value(*b).data(), da.data_mut(), m, n, k);
                }
                if let Some(db) = self.acc(bufs, *b) {
                    gemm_tn(self.value(*a).data(), g.data(), db.data_mut(), m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).0;
                if let Some(da) = self.acc(bufs, *a) {
                    gemm_nn(g.data(), self.value(*b).data(), da.data_mut(), m, n, k);
                }
                if let Some(db) = self.acc(bufs, *b) {
                    gemm_tn(g.data(), self.value(*a).data(), db.data_mut(), m, n, k);
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.acc(bufs, *a) {
                    da.add_assign(g);
                }
                if let Some(db) = self.acc(bufs, *b) {
                    db.add_assign(g);
                }
            }
            Op::AddRow(a, row) => {
                if let Some(da) = self.acc(bufs, *a) {
                    da.add_assign(g);
                }
                if let Some(dr) = self.acc(bufs, *row) {
                    let d = dr.data_mut();
                    for i in 0..g.rows() {
                        for (x, y) in d.iter_mut().zip(g.row(i)) {
                            *x += y;
                        }
                    }
                }
            }
            Op::AddCol(a, col) => {
                if let Some(da) = self.acc(bufs, *a) {
                    da.add_assign(g);
                }
                if let Some(dc) = self.acc(bufs, *col) {
                    for i in 0..g.rows() {
                        dc.data_mut()[i] += g.row(i).iter().sum::<f64>();
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(da) = self.acc(bufs, *a) {
                    da.add_scaled(g, *s);
                }
            }
            Op::Relu(a) => {
                let out = self.nodes[idx].value.as_ref().expect("value");
                if let Some(da) = self.acc(bufs, *a) {
                    for ((d, gv), o) in da.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        if *o > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = xhat.shape();
                let gam = self.value(*gamma).data();
                if let Some(dg) = self.acc(bufs, *gamma) {
                    let d = dg.data_mut();
                    for i in 0..m {
                        for ((dj, gj), xj) in d.iter_mut().zip(g.row(i)).zip(xhat.row(i)) {
                            *dj += gj * xj;
                        }
                    }
                }
                if let Some(db) = self.acc(bufs, *beta) {
                    let d = db.data_mut();
                    for i in 0..m {
                        for (dj, gj) in d.iter_mut().zip(g.row(i)) {
                            *dj += gj;
                        }
                    }
                }
                if let Some(dx) = self.acc(bufs, *x) {
                    let mut dxhat = vec![0.0; n];
                    for i in 0..m {
                        let gr = g.row(i);
                        let xr = xhat.row(i);
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            dxhat[j] = gr[j] * gam[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xr[j];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        let r = rstd[i];
                        let out = dx.row_mut(i);
                        for j in 0..n {
                            out[j] += r * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = self.nodes[idx].value.as_ref().expect("value");
                if let Some(dx) = self.acc(bufs, *x) {
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let s = dot(yr, gr);
                        for ((d, yj), gj) in dx.row_mut(i).iter_mut().zip(yr).zip(gr) {
                            *d += yj * (gj - s);
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let w = g.cols();
                if let Some(dx) = self.acc(bufs, *x) {
                    for i in 0..g.rows() {
                        for (d, gv) in dx.row_mut(i)[*start..*start + w].iter_mut().zip(g.row(i)) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if let Some(dp) = self.acc(bufs, p) {
                        for i in 0..g.rows() {
                            for (d, gv) in dp.row_mut(i).iter_mut().zip(&g.row(i)[off..off + w]) {
                                *d += gv;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                let n = g.cols();
                if let Some(dx) = self.acc(bufs, *x) {
                    let d = &mut dx.data_mut()[start * n..(start + g.rows()) * n];
                    for (a, b) in d.iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
            }
            Op::Im2col { x, geom } => {
                if let Some(dx) = self.acc(bufs, *x) {
                    let d = dx.data_mut();
                    let gd = g.data();
                    geom.for_each_tap(|src, dst, c| {
                        for t in 0..c {
                            d[src + t] += gd[dst + t];
                        }
                    });
                }
            }
            Op::Gather { table, ids } => {
                if let Some(dt) = self.acc(bufs, *table) {
                    for (i, &id) in ids.iter().enumerate() {
                        for (d, gv) in dt.row_mut(id).iter_mut().zip(g.row(i)) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::RowCosine(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let cos = self.nodes[idx].value.as_ref().expect("value");
                let m = av.rows();
                let mut da_rows: Vec<Option<Vec<f64>>> = vec![None; m];
                let mut db_rows: Vec<Option<Vec<f64>>> = vec![None; m];
                for i in 0..m {
                    let (x, y) = (av.row(i), bv.row(i));
                    let nx = libm::sqrt(dot(x, x));
                    let ny = libm::sqrt(dot(y, y));
                    if nx == 0.0 || ny == 0.0 {
                        continue;
                    }
                    let c = cos.get(i, 0);
                    let gi = g.get(i, 0);
                    let inv = 1.0 / (nx * ny);
                    da_rows[i] = Some(
                        x.iter()
                            .zip(y)
                            .map(|(xj, yj)| gi * (yj * inv - c * xj / (nx * nx)))
                            .collect(),
                    );
                    db_rows[i] = Some(
                        x.iter()
                            .zip(y)
                            .map(|(xj, yj)| gi * (xj * inv - c * yj / (ny * ny)))
                            .collect(),
                    );
                }
                if let Some(da) = self.acc(bufs, *a) {
                    for (i, r) in da_rows.iter().enumerate() {
                        if let Some(r) = r {
                            for (d, v) in da.row_mut(i).iter_mut().zip(r) {
                                *d += v;
                            }
                        }
                    }
                }
                if let Some(db) = self.acc(bufs, *b) {
                    for (i, r) in db_rows.iter().enumerate() {
                        if let Some(r) = r {
                            for (d, v) in db.row_mut(i).iter_mut().zip(r) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::CrossEntropySum {
                logits,
                targets,
                probs,
            } => {
                let s = g.get(0, 0);
                if let Some(dl) = self.acc(bufs, *logits) {
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let row = dl.row_mut(i);
                        for (d, p) in row.iter_mut().zip(probs.row(i)) {
                            *d += s * p;
                        }
                        row[t] -= s;
                    }
                }
            }
        }
    }
}
