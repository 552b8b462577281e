//! A small reverse-mode tape over [`Matrix`] values.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep over the
//! node list visits every consumer before its producers. Parameters enter the
//! tape as leaves referencing a [`ParamStore`]; backward accumulates their
//! gradients into a [`Gradients`] buffer.

use crate::params::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub type NodeId = usize;

const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, T),
    MulConst(NodeId, Matrix<T>),
    Tanh(NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Matrix<T>,
        inv_std: Vec<T>,
    },
    MaskedSoftmax(NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    GatherRows {
        table: NodeId,
        ids: Vec<usize>,
    },
    SelectRows {
        x: NodeId,
        rows: Vec<usize>,
    },
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, value: Matrix<T>) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let value = self.params.get(id).clone();
        self.push(value, Op::Param(id))
    }

    /// Looks up a parameter by canonical name. Panics if absent.
    pub fn param_named(&mut self, name: &str) -> NodeId {
        let id = self
            .params
            .id(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.param(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_bt(self.value(b));
        self.push(v, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let b = self.value(row);
        assert_eq!(b.rows(), 1, "add_row expects a single row");
        let mut v = self.value(a).clone();
        assert_eq!(v.cols(), b.cols(), "add_row width mismatch");
        let b = b.as_slice().to_vec();
        for r in 0..v.rows() {
            for (x, &y) in v.row_mut(r).iter_mut().zip(&b) {
                *x += y;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    /// Element-wise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: NodeId, c: Matrix<T>) -> NodeId {
        let v = self.value(a).zip_map(&c, |x, y| x * y);
        self.push(v, Op::MulConst(a, c))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(T::tanh);
        self.push(v, Op::Tanh(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let k = T::c(GELU_K);
        let c = T::c(GELU_C);
        let half = T::c(0.5);
        let v = self
            .value(a)
            .map(|x| half * x * (T::one() + (k * (x + c * x * x * x)).tanh()));
        self.push(v, Op::Gelu(a))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (each `1 × cols`).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let n = T::from_count(cols);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + T::c(LN_EPS)).sqrt();
            for (o, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let g = self.value(gamma).as_slice().to_vec();
        let b = self.value(beta).as_slice().to_vec();
        let mut y = xhat.clone();
        for r in 0..rows {
            for ((o, &gi), &bi) in y.row_mut(r).iter_mut().zip(&g).zip(&b) {
                *o = *o * gi + bi;
            }
        }
        self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Row-wise softmax where columns with `keep[c] == false` receive zero
    /// probability. A row with no kept column yields all zeros.
    pub fn masked_softmax(&mut self, a: NodeId, keep: &[bool]) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.cols(), keep.len(), "softmax mask width");
        let mut v = Matrix::zeros(av.rows(), av.cols());
        for r in 0..av.rows() {
            let row = av.row(r);
            let max = row
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(&x, _)| x)
                .fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                continue;
            }
            let out = v.row_mut(r);
            let mut z = T::zero();
            for ((o, &x), &k) in out.iter_mut().zip(row).zip(keep) {
                if k {
                    *o = (x - max).exp();
                    z += *o;
                }
            }
            for o in out.iter_mut() {
                *o /= z;
            }
        }
        self.push(v, Op::MaskedSoftmax(a))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "slice out of range");
        let mut v = Matrix::zeros(av.rows(), len);
        for r in 0..av.rows() {
            v.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        self.push(v, Op::SliceCols { x: a, start })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows(), rows, "concat row mismatch");
                v.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
                off += pv.cols();
            }
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let v = self.value(table).select_rows(ids);
        self.push(
            v,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn select_rows(&mut self, a: NodeId, rows: &[usize]) -> NodeId {
        let v = self.value(a).select_rows(rows);
        self.push(
            v,
            Op::SelectRows {
                x: a,
                rows: rows.to_vec(),
            },
        )
    }

    /// Affine map `x · W + b` with `W` of shape `in × out` and `b` of `1 × out`.
    pub fn linear(&mut self, x: NodeId, weight: &str, bias: &str) -> NodeId {
        let w = self.param_named(weight);
        let b = self.param_named(bias);
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    /// Reverse sweep seeded with `dL/d(node)` for each `(node, grad)` pair.
    pub fn backward(&self, seeds: &[(NodeId, Matrix<T>)], out: &mut Gradients<T>) {
        let Some(top) = seeds.iter().map(|(id, _)| *id).max() else {
            return;
        };
        let mut grads: Vec<Option<Matrix<T>>> = (0..=top).map(|_| None).collect();
        for (id, g) in seeds {
            assert_eq!(g.shape(), self.value(*id).shape(), "seed shape mismatch");
            accumulate(&mut grads, *id, g.clone());
        }
        for id in (0..=top).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => out.accumulate(*pid, &g),
                Op::MatMul(a, b) => {
                    let ga = g.matmul_bt(self.value(*b));
                    let gb = self.value(*a).matmul_at(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulBt(a, b) => {
                    let ga = g.matmul(self.value(*b));
                    let gb = g.matmul_at(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, b) => {
                    accumulate(&mut grads, *b, g.sum_rows());
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::MulConst(a, c) => accumulate(&mut grads, *a, g.zip_map(c, |x, y| x * y)),
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, |gi, y| gi * (T::one() - y * y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let k = T::c(GELU_K);
                    let c = T::c(GELU_C);
                    let half = T::c(0.5);
                    let three = T::c(3.0);
                    let ga = g.zip_map(self.value(*a), |gi, x| {
                        let t = (k * (x + c * x * x * x)).tanh();
                        let d = half * (T::one() + t)
                            + half * x * (T::one() - t * t) * k * (T::one() + three * c * x * x);
                        gi * d
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (rows, cols) = g.shape();
                    let gam = self.value(*gamma).as_slice();
                    let n = T::from_count(cols);
                    let mut dgamma = Matrix::zeros(1, cols);
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for c in 0..cols {
                            dgamma.as_mut_slice()[c] += gr[c] * xr[c];
                            let d = gr[c] * gam[c];
                            sum_d += d;
                            sum_dx += d * xr[c];
                        }
                        let scale = inv_std[r] / n;
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            let d = gr[c] * gam[c];
                            *o = scale * (n * d - sum_d - xr[c] * sum_dx);
                        }
                    }
                    accumulate(&mut grads, *beta, g.sum_rows());
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *x, dx);
                }
                Op::MaskedSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let s: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for ((o, &p), &q) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = p * (q - s);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceCols { x, start } => {
                    let (rows, cols) = self.value(*x).shape();
                    let mut gx = Matrix::zeros(rows, cols);
                    let w = g.cols();
                    for r in 0..rows {
                        gx.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (rows, w) = self.value(p).shape();
                        let mut gp = Matrix::zeros(rows, w);
                        for r in 0..rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        off += w;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::GatherRows { table: x, ids } | Op::SelectRows { x, rows: ids } => {
                    let (rows, cols) = self.value(*x).shape();
                    let mut gx = Matrix::zeros(rows, cols);
                    for (i, &src) in ids.iter().enumerate() {
                        for (o, &v) in gx.row_mut(src).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], id: NodeId, g: Matrix<T>) {
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
