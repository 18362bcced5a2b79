//! Reverse-mode differentiation over a recorded computation graph.
//!
//! A [`Tape`] owns every intermediate [`Tensor`]; operations return [`Var`]
//! handles into it. All 2-D operations treat a tensor as
//! `rows x cols` where `cols` is the product of the trailing extents.
//!
//! Non-finite outputs do not panic: the first offending operation is
//! remembered and reported by [`Tape::check_finite`] and [`Tape::backward`].

use crate::error::{Error, Result};
use crate::numerics::tensor::{gemm, gemm_strided, log_softmax_in_place, softmax_in_place};
use crate::numerics::{Precision, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    AddRow(Var, Var),
    RepeatRows(Var, usize),
    TileRows(Var, usize),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var),
    Gelu(Var),
    Silu(Var),
    Tanh(Var),
    Exp(Var),
    SumAll(Var),
    MeanAll(Var),
    GroupMean(Var, usize),
    Pick(Var, Vec<usize>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::RepeatRows(..) => "repeat_rows",
            Op::TileRows(..) => "tile_rows",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Silu(..) => "silu",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::GroupMean(..) => "group_mean",
            Op::Pick(..) => "pick",
            Op::Attention { .. } => "attention",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Op-specific forward cache (layer-norm inverse std, attention probabilities).
    cache: Vec<f64>,
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    record: bool,
    nonfinite: Option<&'static str>,
}

/// Adjoints indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adjoint of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl Tape {
    /// Tape that records operations for a backward pass.
    pub fn new(precision: Precision) -> Self {
        Tape {
            nodes: Vec::new(),
            precision,
            record: true,
            nonfinite: None,
        }
    }

    /// Forward-only tape: parameters are treated as constants and
    /// [`Tape::backward`] fails.
    pub fn inference(precision: Precision) -> Self {
        Tape {
            record: false,
            ..Tape::new(precision)
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn is_recording(&self) -> bool {
        self.record
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Leaf whose adjoint is computed by [`Tape::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        let rg = self.record;
        self.leaf(t, rg)
    }

    fn leaf(&mut self, mut t: Tensor, requires_grad: bool) -> Var {
        self.precision.round_slice(t.data_mut());
        if self.nonfinite.is_none() && !t.is_finite() {
            self.nonfinite = Some("leaf");
        }
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
            cache: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, mut value: Tensor, op: Op, parents: &[Var], cache: Vec<f64>) -> Var {
        self.precision.round_slice(value.data_mut());
        if self.nonfinite.is_none() && !value.is_finite() {
            self.nonfinite = Some(op.name());
        }
        let requires_grad = self.record && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            cache,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.nonfinite {
            Some(op) => Err(Error::NonFinite { op: op.to_string() }),
            None => Ok(()),
        }
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b], Vec::new())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b], Vec::new())
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b], Vec::new())
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a], Vec::new())
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a), &[a], Vec::new())
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a), &[a], Vec::new())
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a), &[a], Vec::new())
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), &[a], Vec::new())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), &[a], Vec::new())
    }

    // ---- linear algebra -------------------------------------------------

    /// `(m x k) * (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        assert_eq!(k, k2, "matmul inner extents differ");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let t = Tensor::new(vec![m, n], out).expect("matmul shape");
        self.push(t, Op::MatMul(a, b), &[a, b], Vec::new())
    }

    /// Adds the vector `b` (length = cols of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (_, c) = self.dims(x);
        assert_eq!(self.value(b).len(), c, "add_row bias length");
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        self.push(out, Op::AddRow(x, b), &[x, b], Vec::new())
    }

    /// Repeats each row of `x` `times` times consecutively: `(B x d) -> (B*times x d)`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let (r, c) = self.dims(x);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * times * c);
        for i in 0..r {
            for _ in 0..times {
                out.extend_from_slice(&src[i * c..(i + 1) * c]);
            }
        }
        let t = Tensor::new(vec![r * times, c], out).expect("repeat_rows");
        self.push(t, Op::RepeatRows(x, times), &[x], Vec::new())
    }

    /// Tiles the whole block `times` times: `(L x d) -> (times*L x d)`.
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Var {
        let (r, c) = self.dims(x);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * times * c);
        for _ in 0..times {
            out.extend_from_slice(src);
        }
        let t = Tensor::new(vec![r * times, c], out).expect("tile_rows");
        self.push(t, Op::TileRows(x, times), &[x], Vec::new())
    }

    // ---- normalizations ---------------------------------------------------

    pub fn softmax(&mut self, x: Var) -> Var {
        let out = self.value(x).softmax_rows();
        self.push(out, Op::Softmax(x), &[x], Vec::new())
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            log_softmax_in_place(row);
        }
        self.push(out, Op::LogSoftmax(x), &[x], Vec::new())
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut out = self.value(x).clone();
        let mut rstd = Vec::with_capacity(r);
        for row in out.data_mut().chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * s;
            }
            rstd.push(s);
        }
        self.push(out, Op::LayerNorm(x), &[x], rstd)
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x], Vec::new())
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(x), &[x], Vec::new())
    }

    /// Mean over consecutive groups of `group` rows (all columns):
    /// `(G*group x c) -> (G x 1)`.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Var {
        let (r, c) = self.dims(x);
        assert!(group > 0 && r % group == 0, "group_mean: {r} rows not divisible by {group}");
        let g = r / group;
        let data = self.value(x).data();
        let per = (group * c) as f64;
        let out: Vec<f64> = (0..g)
            .map(|i| data[i * group * c..(i + 1) * group * c].iter().sum::<f64>() / per)
            .collect();
        let t = Tensor::new(vec![g, 1], out).expect("group_mean");
        self.push(t, Op::GroupMean(x, group), &[x], Vec::new())
    }

    /// Selects `x[i, idx[i]]` for every row: `(n x m) -> (n x 1)`.
    pub fn pick(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let (r, c) = self.dims(x);
        assert_eq!(idx.len(), r, "pick needs one index per row");
        let data = self.value(x).data();
        let out: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!(j < c, "pick index {j} out of range {c}");
                data[i * c + j]
            })
            .collect();
        let t = Tensor::new(vec![r, 1], out).expect("pick");
        self.push(t, Op::Pick(x, idx), &[x], Vec::new())
    }

    // ---- attention ----------------------------------------------------------

    /// Bidirectional multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `(batch*seq x d)`; heads split the columns evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Var {
        let (r, d) = self.dims(q);
        assert_eq!(r, batch * seq, "attention rows");
        assert_eq!(self.dims(k), (r, d));
        assert_eq!(self.dims(v), (r, d));
        assert!(heads > 0 && d % heads == 0, "heads must divide width");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; r * d];
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * d + h * dh..(b * seq + i) * d + (h + 1) * dh];
                    let prow = &mut p[i * seq..(i + 1) * seq];
                    for (j, pj) in prow.iter_mut().enumerate() {
                        let kj = &kd[(b * seq + j) * d + h * dh..(b * seq + j) * d + (h + 1) * dh];
                        *pj = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                    }
                    softmax_in_place(prow);
                    let oi = &mut out[(b * seq + i) * d + h * dh..(b * seq + i) * d + (h + 1) * dh];
                    for (j, &pj) in prow.iter().enumerate() {
                        let vj = &vd[(b * seq + j) * d + h * dh..(b * seq + j) * d + (h + 1) * dh];
                        for (o, vv) in oi.iter_mut().zip(vj) {
                            *o += pj * vv;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![r, d], out).expect("attention");
        self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
            },
            &[q, k, v],
            probs,
        )
    }

    // ---- backward -----------------------------------------------------------

    /// Adjoints of the scalar `loss` with respect to every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.record {
            return Err(Error::GradientsDisabled);
        }
        self.check_finite()?;
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut out = Vec::with_capacity(n);
        for (node, g) in self.nodes.iter().zip(grads) {
            out.push(match g {
                Some(mut g) if node.requires_grad => {
                    self.precision.round_slice(&mut g);
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite {
                            op: format!("backward through {}", node.op.name()),
                        });
                    }
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                }
                _ => None,
            });
        }
        Ok(Gradients { grads: out })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |dst| axpy(dst, g, 1.0));
                self.accumulate(grads, *b, |dst| axpy(dst, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |dst| axpy(dst, g, 1.0));
                self.accumulate(grads, *b, |dst| axpy(dst, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |dst| {
                    for ((d, gi), y) in dst.iter_mut().zip(g).zip(bv) {
                        *d += gi * y;
                    }
                });
                self.accumulate(grads, *b, |dst| {
                    for ((d, gi), x) in dst.iter_mut().zip(g).zip(av) {
                        *d += gi * x;
                    }
                });
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, |dst| axpy(dst, g, *c)),
            Op::AddScalar(a) => self.accumulate(grads, *a, |dst| axpy(dst, g, 1.0)),
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let (_, n) = self.dims(*b);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // dA = G * B^T, dB = A^T * G
                self.accumulate(grads, *a, |dst| {
                    gemm_strided(m, n, k, g, (n as isize, 1), bv, (1, n as isize), dst, 1.0)
                });
                self.accumulate(grads, *b, |dst| {
                    gemm_strided(k, m, n, av, (1, k as isize), g, (n as isize, 1), dst, 1.0)
                });
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, |dst| axpy(dst, g, 1.0));
                let c = self.value(*b).len();
                self.accumulate(grads, *b, |dst| {
                    for row in g.chunks(c) {
                        axpy(dst, row, 1.0);
                    }
                });
            }
            Op::RepeatRows(x, times) => {
                let c = node.value.cols();
                self.accumulate(grads, *x, |dst| {
                    for (i, drow) in dst.chunks_mut(c).enumerate() {
                        for rep in 0..*times {
                            let src = &g[(i * times + rep) * c..(i * times + rep + 1) * c];
                            axpy(drow, src, 1.0);
                        }
                    }
                });
            }
            Op::TileRows(x, times) => {
                let block = self.value(*x).len();
                self.accumulate(grads, *x, |dst| {
                    for rep in 0..*times {
                        axpy(dst, &g[rep * block..(rep + 1) * block], 1.0);
                    }
                });
            }
            Op::Softmax(x) => {
                let c = node.value.cols();
                self.accumulate(grads, *x, |dst| {
                    for ((drow, grow), yrow) in dst.chunks_mut(c).zip(g.chunks(c)).zip(val.chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let c = node.value.cols();
                self.accumulate(grads, *x, |dst| {
                    for ((drow, grow), yrow) in dst.chunks_mut(c).zip(g.chunks(c)).zip(val.chunks(c)) {
                        let gsum: f64 = grow.iter().sum();
                        for ((d, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += gi - yi.exp() * gsum;
                        }
                    }
                });
            }
            Op::LayerNorm(x) => {
                let c = node.value.cols();
                let rstd = &node.cache;
                self.accumulate(grads, *x, |dst| {
                    for (((drow, grow), yrow), s) in dst
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(val.chunks(c))
                        .zip(rstd)
                    {
                        let mg = grow.iter().sum::<f64>() / c as f64;
                        let mgy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for ((d, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += s * (gi - mg - yi * mgy);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |dst| {
                    for ((d, gi), xi) in dst.iter_mut().zip(g).zip(xv) {
                        *d += gi * gelu_grad(*xi);
                    }
                });
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |dst| {
                    for ((d, gi), xi) in dst.iter_mut().zip(g).zip(xv) {
                        let sg = sigmoid(*xi);
                        *d += gi * sg * (1.0 + xi * (1.0 - sg));
                    }
                });
            }
            Op::Tanh(x) => self.accumulate(grads, *x, |dst| {
                for ((d, gi), y) in dst.iter_mut().zip(g).zip(val) {
                    *d += gi * (1.0 - y * y);
                }
            }),
            Op::Exp(x) => self.accumulate(grads, *x, |dst| {
                for ((d, gi), y) in dst.iter_mut().zip(g).zip(val) {
                    *d += gi * y;
                }
            }),
            Op::SumAll(x) => self.accumulate(grads, *x, |dst| {
                for d in dst.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::MeanAll(x) => {
                let n = self.value(*x).len() as f64;
                self.accumulate(grads, *x, |dst| {
                    for d in dst.iter_mut() {
                        *d += g[0] / n;
                    }
                })
            }
            Op::GroupMean(x, group) => {
                let c = self.value(*x).cols();
                let per = (group * c) as f64;
                self.accumulate(grads, *x, |dst| {
                    for (gi, chunk) in g.iter().zip(dst.chunks_mut(group * c)) {
                        for d in chunk.iter_mut() {
                            *d += gi / per;
                        }
                    }
                })
            }
            Op::Pick(x, idx) => {
                let c = self.value(*x).cols();
                self.accumulate(grads, *x, |dst| {
                    for (i, (&j, gi)) in idx.iter().zip(g).enumerate() {
                        dst[i * c + j] += gi;
                    }
                })
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
            } => self.attention_backward(node, (*q, *k, *v), (*batch, *seq, *heads), g, grads),
        }
    }

    fn attention_backward(
        &self,
        node: &Node,
        (q, k, v): (Var, Var, Var),
        (batch, seq, heads): (usize, usize, usize),
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let d = node.value.cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let probs = &node.cache;
        let len = batch * seq * d;
        let mut dq = vec![0.0; len];
        let mut dk = vec![0.0; len];
        let mut dv = vec![0.0; len];
        let mut dp = vec![0.0; seq];
        let row = |b: usize, i: usize, h: usize| (b * seq + i) * d + h * dh;
        for b in 0..batch {
            for h in 0..heads {
                let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                for i in 0..seq {
                    let gi = &g[row(b, i, h)..row(b, i, h) + dh];
                    let prow = &p[i * seq..(i + 1) * seq];
                    for j in 0..seq {
                        let vj = &vd[row(b, j, h)..row(b, j, h) + dh];
                        dp[j] = gi.iter().zip(vj).map(|(a, c)| a * c).sum();
                        let dvj = &mut dv[row(b, j, h)..row(b, j, h) + dh];
                        for (dd, gg) in dvj.iter_mut().zip(gi) {
                            *dd += prow[j] * gg;
                        }
                    }
                    let dot: f64 = dp.iter().zip(prow).map(|(a, c)| a * c).sum();
                    for j in 0..seq {
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for e in 0..dh {
                            dq[row(b, i, h) + e] += ds * kd[row(b, j, h) + e];
                            dk[row(b, j, h) + e] += ds * qd[row(b, i, h) + e];
                        }
                    }
                }
            }
        }
        self.accumulate(grads, q, |dst| axpy(dst, &dq, 1.0));
        self.accumulate(grads, k, |dst| axpy(dst, &dk, 1.0));
        self.accumulate(grads, v, |dst| axpy(dst, &dv, 1.0));
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: Var, f: impl FnOnce(&mut [f64])) {
        if !self.wants(target) {
            return;
        }
        let slot = &mut grads[target.0];
        let buf = slot.get_or_insert_with(|| vec![0.0; self.nodes[target.0].value.len()]);
        f(buf);
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_has_all_ones_adjoint() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.param(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sum_of_softmax_has_zero_adjoint() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.param(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let p = tape.softmax(x);
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.exp(x);
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn nan_is_reported_with_op_name() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.param(t(&[1], &[1000.0]));
        let y = tape.exp(x);
        let z = tape.sub(y, y);
        let s = tape.sum(z);
        match tape.backward(s) {
            Err(Error::NonFinite { op }) => assert_eq!(op, "exp"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn inference_tape_refuses_backward() {
        let mut tape = Tape::inference(Precision::F32);
        let x = tape.param(t(&[1], &[1.0]));
        let s = tape.sum(x);
        assert!(!tape.requires_grad(x));
        assert!(matches!(tape.backward(s), Err(Error::GradientsDisabled)));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let y = tape.mul(x, c);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.constant(t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.layer_norm(x);
        let v = tape.value(y).data();
        let mean: f64 = v.iter().sum::<f64>() / 4.0;
        let var: f64 = v.iter().map(|a| a * a).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-5);
    }
}
