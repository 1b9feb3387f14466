//! Matrix-level reverse-mode tape.
//!
//! Every op records its inputs and its forward value. Forward values are
//! recomputed from inputs by [`GradTape::replay_matches`]; gradients are
//! produced by [`GradTape::backward`] for a 1x1 output node.

use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{self, log_sum_exp, row_moments, softmax_in_place};
use super::matrix::DenseMatrix;
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupReduce {
    Max,
    Mean,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Arc<DenseMatrix>),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Arc<[usize]>,
    },
    MeanOf(Vec<Var>),
    ColMean(Var),
    SumAll(Var),
    Im2Col {
        x: Var,
        h: usize,
        w: usize,
    },
    MaxPool2 {
        x: Var,
        h: usize,
        w: usize,
    },
    RowL2Normalize(Var),
    TransportAggregate {
        queries: Var,
        supports: Var,
        patches: usize,
        plans: Arc<Vec<DenseMatrix>>,
    },
    GroupReduceCols {
        x: Var,
        groups: Arc<Vec<Vec<usize>>>,
        mode: GroupReduce,
    },
    MaskedLogSumExp {
        x: Var,
        mask: Arc<Vec<bool>>,
        per_row: bool,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Arc<[usize]>,
    },
    RowMinMax(Var),
}

struct Node {
    op: Op,
    value: DenseMatrix,
}

/// Records primitive matrix operations for reverse-mode differentiation.
#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Gradients of a scalar node w.r.t. every node that influenced it.
pub struct Gradients {
    grads: Vec<Option<DenseMatrix>>,
    param_vars: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&DenseMatrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a parameter; `None` when it did not reach the output.
    pub fn param(&self, id: ParamId) -> Option<&DenseMatrix> {
        self.param_vars.get(&id).and_then(|v| self.wrt(*v))
    }

    /// Dense gradient for every parameter of `store`, zero where unreached.
    pub fn for_store(&self, store: &ParamStore) -> Vec<DenseMatrix> {
        store
            .ids()
            .map(|id| {
                self.param(id).cloned().unwrap_or_else(|| {
                    let (r, c) = store.get(id).shape();
                    DenseMatrix::zeros(r, c)
                })
            })
            .collect()
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = self.compute(&op)?;
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input (receives a gradient but is not a parameter).
    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter; one leaf per parameter per tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            op: Op::Param,
            value: store.get(id).clone(),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.push(Op::AddRowBias(x, bias))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        self.push(Op::Scale(x, k))
    }

    pub fn mul_const(&mut self, x: Var, m: DenseMatrix) -> Result<Var> {
        self.push(Op::MulConst(x, Arc::new(m)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Relu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.push(Op::SoftmaxRows(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.push(Op::LayerNorm { x, gain, bias, eps })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.push(Op::SliceCols { x, start, len })
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Result<Var> {
        self.push(Op::ConcatCols(parts))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Result<Var> {
        self.push(Op::ConcatRows(parts))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        self.push(Op::GatherRows { x, idx: idx.into() })
    }

    /// Elementwise arithmetic mean of equally shaped inputs.
    pub fn mean_of(&mut self, parts: Vec<Var>) -> Result<Var> {
        self.push(Op::MeanOf(parts))
    }

    /// Mean over rows, giving a 1 x cols row.
    pub fn col_mean(&mut self, x: Var) -> Result<Var> {
        self.push(Op::ColMean(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.push(Op::SumAll(x))
    }

    /// 3x3, stride 1, zero padding 1. Input rows are the `h*w` spatial
    /// positions (row-major), columns are channels. Output columns are
    /// ordered `(ky, kx, channel)`.
    pub fn im2col3x3(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        self.push(Op::Im2Col { x, h, w })
    }

    /// 2x2 max pooling with stride 2 (floor), same layout as `im2col3x3`.
    pub fn max_pool2(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        self.push(Op::MaxPool2 { x, h, w })
    }

    /// Unit-normalizes each row; all-zero rows stay zero.
    pub fn row_l2_normalize(&mut self, x: Var) -> Result<Var> {
        self.push(Op::RowL2Normalize(x))
    }

    /// `out[j][i] = Σ_ab plan_{j,i}[a][b] · <queries_{j,a}, supports_{i,b}>`
    /// where image `j` owns rows `j*patches .. (j+1)*patches`. Plans are
    /// treated as constants.
    pub fn transport_aggregate(
        &mut self,
        queries: Var,
        supports: Var,
        patches: usize,
        plans: Vec<DenseMatrix>,
    ) -> Result<Var> {
        self.push(Op::TransportAggregate {
            queries,
            supports,
            patches,
            plans: Arc::new(plans),
        })
    }

    pub fn group_reduce_cols(
        &mut self,
        x: Var,
        groups: Vec<Vec<usize>>,
        mode: GroupReduce,
    ) -> Result<Var> {
        self.push(Op::GroupReduceCols {
            x,
            groups: Arc::new(groups),
            mode,
        })
    }

    /// `log Σ exp` over entries where `mask` is set, either over the whole
    /// matrix (1x1) or per row (rows x 1).
    pub fn masked_log_sum_exp(&mut self, x: Var, mask: Vec<bool>, per_row: bool) -> Result<Var> {
        self.push(Op::MaskedLogSumExp {
            x,
            mask: Arc::new(mask),
            per_row,
        })
    }

    /// Mean over rows of `-log softmax(logits_row)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        self.push(Op::SoftmaxCrossEntropy {
            logits,
            targets: targets.into(),
        })
    }

    /// Per-row min-max rescale into `[0, 1]`; constant rows map to 0.
    pub fn row_min_max(&mut self, x: Var) -> Result<Var> {
        self.push(Op::RowMinMax(x))
    }

    /// Recomputes every recorded node from its inputs and checks that the
    /// result is bit-identical to the stored value.
    pub fn replay_matches(&self) -> bool {
        self.nodes.iter().all(|node| match node.op {
            Op::Leaf | Op::Param => true,
            _ => match self.compute(&node.op) {
                Ok(v) => {
                    v.shape() == node.value.shape()
                        && v.data()
                            .iter()
                            .zip(node.value.data())
                            .all(|(a, b)| a.to_bits() == b.to_bits())
                }
                Err(_) => false,
            },
        })
    }

    fn v(&self, x: Var) -> &DenseMatrix {
        &self.nodes[x.0].value
    }

    fn compute(&self, op: &Op) -> Result<DenseMatrix> {
        Ok(match op {
            Op::Leaf | Op::Param => unreachable!("leaves carry their own value"),
            Op::MatMul(a, b) => self.v(*a).matmul(self.v(*b))?,
            Op::MatMulNt(a, b) => self.v(*a).matmul_nt(self.v(*b))?,
            Op::Add(a, b) => self.v(*a).add(self.v(*b))?,
            Op::Sub(a, b) => self.v(*a).sub(self.v(*b))?,
            Op::Mul(a, b) => self.v(*a).hadamard(self.v(*b))?,
            Op::AddRowBias(x, b) => kernels::add_row_bias(self.v(*x), self.v(*b))?,
            Op::Scale(x, k) => self.v(*x).scale(*k),
            Op::MulConst(x, m) => self.v(*x).hadamard(m)?,
            Op::Relu(x) => self.v(*x).map(|v| v.max(0.0)),
            Op::SoftmaxRows(x) => kernels::softmax_rows(self.v(*x))?,
            Op::LayerNorm { x, gain, bias, eps } => {
                kernels::layer_norm_rows(self.v(*x), self.v(*gain), self.v(*bias), *eps)?
            }
            Op::SliceCols { x, start, len } => {
                let m = self.v(*x);
                if start + len > m.cols() {
                    return Err(Error::shape(
                        "slice_cols",
                        format!("{start}+{len} > {}", m.cols()),
                    ));
                }
                DenseMatrix::from_fn(m.rows(), *len, |r, c| m[(r, start + c)])
            }
            Op::ConcatCols(parts) => {
                let rows = self.v(parts[0]).rows();
                if parts.iter().any(|p| self.v(*p).rows() != rows) {
                    return Err(Error::shape("concat_cols", "row counts differ"));
                }
                let cols: usize = parts.iter().map(|p| self.v(*p).cols()).sum();
                let mut out = DenseMatrix::zeros(rows, cols);
                for r in 0..rows {
                    let mut off = 0;
                    for p in parts {
                        let src = self.v(*p).row(r);
                        out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                        off += src.len();
                    }
                }
                out
            }
            Op::ConcatRows(parts) => {
                let refs: Vec<&DenseMatrix> = parts.iter().map(|p| self.v(*p)).collect();
                DenseMatrix::vstack(&refs)?
            }
            Op::GatherRows { x, idx } => {
                let m = self.v(*x);
                if let Some(bad) = idx.iter().find(|&&i| i >= m.rows()) {
                    return Err(Error::shape(
                        "gather_rows",
                        format!("row {bad} of {}", m.rows()),
                    ));
                }
                m.select_rows(idx)
            }
            Op::MeanOf(parts) => {
                let mut out = self.v(parts[0]).clone();
                for p in &parts[1..] {
                    out = out.add(self.v(*p))?;
                }
                out.scale(1.0 / parts.len() as f64)
            }
            Op::ColMean(x) => {
                let m = self.v(*x);
                let mut out = DenseMatrix::zeros(1, m.cols());
                for r in 0..m.rows() {
                    for (o, v) in out.data_mut().iter_mut().zip(m.row(r)) {
                        *o += v;
                    }
                }
                out.scale(1.0 / m.rows() as f64)
            }
            Op::SumAll(x) => DenseMatrix::scalar(self.v(*x).sum()),
            Op::Im2Col { x, h, w } => im2col_forward(self.v(*x), *h, *w)?,
            Op::MaxPool2 { x, h, w } => maxpool_forward(self.v(*x), *h, *w)?.0,
            Op::RowL2Normalize(x) => {
                let mut out = self.v(*x).clone();
                for r in 0..out.rows() {
                    let row = out.row_mut(r);
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        row.iter_mut().for_each(|v| *v /= norm);
                    }
                }
                out
            }
            Op::TransportAggregate {
                queries,
                supports,
                patches,
                plans,
            } => transport_aggregate_forward(self.v(*queries), self.v(*supports), *patches, plans)?,
            Op::GroupReduceCols { x, groups, mode } => {
                let m = self.v(*x);
                if groups.iter().flatten().any(|&c| c >= m.cols())
                    || groups.iter().any(Vec::is_empty)
                {
                    return Err(Error::shape("group_reduce_cols", "bad column group"));
                }
                DenseMatrix::from_fn(m.rows(), groups.len(), |r, g| {
                    let vals = groups[g].iter().map(|&c| m[(r, c)]);
                    match mode {
                        GroupReduce::Max => vals.fold(f64::NEG_INFINITY, f64::max),
                        GroupReduce::Mean => vals.sum::<f64>() / groups[g].len() as f64,
                    }
                })
            }
            Op::MaskedLogSumExp { x, mask, per_row } => {
                let m = self.v(*x);
                if mask.len() != m.data().len() {
                    return Err(Error::shape("masked_log_sum_exp", "mask length"));
                }
                if *per_row {
                    DenseMatrix::from_fn(m.rows(), 1, |r, _| {
                        let off = r * m.cols();
                        log_sum_exp(
                            m.row(r)
                                .iter()
                                .enumerate()
                                .filter(|(c, _)| mask[off + c])
                                .map(|(_, v)| *v),
                        )
                    })
                } else {
                    DenseMatrix::scalar(log_sum_exp(
                        m.data()
                            .iter()
                            .zip(mask.iter())
                            .filter(|(_, k)| **k)
                            .map(|(v, _)| *v),
                    ))
                }
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                let m = self.v(*logits);
                if targets.len() != m.rows() || targets.iter().any(|&t| t >= m.cols()) {
                    return Err(Error::shape("softmax_cross_entropy", "targets"));
                }
                let total: f64 = (0..m.rows())
                    .map(|r| log_sum_exp(m.row(r).iter().copied()) - m[(r, targets[r])])
                    .sum();
                DenseMatrix::scalar(total / m.rows() as f64)
            }
            Op::RowMinMax(x) => {
                let mut out = self.v(*x).clone();
                for r in 0..out.rows() {
                    let row = out.row_mut(r);
                    let (lo, hi) = min_max(row);
                    let span = hi - lo;
                    row.iter_mut().for_each(|v| {
                        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
                    });
                }
                out
            }
        })
    }

    /// Reverse pass from a 1x1 node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.v(output).shape() != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("output is {:?}, expected 1x1", self.v(output).shape()),
            ));
        }
        self.backward_seeded(vec![(output, DenseMatrix::scalar(1.0))])
    }

    /// Reverse pass with explicit upstream gradients on any number of nodes,
    /// i.e. the gradient of `Σ <seed_k, value(var_k)>`.
    pub fn backward_seeded(&self, seeds: Vec<(Var, DenseMatrix)>) -> Result<Gradients> {
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; self.nodes.len()];
        let mut last = 0;
        let seeded = !seeds.is_empty();
        for (v, g) in seeds {
            if g.shape() != self.v(v).shape() {
                return Err(Error::shape(
                    "backward_seeded",
                    format!("seed {:?} for node {:?}", g.shape(), self.v(v).shape()),
                ));
            }
            last = last.max(v.0);
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..if seeded { last + 1 } else { 0 }).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.backprop(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        })
    }

    fn backprop(
        &self,
        op: &Op,
        out: &DenseMatrix,
        g: &DenseMatrix,
        grads: &mut [Option<DenseMatrix>],
    ) -> Result<()> {
        let mut acc = |v: Var, d: DenseMatrix| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&d),
            slot @ None => *slot = Some(d),
        };
        match op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                acc(*a, g.matmul_nt(self.v(*b))?);
                acc(*b, self.v(*a).matmul_tn(g)?);
            }
            Op::MatMulNt(a, b) => {
                acc(*a, g.matmul(self.v(*b))?);
                acc(*b, g.matmul_tn(self.v(*a))?);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                acc(*a, g.hadamard(self.v(*b))?);
                acc(*b, g.hadamard(self.v(*a))?);
            }
            Op::AddRowBias(x, b) => {
                acc(*x, g.clone());
                acc(*b, column_sums(g));
            }
            Op::Scale(x, k) => acc(*x, g.scale(*k)),
            Op::MulConst(x, m) => acc(*x, g.hadamard(m)?),
            Op::Relu(x) => {
                let input = self.v(*x);
                let d = DenseMatrix::from_fn(g.rows(), g.cols(), |r, c| {
                    if input[(r, c)] > 0.0 {
                        g[(r, c)]
                    } else {
                        0.0
                    }
                });
                acc(*x, d);
            }
            Op::SoftmaxRows(x) => {
                let mut d = out.clone();
                for r in 0..d.rows() {
                    let gy: f64 = g.row(r).iter().zip(out.row(r)).map(|(a, b)| a * b).sum();
                    for (c, v) in d.row_mut(r).iter_mut().enumerate() {
                        *v *= g[(r, c)] - gy;
                    }
                }
                acc(*x, d);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let input = self.v(*x);
                let gamma = self.v(*gain).data();
                let c = input.cols();
                let mut dx = DenseMatrix::zeros(input.rows(), c);
                let mut dgain = DenseMatrix::zeros(1, c);
                for r in 0..input.rows() {
                    let (mean, inv) = row_moments(input.row(r), *eps);
                    let xhat: Vec<f64> = input.row(r).iter().map(|v| (v - mean) * inv).collect();
                    let gxhat: Vec<f64> = (0..c).map(|k| g[(r, k)] * gamma[k]).collect();
                    let m1 = gxhat.iter().sum::<f64>() / c as f64;
                    let m2 = gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for k in 0..c {
                        dx[(r, k)] = inv * (gxhat[k] - m1 - xhat[k] * m2);
                        dgain.data_mut()[k] += g[(r, k)] * xhat[k];
                    }
                }
                acc(*x, dx);
                acc(*gain, dgain);
                acc(*bias, column_sums(g));
            }
            Op::SliceCols { x, start, .. } => {
                let input = self.v(*x);
                let mut d = DenseMatrix::zeros(input.rows(), input.cols());
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*x, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let cols = self.v(*p).cols();
                    acc(
                        *p,
                        DenseMatrix::from_fn(g.rows(), cols, |r, c| g[(r, off + c)]),
                    );
                    off += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let rows = self.v(*p).rows();
                    let idx: Vec<usize> = (off..off + rows).collect();
                    acc(*p, g.select_rows(&idx));
                    off += rows;
                }
            }
            Op::GatherRows { x, idx } => {
                let input = self.v(*x);
                let mut d = DenseMatrix::zeros(input.rows(), input.cols());
                for (o, &i) in idx.iter().enumerate() {
                    for (dv, gv) in d.row_mut(i).iter_mut().zip(g.row(o)) {
                        *dv += gv;
                    }
                }
                acc(*x, d);
            }
            Op::MeanOf(parts) => {
                let d = g.scale(1.0 / parts.len() as f64);
                for p in parts {
                    acc(*p, d.clone());
                }
            }
            Op::ColMean(x) => {
                let input = self.v(*x);
                let n = input.rows() as f64;
                acc(
                    *x,
                    DenseMatrix::from_fn(input.rows(), input.cols(), |_, c| g[(0, c)] / n),
                );
            }
            Op::SumAll(x) => {
                let (r, c) = self.v(*x).shape();
                acc(*x, DenseMatrix::filled(r, c, g.item()));
            }
            Op::Im2Col { x, h, w } => {
                let input = self.v(*x);
                acc(*x, im2col_backward(g, input.cols(), *h, *w));
            }
            Op::MaxPool2 { x, h, w } => {
                let input = self.v(*x);
                let (_, argmax) = maxpool_forward(input, *h, *w)?;
                let mut d = DenseMatrix::zeros(input.rows(), input.cols());
                for (o, src) in argmax.iter().enumerate() {
                    let (r, c) = (o / input.cols(), o % input.cols());
                    d[(*src, c)] += g[(r, c)];
                }
                acc(*x, d);
            }
            Op::RowL2Normalize(x) => {
                let input = self.v(*x);
                let mut d = DenseMatrix::zeros(input.rows(), input.cols());
                for r in 0..input.rows() {
                    let norm = input.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let gy: f64 = g.row(r).iter().zip(out.row(r)).map(|(a, b)| a * b).sum();
                    for (k, dv) in d.row_mut(r).iter_mut().enumerate() {
                        *dv = (g[(r, k)] - out[(r, k)] * gy) / norm;
                    }
                }
                acc(*x, d);
            }
            Op::TransportAggregate {
                queries,
                supports,
                patches,
                plans,
            } => {
                let (q, s) = (self.v(*queries), self.v(*supports));
                let p = *patches;
                let (n_q, n_s) = (q.rows() / p, s.rows() / p);
                let mut dq = DenseMatrix::zeros(q.rows(), q.cols());
                let mut ds = DenseMatrix::zeros(s.rows(), s.cols());
                for j in 0..n_q {
                    let qj = q.select_rows(&(j * p..(j + 1) * p).collect::<Vec<_>>());
                    for i in 0..n_s {
                        let gji = g[(j, i)];
                        if gji == 0.0 {
                            continue;
                        }
                        let plan = &plans[j * n_s + i];
                        let si = s.select_rows(&(i * p..(i + 1) * p).collect::<Vec<_>>());
                        let fs = plan.matmul(&si)?;
                        let ftq = plan.matmul_tn(&qj)?;
                        for a in 0..p {
                            for (dv, fv) in dq.row_mut(j * p + a).iter_mut().zip(fs.row(a)) {
                                *dv += gji * fv;
                            }
                            for (dv, fv) in ds.row_mut(i * p + a).iter_mut().zip(ftq.row(a)) {
                                *dv += gji * fv;
                            }
                        }
                    }
                }
                acc(*queries, dq);
                acc(*supports, ds);
            }
            Op::GroupReduceCols { x, groups, mode } => {
                let input = self.v(*x);
                let mut d = DenseMatrix::zeros(input.rows(), input.cols());
                for r in 0..input.rows() {
                    for (gi, cols) in groups.iter().enumerate() {
                        match mode {
                            GroupReduce::Max => {
                                let best = first_argmax(cols.iter().map(|&c| input[(r, c)]));
                                d[(r, cols[best])] += g[(r, gi)];
                            }
                            GroupReduce::Mean => {
                                let share = g[(r, gi)] / cols.len() as f64;
                                for &c in cols {
                                    d[(r, c)] += share;
                                }
                            }
                        }
                    }
                }
                acc(*x, d);
            }
            Op::MaskedLogSumExp { x, mask, per_row } => {
                let input = self.v(*x);
                let cols = input.cols();
                let mut d = DenseMatrix::zeros(input.rows(), cols);
                for (k, dv) in d.data_mut().iter_mut().enumerate() {
                    if !mask[k] {
                        continue;
                    }
                    let (lse, gk) = if *per_row {
                        (out[(k / cols, 0)], g[(k / cols, 0)])
                    } else {
                        (out.item(), g.item())
                    };
                    *dv = gk * (input.data()[k] - lse).exp();
                }
                acc(*x, d);
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                let input = self.v(*logits);
                let n = input.rows() as f64;
                let mut d = input.clone();
                for r in 0..d.rows() {
                    let row = d.row_mut(r);
                    softmax_in_place(row);
                    row[targets[r]] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= g.item() / n);
                }
                acc(*logits, d);
            }
            Op::RowMinMax(x) => {
                let input = self.v(*x);
                let mut d = DenseMatrix::zeros(input.rows(), input.cols());
                for r in 0..input.rows() {
                    let row = input.row(r);
                    let (lo, hi) = min_max(row);
                    let span = hi - lo;
                    if span <= 0.0 {
                        continue;
                    }
                    let lo_idx = row.iter().position(|v| *v == lo).unwrap_or(0);
                    let hi_idx = row.iter().position(|v| *v == hi).unwrap_or(0);
                    let gsum: f64 = g.row(r).iter().sum();
                    let gy: f64 = g.row(r).iter().zip(out.row(r)).map(|(a, b)| a * b).sum();
                    let drow = d.row_mut(r);
                    for (k, dv) in drow.iter_mut().enumerate() {
                        *dv = g[(r, k)] / span;
                    }
                    drow[lo_idx] += (gy - gsum) / span;
                    drow[hi_idx] -= gy / span;
                }
                acc(*x, d);
            }
        }
        Ok(())
    }
}

fn column_sums(g: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

fn min_max(row: &[f64]) -> (f64, f64) {
    row.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// Index of the first maximum.
pub(crate) fn first_argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn im2col_forward(x: &DenseMatrix, h: usize, w: usize) -> Result<DenseMatrix> {
    if x.rows() != h * w {
        return Err(Error::shape(
            "im2col3x3",
            format!("{} rows for {h}x{w}", x.rows()),
        ));
    }
    let c = x.cols();
    let mut out = DenseMatrix::zeros(h * w, 9 * c);
    for y in 0..h {
        for xx in 0..w {
            let row = out.row_mut(y * w + xx);
            for ky in 0..3 {
                for kx in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    let sx = xx as isize + kx as isize - 1;
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        continue;
                    }
                    let src = x.row(sy as usize * w + sx as usize);
                    let off = (ky * 3 + kx) * c;
                    row[off..off + c].copy_from_slice(src);
                }
            }
        }
    }
    Ok(out)
}

fn im2col_backward(g: &DenseMatrix, c: usize, h: usize, w: usize) -> DenseMatrix {
    let mut d = DenseMatrix::zeros(h * w, c);
    for y in 0..h {
        for xx in 0..w {
            let grow = g.row(y * w + xx);
            for ky in 0..3 {
                for kx in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    let sx = xx as isize + kx as isize - 1;
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        continue;
                    }
                    let off = (ky * 3 + kx) * c;
                    let drow = d.row_mut(sy as usize * w + sx as usize);
                    for (dv, gv) in drow.iter_mut().zip(&grow[off..off + c]) {
                        *dv += gv;
                    }
                }
            }
        }
    }
    d
}

/// Returns pooled values and, per output entry, the source row (first max).
fn maxpool_forward(x: &DenseMatrix, h: usize, w: usize) -> Result<(DenseMatrix, Vec<usize>)> {
    if x.rows() != h * w || h < 2 || w < 2 {
        return Err(Error::shape(
            "max_pool2",
            format!("{} rows for {h}x{w}", x.rows()),
        ));
    }
    let (oh, ow, c) = (h / 2, w / 2, x.cols());
    let mut out = DenseMatrix::zeros(oh * ow, c);
    let mut argmax = vec![0; oh * ow * c];
    for y in 0..oh {
        for xx in 0..ow {
            let o = y * ow + xx;
            let cands = [
                (2 * y) * w + 2 * xx,
                (2 * y) * w + 2 * xx + 1,
                (2 * y + 1) * w + 2 * xx,
                (2 * y + 1) * w + 2 * xx + 1,
            ];
            for ch in 0..c {
                let best = first_argmax(cands.iter().map(|&r| x[(r, ch)]));
                out[(o, ch)] = x[(cands[best], ch)];
                argmax[o * c + ch] = cands[best];
            }
        }
    }
    Ok((out, argmax))
}

fn transport_aggregate_forward(
    q: &DenseMatrix,
    s: &DenseMatrix,
    p: usize,
    plans: &[DenseMatrix],
) -> Result<DenseMatrix> {
    if p == 0 || !q.rows().is_multiple_of(p) || !s.rows().is_multiple_of(p) || q.cols() != s.cols() {
        return Err(Error::shape(
            "transport_aggregate",
            format!("{:?} / {:?} with {p} patches", q.shape(), s.shape()),
        ));
    }
    let (n_q, n_s) = (q.rows() / p, s.rows() / p);
    if plans.len() != n_q * n_s || plans.iter().any(|f| f.shape() != (p, p)) {
        return Err(Error::shape("transport_aggregate", "plan count or shape"));
    }
    Ok(DenseMatrix::from_fn(n_q, n_s, |j, i| {
        let plan = &plans[j * n_s + i];
        let mut total = 0.0;
        for a in 0..p {
            for b in 0..p {
                let f = plan[(a, b)];
                if f != 0.0 {
                    total += f * super::matrix::dot(q.row(j * p + a), s.row(i * p + b));
                }
            }
        }
        total
    }))
}
