//! Reverse-mode differentiation tape.
//!
//! Every operation records its inputs and value; `backward` walks the tape
//! in reverse and accumulates exact gradients into the originating
//! `ParamStore`. Recorded tensors are never mutated.

use super::store::ParamStore;
use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a tape. Only meaningful for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Norm floor for `normalize_rows`; rows this short scale linearly.
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    /// Broadcast a scalar variable over every entry: `a + s` / `a - s`.
    AddScalarVar(usize, usize),
    SubScalarVar(usize, usize),
    /// Broadcast a rank-1 vector over every row of a rank-2 tensor.
    AddRowVec(usize, usize),
    Matmul(usize, usize),
    /// `a · bᵀ` with both operands stored row-major.
    MatmulNT(usize, usize),
    ConcatCols(usize, usize),
    SliceCols {
        src: usize,
        start: usize,
    },
    Relu(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Softplus(usize),
    SoftmaxLastDim(usize),
    LogSoftmaxRows(usize),
    LogSoftmaxCols(usize),
    /// Per-segment, per-column max over rows; `argmax` stores the winning
    /// row per (segment, column), first index on ties.
    SegmentMax {
        src: usize,
        argmax: Vec<usize>,
    },
    Sum(usize),
    Mean(usize),
    GatherRows {
        src: usize,
        rows: Vec<usize>,
    },
    GatherElems {
        src: usize,
        idx: Vec<(usize, usize)>,
    },
    /// Row-wise projection onto the unit sphere; rows shorter than
    /// `NORM_EPS` scale by 1/NORM_EPS instead.
    NormalizeRows(usize),
    /// Euclidean distances between all row pairs of two equal-width
    /// matrices.
    PairwiseDist(usize, usize),
    /// Append one row and one column filled with the scalar variable.
    PadWithScalar {
        src: usize,
        alpha: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    param_name: Option<String>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
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

    /// Gradient of the last `backward` loss w.r.t. this node, if reached.
    pub fn grad_of(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param_name: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(Tensor::scalar(v), Op::Const)
    }

    /// Copies the parameter's current value onto the tape as a leaf;
    /// `backward` will route this leaf's gradient back to the store.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter {name:?}")))?
            .clone();
        self.nodes.push(Node {
            value,
            op: Op::Param,
            param_name: Some(name.to_string()),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!(
                "{what} needs equal shapes, got {sa:?} and {sb:?}"
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.value(a).zip(self.value(b), |x, y| x + y);
        Ok(self.push(value, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.value(a).zip(self.value(b), |x, y| x - y);
        Ok(self.push(value, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.value(a).zip(self.value(b), |x, y| x * y);
        Ok(self.push(value, Op::Mul(a.0, b.0)))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| -x);
        self.push(value, Op::Neg(a.0))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::AddScalar(a.0))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::MulScalar(a.0, c))
    }

    fn expect_scalar(&self, s: Var, what: &str) -> Result<()> {
        if !self.value(s).is_scalar() {
            return Err(Error::Shape(format!(
                "{what} needs a scalar, got shape {:?}",
                self.value(s).shape()
            )));
        }
        Ok(())
    }

    pub fn add_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        self.expect_scalar(s, "add_scalar_var")?;
        let sv = self.value(s).data()[0];
        let value = self.value(a).map(|x| x + sv);
        Ok(self.push(value, Op::AddScalarVar(a.0, s.0)))
    }

    pub fn sub_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        self.expect_scalar(s, "sub_scalar_var")?;
        let sv = self.value(s).data()[0];
        let value = self.value(a).map(|x| x - sv);
        Ok(self.push(value, Op::SubScalarVar(a.0, s.0)))
    }

    /// `a [r,c] + row vector [c]` broadcast over rows (bias addition).
    pub fn add_row_vec(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 1 || va.cols() != vb.numel() {
            return Err(Error::Shape(format!(
                "add_row_vec needs [r,c] and [c], got {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let (r, c) = (va.rows(), va.cols());
        let mut data = va.data().to_vec();
        for i in 0..r {
            for (d, bv) in data[i * c..(i + 1) * c].iter_mut().zip(vb.data()) {
                *d += bv;
            }
        }
        let value = Tensor::raw(vec![r, c], data);
        Ok(self.push(value, Op::AddRowVec(a.0, b.0)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.cols() != vb.rows() {
            return Err(Error::Shape(format!(
                "matmul shapes {:?} x {:?} do not conform",
                va.shape(),
                vb.shape()
            )));
        }
        let value = tensor::matmul(va, vb);
        Ok(self.push(value, Op::Matmul(a.0, b.0)))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.cols() != vb.cols() {
            return Err(Error::Shape(format!(
                "matmul_nt shapes {:?} x {:?}ᵀ do not conform",
                va.shape(),
                vb.shape()
            )));
        }
        let value = tensor::matmul_nt(va, vb);
        Ok(self.push(value, Op::MatmulNT(a.0, b.0)))
    }

    /// Concatenate along the last dimension: two [r,c] matrices with equal
    /// rows, or two vectors.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let value = match (va.rank(), vb.rank()) {
            (1, 1) => {
                let mut data = va.data().to_vec();
                data.extend_from_slice(vb.data());
                Tensor::vector(data)
            }
            (2, 2) if va.rows() == vb.rows() => {
                let (r, ca, cb) = (va.rows(), va.cols(), vb.cols());
                let mut data = Vec::with_capacity(r * (ca + cb));
                for i in 0..r {
                    data.extend_from_slice(va.row(i));
                    data.extend_from_slice(vb.row(i));
                }
                Tensor::raw(vec![r, ca + cb], data)
            }
            _ => {
                return Err(Error::Shape(format!(
                    "concat_cols cannot join shapes {:?} and {:?}",
                    va.shape(),
                    vb.shape()
                )))
            }
        };
        Ok(self.push(value, Op::ConcatCols(a.0, b.0)))
    }

    /// Columns `[start, end)` of a rank-2 tensor (or elements of a vector).
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        if start >= end || end > va.cols() {
            return Err(Error::Shape(format!(
                "slice [{start}, {end}) out of range for {:?}",
                va.shape()
            )));
        }
        let value = if va.rank() == 1 {
            Tensor::vector(va.data()[start..end].to_vec())
        } else {
            let r = va.rows();
            let mut data = Vec::with_capacity(r * (end - start));
            for i in 0..r {
                data.extend_from_slice(&va.row(i)[start..end]);
            }
            Tensor::raw(vec![r, end - start], data)
        };
        Ok(self.push(value, Op::SliceCols { src: a.0, start }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a.0))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain(format!("ln of nonpositive value {bad}")));
        }
        let value = self.value(a).map(f64::ln);
        Ok(self.push(value, Op::Ln(a.0)))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&v| v < 0.0) {
            return Err(Error::Domain(format!("sqrt of negative value {bad}")));
        }
        let value = self.value(a).map(f64::sqrt);
        Ok(self.push(value, Op::Sqrt(a.0)))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        // ln(1 + e^x) computed as max(x, 0) + ln(1 + e^{-|x|}).
        let value = self.value(a).map(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        self.push(value, Op::Softplus(a.0))
    }

    /// Scales every row to unit Euclidean norm. Rows with norm below
    /// `NORM_EPS` are scaled by 1/NORM_EPS, keeping the map smooth at 0.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 2 || va.cols() == 0 {
            return Err(Error::Shape(format!(
                "normalize_rows needs a nonempty rank-2 tensor, got {:?}",
                va.shape()
            )));
        }
        let (r, c) = (va.rows(), va.cols());
        let mut data = va.data().to_vec();
        for i in 0..r {
            let row = &mut data[i * c..(i + 1) * c];
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
            for x in row {
                *x /= n;
            }
        }
        let value = Tensor::raw(vec![r, c], data);
        Ok(self.push(value, Op::NormalizeRows(a.0)))
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.cols() == 0 {
            return Err(Error::Shape("softmax over an empty axis".into()));
        }
        let (r, c) = (va.rows(), va.cols());
        let mut data = va.data().to_vec();
        for i in 0..r {
            let row = &mut data[i * c..(i + 1) * c];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let value = Tensor::raw(va.shape().to_vec(), data);
        Ok(self.push(value, Op::SoftmaxLastDim(a.0)))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 2 || va.cols() == 0 {
            return Err(Error::Shape(format!(
                "log_softmax_rows needs a nonempty rank-2 tensor, got {:?}",
                va.shape()
            )));
        }
        let (r, c) = (va.rows(), va.cols());
        let mut data = va.data().to_vec();
        for i in 0..r {
            let row = &mut data[i * c..(i + 1) * c];
            log_softmax_inplace(row);
        }
        let value = Tensor::raw(vec![r, c], data);
        Ok(self.push(value, Op::LogSoftmaxRows(a.0)))
    }

    pub fn log_softmax_cols(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 2 || va.rows() == 0 {
            return Err(Error::Shape(format!(
                "log_softmax_cols needs a nonempty rank-2 tensor, got {:?}",
                va.shape()
            )));
        }
        let (r, c) = (va.rows(), va.cols());
        let mut data = va.data().to_vec();
        let mut col = vec![0.0; r];
        for j in 0..c {
            for i in 0..r {
                col[i] = data[i * c + j];
            }
            log_softmax_inplace(&mut col);
            for i in 0..r {
                data[i * c + j] = col[i];
            }
        }
        let value = Tensor::raw(vec![r, c], data);
        Ok(self.push(value, Op::LogSoftmaxCols(a.0)))
    }

    /// Max over the set dimension (rows): [S,C] → [C], [S] → [1].
    /// Argmax ties break to the first row.
    pub fn max_over_set(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let s = if va.rank() == 1 { va.numel() } else { va.rows() };
        if s == 0 {
            return Err(Error::Shape("max_over_set of an empty set".into()));
        }
        let seg = vec![(0, s)];
        let v = self.segment_max(a, &seg)?;
        // Collapse [1,C] to [C] ([1] stays [1]).
        let t = self.value(v).clone();
        let cols = t.cols();
        if t.rank() == 2 {
            let flat = Tensor::vector(t.data().to_vec());
            debug_assert_eq!(flat.numel(), cols);
            self.nodes.last_mut().unwrap().value = flat;
        }
        Ok(v)
    }

    /// Per-segment max over rows of [S,C]: segments are disjoint half-open
    /// row ranges; output is [K,C].
    pub fn segment_max(&mut self, a: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let va = self.value(a);
        let rank1 = va.rank() == 1;
        let (s, c) = if rank1 {
            (va.numel(), 1)
        } else {
            (va.rows(), va.cols())
        };
        if segments.is_empty() {
            return Err(Error::Shape("segment_max with no segments".into()));
        }
        for &(st, en) in segments {
            if st >= en || en > s {
                return Err(Error::Shape(format!(
                    "segment [{st}, {en}) invalid for {s} rows"
                )));
            }
        }
        let k = segments.len();
        let mut out = vec![f64::NEG_INFINITY; k * c];
        let mut argmax = vec![0usize; k * c];
        let data = va.data();
        for (seg_i, &(st, en)) in segments.iter().enumerate() {
            let orow = &mut out[seg_i * c..(seg_i + 1) * c];
            let arow = &mut argmax[seg_i * c..(seg_i + 1) * c];
            for r in st..en {
                let row = &data[r * c..(r + 1) * c];
                for j in 0..c {
                    // Strict > keeps the first (lowest) row on ties.
                    if row[j] > orow[j] {
                        orow[j] = row[j];
                        arow[j] = r;
                    }
                }
            }
        }
        let value = if rank1 {
            Tensor::vector(out)
        } else {
            Tensor::raw(vec![k, c], out)
        };
        Ok(self.push(value, Op::SegmentMax { src: a.0, argmax }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(value, Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::Shape("mean of an empty tensor".into()));
        }
        let value = Tensor::scalar(self.value(a).data().iter().sum::<f64>() / n as f64);
        Ok(self.push(value, Op::Mean(a.0)))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 2 {
            return Err(Error::Shape("gather_rows needs a rank-2 tensor".into()));
        }
        let (s, c) = (va.rows(), va.cols());
        if let Some(&bad) = rows.iter().find(|&&r| r >= s) {
            return Err(Error::Shape(format!("row {bad} out of range for {s} rows")));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(va.row(r));
        }
        let value = Tensor::raw(vec![rows.len(), c], data);
        Ok(self.push(
            value,
            Op::GatherRows {
                src: a.0,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn gather_elems(&mut self, a: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 2 {
            return Err(Error::Shape("gather_elems needs a rank-2 tensor".into()));
        }
        let (s, c) = (va.rows(), va.cols());
        let mut data = Vec::with_capacity(idx.len());
        for &(r, cc) in idx {
            if r >= s || cc >= c {
                return Err(Error::Shape(format!(
                    "index ({r}, {cc}) out of range for [{s}, {c}]"
                )));
            }
            data.push(va.at(r, cc));
        }
        let value = Tensor::vector(data);
        Ok(self.push(
            value,
            Op::GatherElems {
                src: a.0,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Euclidean distances between every row of `a` and every row of `b`.
    pub fn pairwise_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.cols() != vb.cols() {
            return Err(Error::Shape(format!(
                "pairwise_dist needs equal-width rank-2 tensors, got {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let (ra, rb) = (va.rows(), vb.rows());
        let mut data = Vec::with_capacity(ra * rb);
        for i in 0..ra {
            let ar = va.row(i);
            for j in 0..rb {
                let br = vb.row(j);
                let mut d2 = 0.0;
                for (x, y) in ar.iter().zip(br) {
                    let d = x - y;
                    d2 += d * d;
                }
                data.push(d2.sqrt());
            }
        }
        let value = Tensor::raw(vec![ra, rb], data);
        Ok(self.push(value, Op::PairwiseDist(a.0, b.0)))
    }

    /// Augment [n,m] with a slack row and column filled with scalar `alpha`.
    pub fn pad_with_scalar(&mut self, a: Var, alpha: Var) -> Result<Var> {
        self.expect_scalar(alpha, "pad_with_scalar")?;
        let va = self.value(a);
        if va.rank() != 2 || va.rows() == 0 || va.cols() == 0 {
            return Err(Error::Shape(format!(
                "pad_with_scalar needs a nonempty rank-2 tensor, got {:?}",
                va.shape()
            )));
        }
        let (n, m) = (va.rows(), va.cols());
        let al = self.value(alpha).data()[0];
        let mut data = Vec::with_capacity((n + 1) * (m + 1));
        for i in 0..n {
            data.extend_from_slice(va.row(i));
            data.push(al);
        }
        data.extend(std::iter::repeat(al).take(m + 1));
        let value = Tensor::raw(vec![n + 1, m + 1], data);
        Ok(self.push(
            value,
            Op::PadWithScalar {
                src: a.0,
                alpha: alpha.0,
            },
        ))
    }

    /// Reverse sweep from `loss` (must be scalar). Gradients of parameter
    /// leaves are added into `store`; repeated calls keep accumulating.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::InvalidInput(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() {
                continue;
            }
            let (children, rest) = self.grads.split_at_mut(i);
            let g = rest[0].as_ref().unwrap();
            let node = &self.nodes[i];
            propagate(node, &self.nodes, g, children);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(name), Some(g)) = (&node.param_name, &self.grads[i]) {
                store.add_grad(name, g)?;
            }
        }
        Ok(())
    }
}

fn log_softmax_inplace(row: &mut [f64]) {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
    let lz = m + z.ln();
    for v in row.iter_mut() {
        *v -= lz;
    }
}

fn acc(slot: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    if slot.is_none() {
        *slot = Some(Tensor::zeros(shape.to_vec()));
    }
    f(slot.as_mut().unwrap().data_mut());
}

fn propagate(node: &Node, nodes: &[Node], g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Const | Op::Param => {}
        Op::Add(a, b) => {
            acc(&mut grads[*a], val(*a).shape(), |ga| {
                for (x, y) in ga.iter_mut().zip(g.data()) {
                    *x += y;
                }
            });
            acc(&mut grads[*b], val(*b).shape(), |gb| {
                for (x, y) in gb.iter_mut().zip(g.data()) {
                    *x += y;
                }
            });
        }
        Op::Sub(a, b) => {
            acc(&mut grads[*a], val(*a).shape(), |ga| {
                for (x, y) in ga.iter_mut().zip(g.data()) {
                    *x += y;
                }
            });
            acc(&mut grads[*b], val(*b).shape(), |gb| {
                for (x, y) in gb.iter_mut().zip(g.data()) {
                    *x -= y;
                }
            });
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).data().to_vec(), val(*b).data().to_vec());
            acc(&mut grads[*a], val(*a).shape(), |ga| {
                for ((x, y), bv) in ga.iter_mut().zip(g.data()).zip(&vb) {
                    *x += y * bv;
                }
            });
            acc(&mut grads[*b], val(*b).shape(), |gb| {
                for ((x, y), av) in gb.iter_mut().zip(g.data()).zip(&va) {
                    *x += y * av;
                }
            });
        }
        Op::Neg(a) => {
            acc(&mut grads[*a], val(*a).shape(), |ga| {
                for (x, y) in ga.iter_mut().zip(g.data()) {
                    *x -= y;
                }
            });
        }
        Op::AddScalar(a) => {
            acc(&mut grads[*a], val(*a).shape(), |ga| {
                for (x, y) in ga.iter_mut().zip(g.data()) {
                    *x += y;
                }
            });
        }
        Op::MulScalar(a, c) => {
            acc(&mut grads[*a], val(*a).shape(), |ga| {
                for (x, y) in ga.iter_mut().zip(g.data()) {
                    *x += c * y;
                }
            });
        }
        Op::AddScalarVar(a, s) | Op::SubScalarVar(a, s) => {
            let sign = if matches!(node.op, Op::AddScalarVar(..)) {
                1.0
            } else {
                -1.0
            };
            acc(&mut grads[*a], val(*a).shape(), |ga| {
                for (x, y) in ga.iter_mut().zip(g.data()) {
                    *x += y;
                }
            });
            let total: f64 = g.data().iter().sum();
            acc(&mut grads[*s], val(*s).shape(), |gs| {
                gs[0] += sign * total;
            });
        }
        Op::AddRowVec(a, b) => {
            acc(&mut grads[*a], val(*a).shape(), |ga| {
                for (x, y) in ga.iter_mut().zip(g.data()) {
                    *x += y;
                }
            });
            let c = val(*b).numel();
            acc(&mut grads[*b], val(*b).shape(), |gb| {
                for (i, y) in g.data().iter().enumerate() {
                    gb[i % c] += y;
                }
            });
        }
        Op::Matmul(a, b) => {
            let ga = tensor::matmul_nt(g, val(*b));
            let gb = tensor::matmul_tn(val(*a), g);
            acc(&mut grads[*a], val(*a).shape(), |d| {
                for (x, y) in d.iter_mut().zip(ga.data()) {
                    *x += y;
                }
            });
            acc(&mut grads[*b], val(*b).shape(), |d| {
                for (x, y) in d.iter_mut().zip(gb.data()) {
                    *x += y;
                }
            });
        }
        Op::MatmulNT(a, b) => {
            let ga = tensor::matmul(g, val(*b));
            let gb = tensor::matmul_tn(g, val(*a));
            acc(&mut grads[*a], val(*a).shape(), |d| {
                for (x, y) in d.iter_mut().zip(ga.data()) {
                    *x += y;
                }
            });
            acc(&mut grads[*b], val(*b).shape(), |d| {
                for (x, y) in d.iter_mut().zip(gb.data()) {
                    *x += y;
                }
            });
        }
        Op::ConcatCols(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if va.rank() == 1 {
                let ca = va.numel();
                acc(&mut grads[*a], va.shape(), |d| {
                    for (x, y) in d.iter_mut().zip(&g.data()[..ca]) {
                        *x += y;
                    }
                });
                acc(&mut grads[*b], vb.shape(), |d| {
                    for (x, y) in d.iter_mut().zip(&g.data()[ca..]) {
                        *x += y;
                    }
                });
            } else {
                let (r, ca, cb) = (va.rows(), va.cols(), vb.cols());
                acc(&mut grads[*a], va.shape(), |d| {
                    for i in 0..r {
                        let grow = &g.data()[i * (ca + cb)..i * (ca + cb) + ca];
                        for (x, y) in d[i * ca..(i + 1) * ca].iter_mut().zip(grow) {
                            *x += y;
                        }
                    }
                });
                acc(&mut grads[*b], vb.shape(), |d| {
                    for i in 0..r {
                        let grow = &g.data()[i * (ca + cb) + ca..(i + 1) * (ca + cb)];
                        for (x, y) in d[i * cb..(i + 1) * cb].iter_mut().zip(grow) {
                            *x += y;
                        }
                    }
                });
            }
        }
        Op::SliceCols { src, start } => {
            let vs = val(*src);
            if vs.rank() == 1 {
                acc(&mut grads[*src], vs.shape(), |d| {
                    for (off, y) in g.data().iter().enumerate() {
                        d[start + off] += y;
                    }
                });
            } else {
                let cs = vs.cols();
                acc(&mut grads[*src], vs.shape(), |d| {
                    for i in 0..g.rows() {
                        for (off, y) in g.row(i).iter().enumerate() {
                            d[i * cs + start + off] += y;
                        }
                    }
                });
            }
        }
        Op::Relu(a) => {
            let va = val(*a).data().to_vec();
            acc(&mut grads[*a], val(*a).shape(), |d| {
                for ((x, y), v) in d.iter_mut().zip(g.data()).zip(&va) {
                    if *v > 0.0 {
                        *x += y;
                    }
                }
            });
        }
        Op::Exp(a) => {
            let out = node.value.data().to_vec();
            acc(&mut grads[*a], val(*a).shape(), |d| {
                for ((x, y), o) in d.iter_mut().zip(g.data()).zip(&out) {
                    *x += y * o;
                }
            });
        }
        Op::Ln(a) => {
            let va = val(*a).data().to_vec();
            acc(&mut grads[*a], val(*a).shape(), |d| {
                for ((x, y), v) in d.iter_mut().zip(g.data()).zip(&va) {
                    *x += y / v;
                }
            });
        }
        Op::Sqrt(a) => {
            let out = node.value.data().to_vec();
            acc(&mut grads[*a], val(*a).shape(), |d| {
                for ((x, y), o) in d.iter_mut().zip(g.data()).zip(&out) {
                    if *o > 0.0 {
                        *x += y * 0.5 / o;
                    }
                }
            });
        }
        Op::Softplus(a) => {
            let va = val(*a).data().to_vec();
            acc(&mut grads[*a], val(*a).shape(), |d| {
                for ((x, y), v) in d.iter_mut().zip(g.data()).zip(&va) {
                    let sig = if *v >= 0.0 {
                        1.0 / (1.0 + (-v).exp())
                    } else {
                        let e = v.exp();
                        e / (1.0 + e)
                    };
                    *x += y * sig;
                }
            });
        }
        Op::NormalizeRows(a) => {
            let (va, y) = (val(*a), &node.value);
            let (r, c) = (y.rows(), y.cols());
            acc(&mut grads[*a], val(*a).shape(), |d| {
                for i in 0..r {
                    let xr = &va.data()[i * c..(i + 1) * c];
                    let yr = &y.data()[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let n = xr.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if n > NORM_EPS {
                        let gy: f64 = gr.iter().zip(yr).map(|(gv, yv)| gv * yv).sum();
                        for k in 0..c {
                            d[i * c + k] += (gr[k] - gy * yr[k]) / n;
                        }
                    } else {
                        for k in 0..c {
                            d[i * c + k] += gr[k] / NORM_EPS;
                        }
                    }
                }
            });
        }
        Op::SoftmaxLastDim(a) => {
            let y = &node.value;
            let (r, c) = (y.rows(), y.cols());
            acc(&mut grads[*a], val(*a).shape(), |d| {
                for i in 0..r {
                    let yr = &y.data()[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[i * c + j] += yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::LogSoftmaxRows(a) => {
            let y = &node.value;
            let (r, c) = (y.rows(), y.cols());
            acc(&mut grads[*a], val(*a).shape(), |d| {
                for i in 0..r {
                    let yr = &y.data()[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..c {
                        d[i * c + j] += gr[j] - yr[j].exp() * gsum;
                    }
                }
            });
        }
        Op::LogSoftmaxCols(a) => {
            let y = &node.value;
            let (r, c) = (y.rows(), y.cols());
            acc(&mut grads[*a], val(*a).shape(), |d| {
                for j in 0..c {
                    let mut gsum = 0.0;
                    for i in 0..r {
                        gsum += g.data()[i * c + j];
                    }
                    for i in 0..r {
                        d[i * c + j] += g.data()[i * c + j] - y.data()[i * c + j].exp() * gsum;
                    }
                }
            });
        }
        Op::SegmentMax { src, argmax } => {
            let c = if val(*src).rank() == 1 {
                1
            } else {
                val(*src).cols()
            };
            acc(&mut grads[*src], val(*src).shape(), |d| {
                for (flat, y) in g.data().iter().enumerate() {
                    let j = flat % c;
                    d[argmax[flat] * c + j] += y;
                }
            });
        }
        Op::Sum(a) => {
            let gv = g.data()[0];
            acc(&mut grads[*a], val(*a).shape(), |d| {
                for x in d.iter_mut() {
                    *x += gv;
                }
            });
        }
        Op::Mean(a) => {
            let gv = g.data()[0] / val(*a).numel() as f64;
            acc(&mut grads[*a], val(*a).shape(), |d| {
                for x in d.iter_mut() {
                    *x += gv;
                }
            });
        }
        Op::GatherRows { src, rows } => {
            let c = val(*src).cols();
            acc(&mut grads[*src], val(*src).shape(), |d| {
                for (k, &r) in rows.iter().enumerate() {
                    let grow = &g.data()[k * c..(k + 1) * c];
                    for (x, y) in d[r * c..(r + 1) * c].iter_mut().zip(grow) {
                        *x += y;
                    }
                }
            });
        }
        Op::GatherElems { src, idx } => {
            let c = val(*src).cols();
            acc(&mut grads[*src], val(*src).shape(), |d| {
                for (k, &(r, cc)) in idx.iter().enumerate() {
                    d[r * c + cc] += g.data()[k];
                }
            });
        }
        Op::PairwiseDist(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (ra, rb, c) = (va.rows(), vb.rows(), va.cols());
            let out = node.value.data();
            // Zero distance contributes no gradient (subgradient choice).
            let mut da = vec![0.0; ra * c];
            let mut db = vec![0.0; rb * c];
            for i in 0..ra {
                let ar = va.row(i);
                for j in 0..rb {
                    let dist = out[i * rb + j];
                    if dist == 0.0 {
                        continue;
                    }
                    let gv = g.data()[i * rb + j] / dist;
                    if gv == 0.0 {
                        continue;
                    }
                    let br = vb.row(j);
                    for k in 0..c {
                        let diff = (ar[k] - br[k]) * gv;
                        da[i * c + k] += diff;
                        db[j * c + k] -= diff;
                    }
                }
            }
            acc(&mut grads[*a], va.shape(), |d| {
                for (x, y) in d.iter_mut().zip(&da) {
                    *x += y;
                }
            });
            acc(&mut grads[*b], vb.shape(), |d| {
                for (x, y) in d.iter_mut().zip(&db) {
                    *x += y;
                }
            });
        }
        Op::PadWithScalar { src, alpha } => {
            let (n, m) = (val(*src).rows(), val(*src).cols());
            acc(&mut grads[*src], val(*src).shape(), |d| {
                for i in 0..n {
                    let grow = &g.data()[i * (m + 1)..i * (m + 1) + m];
                    for (x, y) in d[i * m..(i + 1) * m].iter_mut().zip(grow) {
                        *x += y;
                    }
                }
            });
            let mut total = 0.0;
            for j in 0..=m {
                total += g.data()[n * (m + 1) + j];
            }
            for i in 0..n {
                total += g.data()[i * (m + 1) + m];
            }
            acc(&mut grads[*alpha], val(*alpha).shape(), |d| {
                d[0] += total;
            });
        }
    }
}
