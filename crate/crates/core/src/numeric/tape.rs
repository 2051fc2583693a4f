//! Reverse-mode differentiation over a linear tape of matrix ops.

use std::rc::Rc;

use super::matrix::{gemm_into, Matrix};
use super::{NumericError, ParamId};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Tensor(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Tensor, Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    AddRow(Tensor, Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    ElemMul(Tensor, Tensor),
    MulConst(Tensor, Rc<Matrix>),
    ConcatCols(Vec<Tensor>),
    ConcatRows(Vec<Tensor>),
    Gelu(Tensor),
    Sigmoid(Tensor),
    Dropout(Tensor, Rc<Vec<f64>>),
    ReduceMean(Tensor),
    Sum(Tensor),
    L2NormSq(Tensor),
    RowDot(Tensor, Tensor),
    HeadDot(Tensor, Tensor, usize),
    HeadScale(Tensor, Tensor),
    GatherRows(Tensor, Rc<Vec<usize>>),
    ScatterAddRows(Tensor, Rc<Vec<usize>>),
    SegmentSoftmax(Tensor, Rc<Vec<usize>>),
    SegmentMean(Tensor, Rc<Vec<usize>>, Rc<Vec<f64>>),
    HingeMax(Tensor, Vec<Option<usize>>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// One computation graph. Values are computed eagerly as ops are added;
/// [`Tape::backward`] then walks the records in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn mismatch(op: &'static str, a: &Matrix, b: &Matrix) -> NumericError {
    NumericError::ShapeMismatch {
        op,
        left: a.shape(),
        right: b.shape(),
    }
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

    fn push(&mut self, value: Matrix, op: Op) -> Tensor {
        self.nodes.push(Node { value, op });
        Tensor(self.nodes.len() - 1)
    }

    pub fn value(&self, t: Tensor) -> &Matrix {
        &self.nodes[t.0].value
    }

    pub fn shape(&self, t: Tensor) -> (usize, usize) {
        self.nodes[t.0].value.shape()
    }

    /// Scalar value of a 1×1 tensor.
    pub fn scalar(&self, t: Tensor) -> f64 {
        let v = self.value(t);
        assert_eq!(v.shape(), (1, 1), "scalar() on non-scalar tensor");
        v.get(0, 0)
    }

    /// Constant input; gradients are computed but nobody reads them.
    pub fn leaf(&mut self, value: Matrix) -> Tensor {
        self.push(value, Op::Leaf)
    }

    /// Trainable input whose gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, value: Matrix) -> Tensor {
        self.push(value, Op::Param(id))
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, NumericError> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    fn zip(&mut self, op_name: &'static str, a: Tensor, b: Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Matrix, NumericError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(op_name, va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Matrix::from_vec(va.rows(), va.cols(), data)
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, NumericError> {
        let v = self.zip("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, NumericError> {
        let v = self.zip("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn elementwise_mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, NumericError> {
        let v = self.zip("elementwise_mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::ElemMul(a, b)))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Tensor, c: Rc<Matrix>) -> Result<Tensor, NumericError> {
        let va = self.value(a);
        if va.shape() != c.shape() {
            return Err(mismatch("mul_const", va, &c));
        }
        let data = va.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let v = Matrix::from_vec(va.rows(), va.cols(), data)?;
        Ok(self.push(v, Op::MulConst(a, c)))
    }

    /// Adds the 1×c row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Tensor, bias: Tensor) -> Result<Tensor, NumericError> {
        let (va, vb) = (self.value(a), self.value(bias));
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return Err(mismatch("add_row", va, vb));
        }
        let mut v = va.clone();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(vb.data()) {
                *x += b;
            }
        }
        Ok(self.push(v, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Tensor, s: f64) -> Tensor {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Tensor, s: f64) -> Tensor {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    /// Horizontal concatenation; all parts share the row count.
    pub fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor, NumericError> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(mismatch("concat_cols", self.value(parts[0]), self.value(p)));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.nodes[p.0].value.row(i);
                v.row_mut(i)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    /// Vertical concatenation; all parts share the column count.
    pub fn concat_rows(&mut self, parts: &[Tensor], cols: usize) -> Result<Tensor, NumericError> {
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            if vp.cols() != cols {
                return Err(NumericError::ShapeMismatch {
                    op: "concat_rows",
                    left: (rows, cols),
                    right: vp.shape(),
                });
            }
            data.extend_from_slice(vp.data());
            rows += vp.rows();
        }
        let v = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn gelu(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a).map(gelu_scalar);
        self.push(v, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a).map(sigmoid_scalar);
        self.push(v, Op::Sigmoid(a))
    }

    /// Inverted dropout with an explicit keep mask: kept entries are scaled
    /// by `1 / (1 - rate)`, dropped entries become zero.
    pub fn dropout(&mut self, a: Tensor, keep: &[bool], rate: f64) -> Result<Tensor, NumericError> {
        let va = self.value(a);
        if keep.len() != va.len() {
            return Err(NumericError::ShapeMismatch {
                op: "dropout",
                left: va.shape(),
                right: (keep.len(), 1),
            });
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(NumericError::InvalidArgument {
                op: "dropout",
                reason: format!("rate {rate} outside [0, 1)"),
            });
        }
        let s = 1.0 / (1.0 - rate);
        let factors: Vec<f64> = keep.iter().map(|&k| if k { s } else { 0.0 }).collect();
        let data = va.data().iter().zip(&factors).map(|(x, f)| x * f).collect();
        let v = Matrix::from_vec(va.rows(), va.cols(), data)?;
        Ok(self.push(v, Op::Dropout(a, Rc::new(factors))))
    }

    /// Mean of all entries, as a 1×1 tensor.
    pub fn reduce_mean(&mut self, a: Tensor) -> Result<Tensor, NumericError> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(NumericError::InvalidArgument {
                op: "reduce_mean",
                reason: "empty input".into(),
            });
        }
        let v = Matrix::filled(1, 1, va.sum() / va.len() as f64);
        Ok(self.push(v, Op::ReduceMean(a)))
    }

    pub fn sum(&mut self, a: Tensor) -> Tensor {
        let v = Matrix::filled(1, 1, self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Squared Euclidean norm of each row, as an n×1 column.
    pub fn l2_norm_sq(&mut self, a: Tensor) -> Tensor {
        let va = self.value(a);
        let v = Matrix::from_fn(va.rows(), 1, |i, _| va.row(i).iter().map(|x| x * x).sum());
        self.push(v, Op::L2NormSq(a))
    }

    /// Inner product of matching rows, as an n×1 column.
    pub fn row_dot(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, NumericError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch("row_dot", va, vb));
        }
        let v = Matrix::from_fn(va.rows(), 1, |i, _| {
            va.row(i).iter().zip(vb.row(i)).map(|(x, y)| x * y).sum()
        });
        Ok(self.push(v, Op::RowDot(a, b)))
    }

    /// Per-head inner products of matching rows: columns are split into
    /// `heads` equal blocks and the result is n×heads.
    pub fn head_dot(&mut self, a: Tensor, b: Tensor, heads: usize) -> Result<Tensor, NumericError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() || heads == 0 || va.cols() % heads != 0 {
            return Err(mismatch("head_dot", va, vb));
        }
        let w = va.cols() / heads;
        let v = Matrix::from_fn(va.rows(), heads, |i, k| {
            let (ra, rb) = (&va.row(i)[k * w..(k + 1) * w], &vb.row(i)[k * w..(k + 1) * w]);
            ra.iter().zip(rb).map(|(x, y)| x * y).sum()
        });
        Ok(self.push(v, Op::HeadDot(a, b, heads)))
    }

    /// Scales each head block of `m` (n×d) by the matching column of
    /// `alpha` (n×heads).
    pub fn head_scale(&mut self, alpha: Tensor, m: Tensor) -> Result<Tensor, NumericError> {
        let (va, vm) = (self.value(alpha), self.value(m));
        if va.rows() != vm.rows() || va.cols() == 0 || vm.cols() % va.cols() != 0 {
            return Err(mismatch("head_scale", va, vm));
        }
        let w = vm.cols() / va.cols();
        let v = Matrix::from_fn(vm.rows(), vm.cols(), |i, j| va.get(i, j / w) * vm.get(i, j));
        Ok(self.push(v, Op::HeadScale(alpha, m)))
    }

    pub fn gather_rows(&mut self, a: Tensor, idx: Rc<Vec<usize>>) -> Result<Tensor, NumericError> {
        let va = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= va.rows()) {
            return Err(NumericError::InvalidArgument {
                op: "gather_rows",
                reason: format!("row {bad} of {}", va.rows()),
            });
        }
        let v = va.gather_rows(&idx);
        Ok(self.push(v, Op::GatherRows(a, idx)))
    }

    /// Sums row `i` of `a` into row `idx[i]` of an `n`-row zero matrix.
    pub fn scatter_add_rows(&mut self, a: Tensor, idx: Rc<Vec<usize>>, n: usize) -> Result<Tensor, NumericError> {
        let va = self.value(a);
        if idx.len() != va.rows() || idx.iter().any(|&i| i >= n) {
            return Err(NumericError::InvalidArgument {
                op: "scatter_add_rows",
                reason: format!("{} indices for {} rows into {n}", idx.len(), va.rows()),
            });
        }
        let mut v = Matrix::zeros(n, va.cols());
        for (r, &t) in idx.iter().enumerate() {
            for (x, y) in v.row_mut(t).iter_mut().zip(va.row(r)) {
                *x += y;
            }
        }
        Ok(self.push(v, Op::ScatterAddRows(a, idx)))
    }

    /// Softmax of each column over the rows that share a segment id.
    pub fn segment_softmax(&mut self, a: Tensor, seg: Rc<Vec<usize>>, n_seg: usize) -> Result<Tensor, NumericError> {
        let va = self.value(a);
        if seg.len() != va.rows() || seg.iter().any(|&s| s >= n_seg) {
            return Err(NumericError::InvalidArgument {
                op: "segment_softmax",
                reason: format!("{} segment ids for {} rows", seg.len(), va.rows()),
            });
        }
        let c = va.cols();
        let mut max = Matrix::filled(n_seg, c, f64::NEG_INFINITY);
        for (r, &s) in seg.iter().enumerate() {
            for j in 0..c {
                let x = va.get(r, j);
                if x > max.get(s, j) {
                    max.set(s, j, x);
                }
            }
        }
        let mut v = Matrix::zeros(va.rows(), c);
        let mut denom = Matrix::zeros(n_seg, c);
        for (r, &s) in seg.iter().enumerate() {
            for j in 0..c {
                let e = (va.get(r, j) - max.get(s, j)).exp();
                v.set(r, j, e);
                denom.set(s, j, denom.get(s, j) + e);
            }
        }
        for (r, &s) in seg.iter().enumerate() {
            for j in 0..c {
                v.set(r, j, v.get(r, j) / denom.get(s, j));
            }
        }
        Ok(self.push(v, Op::SegmentSoftmax(a, seg)))
    }

    /// Mean of the rows in each segment; empty segments give zero rows.
    pub fn segment_mean(&mut self, a: Tensor, seg: Rc<Vec<usize>>, n_seg: usize) -> Result<Tensor, NumericError> {
        let va = self.value(a);
        if seg.len() != va.rows() || seg.iter().any(|&s| s >= n_seg) {
            return Err(NumericError::InvalidArgument {
                op: "segment_mean",
                reason: format!("{} segment ids for {} rows", seg.len(), va.rows()),
            });
        }
        let mut counts = vec![0.0; n_seg];
        for &s in seg.iter() {
            counts[s] += 1.0;
        }
        let mut v = Matrix::zeros(n_seg, va.cols());
        for (r, &s) in seg.iter().enumerate() {
            for (x, y) in v.row_mut(s).iter_mut().zip(va.row(r)) {
                *x += y / counts[s];
            }
        }
        Ok(self.push(v, Op::SegmentMean(a, seg, Rc::new(counts))))
    }

    /// For an n×1 column, `max(0, max over segment rows)` per segment,
    /// returned as an n_seg×1 column.
    pub fn hinge_max(&mut self, a: Tensor, seg: &[usize], n_seg: usize) -> Result<Tensor, NumericError> {
        let va = self.value(a);
        if va.cols() != 1 || seg.len() != va.rows() || seg.iter().any(|&s| s >= n_seg) {
            return Err(NumericError::InvalidArgument {
                op: "hinge_max",
                reason: format!("input {:?} with {} segment ids", va.shape(), seg.len()),
            });
        }
        let mut best: Vec<Option<usize>> = vec![None; n_seg];
        let mut v = Matrix::zeros(n_seg, 1);
        for (r, &s) in seg.iter().enumerate() {
            let x = va.get(r, 0);
            if x > v.get(s, 0) {
                v.set(s, 0, x);
                best[s] = Some(r);
            }
        }
        Ok(self.push(v, Op::HingeMax(a, best)))
    }

    /// Gradients of the 1×1 tensor `root` with respect to every recorded
    /// value.
    pub fn backward(&self, root: Tensor) -> Result<Gradients, NumericError> {
        if self.shape(root) != (1, 1) {
            return Err(NumericError::InvalidArgument {
                op: "backward",
                reason: format!("root has shape {:?}", self.shape(root)),
            });
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[i]) {
                params.push((*id, g.clone()));
            }
        }
        Ok(Gradients { values: grads, params })
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let mut acc = |t: Tensor, delta: Matrix| match &mut grads[t.0] {
            Some(m) => m.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut ga = Matrix::zeros(va.rows(), va.cols());
                gemm_into(1.0, g, false, vb, true, 0.0, &mut ga);
                let mut gb = Matrix::zeros(vb.rows(), vb.cols());
                gemm_into(1.0, va, true, g, false, 0.0, &mut gb);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::AddRow(a, bias) => {
                let mut gb = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (x, y) in gb.data_mut().iter_mut().zip(g.row(r)) {
                        *x += y;
                    }
                }
                acc(*a, g.clone());
                acc(*bias, gb);
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::ElemMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, zip_with(g, vb, |x, y| x * y));
                acc(*b, zip_with(g, va, |x, y| x * y));
            }
            Op::MulConst(a, c) => acc(*a, zip_with(g, c, |x, y| x * y)),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let gp = Matrix::from_fn(g.rows(), w, |r, j| g.get(r, off + j));
                    off += w;
                    acc(p, gp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    let gp = Matrix::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec())
                        .expect("concat_rows slice");
                    off += r;
                    acc(p, gp);
                }
            }
            Op::Gelu(a) => acc(*a, zip_with(g, self.value(*a), |x, y| x * gelu_grad(y))),
            Op::Sigmoid(a) => acc(*a, zip_with(g, &node.value, |x, s| x * s * (1.0 - s))),
            Op::Dropout(a, factors) => {
                let data = g.data().iter().zip(factors.iter()).map(|(x, f)| x * f).collect();
                acc(*a, Matrix::from_vec(g.rows(), g.cols(), data).expect("dropout shape"));
            }
            Op::ReduceMean(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Matrix::filled(r, c, g.get(0, 0) / (r * c) as f64));
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::L2NormSq(a) => {
                let va = self.value(*a);
                acc(*a, Matrix::from_fn(va.rows(), va.cols(), |r, j| 2.0 * va.get(r, j) * g.get(r, 0)));
            }
            Op::RowDot(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, Matrix::from_fn(va.rows(), va.cols(), |r, j| g.get(r, 0) * vb.get(r, j)));
                acc(*b, Matrix::from_fn(va.rows(), va.cols(), |r, j| g.get(r, 0) * va.get(r, j)));
            }
            Op::HeadDot(a, b, heads) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let w = va.cols() / heads;
                acc(*a, Matrix::from_fn(va.rows(), va.cols(), |r, j| g.get(r, j / w) * vb.get(r, j)));
                acc(*b, Matrix::from_fn(va.rows(), va.cols(), |r, j| g.get(r, j / w) * va.get(r, j)));
            }
            Op::HeadScale(alpha, m) => {
                let (va, vm) = (self.value(*alpha), self.value(*m));
                let w = vm.cols() / va.cols();
                let mut galpha = Matrix::zeros(va.rows(), va.cols());
                for r in 0..vm.rows() {
                    for j in 0..vm.cols() {
                        let k = j / w;
                        galpha.set(r, k, galpha.get(r, k) + g.get(r, j) * vm.get(r, j));
                    }
                }
                acc(*m, Matrix::from_fn(vm.rows(), vm.cols(), |r, j| va.get(r, j / w) * g.get(r, j)));
                acc(*alpha, galpha);
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = self.shape(*a);
                let mut ga = Matrix::zeros(r, c);
                for (k, &src) in idx.iter().enumerate() {
                    for (x, y) in ga.row_mut(src).iter_mut().zip(g.row(k)) {
                        *x += y;
                    }
                }
                acc(*a, ga);
            }
            Op::ScatterAddRows(a, idx) => acc(*a, g.gather_rows(idx)),
            Op::SegmentSoftmax(a, seg) => {
                let y = &node.value;
                let c = y.cols();
                let n_seg = seg.iter().max().map_or(0, |m| m + 1);
                let mut dotp = Matrix::zeros(n_seg, c);
                for (r, &s) in seg.iter().enumerate() {
                    for j in 0..c {
                        dotp.set(s, j, dotp.get(s, j) + y.get(r, j) * g.get(r, j));
                    }
                }
                acc(
                    *a,
                    Matrix::from_fn(y.rows(), c, |r, j| y.get(r, j) * (g.get(r, j) - dotp.get(seg[r], j))),
                );
            }
            Op::SegmentMean(a, seg, counts) => {
                let (r, c) = self.shape(*a);
                acc(*a, Matrix::from_fn(r, c, |k, j| g.get(seg[k], j) / counts[seg[k]]));
            }
            Op::HingeMax(a, best) => {
                let (r, c) = self.shape(*a);
                let mut ga = Matrix::zeros(r, c);
                for (s, b) in best.iter().enumerate() {
                    if let Some(row) = b {
                        ga.set(*row, 0, ga.get(*row, 0) + g.get(s, 0));
                    }
                }
                acc(*a, ga);
            }
        }
    }
}

fn zip_with(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("zip_with shape")
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    values: Vec<Option<Matrix>>,
    params: Vec<(ParamId, Matrix)>,
}

impl Gradients {
    /// Gradient of a recorded value, `None` when it does not influence the
    /// root.
    pub fn get(&self, t: Tensor) -> Option<&Matrix> {
        self.values[t.0].as_ref()
    }

    /// Gradient per parameter leaf, in recording order. A parameter used
    /// through several leaves appears once per leaf.
    pub fn params(&self) -> &[(ParamId, Matrix)] {
        &self.params
    }
}
