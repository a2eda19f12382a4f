//! Reverse-mode differentiation over a tape of batched 2-D tensor ops,
//! plus the encoder/MLP networks built on it.
//!
//! Directional derivatives of a network (`ḣ = ∇h · δ`) are built as
//! ordinary tape ops (linear maps of the tangent, ReLU masks, argmax
//! picks), so parameter gradients of expressions containing `∇h` come out
//! of the same backward pass.

mod nets;
mod serialize;

pub use nets::{
    encode, EncoderNet, IcbfBatch, IcbfNet, IcbfTrace, Linear, LinearVars, Mlp, NetShape, NetVars, Observation,
    PolicyBatch, PolicyNet, Wrt,
};
pub use serialize::{load_checkpoint, save_checkpoint, Checkpoint};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major 2-D tensor. Row vectors are `1 × c`, batches are `B × c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("tensor data", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row_vector(data: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data: data.to_vec(),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::row_vector(&[v])
    }

    pub fn full(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Row ranges `[offsets[s], offsets[s+1])` grouping batch rows into segments.
pub type Segments = Vec<usize>;

/// Marks an empty segment in a pick list.
const NO_PICK: usize = usize::MAX;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// `a · wᵀ`
    MatMulT(Var, Var),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Column-wise scaling by a constant row.
    MulRow(Var, Vec<f64>),
    Scale(Var, f64),
    Relu(Var),
    Mask(Var, Vec<f64>),
    Tanh(Var),
    OneMinusSq(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    GatherRows(Var, Vec<usize>),
    /// `out[s, c] = a[picks[s·cols + c], c]`
    Pick(Var, Vec<usize>),
    RowSum(Var),
    Sum(Var),
    /// `out_b = offset_b + M_b a_b` with one `M_b` per row.
    RowAffine(Var, Vec<Tensor>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Rejects non-finite values at every op when set.
    pub nan_check: bool,
}

/// Gradients of a scalar root with respect to every node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zero-filled when the root does not depend on it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| {
            let t = tape.value(v);
            Tensor::zeros(t.rows, t.cols)
        })
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        if self.nan_check {
            assert!(value.is_finite(), "non-finite value produced by {op:?}");
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data[0]
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn matmul_t(&mut self, a: Var, w: Var) -> Var {
        let (av, wv) = (self.value(a), self.value(w));
        assert_eq!(av.cols, wv.cols, "matmul_t inner dimension");
        let mut out = Tensor::zeros(av.rows, wv.rows);
        for r in 0..av.rows {
            let ar = av.row(r);
            for c in 0..wv.rows {
                out.data[r * wv.rows + c] = dot(ar, wv.row(c));
            }
        }
        self.push(out, Op::MatMulT(a, w))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a), self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(bias));
        assert_eq!((bv.rows, bv.cols), (1, av.cols), "bias shape");
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&bv.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, bias))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor {
            rows: av.rows,
            cols: av.cols,
            data,
        };
        self.push(out, op)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let av = self.value(a);
        let out = Tensor {
            rows: av.rows,
            cols: av.cols,
            data: av.data.iter().map(|x| f(*x)).collect(),
        };
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn mul_row(&mut self, a: Var, row: &[f64]) -> Var {
        let av = self.value(a);
        assert_eq!(av.cols, row.len(), "mul_row width");
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, s) in out.row_mut(r).iter_mut().zip(row) {
                *o *= s;
            }
        }
        self.push(out, Op::MulRow(a, row.to_vec()))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| s * x, Op::Scale(a, s))
    }

    /// ReLU with subgradient 0 at 0.
    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Elementwise product with a constant.
    pub fn mask(&mut self, a: Var, mask: Vec<f64>) -> Var {
        let av = self.value(a);
        assert_eq!(av.data.len(), mask.len(), "mask length");
        let data = av.data.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor {
            rows: av.rows,
            cols: av.cols,
            data,
        };
        self.push(out, Op::Mask(a, mask))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    /// `1 − a²`
    pub fn one_minus_sq(&mut self, a: Var) -> Var {
        self.map(a, |x| 1.0 - x * x, Op::OneMinusSq(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for p in parts {
                let pv = self.value(*p);
                assert_eq!(pv.rows, rows, "concat rows");
                out.row_mut(r)[c0..c0 + pv.cols].copy_from_slice(pv.row(r));
                c0 += pv.cols;
            }
        }
        self.push(out, Op::Concat(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Var {
        let av = self.value(a);
        assert!(c0 <= c1 && c1 <= av.cols, "slice bounds");
        let mut out = Tensor::zeros(av.rows, c1 - c0);
        for r in 0..av.rows {
            out.row_mut(r).copy_from_slice(&av.row(r)[c0..c1]);
        }
        self.push(out, Op::Slice(a, c0))
    }

    /// `out[r] = a[idx[r]]`
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(idx.len(), av.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(av.row(i));
        }
        self.push(out, Op::GatherRows(a, idx.to_vec()))
    }

    /// Column-wise max over each row segment; empty segments give 0.
    /// Returns the pooled tensor and the argmax picks (lowest row on ties).
    pub fn segment_max(&mut self, a: Var, segments: &[usize]) -> (Var, Vec<usize>) {
        let av = self.value(a);
        let nseg = segments.len() - 1;
        let mut picks = vec![NO_PICK; nseg * av.cols];
        for s in 0..nseg {
            for c in 0..av.cols {
                let mut best = NO_PICK;
                for r in segments[s]..segments[s + 1] {
                    if best == NO_PICK || av.at(r, c) > av.at(best, c) {
                        best = r;
                    }
                }
                picks[s * av.cols + c] = best;
            }
        }
        let out = self.pick(a, picks.clone());
        (out, picks)
    }

    pub fn pick(&mut self, a: Var, picks: Vec<usize>) -> Var {
        let av = self.value(a);
        let cols = av.cols;
        let nseg = picks.len() / cols.max(1);
        let mut out = Tensor::zeros(nseg, cols);
        for s in 0..nseg {
            for c in 0..cols {
                let r = picks[s * cols + c];
                if r != NO_PICK {
                    out.data[s * cols + c] = av.at(r, c);
                }
            }
        }
        self.push(out, Op::Pick(a, picks))
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows).map(|r| av.row(r).iter().sum()).collect();
        let out = Tensor {
            rows: av.rows,
            cols: 1,
            data,
        };
        self.push(out, Op::RowSum(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// `out_b = offsets_b + mats[b] · a_b`; `mats[b]` is `k × cols(a)`.
    pub fn row_affine(&mut self, a: Var, offsets: &Tensor, mats: Vec<Tensor>) -> Var {
        let av = self.value(a);
        assert_eq!(mats.len(), av.rows, "one matrix per row");
        assert_eq!(offsets.rows, av.rows, "one offset per row");
        let k = offsets.cols;
        let mut out = offsets.clone();
        for (b, m) in mats.iter().enumerate() {
            assert_eq!((m.rows, m.cols), (k, av.cols), "row_affine matrix shape");
            let ab = av.row(b);
            for i in 0..k {
                out.data[b * k + i] += dot(m.row(i), ab);
            }
        }
        self.push(out, Op::RowAffine(a, mats))
    }

    /// Reverse sweep from a `1 × 1` root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.shape() != [1, 1] {
            return Err(Error::dim("backward root (must be scalar)", 1, rv.data.len()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMulT(a, w) => {
                let (av, wv) = (self.value(*a), self.value(*w));
                acc(*a, matmul(g, wv));
                acc(*w, matmul_tn(g, av));
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, matmul_nt(g, bv));
                acc(*b, matmul_tn(av, g));
            }
            Op::AddRow(a, bias) => {
                acc(*a, g.clone());
                let mut gb = Tensor::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (o, x) in gb.data.iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                acc(*bias, gb);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, scaled(g, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, hadamard(g, &bv.data));
                acc(*b, hadamard(g, &av.data));
            }
            Op::MulRow(a, row) => {
                let mut ga = g.clone();
                for r in 0..ga.rows {
                    for (o, s) in ga.row_mut(r).iter_mut().zip(row) {
                        *o *= s;
                    }
                }
                acc(*a, ga);
            }
            Op::Scale(a, s) => acc(*a, scaled(g, *s)),
            Op::Relu(a) => {
                let av = self.value(*a);
                let data = g
                    .data
                    .iter()
                    .zip(&av.data)
                    .map(|(gi, x)| if *x > 0.0 { *gi } else { 0.0 })
                    .collect();
                acc(*a, Tensor { data, ..g.clone() });
            }
            Op::Mask(a, m) => acc(*a, hadamard(g, m)),
            Op::Tanh(a) => {
                let data = g
                    .data
                    .iter()
                    .zip(&node.value.data)
                    .map(|(gi, y)| gi * (1.0 - y * y))
                    .collect();
                acc(*a, Tensor { data, ..g.clone() });
            }
            Op::OneMinusSq(a) => {
                let av = self.value(*a);
                let data = g.data.iter().zip(&av.data).map(|(gi, x)| -2.0 * x * gi).collect();
                acc(*a, Tensor { data, ..g.clone() });
            }
            Op::Concat(parts) => {
                let mut c0 = 0;
                for p in parts {
                    let cols = self.value(*p).cols;
                    let mut gp = Tensor::zeros(g.rows, cols);
                    for r in 0..g.rows {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + cols]);
                    }
                    acc(*p, gp);
                    c0 += cols;
                }
            }
            Op::Slice(a, c0) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                for r in 0..g.rows {
                    ga.row_mut(r)[*c0..*c0 + g.cols].copy_from_slice(g.row(r));
                }
                acc(*a, ga);
            }
            Op::GatherRows(a, idx) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                for (r, &i) in idx.iter().enumerate() {
                    for (o, x) in ga.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                acc(*a, ga);
            }
            Op::Pick(a, picks) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                let cols = av.cols;
                for (k, &r) in picks.iter().enumerate() {
                    if r != NO_PICK {
                        ga.data[r * cols + k % cols] += g.data[k];
                    }
                }
                acc(*a, ga);
            }
            Op::RowSum(a) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                for r in 0..av.rows {
                    ga.row_mut(r).iter_mut().for_each(|x| *x = g.data[r]);
                }
                acc(*a, ga);
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                acc(*a, Tensor::full(av.rows, av.cols, g.data[0]));
            }
            Op::RowAffine(a, mats) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                for (b, m) in mats.iter().enumerate() {
                    let gb = g.row(b);
                    let out = ga.row_mut(b);
                    for (i, gi) in gb.iter().enumerate() {
                        for (o, mij) in out.iter_mut().zip(m.row(i)) {
                            *o += gi * mij;
                        }
                    }
                }
                acc(*a, ga);
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul inner dimension");
    let mut out = Tensor::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, aik) in a.row(i).iter().enumerate() {
            if *aik == 0.0 {
                continue;
            }
            for (o, bkj) in orow.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    out
}

/// `a · bᵀ`
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols);
    let mut out = Tensor::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(a.row(i), b.row(j));
        }
    }
    out
}

/// `aᵀ · b`
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows);
    let mut out = Tensor::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let brow = b.row(r);
        for (i, ari) in a.row(r).iter().enumerate() {
            if *ari == 0.0 {
                continue;
            }
            for (o, x) in out.data[i * b.cols..(i + 1) * b.cols].iter_mut().zip(brow) {
                *o += ari * x;
            }
        }
    }
    out
}

fn scaled(t: &Tensor, s: f64) -> Tensor {
    Tensor {
        rows: t.rows,
        cols: t.cols,
        data: t.data.iter().map(|x| x * s).collect(),
    }
}

fn hadamard(t: &Tensor, m: &[f64]) -> Tensor {
    Tensor {
        rows: t.rows,
        cols: t.cols,
        data: t.data.iter().zip(m).map(|(x, y)| x * y).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_scalar_gradient() {
        // loss = w·x with x = 3
        let mut t = Tape::new();
        let w = t.leaf(Tensor::scalar(2.0));
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.matmul_t(x, w);
        assert_eq!(t.scalar(y), 6.0);
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(&t, w).data, vec![3.0]);
        assert_eq!(g.wrt(&t, x).data, vec![2.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::row_vector(&[1.0, 2.0]));
        assert!(t.backward(a).is_err());
    }

    #[test]
    fn squared_norm_input_gradient() {
        let mut t = Tape::new();
        let u = t.leaf(Tensor::row_vector(&[1.0, 2.0]));
        let sq = t.mul(u, u);
        let h = t.sum(sq);
        let g = t.backward(h).unwrap();
        assert_eq!(g.wrt(&t, u).data, vec![2.0, 4.0]);
    }

    #[test]
    fn segment_max_routes_to_argmax_with_low_index_ties() {
        let mut t = Tape::new();
        // two segments: rows 0..3, 3..3 (empty)
        let a = t.leaf(Tensor::from_vec(3, 2, vec![1.0, 5.0, 4.0, 5.0, 2.0, -1.0]).unwrap());
        let (m, picks) = t.segment_max(a, &[0, 3, 3]);
        assert_eq!(t.value(m).data, vec![4.0, 5.0, 0.0, 0.0]);
        assert_eq!(&picks[..2], &[1, 0]);
        let s = t.sum(m);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(&t, a).data, vec![0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::row_vector(&[0.0, 1.0, -1.0]));
        let r = t.relu(a);
        let s = t.sum(r);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(&t, a).data, vec![0.0, 1.0, 0.0]);
    }

    fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    /// Builds a scalar from every op so each backward rule is exercised.
    fn composite(tape: &mut Tape, a: &[f64], b: &[f64]) -> (Var, Var, Var) {
        let av = tape.leaf(Tensor::from_vec(3, 2, a.to_vec()).unwrap());
        let bv = tape.leaf(Tensor::from_vec(2, 2, b.to_vec()).unwrap());
        let mm = tape.matmul(av, bv);
        let mt = tape.matmul_t(av, bv);
        let bias = tape.slice_cols(bv, 0, 2);
        let bias = tape.gather_rows(bias, &[1]);
        let s1 = tape.add_row(mm, bias);
        let s2 = tape.sub(s1, mt);
        let s3 = tape.mul(s2, mt);
        let s4 = tape.tanh(s3);
        let s5 = tape.one_minus_sq(s4);
        let s6 = tape.mul_row(s5, &[0.5, -2.0]);
        let s7 = tape.scale(s6, 1.5);
        let (pool, _) = tape.segment_max(s7, &[0, 2, 3]);
        let cat = tape.concat_cols(&[pool, pool]);
        let off = Tensor::from_vec(2, 1, vec![0.1, 0.2]).unwrap();
        let m = Tensor::from_vec(1, 4, vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let aff = tape.row_affine(cat, &off, vec![m.clone(), m]);
        let sq = tape.mul(aff, aff);
        let rs = tape.row_sum(sq);
        let added = tape.add(rs, rs);
        let out = tape.sum(added);
        (out, av, bv)
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        let a = [0.3, -0.2, 0.5, 0.1, -0.4, 0.25];
        let b = [0.2, 0.7, -0.3, 0.45];
        let mut t = Tape::new();
        let (out, av, bv) = composite(&mut t, &a, &b);
        let g = t.backward(out).unwrap();
        let fa = |x: &[f64]| {
            let mut t = Tape::new();
            let (o, _, _) = composite(&mut t, x, &b);
            t.scalar(o)
        };
        let fb = |x: &[f64]| {
            let mut t = Tape::new();
            let (o, _, _) = composite(&mut t, &a, x);
            t.scalar(o)
        };
        for (got, want) in g.wrt(&t, av).data.iter().zip(central_difference(fa, &a, 1e-6)) {
            assert!((got - want).abs() <= 1e-6 * (1.0 + want.abs()), "{got} vs {want}");
        }
        for (got, want) in g.wrt(&t, bv).data.iter().zip(central_difference(fb, &b, 1e-6)) {
            assert!((got - want).abs() <= 1e-6 * (1.0 + want.abs()), "{got} vs {want}");
        }
    }
}
