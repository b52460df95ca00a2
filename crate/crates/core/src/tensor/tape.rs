use std::borrow::Cow;
use std::sync::Arc;

use super::kernels::{gemm, View};
use super::Tensor;
use crate::error::{GammaError, Result};

const LN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous row groups (one per image or prompt) inside a stacked token
/// matrix. Attention and pooling never cross a segment boundary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments(Arc<[(usize, usize)]>);

impl Segments {
    /// Builds segments from their lengths, laid out back to back.
    pub fn from_lengths(lengths: &[usize]) -> Result<Self> {
        if lengths.is_empty() || lengths.iter().any(|&l| l == 0) {
            return Err(GammaError::Domain(format!(
                "segment lengths must be positive, got {lengths:?}"
            )));
        }
        let mut start = 0;
        let segs = lengths
            .iter()
            .map(|&len| {
                let s = (start, len);
                start += len;
                s
            })
            .collect::<Vec<_>>();
        Ok(Self(segs.into()))
    }

    pub fn uniform(count: usize, len: usize) -> Result<Self> {
        Self::from_lengths(&vec![len; count])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total_rows(&self) -> usize {
        self.0.last().map_or(0, |&(s, l)| s + l)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.0.iter().copied()
    }

    pub fn starts(&self) -> Vec<usize> {
        self.0.iter().map(|&(s, _)| s).collect()
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    DivBy(Var, Var),
    Relu(Var),
    Softmax { a: Var, axis: usize },
    MeanAxis { a: Var, axis: usize },
    Sum(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Attention { qkv: Var, segs: Segments, heads: usize, probs: Vec<f64> },
    SegmentMean { a: Var, segs: Segments },
    SegmentExpand { a: Var, segs: Segments },
    GatherRows { a: Var, idx: Arc<[usize]> },
    PickCols { a: Var, idx: Arc<[usize]>, k: usize },
    Mix { weights: Var, experts: Vec<Var> },
    Mse { pred: Var, target: Var },
}

struct Node<'p> {
    value: Cow<'p, [f64]>,
    rows: usize,
    cols: usize,
    requires_grad: bool,
    op: Op,
}

/// Records a computation so gradients can be propagated back to its leaves.
///
/// Every value is a `rows × cols` matrix (a scalar is `1 × 1`). Nodes are
/// appended as operations run, so the node list is always in topological
/// order. A tape is single-owner; independent tapes can run on separate
/// threads against the same borrowed parameters.
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    bound: Vec<Option<Var>>,
    track_kinks: bool,
    kink_hash: u64,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    bound: Vec<Option<Var>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for the tensor bound under `key` with [`Tape::bind`].
    pub fn for_key(&self, key: usize) -> Option<&[f64]> {
        self.bound
            .get(key)
            .copied()
            .flatten()
            .and_then(|v| self.wrt(v))
    }

    pub fn take_key(&mut self, key: usize) -> Option<Vec<f64>> {
        let v = self.bound.get(key).copied().flatten()?;
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: Vec::new(),
            track_kinks: false,
            kink_hash: 0,
        }
    }

    /// Enables hashing of every rectifier's activation pattern (see
    /// [`Tape::kink_signature`]).
    pub fn tracking_kinks(mut self) -> Self {
        self.track_kinks = true;
        self
    }

    /// Hash of all rectifier on/off patterns seen so far. Two evaluations
    /// with equal signatures lie in the same linear region of every ReLU.
    pub fn kink_signature(&self) -> u64 {
        self.kink_hash
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, [f64]>, rows: usize, cols: usize, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            rows,
            cols,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'p> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.shape(v);
        Tensor::matrix(r, c, self.value(v).to_vec()).expect("tape values are nonempty")
    }

    // ---- leaves ---------------------------------------------------------

    /// Borrows a tensor as a leaf. Gradient tracking follows the tensor's flag.
    pub fn leaf(&mut self, t: &'p Tensor) -> Var {
        let (r, c) = (t.rows(), t.cols());
        self.push(Cow::Borrowed(t.data()), r, c, t.requires_grad(), Op::Leaf)
    }

    /// Like [`Tape::leaf`] but memoized under `key`, so a parameter used in
    /// several places is one node and its gradient accumulates.
    pub fn bind(&mut self, key: usize, t: &'p Tensor) -> Var {
        if let Some(Some(v)) = self.bound.get(key) {
            return *v;
        }
        let v = self.leaf(t);
        if self.bound.len() <= key {
            self.bound.resize(key + 1, None);
        }
        self.bound[key] = Some(v);
        v
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        self.owned_leaf(rows, cols, data, false)
    }

    /// Owned leaf that tracks gradients (test inputs, probes).
    pub fn variable(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        self.owned_leaf(rows, cols, data, true)
    }

    fn owned_leaf(&mut self, rows: usize, cols: usize, data: Vec<f64>, grad: bool) -> Result<Var> {
        if rows == 0 || cols == 0 {
            return Err(GammaError::Domain("empty tensor".into()));
        }
        if data.len() != rows * cols {
            return Err(GammaError::dim("leaf", &[rows, cols], &[data.len()]));
        }
        Ok(self.push(Cow::Owned(data), rows, cols, grad, Op::Leaf))
    }

    // ---- operations -----------------------------------------------------

    fn mm(&mut self, a: Var, b: Var, ta: bool, tb: bool, op: &'static str) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        let va = View::row_major(&na.value, na.rows, na.cols);
        let vb = View::row_major(&nb.value, nb.rows, nb.cols);
        let va = if ta { va.t() } else { va };
        let vb = if tb { vb.t() } else { vb };
        if va.cols != vb.rows {
            return Err(GammaError::dim(op, &[va.rows, va.cols], &[vb.rows, vb.cols]));
        }
        let (m, n) = (va.rows, vb.cols);
        let mut out = vec![0.0; m * n];
        gemm(&mut out, va, vb, 0.0);
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(Cow::Owned(out), m, n, rg, Op::MatMul { a, b, ta, tb }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.mm(a, b, false, false, "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.mm(a, b, false, true, "matmul_t")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(GammaError::dim(op, &[sa.0, sa.1], &[sb.0, sb.1]));
        }
        Ok(())
    }

    fn scalar_operand(&self, op: &'static str, a: Var, s: Var) -> Result<()> {
        let ss = self.shape(s);
        if ss != (1, 1) {
            let sa = self.shape(a);
            return Err(GammaError::dim(op, &[sa.0, sa.1], &[ss.0, ss.1]));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (na, nb) = (self.node(a), self.node(b));
        let out: Vec<f64> = na.value.iter().zip(nb.value.iter()).map(|(x, y)| x + y).collect();
        let (r, c) = (na.rows, na.cols);
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(Cow::Owned(out), r, c, rg, Op::Add(a, b)))
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(bias));
        if nb.rows * nb.cols != na.cols {
            return Err(GammaError::dim("add_bias", &[na.rows, na.cols], &[nb.rows, nb.cols]));
        }
        let mut out = na.value.to_vec();
        for row in out.chunks_mut(na.cols) {
            row.iter_mut().zip(nb.value.iter()).for_each(|(x, b)| *x += b);
        }
        let (r, c) = (na.rows, na.cols);
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(Cow::Owned(out), r, c, rg, Op::AddBias(a, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (na, nb) = (self.node(a), self.node(b));
        let out: Vec<f64> = na.value.iter().zip(nb.value.iter()).map(|(x, y)| x * y).collect();
        let (r, c) = (na.rows, na.cols);
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(Cow::Owned(out), r, c, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let na = self.node(a);
        let out: Vec<f64> = na.value.iter().map(|x| x * factor).collect();
        let (r, c, rg) = (na.rows, na.cols, na.requires_grad);
        self.push(Cow::Owned(out), r, c, rg, Op::Scale(a, factor))
    }

    /// `s · a` for a `1 × 1` tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        self.scalar_operand("scale_by", a, s)?;
        let f = self.scalar_value(s);
        let na = self.node(a);
        let out: Vec<f64> = na.value.iter().map(|x| f * x).collect();
        let (r, c) = (na.rows, na.cols);
        let rg = na.requires_grad || self.requires_grad(s);
        Ok(self.push(Cow::Owned(out), r, c, rg, Op::ScaleBy(a, s)))
    }

    /// `a / s` for a `1 × 1` tensor `s`.
    pub fn div_by(&mut self, a: Var, s: Var) -> Result<Var> {
        self.scalar_operand("div_by", a, s)?;
        let d = self.scalar_value(s);
        if d == 0.0 || !d.is_finite() {
            return Err(GammaError::NumericDomain(format!("division by {d}")));
        }
        let na = self.node(a);
        let out: Vec<f64> = na.value.iter().map(|x| x / d).collect();
        let (r, c) = (na.rows, na.cols);
        let rg = na.requires_grad || self.requires_grad(s);
        Ok(self.push(Cow::Owned(out), r, c, rg, Op::DivBy(a, s)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let na = self.node(a);
        let out: Vec<f64> = na.value.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let mut hash = self.kink_hash;
        if self.track_kinks {
            let mut h = hash ^ 0x9e37_79b9;
            for (i, &x) in na.value.iter().enumerate() {
                if x > 0.0 {
                    h = h.rotate_left(7) ^ (i as u64).wrapping_mul(0x100_0000_01b3);
                }
            }
            hash = h.wrapping_mul(0xff51_afd7_ed55_8ccd) ^ na.value.len() as u64;
        }
        let (r, c, rg) = (na.rows, na.cols, na.requires_grad);
        self.kink_hash = hash;
        self.push(Cow::Owned(out), r, c, rg, Op::Relu(a))
    }

    /// Numerically stable softmax along `axis` (0 = down columns, 1 = along rows).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let na = self.node(a);
        if axis > 1 {
            return Err(GammaError::Domain(format!("softmax axis {axis} out of range for rank 2")));
        }
        if let Some(bad) = na.value.iter().find(|v| !v.is_finite()) {
            return Err(GammaError::NumericDomain(format!("softmax input contains {bad}")));
        }
        let (r, c) = (na.rows, na.cols);
        let mut out = na.value.to_vec();
        let (outer, inner, stride_outer, stride_inner) = if axis == 1 { (r, c, c, 1) } else { (c, r, 1, c) };
        for o in 0..outer {
            let idx = |i: usize| o * stride_outer + i * stride_inner;
            let max = (0..inner).map(|i| out[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in 0..inner {
                let e = (out[idx(i)] - max).exp();
                out[idx(i)] = e;
                total += e;
            }
            for i in 0..inner {
                out[idx(i)] /= total;
            }
        }
        let rg = na.requires_grad;
        Ok(self.push(Cow::Owned(out), r, c, rg, Op::Softmax { a, axis }))
    }

    /// Mean along `axis`: 0 collapses rows (`1 × cols`), 1 collapses columns (`rows × 1`).
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let na = self.node(a);
        let (r, c) = (na.rows, na.cols);
        let (out, shape) = match axis {
            0 => {
                let mut m = vec![0.0; c];
                for row in na.value.chunks(c) {
                    m.iter_mut().zip(row).for_each(|(acc, x)| *acc += x);
                }
                m.iter_mut().for_each(|v| *v /= r as f64);
                (m, (1, c))
            }
            1 => (
                na.value.chunks(c).map(|row| row.iter().sum::<f64>() / c as f64).collect(),
                (r, 1),
            ),
            _ => return Err(GammaError::Domain(format!("mean axis {axis} out of range for rank 2"))),
        };
        let rg = na.requires_grad;
        Ok(self.push(Cow::Owned(out), shape.0, shape.1, rg, Op::MeanAxis { a, axis }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let na = self.node(a);
        let s = na.value.iter().sum();
        let rg = na.requires_grad;
        self.push(Cow::Owned(vec![s]), 1, 1, rg, Op::Sum(a))
    }

    /// Per-row layer normalization with affine `gamma`, `beta` (each `1 × cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (nx, ng, nb) = (self.node(x), self.node(gamma), self.node(beta));
        let c = nx.cols;
        if ng.value.len() != c || nb.value.len() != c {
            return Err(GammaError::dim("layer_norm", &[nx.rows, c], &[ng.rows, ng.cols]));
        }
        let r = nx.rows;
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &nx.value[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * ng.value[j] + nb.value[j];
            }
        }
        let rg = nx.requires_grad || ng.requires_grad || nb.requires_grad;
        Ok(self.push(
            Cow::Owned(out),
            r,
            c,
            rg,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
        ))
    }

    /// Multi-head scaled dot-product self-attention within each segment.
    ///
    /// `qkv` is `rows × 3d` holding queries, keys and values side by side;
    /// the result is `rows × d`.
    pub fn attention(&mut self, qkv: Var, segs: &Segments, heads: usize) -> Result<Var> {
        let n = self.node(qkv);
        if n.cols % 3 != 0 || heads == 0 || (n.cols / 3) % heads != 0 {
            return Err(GammaError::dim("attention", &[n.rows, n.cols], &[heads]));
        }
        if segs.total_rows() != n.rows {
            return Err(GammaError::dim("attention", &[n.rows, n.cols], &[segs.total_rows()]));
        }
        let d = n.cols / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let w = n.cols;
        let x = &n.value;
        let mut out = vec![0.0; n.rows * d];
        let prob_len: usize = segs.iter().map(|(_, l)| l * l).sum::<usize>() * heads;
        let mut probs = Vec::with_capacity(prob_len);
        let mut row = Vec::new();
        for (start, len) in segs.iter() {
            for h in 0..heads {
                let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                for i in start..start + len {
                    let q = &x[i * w + qo..i * w + qo + dh];
                    row.clear();
                    let mut max = f64::NEG_INFINITY;
                    for j in start..start + len {
                        let k = &x[j * w + ko..j * w + ko + dh];
                        let s = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
                        max = max.max(s);
                        row.push(s);
                    }
                    let mut total = 0.0;
                    row.iter_mut().for_each(|s| {
                        *s = (*s - max).exp();
                        total += *s;
                    });
                    row.iter_mut().for_each(|s| *s /= total);
                    let o = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                    for (jj, p) in row.iter().enumerate() {
                        let j = start + jj;
                        let v = &x[j * w + vo..j * w + vo + dh];
                        o.iter_mut().zip(v).for_each(|(acc, vv)| *acc += p * vv);
                    }
                    probs.extend_from_slice(&row);
                }
            }
        }
        let (rows, rg) = (n.rows, n.requires_grad);
        Ok(self.push(
            Cow::Owned(out),
            rows,
            d,
            rg,
            Op::Attention {
                qkv,
                segs: segs.clone(),
                heads,
                probs,
            },
        ))
    }

    /// Mean over the rows of each segment: `rows × c` → `segments × c`.
    pub fn segment_mean(&mut self, a: Var, segs: &Segments) -> Result<Var> {
        let na = self.node(a);
        if segs.total_rows() != na.rows {
            return Err(GammaError::dim("segment_mean", &[na.rows, na.cols], &[segs.total_rows()]));
        }
        let c = na.cols;
        let mut out = vec![0.0; segs.len() * c];
        for (s, (start, len)) in segs.iter().enumerate() {
            let o = &mut out[s * c..(s + 1) * c];
            for row in na.value[start * c..(start + len) * c].chunks(c) {
                o.iter_mut().zip(row).for_each(|(acc, x)| *acc += x);
            }
            o.iter_mut().for_each(|v| *v /= len as f64);
        }
        let rg = na.requires_grad;
        Ok(self.push(Cow::Owned(out), segs.len(), c, rg, Op::SegmentMean { a, segs: segs.clone() }))
    }

    /// Repeats segment row `s` over every row of segment `s`: `segments × c` → `rows × c`.
    pub fn segment_expand(&mut self, a: Var, segs: &Segments) -> Result<Var> {
        let na = self.node(a);
        if segs.len() != na.rows {
            return Err(GammaError::dim("segment_expand", &[na.rows, na.cols], &[segs.len()]));
        }
        let c = na.cols;
        let mut out = Vec::with_capacity(segs.total_rows() * c);
        for (s, (_, len)) in segs.iter().enumerate() {
            for _ in 0..len {
                out.extend_from_slice(&na.value[s * c..(s + 1) * c]);
            }
        }
        let rg = na.requires_grad;
        Ok(self.push(Cow::Owned(out), segs.total_rows(), c, rg, Op::SegmentExpand { a, segs: segs.clone() }))
    }

    /// Row lookup: `out[i] = a[idx[i]]`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let na = self.node(a);
        if idx.is_empty() {
            return Err(GammaError::Domain("gather_rows with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= na.rows) {
            return Err(GammaError::Input(format!("row index {bad} out of range for {} rows", na.rows)));
        }
        let c = na.cols;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&na.value[i * c..(i + 1) * c]);
        }
        let rg = na.requires_grad;
        Ok(self.push(Cow::Owned(out), idx.len(), c, rg, Op::GatherRows { a, idx: idx.into() }))
    }

    /// Picks `k` columns per row: `out[b, j] = a[b, idx[b*k + j]]`.
    pub fn pick_cols(&mut self, a: Var, idx: &[usize], k: usize) -> Result<Var> {
        let na = self.node(a);
        if k == 0 || idx.len() != na.rows * k {
            return Err(GammaError::dim("pick_cols", &[na.rows, na.cols], &[idx.len(), k]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= na.cols) {
            return Err(GammaError::Input(format!("column index {bad} out of range for {} columns", na.cols)));
        }
        let c = na.cols;
        let out: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(p, &j)| na.value[(p / k) * c + j])
            .collect();
        let (r, rg) = (na.rows, na.requires_grad);
        Ok(self.push(Cow::Owned(out), r, k, rg, Op::PickCols { a, idx: idx.into(), k }))
    }

    /// Row-wise mixture `Σ_i weights[:, i] ⊙ experts[i]`.
    pub fn mix(&mut self, weights: Var, experts: &[Var]) -> Result<Var> {
        let nw = self.node(weights);
        if experts.is_empty() || nw.cols != experts.len() {
            return Err(GammaError::dim("mix", &[nw.rows, nw.cols], &[experts.len()]));
        }
        let (r, n) = (nw.rows, nw.cols);
        let c = self.node(experts[0]).cols;
        for &e in experts {
            let s = self.shape(e);
            if s != (r, c) {
                return Err(GammaError::dim("mix", &[r, c], &[s.0, s.1]));
            }
        }
        let mut out = vec![0.0; r * c];
        for (i, &e) in experts.iter().enumerate() {
            let ev = &self.node(e).value;
            for row in 0..r {
                let g = nw.value[row * n + i];
                out[row * c..(row + 1) * c]
                    .iter_mut()
                    .zip(&ev[row * c..(row + 1) * c])
                    .for_each(|(o, x)| *o += g * x);
            }
        }
        let rg = nw.requires_grad || experts.iter().any(|&e| self.requires_grad(e));
        Ok(self.push(
            Cow::Owned(out),
            r,
            c,
            rg,
            Op::Mix {
                weights,
                experts: experts.to_vec(),
            },
        ))
    }

    /// Mean squared error, a `1 × 1` result.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse", pred, target)?;
        let (np, nt) = (self.node(pred), self.node(target));
        let n = np.value.len() as f64;
        let loss = np
            .value
            .iter()
            .zip(nt.value.iter())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let rg = np.requires_grad || nt.requires_grad;
        Ok(self.push(Cow::Owned(vec![loss]), 1, 1, rg, Op::Mse { pred, target }))
    }

    // ---- reverse pass ---------------------------------------------------

    /// Propagates d`loss` back through the tape.
    ///
    /// Only nodes that require gradients receive them; a value used several
    /// times accumulates the sum of its contributions.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(GammaError::Contract(format!(
                "backward needs a scalar loss, got {r}×{c}"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.requires_grad(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            // interior gradients are only needed transiently
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        // leaves that don't track gradients never receive one
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            bound: self.bound.clone(),
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (na, nb) = (self.node(*a), self.node(*b));
                let gv = View::row_major(g, node.rows, node.cols);
                let va = View::row_major(&na.value, na.rows, na.cols);
                let vb = View::row_major(&nb.value, nb.rows, nb.cols);
                let opb = if *tb { vb.t() } else { vb };
                let opa = if *ta { va.t() } else { va };
                if na.requires_grad {
                    let buf = acc_buf(grads, *a, na.value.len());
                    if *ta {
                        // a stored k×m: dA = op(b) · gᵀ
                        gemm(buf, opb, gv.t(), 1.0);
                    } else {
                        gemm(buf, gv, opb.t(), 1.0);
                    }
                }
                if nb.requires_grad {
                    let buf = acc_buf(grads, *b, nb.value.len());
                    if *tb {
                        // b stored n×k: dB = gᵀ · op(a)
                        gemm(buf, gv.t(), opa, 1.0);
                    } else {
                        gemm(buf, opa.t(), gv, 1.0);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.requires_grad(*v) {
                        axpy(acc_buf(grads, *v, g.len()), 1.0, g);
                    }
                }
            }
            Op::AddBias(a, bias) => {
                if self.requires_grad(*a) {
                    axpy(acc_buf(grads, *a, g.len()), 1.0, g);
                }
                if self.requires_grad(*bias) {
                    let buf = acc_buf(grads, *bias, node.cols);
                    for row in g.chunks(node.cols) {
                        axpy(buf, 1.0, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let buf = acc_buf(grads, *a, g.len());
                    for k in 0..g.len() {
                        buf[k] += g[k] * vb[k];
                    }
                }
                if self.requires_grad(*b) {
                    let buf = acc_buf(grads, *b, g.len());
                    for k in 0..g.len() {
                        buf[k] += g[k] * va[k];
                    }
                }
            }
            Op::Scale(a, f) => axpy(acc_buf(grads, *a, g.len()), *f, g),
            Op::ScaleBy(a, s) => {
                let f = self.scalar_value(*s);
                if self.requires_grad(*a) {
                    axpy(acc_buf(grads, *a, g.len()), f, g);
                }
                if self.requires_grad(*s) {
                    let d = dot(self.value(*a), g);
                    acc_buf(grads, *s, 1)[0] += d;
                }
            }
            Op::DivBy(a, s) => {
                let d = self.scalar_value(*s);
                if self.requires_grad(*a) {
                    axpy(acc_buf(grads, *a, g.len()), 1.0 / d, g);
                }
                if self.requires_grad(*s) {
                    let v = dot(self.value(*a), g);
                    acc_buf(grads, *s, 1)[0] -= v / (d * d);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let buf = acc_buf(grads, *a, g.len());
                for k in 0..g.len() {
                    if x[k] > 0.0 {
                        buf[k] += g[k];
                    }
                }
            }
            Op::Softmax { a, axis } => {
                let y = &node.value;
                let (r, c) = (node.rows, node.cols);
                let buf = acc_buf(grads, *a, g.len());
                let (outer, inner, so, si) = if *axis == 1 { (r, c, c, 1) } else { (c, r, 1, c) };
                for o in 0..outer {
                    let idx = |k: usize| o * so + k * si;
                    let s: f64 = (0..inner).map(|k| g[idx(k)] * y[idx(k)]).sum();
                    for k in 0..inner {
                        buf[idx(k)] += y[idx(k)] * (g[idx(k)] - s);
                    }
                }
            }
            Op::MeanAxis { a, axis } => {
                let (r, c) = self.shape(*a);
                let buf = acc_buf(grads, *a, r * c);
                if *axis == 0 {
                    for row in buf.chunks_mut(c) {
                        row.iter_mut().zip(g).for_each(|(b, gg)| *b += gg / r as f64);
                    }
                } else {
                    for (row, gg) in buf.chunks_mut(c).zip(g) {
                        row.iter_mut().for_each(|b| *b += gg / c as f64);
                    }
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                acc_buf(grads, *a, n).iter_mut().for_each(|b| *b += g[0]);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = node.cols;
                let gm = self.value(*gamma);
                if self.requires_grad(*gamma) {
                    let buf = acc_buf(grads, *gamma, c);
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            buf[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if self.requires_grad(*beta) {
                    let buf = acc_buf(grads, *beta, c);
                    for grow in g.chunks(c) {
                        axpy(buf, 1.0, grow);
                    }
                }
                if self.requires_grad(*x) {
                    let buf = acc_buf(grads, *x, g.len());
                    let mut dh = vec![0.0; c];
                    for (row, rs) in rstd.iter().enumerate() {
                        let grow = &g[row * c..(row + 1) * c];
                        let hrow = &xhat[row * c..(row + 1) * c];
                        for j in 0..c {
                            dh[j] = grow[j] * gm[j];
                        }
                        let m1 = dh.iter().sum::<f64>() / c as f64;
                        let m2 = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        let brow = &mut buf[row * c..(row + 1) * c];
                        for j in 0..c {
                            brow[j] += rs * (dh[j] - m1 - hrow[j] * m2);
                        }
                    }
                }
            }
            Op::Attention { qkv, segs, heads, probs } => {
                let nq = self.node(*qkv);
                let w = nq.cols;
                let d = w / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let x = &nq.value;
                let buf = acc_buf(grads, *qkv, x.len());
                let mut p_off = 0;
                let mut dp = Vec::new();
                for (start, len) in segs.iter() {
                    for h in 0..*heads {
                        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                        for i in start..start + len {
                            let p = &probs[p_off..p_off + len];
                            p_off += len;
                            let go = &g[i * d + h * dh..i * d + (h + 1) * dh];
                            dp.clear();
                            for j in start..start + len {
                                let v = &x[j * w + vo..j * w + vo + dh];
                                dp.push(dot(go, v));
                            }
                            let s: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            for (jj, j) in (start..start + len).enumerate() {
                                // dV_j += p_ij · dout_i
                                for t in 0..dh {
                                    buf[j * w + vo + t] += p[jj] * go[t];
                                }
                                let ds = p[jj] * (dp[jj] - s) * scale;
                                if ds != 0.0 {
                                    for t in 0..dh {
                                        buf[i * w + qo + t] += ds * x[j * w + ko + t];
                                        buf[j * w + ko + t] += ds * x[i * w + qo + t];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::SegmentMean { a, segs } => {
                let c = node.cols;
                let (ar, _) = self.shape(*a);
                let buf = acc_buf(grads, *a, ar * c);
                for (s, (start, len)) in segs.iter().enumerate() {
                    let gs = &g[s * c..(s + 1) * c];
                    for row in buf[start * c..(start + len) * c].chunks_mut(c) {
                        row.iter_mut().zip(gs).for_each(|(b, gg)| *b += gg / len as f64);
                    }
                }
            }
            Op::SegmentExpand { a, segs } => {
                let c = node.cols;
                let buf = acc_buf(grads, *a, segs.len() * c);
                for (s, (start, len)) in segs.iter().enumerate() {
                    for row in g[start * c..(start + len) * c].chunks(c) {
                        axpy(&mut buf[s * c..(s + 1) * c], 1.0, row);
                    }
                }
            }
            Op::GatherRows { a, idx } => {
                let c = node.cols;
                let n = self.value(*a).len();
                let buf = acc_buf(grads, *a, n);
                for (row, &src) in idx.iter().enumerate() {
                    axpy(&mut buf[src * c..(src + 1) * c], 1.0, &g[row * c..(row + 1) * c]);
                }
            }
            Op::PickCols { a, idx, k } => {
                let (_, c) = self.shape(*a);
                let n = self.value(*a).len();
                let buf = acc_buf(grads, *a, n);
                for (p, &j) in idx.iter().enumerate() {
                    buf[(p / k) * c + j] += g[p];
                }
            }
            Op::Mix { weights, experts } => {
                let c = node.cols;
                let (r, n) = self.shape(*weights);
                let wv = self.value(*weights);
                if self.requires_grad(*weights) {
                    let mut dw = vec![0.0; r * n];
                    for (e_i, &e) in experts.iter().enumerate() {
                        let ev = self.value(e);
                        for row in 0..r {
                            dw[row * n + e_i] = dot(&g[row * c..(row + 1) * c], &ev[row * c..(row + 1) * c]);
                        }
                    }
                    axpy(acc_buf(grads, *weights, r * n), 1.0, &dw);
                }
                for (e_i, &e) in experts.iter().enumerate() {
                    if !self.requires_grad(e) {
                        continue;
                    }
                    let buf = acc_buf(grads, e, r * c);
                    for row in 0..r {
                        axpy(
                            &mut buf[row * c..(row + 1) * c],
                            wv[row * n + e_i],
                            &g[row * c..(row + 1) * c],
                        );
                    }
                }
            }
            Op::Mse { pred, target } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let f = 2.0 * g[0] / p.len() as f64;
                if self.requires_grad(*pred) {
                    let buf = acc_buf(grads, *pred, p.len());
                    for k in 0..p.len() {
                        buf[k] += f * (p[k] - t[k]);
                    }
                }
                if self.requires_grad(*target) {
                    let buf = acc_buf(grads, *target, p.len());
                    for k in 0..p.len() {
                        buf[k] -= f * (p[k] - t[k]);
                    }
                }
            }
        }
    }
}

fn acc_buf(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(yy, xx)| *yy += a * xx);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
