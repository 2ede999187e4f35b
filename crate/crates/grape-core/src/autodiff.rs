//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Values are dynamic-dimensional `ndarray` arrays over [`Scalar`] (f32 for
//! training, f64 for the finite-difference audits). Nodes are appended in
//! topological order during the forward pass; [`Tape::grad`] walks the tape
//! backwards and accumulates vector-Jacobian products into the requested
//! leaves.
//!
//! The R1 penalty needs the parameter gradient of an input-gradient norm.
//! Rather than a second-order tape, callers build a forward-mode tangent
//! chain out of ordinary first-order ops (convolution of the tangent with the
//! same weights, constant-mask multiplies for activations); see
//! `training::losses`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayD, ArrayViewD, Axis, Ix1, Ix2, Ix4, IxDyn};
use num_traits::Float;

/// Element type the tape can differentiate over.
pub trait Scalar:
    Float
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}
impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

enum Op<F: Scalar> {
    Leaf,
    Add,
    Sub,
    Neg,
    Mul,
    Scale(F),
    AddScalar(F),
    /// [m,k] x [k,n]
    MatMul,
    Transpose,
    /// [n,d] + [d] broadcast over rows
    AddRow,
    /// (x, w, b) with zero padding `pad`, stride 1
    Conv2d { pad: usize },
    AvgPool2,
    Upsample2,
    LeakyRelu(F),
    /// Elementwise multiply by a constant array (no gradient into the mask).
    MulMask(ArrayD<F>),
    /// Per-(sample, channel) normalization: (x - mu) / (sigma + eps).
    InstanceNorm { eps: F },
    /// (x[N,C,H,W], s[N,C], b[N,C]) -> x * s + b, broadcast over H,W.
    ScaleShift,
    SumAll,
    MeanAll,
    Abs,
    Softplus,
    /// Rows of a [P,d] matrix selected by index, producing [n,d].
    GatherRows(Vec<usize>),
    /// One column per row of a [N,P] matrix, producing [N].
    SelectCol(Vec<usize>),
    Reshape,
    SliceCols { start: usize, end: usize },
    SoftmaxRows,
    ConcatCols { widths: Vec<usize> },
}

struct Node<F: Scalar> {
    value: ArrayD<F>,
    parents: Vec<usize>,
    op: Op<F>,
    requires_grad: bool,
}

/// Wengert tape recording one forward computation.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> ArrayViewD<'_, F> {
        self.nodes[v.0].value.view()
    }

    pub fn scalar_value(&self, v: Var) -> F {
        let n = &self.nodes[v.0].value;
        debug_assert_eq!(n.len(), 1);
        *n.iter().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<F>, parents: Vec<usize>, op: Op<F>) -> Var {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node { value, parents, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: ArrayD<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, parents: vec![], op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar_constant(&mut self, v: F) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    // ── elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, vec![a.0, b.0], Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, vec![a.0, b.0], Op::Sub)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        self.push(v, vec![a.0], Op::Neg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, vec![a.0, b.0], Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(v, vec![a.0], Op::Scale(c))
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(v, vec![a.0], Op::AddScalar(c))
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: F) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| if x > F::zero() { x } else { x * alpha });
        self.push(v, vec![a.0], Op::LeakyRelu(alpha))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, F::zero())
    }

    pub fn mul_mask(&mut self, a: Var, mask: ArrayD<F>) -> Var {
        assert_eq!(self.nodes[a.0].value.shape(), mask.shape());
        let v = &self.nodes[a.0].value * &mask;
        self.push(v, vec![a.0], Op::MulMask(mask))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.abs());
        self.push(v, vec![a.0], Op::Abs)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(softplus_stable);
        self.push(v, vec![a.0], Op::Softplus)
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as2(&self.nodes[a.0].value);
        let bv = as2(&self.nodes[b.0].value);
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dims");
        let mut out = Array2::<F>::zeros((av.nrows(), bv.ncols()));
        general_mat_mul(F::one(), &av, &bv, F::zero(), &mut out);
        self.push(out.into_dyn(), vec![a.0, b.0], Op::MatMul)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let av = as2(&self.nodes[a.0].value);
        let v = av.t().to_owned().into_dyn();
        self.push(v, vec![a.0], Op::Transpose)
    }

    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let av = as2(&self.nodes[a.0].value);
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(av.ncols(), bv.len());
        let v = (&av + &bv).into_dyn();
        self.push(v, vec![a.0, b.0], Op::AddRow)
    }

    pub fn gather_rows(&mut self, m: Var, idx: &[usize]) -> Var {
        let mv = as2(&self.nodes[m.0].value);
        let mut out = Array2::<F>::zeros((idx.len(), mv.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&mv.row(i));
        }
        self.push(out.into_dyn(), vec![m.0], Op::GatherRows(idx.to_vec()))
    }

    pub fn select_col(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = as2(&self.nodes[a.0].value);
        assert_eq!(av.nrows(), idx.len());
        let out: Array1<F> = idx
            .iter()
            .enumerate()
            .map(|(r, &c)| av[(r, c)])
            .collect();
        self.push(out.into_dyn(), vec![a.0], Op::SelectCol(idx.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.nodes[a.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: incompatible element count");
        self.push(v, vec![a.0], Op::Reshape)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = as2(&self.nodes[a.0].value);
        let v = av.slice(ndarray::s![.., start..end]).to_owned().into_dyn();
        self.push(v, vec![a.0], Op::SliceCols { start, end })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<Array2<F>> = parts.iter().map(|p| as2(&self.nodes[p.0].value).to_owned()).collect();
        let widths: Vec<usize> = views.iter().map(|v| v.ncols()).collect();
        let rows = views[0].nrows();
        let total: usize = widths.iter().sum();
        let mut out = Array2::<F>::zeros((rows, total));
        let mut off = 0;
        for v in &views {
            out.slice_mut(ndarray::s![.., off..off + v.ncols()]).assign(v);
            off += v.ncols();
        }
        self.push(
            out.into_dyn(),
            parts.iter().map(|p| p.0).collect(),
            Op::ConcatCols { widths },
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = as2(&self.nodes[a.0].value);
        let mut out = av.to_owned();
        for mut row in out.rows_mut() {
            let mx = row.iter().cloned().fold(F::neg_infinity(), F::max);
            row.mapv_inplace(|x| (x - mx).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        self.push(out.into_dyn(), vec![a.0], Op::SoftmaxRows)
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = ArrayD::from_elem(IxDyn(&[]), self.nodes[a.0].value.sum());
        self.push(v, vec![a.0], Op::SumAll)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = F::from_f64(self.nodes[a.0].value.len() as f64);
        let v = ArrayD::from_elem(IxDyn(&[]), self.nodes[a.0].value.sum() / n);
        self.push(v, vec![a.0], Op::MeanAll)
    }

    /// mean(|a - b|), the mean-reduced L1 loss.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let d = self.abs(d);
        self.mean_all(d)
    }

    // ── image ops ───────────────────────────────────────────────────

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix1>().unwrap();
        let out = conv::forward(&xv, &wv, &bv, pad);
        self.push(out.into_dyn(), vec![x.0, w.0, b.0], Op::Conv2d { pad })
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = xv.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
        let q = F::from_f64(0.25);
        let mut out = ndarray::Array4::<F>::zeros((n, c, h / 2, w / 2));
        for ni in 0..n {
            for ci in 0..c {
                for i in 0..h / 2 {
                    for j in 0..w / 2 {
                        out[(ni, ci, i, j)] = (xv[(ni, ci, 2 * i, 2 * j)]
                            + xv[(ni, ci, 2 * i, 2 * j + 1)]
                            + xv[(ni, ci, 2 * i + 1, 2 * j)]
                            + xv[(ni, ci, 2 * i + 1, 2 * j + 1)])
                            * q;
                    }
                }
            }
        }
        self.push(out.into_dyn(), vec![x.0], Op::AvgPool2)
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = xv.dim();
        let mut out = ndarray::Array4::<F>::zeros((n, c, h * 2, w * 2));
        for ni in 0..n {
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let v = xv[(ni, ci, i, j)];
                        out[(ni, ci, 2 * i, 2 * j)] = v;
                        out[(ni, ci, 2 * i, 2 * j + 1)] = v;
                        out[(ni, ci, 2 * i + 1, 2 * j)] = v;
                        out[(ni, ci, 2 * i + 1, 2 * j + 1)] = v;
                    }
                }
            }
        }
        self.push(out.into_dyn(), vec![x.0], Op::Upsample2)
    }

    pub fn instance_norm(&mut self, x: Var, eps: F) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = xv.dim();
        let mut out = ndarray::Array4::<F>::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                let ch = xv.index_axis(Axis(0), ni);
                let ch = ch.index_axis(Axis(0), ci);
                let (mu, sigma) = channel_stats(&ch);
                let denom = sigma + eps;
                let mut o = out.index_axis_mut(Axis(0), ni);
                let mut o = o.index_axis_mut(Axis(0), ci);
                o.assign(&ch.mapv(|v| (v - mu) / denom));
            }
        }
        self.push(out.into_dyn(), vec![x.0], Op::InstanceNorm { eps })
    }

    /// x[N,C,H,W] * s[N,C] + b[N,C] with broadcast over the spatial dims.
    pub fn scale_shift(&mut self, x: Var, s: Var, b: Var) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let sv = as2(&self.nodes[s.0].value);
        let bv = as2(&self.nodes[b.0].value);
        let (n, c, h, w) = xv.dim();
        assert_eq!(sv.dim(), (n, c));
        assert_eq!(bv.dim(), (n, c));
        let mut out = ndarray::Array4::<F>::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                let sc = sv[(ni, ci)];
                let sh = bv[(ni, ci)];
                let chx = xv.index_axis(Axis(0), ni);
                let chx = chx.index_axis(Axis(0), ci);
                let mut o = out.index_axis_mut(Axis(0), ni);
                let mut o = o.index_axis_mut(Axis(0), ci);
                o.assign(&chx.mapv(|v| v * sc + sh));
            }
        }
        self.push(out.into_dyn(), vec![x.0, s.0, b.0], Op::ScaleShift)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Gradient of `output` (any shape; seeded with ones) w.r.t. `wrt`.
    ///
    /// Nodes not on a path from a `wrt` leaf to `output` are skipped, so
    /// asking only for the input-image gradient does not pay for weight
    /// gradients and vice versa.
    pub fn grad(&self, output: Var, wrt: &[Var]) -> Vec<ArrayD<F>> {
        let n = self.nodes.len();
        // active[i]: node i depends on some wrt leaf
        let mut active = vec![false; n];
        for v in wrt {
            // constants asked for report zeros; no grad flows into them
            active[v.0] = self.nodes[v.0].requires_grad;
        }
        for i in 0..n {
            if !active[i] {
                active[i] = self.nodes[i].parents.iter().any(|&p| active[p]);
            }
        }
        let mut grads: Vec<Option<ArrayD<F>>> = (0..n).map(|_| None).collect();
        grads[output.0] = Some(ArrayD::from_elem(self.nodes[output.0].value.raw_dim(), F::one()));
        for i in (0..=output.0).rev() {
            if grads[i].is_none() || !active[i] || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backward_node(i, &g, &active, &mut grads);
        }
        wrt.iter()
            .map(|v| {
                grads[v.0]
                    .take()
                    .unwrap_or_else(|| ArrayD::zeros(self.nodes[v.0].value.raw_dim()))
            })
            .collect()
    }

    fn accum(&self, grads: &mut Vec<Option<ArrayD<F>>>, idx: usize, g: ArrayD<F>) {
        match &mut grads[idx] {
            Some(acc) => *acc = &*acc + &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, i: usize, g: &ArrayD<F>, active: &[bool], grads: &mut Vec<Option<ArrayD<F>>>) {
        let node = &self.nodes[i];
        let p = &node.parents;
        let want = |k: usize| active[p[k]];
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                if want(0) {
                    self.accum(grads, p[0], g.clone());
                }
                if want(1) {
                    self.accum(grads, p[1], g.clone());
                }
            }
            Op::Sub => {
                if want(0) {
                    self.accum(grads, p[0], g.clone());
                }
                if want(1) {
                    self.accum(grads, p[1], g.mapv(|x| -x));
                }
            }
            Op::Neg => {
                if want(0) {
                    self.accum(grads, p[0], g.mapv(|x| -x));
                }
            }
            Op::Mul => {
                if want(0) {
                    self.accum(grads, p[0], g * &self.nodes[p[1]].value);
                }
                if want(1) {
                    self.accum(grads, p[1], g * &self.nodes[p[0]].value);
                }
            }
            Op::Scale(c) => {
                if want(0) {
                    self.accum(grads, p[0], g.mapv(|x| x * *c));
                }
            }
            Op::AddScalar(_) => {
                if want(0) {
                    self.accum(grads, p[0], g.clone());
                }
            }
            Op::MatMul => {
                let a = as2(&self.nodes[p[0]].value);
                let b = as2(&self.nodes[p[1]].value);
                let gv = as2(g);
                if want(0) {
                    let mut da = Array2::<F>::zeros(a.dim());
                    general_mat_mul(F::one(), &gv, &b.t(), F::zero(), &mut da);
                    self.accum(grads, p[0], da.into_dyn());
                }
                if want(1) {
                    let mut db = Array2::<F>::zeros(b.dim());
                    general_mat_mul(F::one(), &a.t(), &gv, F::zero(), &mut db);
                    self.accum(grads, p[1], db.into_dyn());
                }
            }
            Op::Transpose => {
                if want(0) {
                    self.accum(grads, p[0], as2(g).t().to_owned().into_dyn());
                }
            }
            Op::AddRow => {
                if want(0) {
                    self.accum(grads, p[0], g.clone());
                }
                if want(1) {
                    self.accum(grads, p[1], as2(g).sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::Conv2d { pad } => {
                let x = self.nodes[p[0]].value.view().into_dimensionality::<Ix4>().unwrap();
                let w = self.nodes[p[1]].value.view().into_dimensionality::<Ix4>().unwrap();
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                if want(0) {
                    let dx = conv::backward_input(&gv, &w, x.dim().2, x.dim().3, *pad);
                    self.accum(grads, p[0], dx.into_dyn());
                }
                if want(1) {
                    let dw = conv::backward_weight(&gv, &x, w.dim(), *pad);
                    self.accum(grads, p[1], dw.into_dyn());
                }
                if want(2) {
                    let db = gv.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                    self.accum(grads, p[2], db.into_dyn());
                }
            }
            Op::AvgPool2 => {
                if want(0) {
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    let (n, c, h, w) = gv.dim();
                    let q = F::from_f64(0.25);
                    let mut dx = ndarray::Array4::<F>::zeros((n, c, h * 2, w * 2));
                    for ni in 0..n {
                        for ci in 0..c {
                            for i in 0..h {
                                for j in 0..w {
                                    let v = gv[(ni, ci, i, j)] * q;
                                    dx[(ni, ci, 2 * i, 2 * j)] = v;
                                    dx[(ni, ci, 2 * i, 2 * j + 1)] = v;
                                    dx[(ni, ci, 2 * i + 1, 2 * j)] = v;
                                    dx[(ni, ci, 2 * i + 1, 2 * j + 1)] = v;
                                }
                            }
                        }
                    }
                    self.accum(grads, p[0], dx.into_dyn());
                }
            }
            Op::Upsample2 => {
                if want(0) {
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    let (n, c, h2, w2) = gv.dim();
                    let (h, w) = (h2 / 2, w2 / 2);
                    let mut dx = ndarray::Array4::<F>::zeros((n, c, h, w));
                    for ni in 0..n {
                        for ci in 0..c {
                            for i in 0..h {
                                for j in 0..w {
                                    dx[(ni, ci, i, j)] = gv[(ni, ci, 2 * i, 2 * j)]
                                        + gv[(ni, ci, 2 * i, 2 * j + 1)]
                                        + gv[(ni, ci, 2 * i + 1, 2 * j)]
                                        + gv[(ni, ci, 2 * i + 1, 2 * j + 1)];
                                }
                            }
                        }
                    }
                    self.accum(grads, p[0], dx.into_dyn());
                }
            }
            Op::LeakyRelu(alpha) => {
                if want(0) {
                    let x = &self.nodes[p[0]].value;
                    let dx = ndarray::Zip::from(g).and(x).map_collect(|&gi, &xi| {
                        if xi > F::zero() {
                            gi
                        } else {
                            gi * *alpha
                        }
                    });
                    self.accum(grads, p[0], dx);
                }
            }
            Op::MulMask(mask) => {
                if want(0) {
                    self.accum(grads, p[0], g * mask);
                }
            }
            Op::InstanceNorm { eps } => {
                if want(0) {
                    let x = self.nodes[p[0]].value.view().into_dimensionality::<Ix4>().unwrap();
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    let (n, c, h, w) = x.dim();
                    let m = F::from_f64((h * w) as f64);
                    let mut dx = ndarray::Array4::<F>::zeros((n, c, h, w));
                    for ni in 0..n {
                        for ci in 0..c {
                            let ch = x.index_axis(Axis(0), ni);
                            let ch = ch.index_axis(Axis(0), ci);
                            let gch = gv.index_axis(Axis(0), ni);
                            let gch = gch.index_axis(Axis(0), ci);
                            let (mu, sigma) = channel_stats(&ch);
                            let denom = sigma + *eps;
                            let gbar = gch.sum() / m;
                            // sum_i g_i * (x_i - mu)
                            let mut gd = F::zero();
                            for (gi, xi) in gch.iter().zip(ch.iter()) {
                                gd = gd + *gi * (*xi - mu);
                            }
                            // d/dx_j: (g_j - gbar)/denom - (x_j - mu) * gd / (m * sigma * denom^2)
                            let sig_term = if sigma > F::zero() {
                                gd / (m * sigma * denom * denom)
                            } else {
                                F::zero()
                            };
                            let mut o = dx.index_axis_mut(Axis(0), ni);
                            let mut o = o.index_axis_mut(Axis(0), ci);
                            for ((oj, gj), xj) in o.iter_mut().zip(gch.iter()).zip(ch.iter()) {
                                *oj = (*gj - gbar) / denom - (*xj - mu) * sig_term;
                            }
                        }
                    }
                    self.accum(grads, p[0], dx.into_dyn());
                }
            }
            Op::ScaleShift => {
                let x = self.nodes[p[0]].value.view().into_dimensionality::<Ix4>().unwrap();
                let s = as2(&self.nodes[p[1]].value);
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let (n, c, _, _) = x.dim();
                if want(0) {
                    let mut dx = x.to_owned();
                    for ni in 0..n {
                        for ci in 0..c {
                            let sc = s[(ni, ci)];
                            let gch = gv.index_axis(Axis(0), ni);
                            let gch = gch.index_axis(Axis(0), ci);
                            let mut o = dx.index_axis_mut(Axis(0), ni);
                            let mut o = o.index_axis_mut(Axis(0), ci);
                            o.assign(&gch.mapv(|v| v * sc));
                        }
                    }
                    self.accum(grads, p[0], dx.into_dyn());
                }
                if want(1) {
                    let mut ds = Array2::<F>::zeros((n, c));
                    for ni in 0..n {
                        for ci in 0..c {
                            let gch = gv.index_axis(Axis(0), ni);
                            let gch = gch.index_axis(Axis(0), ci);
                            let xch = x.index_axis(Axis(0), ni);
                            let xch = xch.index_axis(Axis(0), ci);
                            let mut acc = F::zero();
                            for (gi, xi) in gch.iter().zip(xch.iter()) {
                                acc = acc + *gi * *xi;
                            }
                            ds[(ni, ci)] = acc;
                        }
                    }
                    self.accum(grads, p[1], ds.into_dyn());
                }
                if want(2) {
                    let db = gv.sum_axis(Axis(3)).sum_axis(Axis(2));
                    self.accum(grads, p[2], db.into_dyn());
                }
            }
            Op::SumAll => {
                if want(0) {
                    let gs = *g.iter().next().unwrap();
                    self.accum(grads, p[0], ArrayD::from_elem(self.nodes[p[0]].value.raw_dim(), gs));
                }
            }
            Op::MeanAll => {
                if want(0) {
                    let n = F::from_f64(self.nodes[p[0]].value.len() as f64);
                    let gs = *g.iter().next().unwrap() / n;
                    self.accum(grads, p[0], ArrayD::from_elem(self.nodes[p[0]].value.raw_dim(), gs));
                }
            }
            Op::Abs => {
                if want(0) {
                    let x = &self.nodes[p[0]].value;
                    let dx = ndarray::Zip::from(g).and(x).map_collect(|&gi, &xi| {
                        if xi > F::zero() {
                            gi
                        } else if xi < F::zero() {
                            -gi
                        } else {
                            F::zero()
                        }
                    });
                    self.accum(grads, p[0], dx);
                }
            }
            Op::Softplus => {
                if want(0) {
                    let x = &self.nodes[p[0]].value;
                    let dx = ndarray::Zip::from(g).and(x).map_collect(|&gi, &xi| gi * sigmoid(xi));
                    self.accum(grads, p[0], dx);
                }
            }
            Op::GatherRows(idx) => {
                if want(0) {
                    let mut dm = ArrayD::zeros(self.nodes[p[0]].value.raw_dim());
                    let gv = as2(g);
                    let mut dmv = dm.view_mut().into_dimensionality::<Ix2>().unwrap();
                    for (r, &i) in idx.iter().enumerate() {
                        let mut row = dmv.row_mut(i);
                        ndarray::Zip::from(&mut row)
                            .and(&gv.row(r))
                            .for_each(|d, &g| *d = *d + g);
                    }
                    self.accum(grads, p[0], dm);
                }
            }
            Op::SelectCol(idx) => {
                if want(0) {
                    let mut da = ArrayD::zeros(self.nodes[p[0]].value.raw_dim());
                    let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                    let mut dav = da.view_mut().into_dimensionality::<Ix2>().unwrap();
                    for (r, &c) in idx.iter().enumerate() {
                        dav[(r, c)] = gv[r];
                    }
                    self.accum(grads, p[0], da);
                }
            }
            Op::Reshape => {
                if want(0) {
                    let shape = self.nodes[p[0]].value.raw_dim();
                    self.accum(grads, p[0], g.clone().into_shape_with_order(shape).unwrap());
                }
            }
            Op::SliceCols { start, end } => {
                if want(0) {
                    let mut da = ArrayD::zeros(self.nodes[p[0]].value.raw_dim());
                    let gv = as2(g);
                    da.view_mut()
                        .into_dimensionality::<Ix2>()
                        .unwrap()
                        .slice_mut(ndarray::s![.., *start..*end])
                        .assign(&gv);
                    self.accum(grads, p[0], da);
                }
            }
            Op::SoftmaxRows => {
                if want(0) {
                    let y = as2(&node.value);
                    let gv = as2(g);
                    let mut dx = Array2::<F>::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let yr = y.row(r);
                        let gr = gv.row(r);
                        let dot = yr.iter().zip(gr.iter()).fold(F::zero(), |a, (&yi, &gi)| a + yi * gi);
                        for c in 0..y.ncols() {
                            dx[(r, c)] = yr[c] * (gr[c] - dot);
                        }
                    }
                    self.accum(grads, p[0], dx.into_dyn());
                }
            }
            Op::ConcatCols { widths } => {
                let gv = as2(g);
                let mut off = 0;
                for (k, &wd) in widths.iter().enumerate() {
                    if want(k) {
                        let part = gv.slice(ndarray::s![.., off..off + wd]).to_owned();
                        self.accum(grads, p[k], part.into_dyn());
                    }
                    off += wd;
                }
            }
        }
    }
}

fn as2<F: Scalar>(a: &ArrayD<F>) -> ndarray::ArrayView2<'_, F> {
    a.view().into_dimensionality::<Ix2>().expect("expected 2-d array")
}

fn channel_stats<F: Scalar>(ch: &ndarray::ArrayView2<'_, F>) -> (F, F) {
    let m = F::from_f64(ch.len() as f64);
    let mu = ch.sum() / m;
    let mut var = F::zero();
    for v in ch.iter() {
        let d = *v - mu;
        var = var + d * d;
    }
    (mu, (var / m).sqrt())
}

pub fn sigmoid<F: Scalar>(x: F) -> F {
    let one = F::one();
    if x >= F::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

pub fn softplus_stable<F: Scalar>(x: F) -> F {
    let hi = F::from_f64(30.0);
    if x > hi {
        x
    } else if x < -hi {
        x.exp()
    } else {
        (F::one() + x.exp()).ln()
    }
}

mod conv {
    use super::Scalar;
    use ndarray::linalg::general_mat_mul;
    use ndarray::{Array2, Array4, ArrayView1, ArrayView4};

    /// im2col over the whole batch: x[N,Ci,H,W] -> cols[Ci*k*k, N*Ho*Wo],
    /// stride 1, zero padding. Batching lets one GEMM cover all samples,
    /// which matters for the small per-sample matrices of this model.
    fn im2col_batch<F: Scalar>(x: &ArrayView4<'_, F>, k: usize, pad: usize, cols: &mut Array2<F>) {
        let (n, ci, h, w) = x.dim();
        let ho = h + 2 * pad - k + 1;
        let wo = w + 2 * pad - k + 1;
        debug_assert_eq!(cols.dim(), (ci * k * k, n * ho * wo));
        cols.fill(F::zero());
        let xs = x.as_slice().expect("conv input must be standard layout");
        let cs = cols.as_slice_mut().expect("cols is freshly allocated");
        let row_len = n * ho * wo;
        for c in 0..ci {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let crow = &mut cs[row * row_len..(row + 1) * row_len];
                    // valid output column range for this kernel offset
                    let jo_lo = pad.saturating_sub(kj);
                    let jo_hi = (w + pad - kj).min(wo);
                    if jo_lo >= jo_hi {
                        continue;
                    }
                    let len = jo_hi - jo_lo;
                    for ni in 0..n {
                        let base = ni * ho * wo;
                        let xbase = (ni * ci + c) * h * w;
                        for io in 0..ho {
                            let src_i = (io + ki) as isize - pad as isize;
                            if src_i < 0 || src_i >= h as isize {
                                continue;
                            }
                            let src_j0 = jo_lo + kj - pad;
                            let xoff = xbase + src_i as usize * w + src_j0;
                            let coff = base + io * wo + jo_lo;
                            crow[coff..coff + len].copy_from_slice(&xs[xoff..xoff + len]);
                        }
                    }
                }
            }
        }
    }

    /// col2im over the whole batch: scatter-add of cols back onto the input.
    fn col2im_batch<F: Scalar>(cols: &Array2<F>, k: usize, pad: usize, dx: &mut Array4<F>) {
        let (n, ci, h, w) = dx.dim();
        let ho = h + 2 * pad - k + 1;
        let wo = w + 2 * pad - k + 1;
        let cs = cols.as_slice().expect("cols is standard layout");
        let ds = dx.as_slice_mut().expect("dx is freshly allocated");
        let row_len = n * ho * wo;
        for c in 0..ci {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let crow = &cs[row * row_len..(row + 1) * row_len];
                    let jo_lo = pad.saturating_sub(kj);
                    let jo_hi = (w + pad - kj).min(wo);
                    if jo_lo >= jo_hi {
                        continue;
                    }
                    let len = jo_hi - jo_lo;
                    for ni in 0..n {
                        let base = ni * ho * wo;
                        let dbase = (ni * ci + c) * h * w;
                        for io in 0..ho {
                            let src_i = (io + ki) as isize - pad as isize;
                            if src_i < 0 || src_i >= h as isize {
                                continue;
                            }
                            let src_j0 = jo_lo + kj - pad;
                            let doff = dbase + src_i as usize * w + src_j0;
                            let coff = base + io * wo + jo_lo;
                            for (d, &g) in
                                ds[doff..doff + len].iter_mut().zip(&crow[coff..coff + len])
                            {
                                *d = *d + g;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<F: Scalar>(
        x: &ArrayView4<'_, F>,
        w: &ArrayView4<'_, F>,
        b: &ArrayView1<'_, F>,
        pad: usize,
    ) -> Array4<F> {
        let (n, ci, h, wd) = x.dim();
        let (co, ciw, k, k2) = w.dim();
        assert_eq!(ci, ciw, "conv2d channel mismatch");
        assert_eq!(k, k2);
        assert_eq!(b.len(), co);
        let ho = h + 2 * pad - k + 1;
        let wo = wd + 2 * pad - k + 1;
        let wmat = w
            .to_shape((co, ci * k * k))
            .expect("conv weight reshape")
            .to_owned();
        let mut cols = Array2::<F>::zeros((ci * k * k, n * ho * wo));
        im2col_batch(x, k, pad, &mut cols);
        let mut y = Array2::<F>::zeros((co, n * ho * wo));
        general_mat_mul(F::one(), &wmat.view(), &cols.view(), F::zero(), &mut y);
        let mut out = Array4::<F>::zeros((n, co, ho, wo));
        let ys = y.as_slice().expect("gemm output is standard layout");
        let os = out.as_slice_mut().expect("out is freshly allocated");
        let plane = ho * wo;
        for ni in 0..n {
            for c in 0..co {
                let bias = b[c];
                let ybase = c * n * plane + ni * plane;
                let obase = (ni * co + c) * plane;
                for (o, &v) in os[obase..obase + plane].iter_mut().zip(&ys[ybase..ybase + plane])
                {
                    *o = v + bias;
                }
            }
        }
        out
    }

    /// gy[N,Co,Ho,Wo] -> gmat[Co, N*Ho*Wo]
    fn gy_as_mat<F: Scalar>(gy: &ArrayView4<'_, F>) -> Array2<F> {
        let (n, co, ho, wo) = gy.dim();
        let plane = ho * wo;
        let mut gmat = Array2::<F>::zeros((co, n * plane));
        let gys = gy.as_slice().expect("grad output must be standard layout");
        let gs = gmat.as_slice_mut().expect("gmat is freshly allocated");
        for ni in 0..n {
            for c in 0..co {
                let src = (ni * co + c) * plane;
                let dst = c * n * plane + ni * plane;
                gs[dst..dst + plane].copy_from_slice(&gys[src..src + plane]);
            }
        }
        gmat
    }

    pub fn backward_input<F: Scalar>(
        gy: &ArrayView4<'_, F>,
        w: &ArrayView4<'_, F>,
        h: usize,
        wd: usize,
        pad: usize,
    ) -> Array4<F> {
        let (n, co, ho, wo) = gy.dim();
        let (_, ci, k, _) = w.dim();
        let wmat = w.to_shape((co, ci * k * k)).unwrap().to_owned();
        let gmat = gy_as_mat(gy);
        let mut dcols = Array2::<F>::zeros((ci * k * k, n * ho * wo));
        general_mat_mul(F::one(), &wmat.t(), &gmat.view(), F::zero(), &mut dcols);
        let mut dx = Array4::<F>::zeros((n, ci, h, wd));
        col2im_batch(&dcols, k, pad, &mut dx);
        dx
    }

    pub fn backward_weight<F: Scalar>(
        gy: &ArrayView4<'_, F>,
        x: &ArrayView4<'_, F>,
        wdim: (usize, usize, usize, usize),
        pad: usize,
    ) -> Array4<F> {
        let (n, _, ho, wo) = gy.dim();
        let (co, ci, k, _) = wdim;
        let mut cols = Array2::<F>::zeros((ci * k * k, n * ho * wo));
        im2col_batch(x, k, pad, &mut cols);
        let gmat = gy_as_mat(gy);
        let mut dwmat = Array2::<F>::zeros((co, ci * k * k));
        general_mat_mul(F::one(), &gmat.view(), &cols.t(), F::zero(), &mut dwmat);
        dwmat.into_shape_with_order((co, ci, k, k)).unwrap()
    }
}
