//! Reverse-mode differentiation over a fixed set of matrix operations.
//!
//! Every value on the tape is an `f64` matrix; vectors are `1 x d` rows and
//! scalars are `1 x 1`. Nodes are appended in evaluation order, so a single
//! reverse sweep over the node list is a valid topological order.

use std::rc::Rc;

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Frozen Monte-Carlo state of a perturbed top-K selection.
///
/// Holds the base scores `u0`, the Gaussian draws `z_s` and the hard top-K
/// index lists of `u0 + sigma * z_s`. As a function of `u` the indicator is
///
/// ```text
/// ind(u)[m][k] = 1/n * sum_s [topk_s[k] == m] * (1 + z_s . (u - u0) / sigma)
/// ```
///
/// which equals the plain Monte-Carlo average at `u == u0` and whose
/// gradient there is the perturbed-maximum estimator `E[y z^T] / sigma`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenPerturbation {
    pub base: Vec<f64>,
    pub sigma: f64,
    pub k: usize,
    /// n_samples x M, row-major.
    pub z: Vec<f64>,
    /// n_samples x K, row-major; entry (s, k) is the index ranked k-th in sample s.
    pub topk: Vec<usize>,
}

impl FrozenPerturbation {
    pub fn n_samples(&self) -> usize {
        self.topk.len() / self.k
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    fn weight(&self, s: usize, u: &[f64]) -> f64 {
        let m = self.len();
        let z = &self.z[s * m..(s + 1) * m];
        let shift: f64 = z
            .iter()
            .zip(u.iter().zip(&self.base))
            .map(|(zi, (ui, bi))| zi * (ui - bi))
            .sum();
        1.0 + shift / self.sigma
    }

    /// M x K soft indicator evaluated at `u`.
    pub fn indicator(&self, u: &[f64]) -> Mat {
        let (m, k, n) = (self.len(), self.k, self.n_samples());
        let mut out = Mat::zeros((m, k));
        for s in 0..n {
            let w = self.weight(s, u) / n as f64;
            for (j, &idx) in self.topk[s * k..(s + 1) * k].iter().enumerate() {
                out[[idx, j]] += w;
            }
        }
        out
    }

    fn backward(&self, g: &Mat) -> Vec<f64> {
        let (m, k, n) = (self.len(), self.k, self.n_samples());
        let mut gu = vec![0.0; m];
        for s in 0..n {
            let picked: f64 = self.topk[s * k..(s + 1) * k]
                .iter()
                .enumerate()
                .map(|(j, &idx)| g[[idx, j]])
                .sum();
            let c = picked / (n as f64 * self.sigma);
            for (gi, zi) in gu.iter_mut().zip(&self.z[s * m..(s + 1) * m]) {
                *gi += c * zi;
            }
        }
        gu
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// n x d plus a broadcast 1 x d row.
    AddRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    /// x W^T + b with W: d_out x d_in and b: 1 x d_out.
    Linear { x: Var, w: Var, b: Var },
    /// Masked entries are exactly zero, so the backward pass needs no mask.
    SoftmaxRows { x: Var },
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Mat, inv_std: Vec<f64> },
    /// All-pairs cosine between the rows of `a` and the rows of `b`; masked rows
    /// of `b` yield a zero column and receive no gradient.
    Cosine { a: Var, b: Var, mask: Option<Rc<[bool]>>, na: Vec<f64>, nb: Vec<f64> },
    MeanRows(Var),
    /// Row-wise mean over unmasked columns; n x 1.
    MaskedMean { x: Var, mask: Option<Rc<[bool]>> },
    /// Row-wise dot product of two n x d matrices; n x 1.
    RowDot(Var, Var),
    Gather(Var, Rc<[usize]>),
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    Sum(Var),
    /// 1 x 1 parts laid out row-major into a rows x cols matrix.
    Assemble(Vec<Var>),
    /// -(1/B) sum_i log softmax(row i)[i]
    DiagXent(Var),
    PerturbedTopK { u: Var, frozen: Rc<FrozenPerturbation> },
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &str, a: &Mat, b: &Mat) -> Error {
    Error::data(format!(
        "{op}: incompatible shapes {:?} and {:?}",
        a.dim(),
        b.dim()
    ))
}

pub(crate) fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = c * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Numerically stable masked softmax of one row.
pub(crate) fn softmax_row(x: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>> {
    let on = |i: usize| mask.map_or(true, |m| m[i]);
    let max = (0..x.len())
        .filter(|&i| on(i))
        .map(|i| x[i])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::numeric("softmax over an all-masked row"));
    }
    if !max.is_finite() {
        return Err(Error::numeric("softmax over non-finite input"));
    }
    let mut out: Vec<f64> = (0..x.len())
        .map(|i| if on(i) { (x[i] - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    Ok(out)
}

fn add_into(slot: &mut Option<Mat>, g: &Mat) {
    match slot {
        Some(acc) => *acc += g,
        None => *slot = Some(g.clone()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Value of a 1 x 1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn row(&mut self, values: &[f64]) -> Var {
        self.leaf(Mat::from_shape_vec((1, values.len()), values.to_vec()).expect("row"))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(shape_err("add", va, vb));
        }
        let v = va + vb;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(shape_err("sub", va, vb));
        }
        let v = va - vb;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(shape_err("mul", va, vb));
        }
        let v = va * vb;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (vx, vr) = (self.value(x), self.value(row));
        if vr.nrows() != 1 || vr.ncols() != vx.ncols() {
            return Err(shape_err("add_row", vx, vr));
        }
        let v = vx + vr;
        Ok(self.push(v, Op::AddRow(x, row)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(shape_err("matmul", va, vb));
        }
        let v = va.dot(vb);
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        if vx.ncols() != vw.ncols() {
            return Err(shape_err("linear", vx, vw));
        }
        if vb.dim() != (1, vw.nrows()) {
            return Err(shape_err("linear bias", vw, vb));
        }
        let v = vx.dot(&vw.t()) + vb;
        Ok(self.push(v, Op::Linear { x, w, b }))
    }

    pub fn softmax_rows(&mut self, x: Var, mask: Option<Rc<[bool]>>) -> Result<Var> {
        let vx = self.value(x);
        if let Some(m) = &mask {
            if m.len() != vx.ncols() {
                return Err(Error::data(format!(
                    "softmax mask length {} != row length {}",
                    m.len(),
                    vx.ncols()
                )));
            }
        }
        let mut out = Mat::zeros(vx.dim());
        for (i, row) in vx.rows().into_iter().enumerate() {
            let r = softmax_row(&row.to_vec(), mask.as_deref())?;
            out.row_mut(i).assign(&ndarray::ArrayView1::from(&r));
        }
        Ok(self.push(out, Op::SoftmaxRows { x }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(gelu);
        self.push(v, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = vx.ncols();
        if vg.dim() != (1, d) || vb.dim() != (1, d) {
            return Err(shape_err("layer_norm", vx, vg));
        }
        let mut xhat = Mat::zeros(vx.dim());
        let mut inv_std = Vec::with_capacity(vx.nrows());
        for (i, row) in vx.rows().into_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                xhat[[i, j]] = (v - mean) * is;
            }
        }
        let v = &xhat * vg + vb;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// All-pairs row cosine, `a: p x C`, `b: q x C` -> `p x q`.
    pub fn cosine(&mut self, a: Var, b: Var, mask: Option<Rc<[bool]>>) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.ncols() {
            return Err(shape_err("cosine", va, vb));
        }
        if let Some(m) = &mask {
            if m.len() != vb.nrows() {
                return Err(Error::data(format!(
                    "cosine mask length {} != {} rows",
                    m.len(),
                    vb.nrows()
                )));
            }
        }
        let on = |j: usize| mask.as_ref().map_or(true, |m| m[j]);
        let norm = |r: ndarray::ArrayView1<f64>| r.dot(&r).sqrt();
        let na: Vec<f64> = va.rows().into_iter().map(norm).collect();
        let nb: Vec<f64> = vb
            .rows()
            .into_iter()
            .enumerate()
            .map(|(j, r)| if on(j) { norm(r) } else { 0.0 })
            .collect();
        if let Some(i) = na.iter().position(|&n| !(n > 0.0)) {
            return Err(Error::numeric(format!("cosine: zero-norm row {i} on the left")));
        }
        if let Some(j) = (0..nb.len()).find(|&j| on(j) && !(nb[j] > 0.0)) {
            return Err(Error::numeric(format!("cosine: zero-norm row {j} on the right")));
        }
        let mut out = va.dot(&vb.t());
        for i in 0..out.nrows() {
            for j in 0..out.ncols() {
                out[[i, j]] = if on(j) { out[[i, j]] / (na[i] * nb[j]) } else { 0.0 };
            }
        }
        Ok(self.push(out, Op::Cosine { a, b, mask, na, nb }))
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = self.value(x).mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        self.push(v, Op::MeanRows(x))
    }

    pub fn masked_mean(&mut self, x: Var, mask: Option<Rc<[bool]>>) -> Result<Var> {
        let vx = self.value(x);
        let cnt = match &mask {
            Some(m) => {
                if m.len() != vx.ncols() {
                    return Err(Error::data("masked_mean: mask length mismatch"));
                }
                m.iter().filter(|&&b| b).count()
            }
            None => vx.ncols(),
        };
        if cnt == 0 {
            return Err(Error::numeric("mean over an all-masked row"));
        }
        let mut out = Mat::zeros((vx.nrows(), 1));
        for (i, row) in vx.rows().into_iter().enumerate() {
            let s: f64 = row
                .iter()
                .enumerate()
                .filter(|(j, _)| mask.as_ref().map_or(true, |m| m[*j]))
                .map(|(_, v)| v)
                .sum();
            out[[i, 0]] = s / cnt as f64;
        }
        Ok(self.push(out, Op::MaskedMean { x, mask }))
    }

    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(shape_err("row_dot", va, vb));
        }
        let v = (va * vb).sum_axis(Axis(1)).insert_axis(Axis(1));
        Ok(self.push(v, Op::RowDot(a, b)))
    }

    /// Row gather; indices may repeat.
    pub fn gather(&mut self, x: Var, idx: impl Into<Rc<[usize]>>) -> Result<Var> {
        let idx: Rc<[usize]> = idx.into();
        let vx = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= vx.nrows()) {
            return Err(Error::data(format!(
                "gather index {bad} out of range for {} rows",
                vx.nrows()
            )));
        }
        let v = vx.select(Axis(0), &idx);
        Ok(self.push(v, Op::Gather(x, idx)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::data(format!("concat_rows: {e}")))?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .map_err(|e| Error::data(format!("concat_cols: {e}")))?;
        Ok(self.push(v, Op::ConcatCols(a, b)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    /// Lays out 1 x 1 nodes row-major into a `rows x cols` matrix.
    pub fn assemble(&mut self, parts: &[Var], rows: usize, cols: usize) -> Result<Var> {
        if parts.len() != rows * cols {
            return Err(Error::data(format!(
                "assemble: {} parts for a {rows}x{cols} matrix",
                parts.len()
            )));
        }
        let mut v = Mat::zeros((rows, cols));
        for (k, &p) in parts.iter().enumerate() {
            let pv = self.value(p);
            if pv.dim() != (1, 1) {
                return Err(Error::data("assemble: parts must be 1x1"));
            }
            v[[k / cols, k % cols]] = pv[[0, 0]];
        }
        Ok(self.push(v, Op::Assemble(parts.to_vec())))
    }

    /// Mean cross-entropy of each row against its diagonal entry.
    pub fn diag_xent(&mut self, r: Var) -> Result<Var> {
        let vr = self.value(r);
        let b = vr.nrows();
        if b == 0 || vr.ncols() != b {
            return Err(Error::data(format!(
                "diag_xent needs a non-empty square matrix, got {:?}",
                vr.dim()
            )));
        }
        if vr.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("contrastive loss over non-finite scores"));
        }
        let mut loss = 0.0;
        for (i, row) in vr.rows().into_iter().enumerate() {
            let max = row.fold(f64::NEG_INFINITY, |a, &x| a.max(x));
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[i];
        }
        let v = Mat::from_elem((1, 1), loss / b as f64);
        Ok(self.push(v, Op::DiagXent(r)))
    }

    /// Soft top-K indicator (M x K) of a length-M score vector under frozen perturbations.
    pub fn perturbed_topk(&mut self, u: Var, frozen: Rc<FrozenPerturbation>) -> Result<Var> {
        let vu = self.value(u);
        if vu.len() != frozen.len() {
            return Err(Error::data(format!(
                "perturbed_topk: {} scores for a {}-entry perturbation",
                vu.len(),
                frozen.len()
            )));
        }
        let flat: Vec<f64> = vu.iter().copied().collect();
        let v = frozen.indicator(&flat);
        Ok(self.push(v, Op::PerturbedTopK { u, frozen }))
    }

    /// Gradients of the 1 x 1 node `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).dim() != (1, 1) {
            return Err(Error::data("backward needs a scalar output"));
        }
        let mut grads: Vec<Option<Mat>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(Mat::ones((1, 1)));
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::numeric(format!("non-finite gradient at node {i}")));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_into(&mut grads[a.0], g);
                add_into(&mut grads[b.0], g);
            }
            Op::Sub(a, b) => {
                add_into(&mut grads[a.0], g);
                add_into(&mut grads[b.0], &(-g));
            }
            Op::Mul(a, b) => {
                add_into(&mut grads[a.0], &(g * val(*b)));
                add_into(&mut grads[b.0], &(g * val(*a)));
            }
            Op::Scale(a, c) => add_into(&mut grads[a.0], &(g * *c)),
            Op::AddRow(x, r) => {
                add_into(&mut grads[x.0], g);
                add_into(&mut grads[r.0], &g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MatMul(a, b) => {
                add_into(&mut grads[a.0], &g.dot(&val(*b).t()));
                add_into(&mut grads[b.0], &val(*a).t().dot(g));
            }
            Op::Transpose(a) => add_into(&mut grads[a.0], &g.t().to_owned()),
            Op::Linear { x, w, b } => {
                add_into(&mut grads[x.0], &g.dot(val(*w)));
                add_into(&mut grads[w.0], &g.t().dot(val(*x)));
                add_into(&mut grads[b.0], &g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::SoftmaxRows { x, .. } => {
                // dx = y * (g - <g, y>); masked entries have y = 0.
                let y = &node.value;
                let dot = (g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                add_into(&mut grads[x.0], &(y * &(g - &dot)));
            }
            Op::Gelu(x) => add_into(&mut grads[x.0], &(g * &val(*x).mapv(gelu_grad))),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                add_into(&mut grads[gamma.0], &(g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                add_into(&mut grads[beta.0], &g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                let gh = g * val(*gamma);
                let d = xhat.ncols() as f64;
                let mut gx = Mat::zeros(xhat.dim());
                for i in 0..xhat.nrows() {
                    let ghr = gh.row(i);
                    let xr = xhat.row(i);
                    let mean_g = ghr.sum() / d;
                    let mean_gx = ghr.dot(&xr) / d;
                    for j in 0..xhat.ncols() {
                        gx[[i, j]] = inv_std[i] * (ghr[j] - mean_g - xr[j] * mean_gx);
                    }
                }
                add_into(&mut grads[x.0], &gx);
            }
            Op::Cosine { a, b, mask, na, nb } => {
                let (va, vb) = (val(*a), val(*b));
                let cos = &node.value;
                let on = |j: usize| mask.as_ref().map_or(true, |m| m[j]);
                let mut ga = Mat::zeros(va.dim());
                let mut gb = Mat::zeros(vb.dim());
                for i in 0..va.nrows() {
                    for j in 0..vb.nrows() {
                        if !on(j) {
                            continue;
                        }
                        let gij = g[[i, j]];
                        if gij == 0.0 {
                            continue;
                        }
                        let c = cos[[i, j]];
                        let inv = 1.0 / (na[i] * nb[j]);
                        let ca = c / (na[i] * na[i]);
                        let cb = c / (nb[j] * nb[j]);
                        for k in 0..va.ncols() {
                            ga[[i, k]] += gij * (vb[[j, k]] * inv - va[[i, k]] * ca);
                            gb[[j, k]] += gij * (va[[i, k]] * inv - vb[[j, k]] * cb);
                        }
                    }
                }
                add_into(&mut grads[a.0], &ga);
                add_into(&mut grads[b.0], &gb);
            }
            Op::MeanRows(x) => {
                let n = val(*x).nrows();
                let gx = Mat::from_shape_fn(val(*x).dim(), |(_, j)| g[[0, j]] / n as f64);
                add_into(&mut grads[x.0], &gx);
            }
            Op::MaskedMean { x, mask } => {
                let vx = val(*x);
                let cnt = mask
                    .as_ref()
                    .map_or(vx.ncols(), |m| m.iter().filter(|&&b| b).count());
                let gx = Mat::from_shape_fn(vx.dim(), |(i, j)| {
                    if mask.as_ref().map_or(true, |m| m[j]) {
                        g[[i, 0]] / cnt as f64
                    } else {
                        0.0
                    }
                });
                add_into(&mut grads[x.0], &gx);
            }
            Op::RowDot(a, b) => {
                add_into(&mut grads[a.0], &(val(*b) * g));
                add_into(&mut grads[b.0], &(val(*a) * g));
            }
            Op::Gather(x, idx) => {
                let mut gx = Mat::zeros(val(*x).dim());
                for (r, &src) in idx.iter().enumerate() {
                    let mut row = gx.row_mut(src);
                    row += &g.row(r);
                }
                add_into(&mut grads[x.0], &gx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = val(*p).nrows();
                    add_into(&mut grads[p.0], &g.slice(s![off..off + n, ..]).to_owned());
                    off += n;
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = val(*a).ncols();
                add_into(&mut grads[a.0], &g.slice(s![.., ..ca]).to_owned());
                add_into(&mut grads[b.0], &g.slice(s![.., ca..]).to_owned());
            }
            Op::Sum(x) => {
                let gx = Mat::from_elem(val(*x).dim(), g[[0, 0]]);
                add_into(&mut grads[x.0], &gx);
            }
            Op::Assemble(parts) => {
                let cols = node.value.ncols();
                for (k, p) in parts.iter().enumerate() {
                    add_into(&mut grads[p.0], &Mat::from_elem((1, 1), g[[k / cols, k % cols]]));
                }
            }
            Op::DiagXent(r) => {
                let vr = val(*r);
                let b = vr.nrows() as f64;
                let mut gr = Mat::zeros(vr.dim());
                for (i, row) in vr.rows().into_iter().enumerate() {
                    let p = softmax_row(&row.to_vec(), None).expect("finite checked on forward");
                    for (j, pj) in p.iter().enumerate() {
                        gr[[i, j]] = g[[0, 0]] * (pj - if i == j { 1.0 } else { 0.0 }) / b;
                    }
                }
                add_into(&mut grads[r.0], &gr);
            }
            Op::PerturbedTopK { u, frozen } => {
                let gu = frozen.backward(g);
                let shape = val(*u).dim();
                add_into(
                    &mut grads[u.0],
                    &Mat::from_shape_vec(shape, gu).expect("same length"),
                );
            }
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`, zero-filled to `shape` when absent.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(shape))
    }
}
