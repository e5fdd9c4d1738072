//! Differentiable primitives and the gradient tape that backs training.
//!
//! The free functions here (`softmax`, `cosine`, `affine`, `attention_block`)
//! are single-shot evaluations of the same kernels the tape records, so
//! there is one implementation of each forward computation.

mod tape;

use std::rc::Rc;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

pub use tape::{FrozenPerturbation, Gradients, Mat, Tape, Var};

use crate::error::{Error, Result};

#[allow(unused_imports)]
pub(crate) use tape::{gelu, softmax_row};

/// A group of trainable matrices with a stable, named visiting order.
pub trait ParamGroup {
    type Vars;

    /// Named tensors in binding order.
    fn tensors(&self) -> Vec<(String, &Mat)>;

    fn tensors_mut(&mut self) -> Vec<(String, &mut Mat)>;

    /// Builds the variable handles from leaves produced in `tensors()` order.
    fn vars_from(&self, leaves: &mut dyn Iterator<Item = Var>) -> Self::Vars;

    /// Records every tensor as a tape leaf; returns the handles and the flat leaf list.
    fn bind(&self, tape: &mut Tape) -> (Self::Vars, Vec<Var>) {
        let leaves: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect();
        let vars = self.vars_from(&mut leaves.iter().copied());
        (vars, leaves)
    }
}

pub(crate) fn prefixed<T>(prefix: &str, items: Vec<(String, T)>) -> Vec<(String, T)> {
    items
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

/// `y = W x + b`; `weight` is `d_out x d_in`, `bias` is a `1 x d_out` row.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineParams {
    pub weight: Mat,
    pub bias: Mat,
}

#[derive(Clone, Copy, Debug)]
pub struct AffineVars {
    pub weight: Var,
    pub bias: Var,
}

impl AffineParams {
    pub fn zeros(d_out: usize, d_in: usize) -> Self {
        AffineParams {
            weight: Mat::zeros((d_out, d_in)),
            bias: Mat::zeros((1, d_out)),
        }
    }

    pub fn identity(d: usize) -> Self {
        AffineParams {
            weight: Mat::eye(d),
            bias: Mat::zeros((1, d)),
        }
    }

    /// Gaussian weights with std `1/sqrt(d_in)`, zero bias.
    pub fn random(d_out: usize, d_in: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (d_in as f64).sqrt();
        AffineParams {
            weight: Mat::from_shape_fn((d_out, d_in), |_| {
                scale * rng.sample::<f64, _>(StandardNormal)
            }),
            bias: Mat::zeros((1, d_out)),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.nrows()
    }

    pub fn apply(&self, tape: &mut Tape, vars: AffineVars, x: Var) -> Result<Var> {
        debug_assert_eq!(tape.value(vars.weight).dim(), self.weight.dim());
        tape.linear(x, vars.weight, vars.bias)
    }
}

impl ParamGroup for AffineParams {
    type Vars = AffineVars;

    fn tensors(&self) -> Vec<(String, &Mat)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
        vec![
            ("weight".into(), &mut self.weight),
            ("bias".into(), &mut self.bias),
        ]
    }

    fn vars_from(&self, leaves: &mut dyn Iterator<Item = Var>) -> AffineVars {
        AffineVars {
            weight: leaves.next().expect("weight leaf"),
            bias: leaves.next().expect("bias leaf"),
        }
    }
}

/// Single-head residual self-attention over frame rows:
/// `X + Wo * Attn(LN(X + P)) + bo`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    /// Learned positional embedding, `N x C`.
    pub pos: Mat,
    pub ln_gamma: Mat,
    pub ln_beta: Mat,
    pub query: AffineParams,
    pub key: AffineParams,
    pub value: AffineParams,
    pub out: AffineParams,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub pos: Var,
    pub ln_gamma: Var,
    pub ln_beta: Var,
    pub query: AffineVars,
    pub key: AffineVars,
    pub value: AffineVars,
    pub out: AffineVars,
}

impl AttentionParams {
    /// Everything zero except the layer-norm gain; the block is then the identity map.
    pub fn zero_init(n: usize, c: usize) -> Self {
        AttentionParams {
            pos: Mat::zeros((n, c)),
            ln_gamma: Mat::ones((1, c)),
            ln_beta: Mat::zeros((1, c)),
            query: AffineParams::zeros(c, c),
            key: AffineParams::zeros(c, c),
            value: AffineParams::zeros(c, c),
            out: AffineParams::zeros(c, c),
        }
    }

    pub fn random(n: usize, c: usize, rng: &mut impl Rng) -> Self {
        let mut small = |r: usize, cc: usize, s: f64| {
            Mat::from_shape_fn((r, cc), |_| s * rng.sample::<f64, _>(StandardNormal))
        };
        let pos = small(n, c, 0.1);
        let ln_gamma = small(1, c, 0.1) + 1.0;
        let ln_beta = small(1, c, 0.1);
        let mut aff = || {
            let mut a = AffineParams::random(c, c, rng);
            a.bias = Mat::from_shape_fn((1, c), |_| 0.1 * rng.sample::<f64, _>(StandardNormal));
            a
        };
        AttentionParams {
            pos,
            ln_gamma,
            ln_beta,
            query: aff(),
            key: aff(),
            value: aff(),
            out: aff(),
        }
    }

    pub fn frames(&self) -> usize {
        self.pos.nrows()
    }

    pub fn dim(&self) -> usize {
        self.pos.ncols()
    }

    pub fn apply(&self, tape: &mut Tape, vars: &AttentionVars, x: Var) -> Result<Var> {
        let c = self.dim();
        let xp = tape.add(x, vars.pos)?;
        let h = tape.layer_norm(xp, vars.ln_gamma, vars.ln_beta)?;
        let q = self.query.apply(tape, vars.query, h)?;
        let k = self.key.apply(tape, vars.key, h)?;
        let v = self.value.apply(tape, vars.value, h)?;
        let kt = tape.transpose(k);
        let logits = tape.matmul(q, kt)?;
        let logits = tape.scale(logits, 1.0 / (c as f64).sqrt());
        let attn = tape.softmax_rows(logits, None)?;
        let mixed = tape.matmul(attn, v)?;
        let o = self.out.apply(tape, vars.out, mixed)?;
        tape.add(x, o)
    }
}

impl ParamGroup for AttentionParams {
    type Vars = AttentionVars;

    fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut t = vec![
            ("pos".to_string(), &self.pos),
            ("ln_gamma".to_string(), &self.ln_gamma),
            ("ln_beta".to_string(), &self.ln_beta),
        ];
        t.extend(prefixed("query", self.query.tensors()));
        t.extend(prefixed("key", self.key.tensors()));
        t.extend(prefixed("value", self.value.tensors()));
        t.extend(prefixed("out", self.out.tensors()));
        t
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut t = vec![
            ("pos".to_string(), &mut self.pos),
            ("ln_gamma".to_string(), &mut self.ln_gamma),
            ("ln_beta".to_string(), &mut self.ln_beta),
        ];
        t.extend(prefixed("query", self.query.tensors_mut()));
        t.extend(prefixed("key", self.key.tensors_mut()));
        t.extend(prefixed("value", self.value.tensors_mut()));
        t.extend(prefixed("out", self.out.tensors_mut()));
        t
    }

    fn vars_from(&self, leaves: &mut dyn Iterator<Item = Var>) -> AttentionVars {
        AttentionVars {
            pos: leaves.next().expect("pos"),
            ln_gamma: leaves.next().expect("ln_gamma"),
            ln_beta: leaves.next().expect("ln_beta"),
            query: self.query.vars_from(leaves),
            key: self.key.vars_from(leaves),
            value: self.value.vars_from(leaves),
            out: self.out.vars_from(leaves),
        }
    }
}

pub fn mask_rc(mask: Option<&[bool]>) -> Option<Rc<[bool]>> {
    mask.map(Rc::from)
}

/// Masked, max-shifted softmax. Masked entries are exactly zero.
pub fn softmax(x: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>> {
    if let Some(m) = mask {
        if m.len() != x.len() {
            return Err(Error::data(format!(
                "softmax mask length {} != {}",
                m.len(),
                x.len()
            )));
        }
    }
    softmax_row(x, mask)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::data(format!(
            "cosine: lengths {} and {} differ",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(na > 0.0) || !(nb > 0.0) {
        return Err(Error::numeric("cosine of a zero-norm vector"));
    }
    Ok(dot / (na * nb))
}

pub fn affine(x: &[f64], p: &AffineParams) -> Result<Vec<f64>> {
    if x.len() != p.d_in() {
        return Err(Error::data(format!(
            "affine: input length {} != d_in {}",
            x.len(),
            p.d_in()
        )));
    }
    let xv = Array1::from(x.to_vec());
    Ok((p.weight.dot(&xv) + p.bias.row(0)).to_vec())
}

pub fn attention_block(x: &Array2<f64>, p: &AttentionParams) -> Result<Array2<f64>> {
    if x.dim() != p.pos.dim() {
        return Err(Error::data(format!(
            "attention_block: input {:?} vs configured {:?}",
            x.dim(),
            p.pos.dim()
        )));
    }
    let mut tape = Tape::new();
    let (vars, _) = p.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let y = p.apply(&mut tape, &vars, xv)?;
    Ok(tape.value(y).clone())
}

/// Largest `|analytic - central difference| / max(1, |central difference|)`
/// over every coordinate of every input.
///
/// `f` must build a scalar on the tape from leaves holding `inputs`.
pub fn grad_check<F>(f: F, inputs: &[Mat], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Mat]| -> Result<f64> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = vals.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = f(&mut tape, &leaves)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = f(&mut tape, &leaves)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Mat> = inputs.to_vec();
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get_or_zeros(*leaf, inputs[k].dim());
        if analytic.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite gradient for input {k}")));
        }
        let shape = inputs[k].dim();
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = inputs[k][[r, c]];
                work[k][[r, c]] = orig + eps;
                let fp = eval(&work)?;
                work[k][[r, c]] = orig - eps;
                let fm = eval(&work)?;
                work[k][[r, c]] = orig;
                let fd = (fp - fm) / (2.0 * eps);
                if !fd.is_finite() {
                    return Err(Error::numeric(format!(
                        "non-finite finite difference at input {k} ({r}, {c})"
                    )));
                }
                let err = (analytic[[r, c]] - fd).abs() / fd.abs().max(1.0);
                worst = worst.max(err);
            }
        }
    }
    Ok(worst)
}
