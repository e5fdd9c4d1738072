//! Interactive similarity aggregation.
//!
//! ISA turns a similarity vector `c` into a score
//! `softmax(T(softmax(c))) . c`, where `T` is a square linear layer over the
//! vector's axis. Bi-ISA aggregates a patch-word matrix in both orders
//! (patches first, then words; and words first, then patches) and sums the
//! two results.

use std::rc::Rc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diffmath::{AffineParams, AffineVars, Mat, ParamGroup, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct IsaParams {
    pub linear: AffineParams,
}

impl IsaParams {
    /// Identity weight, zero bias.
    pub fn identity(d: usize) -> Self {
        IsaParams {
            linear: AffineParams::identity(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.linear.d_in()
    }
}

impl ParamGroup for IsaParams {
    type Vars = AffineVars;

    fn tensors(&self) -> Vec<(String, &Mat)> {
        self.linear.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
        self.linear.tensors_mut()
    }

    fn vars_from(&self, leaves: &mut dyn Iterator<Item = Var>) -> AffineVars {
        self.linear.vars_from(leaves)
    }
}

/// Aggregation used at the frame-sentence and patch-word levels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    #[default]
    Isa,
    /// `softmax(c) . c`
    Softmax,
    Mean,
}

impl std::str::FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "isa" => Ok(Aggregator::Isa),
            "softmax" => Ok(Aggregator::Softmax),
            "mean" => Ok(Aggregator::Mean),
            other => Err(Error::data(format!(
                "unknown aggregator '{other}' (isa|softmax|mean)"
            ))),
        }
    }
}

/// Which axis of a matrix an aggregation collapses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceAxis {
    /// Collapse rows: one score per column.
    Rows,
    /// Collapse columns: one score per row.
    Cols,
}

/// ISA of every row of `x` (`r x d`) on the tape; returns `r x 1`.
pub fn isa_rows_on(
    tape: &mut Tape,
    x: Var,
    vars: AffineVars,
    mask: Option<Rc<[bool]>>,
) -> Result<Var> {
    let relevance = tape.softmax_rows(x, mask.clone())?;
    let mixed = tape.linear(relevance, vars.weight, vars.bias)?;
    let weights = tape.softmax_rows(mixed, mask)?;
    tape.row_dot(weights, x)
}

/// Baseline aggregation of every row of `x` on the tape; returns `r x 1`.
pub fn baseline_rows_on(
    tape: &mut Tape,
    x: Var,
    mode: Aggregator,
    mask: Option<Rc<[bool]>>,
) -> Result<Var> {
    match mode {
        Aggregator::Mean => tape.masked_mean(x, mask),
        Aggregator::Softmax => {
            let w = tape.softmax_rows(x, mask)?;
            tape.row_dot(w, x)
        }
        Aggregator::Isa => Err(Error::data("ISA is not a baseline aggregator")),
    }
}

/// Row-wise aggregation with any [`Aggregator`]; returns `r x 1`.
pub fn aggregate_rows_on(
    tape: &mut Tape,
    x: Var,
    mode: Aggregator,
    vars: AffineVars,
    mask: Option<Rc<[bool]>>,
) -> Result<Var> {
    match mode {
        Aggregator::Isa => isa_rows_on(tape, x, vars, mask),
        _ => baseline_rows_on(tape, x, mode, mask),
    }
}

/// Two-order aggregation of a patch-word matrix (`L_v x L_t`); returns `1 x 1`.
pub fn bi_aggregate_on(
    tape: &mut Tape,
    c_pw: Var,
    word_mask: Option<Rc<[bool]>>,
    mode: Aggregator,
    patch_vars: AffineVars,
    word_vars: AffineVars,
) -> Result<Var> {
    // patches first: one score per word, then aggregate over words
    let ct = tape.transpose(c_pw);
    let per_word = aggregate_rows_on(tape, ct, mode, patch_vars, None)?;
    let per_word = tape.transpose(per_word);
    let patch_then_word = aggregate_rows_on(tape, per_word, mode, word_vars, word_mask.clone())?;

    // words first: one score per patch, then aggregate over patches
    let per_patch = aggregate_rows_on(tape, c_pw, mode, word_vars, word_mask)?;
    let per_patch = tape.transpose(per_patch);
    let word_then_patch = aggregate_rows_on(tape, per_patch, mode, patch_vars, None)?;

    tape.add(patch_then_word, word_then_patch)
}

/// Bi-ISA of a patch-word matrix (`L_v x L_t`) on the tape; returns `1 x 1`.
pub fn bi_isa_on(
    tape: &mut Tape,
    c_pw: Var,
    word_mask: Option<Rc<[bool]>>,
    patch_vars: AffineVars,
    word_vars: AffineVars,
) -> Result<Var> {
    bi_aggregate_on(tape, c_pw, word_mask, Aggregator::Isa, patch_vars, word_vars)
}

fn check_mask(mask: Option<&[bool]>, d: usize) -> Result<()> {
    if let Some(m) = mask {
        if m.len() != d {
            return Err(Error::data(format!("mask length {} != {d}", m.len())));
        }
        if !m.iter().any(|&b| b) {
            return Err(Error::numeric("aggregation over an all-masked vector"));
        }
    }
    Ok(())
}

fn check_dim(params: &IsaParams, d: usize, what: &str) -> Result<()> {
    if params.linear.weight.dim() != (d, d) || params.linear.bias.dim() != (1, d) {
        return Err(Error::data(format!(
            "{what}: ISA layer of size {:?} applied to an axis of length {d}",
            params.linear.weight.dim()
        )));
    }
    Ok(())
}

pub fn isa_aggregate(c: &[f64], params: &IsaParams, mask: Option<&[bool]>) -> Result<f64> {
    if c.is_empty() {
        return Err(Error::data("ISA over an empty vector"));
    }
    check_dim(params, c.len(), "isa_aggregate")?;
    check_mask(mask, c.len())?;
    let mut tape = Tape::new();
    let (vars, _) = params.bind(&mut tape);
    let x = tape.row(c);
    let s = isa_rows_on(&mut tape, x, vars, mask.map(Rc::from))?;
    Ok(tape.scalar(s))
}

/// ISA over every slice along `axis`. `col_mask` flags valid columns; when
/// collapsing rows, masked columns produce a 0.0 placeholder entry, and when
/// collapsing columns, masked entries are excluded from each row's weights.
pub fn isa_over_axis(
    c: &Array2<f64>,
    col_mask: Option<&[bool]>,
    axis: ReduceAxis,
    params: &IsaParams,
) -> Result<Vec<f64>> {
    if let Some(m) = col_mask {
        if m.len() != c.ncols() {
            return Err(Error::data(format!(
                "mask length {} != {} columns",
                m.len(),
                c.ncols()
            )));
        }
    }
    let mut tape = Tape::new();
    let (vars, _) = params.bind(&mut tape);
    let out = match axis {
        ReduceAxis::Rows => {
            check_dim(params, c.nrows(), "isa_over_axis")?;
            let x = tape.leaf(c.t().to_owned());
            let s = isa_rows_on(&mut tape, x, vars, None)?;
            let mut v: Vec<f64> = tape.value(s).column(0).to_vec();
            if let Some(m) = col_mask {
                for (j, keep) in m.iter().enumerate() {
                    if !keep {
                        v[j] = 0.0;
                    }
                }
            }
            v
        }
        ReduceAxis::Cols => {
            check_dim(params, c.ncols(), "isa_over_axis")?;
            check_mask(col_mask, c.ncols())?;
            let x = tape.leaf(c.clone());
            let s = isa_rows_on(&mut tape, x, vars, col_mask.map(Rc::from))?;
            tape.value(s).column(0).to_vec()
        }
    };
    Ok(out)
}

pub fn bi_isa(
    c_pw: &Array2<f64>,
    word_mask: Option<&[bool]>,
    patch_params: &IsaParams,
    word_params: &IsaParams,
) -> Result<f64> {
    check_dim(patch_params, c_pw.nrows(), "bi_isa patch axis")?;
    check_dim(word_params, c_pw.ncols(), "bi_isa word axis")?;
    check_mask(word_mask, c_pw.ncols())?;
    let mut tape = Tape::new();
    let (pv, _) = patch_params.bind(&mut tape);
    let (wv, _) = word_params.bind(&mut tape);
    let x = tape.leaf(c_pw.clone());
    let s = bi_isa_on(&mut tape, x, word_mask.map(Rc::from), pv, wv)?;
    Ok(tape.scalar(s))
}

pub fn aggregate_baseline(c: &[f64], mode: Aggregator, mask: Option<&[bool]>) -> Result<f64> {
    if c.is_empty() {
        return Err(Error::data("aggregation over an empty vector"));
    }
    check_mask(mask, c.len())?;
    let mut tape = Tape::new();
    let x = tape.row(c);
    let s = baseline_rows_on(&mut tape, x, mode, mask.map(Rc::from))?;
    Ok(tape.scalar(s))
}
