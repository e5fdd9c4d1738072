//! Cross-modal similarity at three granularities for one (video, query) pair:
//! video-sentence (scalar), frame-sentence (vector over frames) and
//! patch-word (matrix over selected patches x words).

use std::rc::Rc;

use ndarray::{Array1, Array2};

use crate::diffmath::{AttentionParams, AttentionVars, ParamGroup, Tape, Var};
use crate::error::{Error, Result};

/// Similarities of one pair at every level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelSimilarities {
    pub s_vs: f64,
    /// length N
    pub c_fs: Array1<f64>,
    /// L_v x L_t; masked word columns hold 0.0.
    pub c_pw: Array2<f64>,
    pub word_mask: Vec<bool>,
}

/// Patch-word similarities with the word mask they were computed under.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchWordMatrix {
    /// L_v x L_t; masked columns hold 0.0.
    pub values: Array2<f64>,
    pub word_mask: Vec<bool>,
}

/// Temporal encoder on the tape: mean over rows of the attention block output.
pub fn temporal_encode_on(
    tape: &mut Tape,
    params: &AttentionParams,
    vars: &AttentionVars,
    frames: Var,
) -> Result<Var> {
    let h = params.apply(tape, vars, frames)?;
    Ok(tape.mean_rows(h))
}

/// Frame-sentence similarity on the tape, as a `1 x N` row.
pub fn frame_sentence_on(tape: &mut Tape, frames: Var, sentence: Var) -> Result<Var> {
    tape.cosine(sentence, frames, None)
}

/// Patch-word similarity on the tape, `L_v x L_t`.
pub fn patch_word_on(
    tape: &mut Tape,
    selected: Var,
    words: Var,
    word_mask: Rc<[bool]>,
) -> Result<Var> {
    tape.cosine(selected, words, Some(word_mask))
}

pub fn temporal_encode(frames: &Array2<f64>, params: &AttentionParams) -> Result<Array1<f64>> {
    if frames.nrows() == 0 {
        return Err(Error::data("temporal_encode needs at least one frame"));
    }
    if frames.dim() != params.pos.dim() {
        return Err(Error::data(format!(
            "temporal_encode: frames {:?} vs encoder configured for {:?}",
            frames.dim(),
            params.pos.dim()
        )));
    }
    let mut tape = Tape::new();
    let (vars, _) = params.bind(&mut tape);
    let f = tape.leaf(frames.clone());
    let v = temporal_encode_on(&mut tape, params, &vars, f)?;
    Ok(tape.value(v).row(0).to_owned())
}

pub fn video_sentence_score(v: &Array1<f64>, s: &Array1<f64>) -> Result<f64> {
    crate::diffmath::cosine(v.as_slice().expect("contiguous"), s.as_slice().expect("contiguous"))
}

pub fn frame_sentence_vector(frames: &Array2<f64>, s: &Array1<f64>) -> Result<Array1<f64>> {
    if frames.ncols() != s.len() {
        return Err(Error::data(format!(
            "frame_sentence_vector: frames have dim {}, sentence {}",
            frames.ncols(),
            s.len()
        )));
    }
    if let Some(n) = frames
        .rows()
        .into_iter()
        .position(|r| !(r.dot(&r) > 0.0))
    {
        return Err(Error::numeric(format!("frame row {n} has zero norm")));
    }
    if !(s.dot(s) > 0.0) {
        return Err(Error::numeric("sentence vector has zero norm"));
    }
    let mut tape = Tape::new();
    let f = tape.leaf(frames.clone());
    let sv = tape.row(s.as_slice().expect("contiguous"));
    let c = frame_sentence_on(&mut tape, f, sv)?;
    Ok(tape.value(c).row(0).to_owned())
}

pub fn patch_word_matrix(
    selected: &Array2<f64>,
    words: &Array2<f64>,
    valid_len: usize,
) -> Result<PatchWordMatrix> {
    if selected.nrows() == 0 {
        return Err(Error::data("patch_word_matrix needs at least one patch"));
    }
    if valid_len == 0 || valid_len > words.nrows() {
        return Err(Error::data(format!(
            "valid_len {valid_len} outside 1..={}",
            words.nrows()
        )));
    }
    let word_mask: Vec<bool> = (0..words.nrows()).map(|j| j < valid_len).collect();
    let mut tape = Tape::new();
    let p = tape.leaf(selected.clone());
    let w = tape.leaf(words.clone());
    let c = patch_word_on(&mut tape, p, w, Rc::from(word_mask.as_slice()))?;
    Ok(PatchWordMatrix {
        values: tape.value(c).clone(),
        word_mask,
    })
}
