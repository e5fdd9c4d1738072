//! Retrieval metrics in both directions.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Each query ranks the videos.
    #[default]
    #[serde(rename = "t2v")]
    TextToVideo,
    /// Each video ranks the queries.
    #[serde(rename = "v2t")]
    VideoToText,
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t2v" => Ok(Direction::TextToVideo),
            "v2t" => Ok(Direction::VideoToText),
            other => Err(Error::data(format!("unknown direction '{other}' (t2v|v2t)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: u32,
    pub direction: Direction,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub mdr: usize,
    pub mnr: f64,
    pub n_queries: usize,
}

/// 1-based rank of `scores[gt]`: strictly larger scores count, and so do
/// equal scores at lower indices.
pub fn rank_of(scores: &[f64], gt: usize) -> Result<usize> {
    if gt >= scores.len() {
        return Err(Error::data(format!(
            "ground-truth index {gt} outside {} candidates",
            scores.len()
        )));
    }
    if let Some((k, v)) = scores.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::numeric(format!("non-finite score {v} at candidate {k}")));
    }
    let target = scores[gt];
    let above = scores
        .iter()
        .enumerate()
        .filter(|&(k, &s)| s > target || (s == target && k < gt))
        .count();
    Ok(1 + above)
}

/// Rank of the ground truth for every query (t2v) or every video (v2t).
///
/// `r` is videos x queries and `gt[j]` is the video of query j. In v2t a
/// video's rank is the best rank among its captions.
pub fn ranks(r: &Array2<f64>, gt: &[usize], direction: Direction) -> Result<Vec<usize>> {
    let (g, h) = r.dim();
    if gt.len() != h {
        return Err(Error::data(format!(
            "{} ground-truth entries for {h} queries",
            gt.len()
        )));
    }
    if let Some((j, &v)) = gt.iter().enumerate().find(|(_, &v)| v >= g) {
        return Err(Error::data(format!(
            "query {j} maps to video {v}, but there are only {g}"
        )));
    }
    match direction {
        Direction::TextToVideo => (0..h)
            .map(|j| rank_of(&r.column(j).to_vec(), gt[j]))
            .collect(),
        Direction::VideoToText => {
            let mut out = Vec::with_capacity(g);
            for i in 0..g {
                let row = r.row(i).to_vec();
                let mut best: Option<usize> = None;
                for (j, _) in gt.iter().enumerate().filter(|(_, &v)| v == i) {
                    let rk = rank_of(&row, j)?;
                    best = Some(best.map_or(rk, |b| b.min(rk)));
                }
                out.push(best.ok_or_else(|| {
                    Error::data(format!("video {i} has no ground-truth query"))
                })?);
            }
            Ok(out)
        }
    }
}

pub fn report_from_ranks(ranks: &[usize], direction: Direction) -> Result<EvalReport> {
    if ranks.is_empty() {
        return Err(Error::data("no queries to evaluate"));
    }
    let n = ranks.len();
    let recall = |k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64;
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    Ok(EvalReport {
        schema: REPORT_SCHEMA,
        direction,
        r1: recall(1),
        r5: recall(5),
        r10: recall(10),
        mdr: sorted[(n - 1) / 2],
        mnr: ranks.iter().sum::<usize>() as f64 / n as f64,
        n_queries: n,
    })
}

pub fn compute_metrics(r: &Array2<f64>, gt: &[usize], direction: Direction) -> Result<EvalReport> {
    report_from_ranks(&ranks(r, gt, direction)?, direction)
}
