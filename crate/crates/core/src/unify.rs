//! Sinkhorn-Knopp marginal normalization and fusion of per-level scores.
//!
//! A reference matrix (test videos x reference queries) is balanced in the
//! log domain; the resulting per-video bias is added to the rows of the test
//! matrix. Per-level corrected matrices are summed into the final score.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::container::{read_container, write_container, Tensor, TensorMap};
use crate::error::{Error, Result};

pub const DEFAULT_SK_ITERS: usize = 4;
const DENOM_FLOOR: f64 = 1e-30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Vs,
    Fs,
    Pw,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Vs, Level::Fs, Level::Pw];

    pub fn tensor_name(self) -> &'static str {
        match self {
            Level::Vs => "s_vs",
            Level::Fs => "s_fs",
            Level::Pw => "s_pw",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Vs => "vs",
            Level::Fs => "fs",
            Level::Pw => "pw",
        }
    }
}

impl std::str::FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vs" => Ok(Level::Vs),
            "fs" => Ok(Level::Fs),
            "pw" => Ok(Level::Pw),
            other => Err(Error::data(format!("unknown level '{other}' (vs|fs|pw)"))),
        }
    }
}

/// Videos x queries score matrix with its ids.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub values: Array2<f64>,
    pub row_ids: Vec<String>,
    pub col_ids: Vec<String>,
    /// `None` for fused scores.
    pub level: Option<Level>,
}

impl ScoreMatrix {
    pub fn new(
        values: Array2<f64>,
        row_ids: Vec<String>,
        col_ids: Vec<String>,
        level: Option<Level>,
    ) -> Result<Self> {
        let m = ScoreMatrix {
            values,
            row_ids,
            col_ids,
            level,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let (g, h) = self.values.dim();
        if self.row_ids.len() != g || self.col_ids.len() != h {
            return Err(Error::data(format!(
                "score matrix is {g}x{h} but has {} row ids and {} col ids",
                self.row_ids.len(),
                self.col_ids.len()
            )));
        }
        if let Some(((i, j), v)) = self.values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite score {v} at ({i}, {j})")));
        }
        Ok(())
    }
}

/// Log-domain per-video bias.
#[derive(Clone, Debug, PartialEq)]
pub struct SkBias {
    pub alpha: Array1<f64>,
    pub iters_used: usize,
}

/// Scaling vectors after the last update, with the shifted kernel they scale.
#[derive(Clone, Debug)]
pub struct SinkhornState {
    pub alpha: Array1<f64>,
    pub beta: Array1<f64>,
    /// `exp(S - max S)`
    pub kernel: Array2<f64>,
}

fn check_finite(s: &Array2<f64>) -> Result<()> {
    if s.is_empty() {
        return Err(Error::data("Sinkhorn-Knopp on an empty matrix"));
    }
    if let Some(((i, j), v)) = s.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::numeric(format!("non-finite score {v} at ({i}, {j})")));
    }
    Ok(())
}

fn clamped_inv(x: f64, what: &str) -> Result<f64> {
    let r = 1.0 / x.max(DENOM_FLOOR);
    if !r.is_finite() {
        return Err(Error::numeric(format!("{what}: denominator {x} overflowed")));
    }
    Ok(r)
}

pub fn sinkhorn_scaling(s: &Array2<f64>, n_iter: usize) -> Result<SinkhornState> {
    if n_iter == 0 {
        return Err(Error::data("n_iter must be >= 1"));
    }
    check_finite(s)?;
    let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let kernel = s.mapv(|v| (v - max).exp());
    let mut beta = Array1::zeros(kernel.ncols());
    for (b, col) in beta.iter_mut().zip(kernel.columns()) {
        *b = clamped_inv(col.sum(), "column sum")?;
    }
    let mut alpha = Array1::zeros(kernel.nrows());
    for _ in 0..n_iter {
        let lb = kernel.dot(&beta);
        for (a, d) in alpha.iter_mut().zip(lb.iter()) {
            *a = clamped_inv(*d, "row update")?;
        }
        let al = kernel.t().dot(&alpha);
        for (b, d) in beta.iter_mut().zip(al.iter()) {
            *b = clamped_inv(*d, "column update")?;
        }
    }
    Ok(SinkhornState {
        alpha,
        beta,
        kernel,
    })
}

pub fn sinkhorn_bias(s_ref: &Array2<f64>, n_iter: usize) -> Result<SkBias> {
    let state = sinkhorn_scaling(s_ref, n_iter)?;
    let alpha = state.alpha.mapv(f64::ln);
    if let Some(v) = alpha.iter().find(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("non-finite bias {v}")));
    }
    Ok(SkBias {
        alpha,
        iters_used: n_iter,
    })
}

pub fn apply_bias(s_test: &Array2<f64>, bias: &SkBias) -> Result<Array2<f64>> {
    if bias.alpha.len() != s_test.nrows() {
        return Err(Error::data(format!(
            "bias has {} entries for {} rows",
            bias.alpha.len(),
            s_test.nrows()
        )));
    }
    let mut out = s_test.clone();
    for (mut row, a) in out.rows_mut().into_iter().zip(bias.alpha.iter()) {
        row += *a;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    /// Plain sum, as used in training.
    None,
    Sinkhorn { n_iter: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Unified {
    pub r: ScoreMatrix,
    /// Biases were computed from the test matrices themselves.
    pub self_reference: bool,
}

/// Fuse level matrices into the final score. With `refs` absent under
/// Sinkhorn normalization, each level serves as its own reference.
pub fn unify_levels(
    levels: &[ScoreMatrix],
    refs: Option<&[Array2<f64>]>,
    norm: Normalization,
) -> Result<Unified> {
    let first = levels
        .first()
        .ok_or_else(|| Error::data("unify_levels needs at least one level"))?;
    for l in levels {
        l.validate()?;
        if l.values.dim() != first.values.dim() {
            return Err(Error::data(format!(
                "level {:?} is {:?}, expected {:?}",
                l.level,
                l.values.dim(),
                first.values.dim()
            )));
        }
        if l.row_ids != first.row_ids || l.col_ids != first.col_ids {
            return Err(Error::data(format!("level {:?} ids differ", l.level)));
        }
    }
    if let Some(r) = refs {
        if r.len() != levels.len() {
            return Err(Error::data(format!(
                "{} reference matrices for {} levels",
                r.len(),
                levels.len()
            )));
        }
        for (i, m) in r.iter().enumerate() {
            if m.nrows() != first.values.nrows() {
                return Err(Error::data(format!(
                    "reference {i} has {} rows, levels have {}",
                    m.nrows(),
                    first.values.nrows()
                )));
            }
        }
    }

    let mut total = Array2::zeros(first.values.dim());
    for (i, l) in levels.iter().enumerate() {
        match norm {
            Normalization::None => total += &l.values,
            Normalization::Sinkhorn { n_iter } => {
                let reference = refs.map_or(&l.values, |r| &r[i]);
                let bias = sinkhorn_bias(reference, n_iter)?;
                total += &apply_bias(&l.values, &bias)?;
            }
        }
    }
    Ok(Unified {
        r: ScoreMatrix::new(total, first.row_ids.clone(), first.col_ids.clone(), None)?,
        self_reference: refs.is_none() && matches!(norm, Normalization::Sinkhorn { .. }),
    })
}

/// On-disk score set: level matrices and optional fused matrix sharing ids.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ScoreFile {
    pub row_ids: Vec<String>,
    pub col_ids: Vec<String>,
    pub levels: BTreeMap<Level, Array2<f64>>,
    /// Fused score ("r", or "scores" when read from a single-matrix file).
    pub r: Option<Array2<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ScoreSidecar {
    row_ids: Vec<String>,
    col_ids: Vec<String>,
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

impl ScoreFile {
    pub fn level_matrix(&self, level: Level) -> Option<ScoreMatrix> {
        self.levels.get(&level).map(|v| ScoreMatrix {
            values: v.clone(),
            row_ids: self.row_ids.clone(),
            col_ids: self.col_ids.clone(),
            level: Some(level),
        })
    }

    pub fn level_matrices(&self) -> Vec<ScoreMatrix> {
        Level::ALL
            .iter()
            .filter_map(|&l| self.level_matrix(l))
            .collect()
    }

    /// The fused score if stored, else the plain sum of the stored levels.
    pub fn total(&self) -> Result<Array2<f64>> {
        if let Some(r) = &self.r {
            return Ok(r.clone());
        }
        let mats = self.level_matrices();
        if mats.is_empty() {
            return Err(Error::data("score file holds no matrices"));
        }
        Ok(unify_levels(&mats, None, Normalization::None)?.r.values)
    }

    fn shape(&self) -> Result<(usize, usize)> {
        let dims = (self.row_ids.len(), self.col_ids.len());
        for (name, m) in self
            .levels
            .iter()
            .map(|(l, m)| (l.tensor_name(), m))
            .chain(self.r.iter().map(|m| ("r", m)))
        {
            if m.dim() != dims {
                return Err(Error::data(format!(
                    "tensor '{name}' is {:?} but ids give {dims:?}",
                    m.dim()
                )));
            }
        }
        Ok(dims)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.shape()?;
        let mut map = TensorMap::new();
        for (l, m) in &self.levels {
            map.insert(l.tensor_name().to_string(), Tensor::from_array2(m));
        }
        if let Some(r) = &self.r {
            map.insert("r".to_string(), Tensor::from_array2(r));
        }
        write_container(&map, path)?;
        let side = ScoreSidecar {
            row_ids: self.row_ids.clone(),
            col_ids: self.col_ids.clone(),
        };
        let sp = sidecar_path(path);
        std::fs::write(&sp, serde_json::to_string_pretty(&side)?).map_err(|e| Error::io(&sp, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let map = read_container(path)?;
        let sp = sidecar_path(path);
        let text = std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
        let side: ScoreSidecar = serde_json::from_str(&text)?;
        let mut out = ScoreFile {
            row_ids: side.row_ids,
            col_ids: side.col_ids,
            ..Default::default()
        };
        for (name, t) in map {
            let m = t.to_array2()?;
            match name.as_str() {
                "s_vs" => out.levels.insert(Level::Vs, m),
                "s_fs" => out.levels.insert(Level::Fs, m),
                "s_pw" => out.levels.insert(Level::Pw, m),
                "r" | "scores" => out.r.replace(m),
                other => {
                    return Err(Error::data(format!(
                        "{}: unexpected tensor '{other}'",
                        path.display()
                    )))
                }
            };
        }
        if out.levels.is_empty() && out.r.is_none() {
            return Err(Error::data(format!("{}: no score tensors", path.display())));
        }
        out.shape()?;
        Ok(out)
    }
}
