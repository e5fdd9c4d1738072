//! Patch saliency scoring and top-K patch selection.
//!
//! Saliency of patch `p` in frame `n` of a video with encoding `v`:
//! `U = G_b([G_a([p, f_n]), v])`, where `G_a` and `G_b` are two-layer MLPs
//! with a GELU in between. Inference keeps the K highest-scoring patches per
//! frame; training replaces the hard choice with a Monte-Carlo perturbed
//! top-K indicator so gradients reach the selector.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffmath::{
    prefixed, AffineParams, AffineVars, FrozenPerturbation, Mat, ParamGroup, Tape, Var,
};
use crate::error::{Error, Result};

pub const DEFAULT_SIGMA: f64 = 0.05;
pub const DEFAULT_SAMPLES: usize = 100;

/// The two saliency MLPs.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectorParams {
    /// 2C -> C
    pub ga1: AffineParams,
    /// C -> C
    pub ga2: AffineParams,
    /// 2C -> C
    pub gb1: AffineParams,
    /// C -> 1
    pub gb2: AffineParams,
}

#[derive(Clone, Copy, Debug)]
pub struct SelectorVars {
    pub ga1: AffineVars,
    pub ga2: AffineVars,
    pub gb1: AffineVars,
    pub gb2: AffineVars,
}

impl SelectorParams {
    pub fn zeros(c: usize) -> Self {
        SelectorParams {
            ga1: AffineParams::zeros(c, 2 * c),
            ga2: AffineParams::zeros(c, c),
            gb1: AffineParams::zeros(c, 2 * c),
            gb2: AffineParams::zeros(1, c),
        }
    }

    pub fn random(c: usize, rng: &mut impl Rng) -> Self {
        SelectorParams {
            ga1: AffineParams::random(c, 2 * c, rng),
            ga2: AffineParams::random(c, c, rng),
            gb1: AffineParams::random(c, 2 * c, rng),
            gb2: AffineParams::random(1, c, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.ga2.d_in()
    }

    pub(crate) fn check(&self, c: usize) -> Result<()> {
        let ok = self.ga1.weight.dim() == (c, 2 * c)
            && self.ga2.weight.dim() == (c, c)
            && self.gb1.weight.dim() == (c, 2 * c)
            && self.gb2.weight.dim() == (1, c);
        if ok {
            Ok(())
        } else {
            Err(Error::data(format!(
                "selector parameters do not match feature dim {c}"
            )))
        }
    }
}

impl ParamGroup for SelectorParams {
    type Vars = SelectorVars;

    fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut t = prefixed("ga1", self.ga1.tensors());
        t.extend(prefixed("ga2", self.ga2.tensors()));
        t.extend(prefixed("gb1", self.gb1.tensors()));
        t.extend(prefixed("gb2", self.gb2.tensors()));
        t
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut t = prefixed("ga1", self.ga1.tensors_mut());
        t.extend(prefixed("ga2", self.ga2.tensors_mut()));
        t.extend(prefixed("gb1", self.gb1.tensors_mut()));
        t.extend(prefixed("gb2", self.gb2.tensors_mut()));
        t
    }

    fn vars_from(&self, leaves: &mut dyn Iterator<Item = Var>) -> SelectorVars {
        SelectorVars {
            ga1: self.ga1.vars_from(leaves),
            ga2: self.ga2.vars_from(leaves),
            gb1: self.gb1.vars_from(leaves),
            gb2: self.gb2.vars_from(leaves),
        }
    }
}

/// Saliency of every patch of a video on the tape.
///
/// `patches` is `(N*M) x C` frame-major, `frames` is `N x C`, `video` is `1 x C`.
/// Returns `(N*M) x 1`.
pub fn saliency_on(
    tape: &mut Tape,
    vars: &SelectorVars,
    patches: Var,
    frames: Var,
    video: Var,
    n_patches: usize,
) -> Result<Var> {
    let rows = tape.value(patches).nrows();
    let frame_of: Vec<usize> = (0..rows).map(|r| r / n_patches).collect();
    let frame_rep = tape.gather(frames, frame_of)?;
    let x = tape.concat_cols(patches, frame_rep)?;
    let h = tape.linear(x, vars.ga1.weight, vars.ga1.bias)?;
    let h = tape.gelu(h);
    let a = tape.linear(h, vars.ga2.weight, vars.ga2.bias)?;
    let video_rep = tape.gather(video, vec![0; rows])?;
    let y = tape.concat_cols(a, video_rep)?;
    let h = tape.linear(y, vars.gb1.weight, vars.gb1.bias)?;
    let h = tape.gelu(h);
    tape.linear(h, vars.gb2.weight, vars.gb2.bias)
}

/// Saliency of the M patches of one frame.
pub fn saliency_scores(
    patches_n: &Array2<f64>,
    frame_n: &Array1<f64>,
    video: &Array1<f64>,
    params: &SelectorParams,
) -> Result<Array1<f64>> {
    let c = params.dim();
    params.check(c)?;
    if patches_n.ncols() != c || frame_n.len() != c || video.len() != c {
        return Err(Error::data(format!(
            "saliency_scores: patches {:?}, frame {}, video {} for selector dim {c}",
            patches_n.dim(),
            frame_n.len(),
            video.len()
        )));
    }
    let mut tape = Tape::new();
    let (vars, _) = params.bind(&mut tape);
    let p = tape.leaf(patches_n.clone());
    let f = tape.leaf(frame_n.clone().insert_axis(Axis(0)));
    let v = tape.leaf(video.clone().insert_axis(Axis(0)));
    let u = saliency_on(&mut tape, &vars, p, f, v, patches_n.nrows())?;
    Ok(tape.value(u).column(0).to_owned())
}

/// Indices of the K largest scores, ordered by descending score; ties go to the lower index.
pub fn select_topk(u: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > u.len() {
        return Err(Error::data(format!(
            "top-K with K = {k} over {} entries",
            u.len()
        )));
    }
    let mut idx: Vec<usize> = (0..u.len()).collect();
    idx.sort_by(|&a, &b| u[b].total_cmp(&u[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Draws `n_samples` Gaussian perturbations of `u` and records their hard top-K.
pub fn sample_perturbation(
    u: &[f64],
    k: usize,
    sigma: f64,
    n_samples: usize,
    rng: &mut impl Rng,
) -> Result<FrozenPerturbation> {
    if !(sigma > 0.0) || n_samples == 0 {
        return Err(Error::data(format!(
            "perturbed top-K needs sigma > 0 and n_samples >= 1 (got {sigma}, {n_samples})"
        )));
    }
    if k == 0 || k > u.len() {
        return Err(Error::data(format!("top-K with K = {k} over {} entries", u.len())));
    }
    let m = u.len();
    let mut z = Vec::with_capacity(n_samples * m);
    let mut topk = Vec::with_capacity(n_samples * k);
    let mut perturbed = vec![0.0; m];
    for _ in 0..n_samples {
        for (i, p) in perturbed.iter_mut().enumerate() {
            let g: f64 = rng.sample(StandardNormal);
            z.push(g);
            *p = u[i] + sigma * g;
        }
        topk.extend(select_topk(&perturbed, k)?);
    }
    Ok(FrozenPerturbation {
        base: u.to_vec(),
        sigma,
        k,
        z,
        topk,
    })
}

/// Monte-Carlo perturbed top-K indicator, `M x K`; column j is the
/// probability of each index being ranked j-th.
pub fn perturbed_topk_indicator(
    u: &[f64],
    k: usize,
    sigma: f64,
    n_samples: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frozen = sample_perturbation(u, k, sigma, n_samples, &mut rng)?;
    Ok(frozen.indicator(u))
}

/// Per-frame patch choice for one video.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    /// N lists of K patch indices.
    pub indices: Vec<Vec<usize>>,
    /// Optional N soft indicators, each `M x K`; when present they define the gather.
    pub soft: Option<Vec<Array2<f64>>>,
}

/// Selected patch rows, frame-major: `(N*K) x C`.
pub fn gather_selected(patches: &Array3<f64>, selection: &Selection) -> Result<Array2<f64>> {
    let (n, m, c) = patches.dim();
    if selection.indices.len() != n {
        return Err(Error::data(format!(
            "selection covers {} frames, video has {n}",
            selection.indices.len()
        )));
    }
    let mut rows: Vec<Array2<f64>> = Vec::with_capacity(n);
    for (f, idx) in selection.indices.iter().enumerate() {
        let frame = patches.index_axis(Axis(0), f);
        match &selection.soft {
            Some(soft) => {
                let ind = soft.get(f).ok_or_else(|| {
                    Error::data(format!("soft indicator missing for frame {f}"))
                })?;
                if ind.nrows() != m {
                    return Err(Error::data(format!(
                        "soft indicator for frame {f} has {} rows, expected {m}",
                        ind.nrows()
                    )));
                }
                rows.push(ind.t().dot(&frame));
            }
            None => {
                if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
                    return Err(Error::data(format!(
                        "patch index {bad} out of range for {m} patches in frame {f}"
                    )));
                }
                rows.push(frame.select(Axis(0), idx));
            }
        }
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    let out = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::data(e.to_string()))?;
    debug_assert_eq!(out.ncols(), c);
    Ok(out)
}

/// Seed for the perturbation stream of one (step, video, frame).
fn stream_seed(seed: u64, step: u64, video: u64, frame: u64) -> u64 {
    fn mix(mut x: u64) -> u64 {
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^ (x >> 31)
    }
    mix(mix(mix(mix(seed) ^ step) ^ video) ^ frame)
}

/// Perturbations for one forward/backward pass.
///
/// The first request for a (video, frame) pair samples noise around the
/// scores it is given; later requests reuse that draw. Reusing a bank across
/// evaluations therefore holds the noise fixed, which is what gradient
/// checking needs.
#[derive(Debug)]
pub struct NoiseBank {
    pub sigma: f64,
    pub n_samples: usize,
    seed: u64,
    step: u64,
    drawn: RefCell<HashMap<(usize, usize), Rc<FrozenPerturbation>>>,
}

impl NoiseBank {
    pub fn new(sigma: f64, n_samples: usize, seed: u64, step: u64) -> Self {
        NoiseBank {
            sigma,
            n_samples,
            seed,
            step,
            drawn: RefCell::new(HashMap::new()),
        }
    }

    pub fn get(&self, video: usize, frame: usize, u: &[f64], k: usize) -> Result<Rc<FrozenPerturbation>> {
        if let Some(f) = self.drawn.borrow().get(&(video, frame)) {
            return Ok(f.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(
            self.seed,
            self.step,
            video as u64,
            frame as u64,
        ));
        let f = Rc::new(sample_perturbation(u, k, self.sigma, self.n_samples, &mut rng)?);
        self.drawn.borrow_mut().insert((video, frame), f.clone());
        Ok(f)
    }
}

/// How patches are chosen in a forward pass.
#[derive(Clone, Debug)]
pub enum SelectionMode {
    /// Hard top-K; no gradient reaches the selector.
    Hard,
    /// Soft perturbed indicator drawn from the bank.
    Perturbed(Rc<NoiseBank>),
}

/// Selected patches of one video on the tape (`(N*K) x C`) plus the hard indices.
#[allow(clippy::too_many_arguments)]
pub fn select_patches_on(
    tape: &mut Tape,
    vars: &SelectorVars,
    patches: Var,
    frames: Var,
    video: Var,
    n_patches: usize,
    k: usize,
    mode: &SelectionMode,
    video_key: usize,
) -> Result<(Var, Vec<Vec<usize>>)> {
    if k == 0 || k > n_patches {
        return Err(Error::data(format!("top-K with K = {k} over {n_patches} patches")));
    }
    let u = saliency_on(tape, vars, patches, frames, video, n_patches)?;
    let n_frames = tape.value(frames).nrows();
    let mut parts = Vec::with_capacity(n_frames);
    let mut hard = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let range: Vec<usize> = (f * n_patches..(f + 1) * n_patches).collect();
        let scores: Vec<f64> = range.iter().map(|&r| tape.value(u)[[r, 0]]).collect();
        let idx = select_topk(&scores, k)?;
        match mode {
            SelectionMode::Hard => {
                let rows: Vec<usize> = idx.iter().map(|i| f * n_patches + i).collect();
                parts.push(tape.gather(patches, rows)?);
            }
            SelectionMode::Perturbed(bank) => {
                let frozen = bank.get(video_key, f, &scores, k)?;
                let uf = tape.gather(u, range.clone())?;
                let ind = tape.perturbed_topk(uf, frozen)?;
                let indt = tape.transpose(ind);
                let pf = tape.gather(patches, range)?;
                parts.push(tape.matmul(indt, pf)?);
            }
        }
        hard.push(idx);
    }
    Ok((tape.concat_rows(&parts)?, hard))
}
