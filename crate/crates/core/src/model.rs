//! The full scoring pipeline: temporal encoding, patch selection, three
//! alignment levels and their aggregation into one score per (video, query).

use std::rc::Rc;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::alignment::{frame_sentence_on, patch_word_on, temporal_encode_on};
use crate::diffmath::{
    prefixed, AffineVars, AttentionParams, AttentionVars, Mat, ParamGroup, Tape, Var,
};
use crate::error::{Error, Result};
use crate::isa::{aggregate_rows_on, bi_aggregate_on, Aggregator, IsaParams};
use crate::patch_select::{select_patches_on, SelectionMode, SelectorParams, SelectorVars};
use crate::store::{Dataset, FeatureBundle, QueryFeatures};
use crate::unify::{Level, ScoreFile};

pub const DEFAULT_LOGIT_SCALE: f64 = 100.0;

fn all_levels() -> Vec<Level> {
    Level::ALL.to_vec()
}

/// Shapes and frozen settings of a model. Serialized as the checkpoint sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "L_t")]
    pub l_t: usize,
    pub logit_scale: f64,
    /// Forces a unit logit scale.
    pub strict_mode: bool,
    /// Levels summed into the final score.
    #[serde(default = "all_levels")]
    pub levels: Vec<Level>,
    #[serde(default)]
    pub aggregator: Aggregator,
}

impl ModelConfig {
    pub fn new(n: usize, m: usize, k: usize, c: usize, l_t: usize) -> Self {
        ModelConfig {
            n,
            m,
            k,
            c,
            l_t,
            logit_scale: DEFAULT_LOGIT_SCALE,
            strict_mode: false,
            levels: all_levels(),
            aggregator: Aggregator::Isa,
        }
    }

    /// Shapes taken from a dataset.
    pub fn for_dataset(ds: &Dataset, k: usize) -> Self {
        let (n, m, c, l_t) = ds.dims();
        ModelConfig::new(n, m, k, c, l_t)
    }

    pub fn effective_logit_scale(&self) -> f64 {
        if self.strict_mode {
            1.0
        } else {
            self.logit_scale
        }
    }

    /// Number of selected patches per video.
    pub fn selected_len(&self) -> usize {
        self.n * self.k
    }

    pub fn uses(&self, level: Level) -> bool {
        self.levels.contains(&level)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.c == 0 || self.l_t == 0 {
            return Err(Error::data("model dimensions must all be >= 1"));
        }
        if self.k == 0 || self.k > self.m {
            return Err(Error::data(format!(
                "K = {} must be in 1..={}",
                self.k, self.m
            )));
        }
        if !(self.logit_scale > 0.0) || !self.logit_scale.is_finite() {
            return Err(Error::data(format!(
                "logit_scale must be positive, got {}",
                self.logit_scale
            )));
        }
        if self.levels.is_empty() {
            return Err(Error::data("at least one alignment level is required"));
        }
        Ok(())
    }

    pub fn check_video(&self, v: &FeatureBundle) -> Result<()> {
        let want = (self.n, self.m, self.c);
        if v.patches.dim() != want {
            return Err(Error::data(format!(
                "video '{}' has patches {:?}, model expects {want:?}",
                v.id,
                v.patches.dim()
            )));
        }
        Ok(())
    }

    pub fn check_query(&self, q: &QueryFeatures) -> Result<()> {
        if q.words.dim() != (self.l_t, self.c) {
            return Err(Error::data(format!(
                "query '{}' has words {:?}, model expects {:?}",
                q.id,
                q.words.dim(),
                (self.l_t, self.c)
            )));
        }
        Ok(())
    }
}

/// Every trainable tensor plus the configuration that shapes it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub temporal: AttentionParams,
    pub selector: SelectorParams,
    /// Over the N frames.
    pub isa_frame: IsaParams,
    /// Over the N*K selected patches.
    pub isa_patch: IsaParams,
    /// Over the L_t words.
    pub isa_word: IsaParams,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub temporal: AttentionVars,
    pub selector: SelectorVars,
    pub isa_frame: AffineVars,
    pub isa_patch: AffineVars,
    pub isa_word: AffineVars,
}

impl ModelParams {
    /// Identity-initialised temporal encoder and ISA layers; random selector.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = ModelParams {
            temporal: AttentionParams::zero_init(config.n, config.c),
            selector: SelectorParams::random(config.c, &mut rng),
            isa_frame: IsaParams::identity(config.n),
            isa_patch: IsaParams::identity(config.selected_len()),
            isa_word: IsaParams::identity(config.l_t),
            config,
        };
        Ok(p.round_to_f32())
    }

    /// Every tensor random, for exercising gradients away from the identity start.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut isa = |d: usize| {
            let mut p = IsaParams::identity(d);
            p.linear.weight += &Mat::from_shape_fn((d, d), |_| 0.5 * rng.sample::<f64, _>(StandardNormal));
            p.linear.bias = Mat::from_shape_fn((1, d), |_| 0.5 * rng.sample::<f64, _>(StandardNormal));
            p
        };
        let isa_frame = isa(config.n);
        let isa_patch = isa(config.selected_len());
        let isa_word = isa(config.l_t);
        let p = ModelParams {
            temporal: AttentionParams::random(config.n, config.c, &mut rng),
            selector: SelectorParams::random(config.c, &mut rng),
            isa_frame,
            isa_patch,
            isa_word,
            config,
        };
        Ok(p.round_to_f32())
    }

    pub(crate) fn round_to_f32(mut self) -> Self {
        for (_, t) in self.tensors_mut() {
            t.mapv_inplace(|v| v as f32 as f64);
        }
        self
    }

    /// Checks every group against the configuration; the first mismatch is named.
    pub fn check(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        let isa = [
            ("isa_frame", &self.isa_frame, cfg.n),
            ("isa_patch", &self.isa_patch, cfg.selected_len()),
            ("isa_word", &self.isa_word, cfg.l_t),
        ];
        for (name, p, d) in isa {
            if p.linear.weight.dim() != (d, d) || p.linear.bias.dim() != (1, d) {
                return Err(Error::data(format!(
                    "{name}: parameters are {:?}, config needs {d}x{d}",
                    p.linear.weight.dim()
                )));
            }
        }
        if self.temporal.pos.dim() != (cfg.n, cfg.c) || self.temporal.query.weight.dim() != (cfg.c, cfg.c) {
            return Err(Error::data(format!(
                "temporal: positional table is {:?}, config needs {:?}",
                self.temporal.pos.dim(),
                (cfg.n, cfg.c)
            )));
        }
        self.selector
            .check(cfg.c)
            .map_err(|e| Error::data(format!("selector: {e}")))?;
        for (name, t) in self.tensors() {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("parameter '{name}' is not finite")));
            }
        }
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

impl ParamGroup for ModelParams {
    type Vars = ModelVars;

    fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut t = prefixed("isa_frame", self.isa_frame.tensors());
        t.extend(prefixed("isa_patch", self.isa_patch.tensors()));
        t.extend(prefixed("isa_word", self.isa_word.tensors()));
        t.extend(prefixed("temporal", self.temporal.tensors()));
        t.extend(prefixed("selector", self.selector.tensors()));
        t
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut t = prefixed("isa_frame", self.isa_frame.tensors_mut());
        t.extend(prefixed("isa_patch", self.isa_patch.tensors_mut()));
        t.extend(prefixed("isa_word", self.isa_word.tensors_mut()));
        t.extend(prefixed("temporal", self.temporal.tensors_mut()));
        t.extend(prefixed("selector", self.selector.tensors_mut()));
        t
    }

    fn vars_from(&self, leaves: &mut dyn Iterator<Item = Var>) -> ModelVars {
        ModelVars {
            isa_frame: self.isa_frame.vars_from(leaves),
            isa_patch: self.isa_patch.vars_from(leaves),
            isa_word: self.isa_word.vars_from(leaves),
            temporal: self.temporal.vars_from(leaves),
            selector: self.selector.vars_from(leaves),
        }
    }
}

/// Tape nodes of one encoded video.
#[derive(Clone, Debug)]
pub struct VideoNodes {
    /// N x C
    pub frames: Var,
    /// 1 x C
    pub video: Var,
    /// (N*K) x C
    pub selected: Var,
    pub chosen: Vec<Vec<usize>>,
}

/// Tape nodes of one query.
#[derive(Clone, Debug)]
pub struct QueryNodes {
    /// L_t x C
    pub words: Var,
    /// 1 x C
    pub sentence: Var,
    pub mask: Rc<[bool]>,
}

pub fn video_leaves(tape: &mut Tape, v: &FeatureBundle) -> (Var, Var) {
    let (n, m, c) = v.patches.dim();
    let frames = tape.leaf(v.frames.mapv(f64::from));
    let flat = v
        .patches
        .mapv(f64::from)
        .into_shape_with_order((n * m, c))
        .expect("contiguous patches");
    (frames, tape.leaf(flat))
}

pub fn query_nodes(tape: &mut Tape, q: &QueryFeatures) -> QueryNodes {
    QueryNodes {
        words: tape.leaf(q.words.mapv(f64::from)),
        sentence: tape.leaf(q.sentence.mapv(f64::from).insert_axis(Axis(0))),
        mask: Rc::from(q.word_mask()),
    }
}

impl ModelParams {
    pub fn encode_video_on(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        frames: Var,
        patches: Var,
        mode: &SelectionMode,
        video_key: usize,
    ) -> Result<VideoNodes> {
        let video = temporal_encode_on(tape, &self.temporal, &vars.temporal, frames)?;
        let (selected, chosen) = select_patches_on(
            tape,
            &vars.selector,
            patches,
            frames,
            video,
            self.config.m,
            self.config.k,
            mode,
            video_key,
        )?;
        Ok(VideoNodes {
            frames,
            video,
            selected,
            chosen,
        })
    }

    /// Unscaled level scores of one pair, each `1 x 1`, in [`Level::ALL`] order.
    pub fn pair_levels_on(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        v: &VideoNodes,
        q: &QueryNodes,
    ) -> Result<[Var; 3]> {
        let agg = self.config.aggregator;
        let s_vs = tape.cosine(v.video, q.sentence, None)?;
        let c_fs = frame_sentence_on(tape, v.frames, q.sentence)?;
        let s_fs = aggregate_rows_on(tape, c_fs, agg, vars.isa_frame, None)?;
        let c_pw = patch_word_on(tape, v.selected, q.words, q.mask.clone())?;
        let s_pw = bi_aggregate_on(
            tape,
            c_pw,
            Some(q.mask.clone()),
            agg,
            vars.isa_patch,
            vars.isa_word,
        )?;
        Ok([s_vs, s_fs, s_pw])
    }

    /// `logit_scale` times the sum of the enabled levels; `1 x 1`.
    pub fn pair_score_on(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        v: &VideoNodes,
        q: &QueryNodes,
    ) -> Result<Var> {
        let levels = self.pair_levels_on(tape, vars, v, q)?;
        let mut total: Option<Var> = None;
        for (l, s) in Level::ALL.iter().zip(levels) {
            if self.config.uses(*l) {
                total = Some(match total {
                    None => s,
                    Some(t) => tape.add(t, s)?,
                });
            }
        }
        let total = total.ok_or_else(|| Error::data("no alignment level enabled"))?;
        Ok(tape.scale(total, self.config.effective_logit_scale()))
    }

    /// Score grid `videos x queries` on the tape. `video_keys` identify each
    /// video to the noise bank in perturbed mode.
    pub fn batch_scores_on(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        videos: &[&FeatureBundle],
        queries: &[&QueryFeatures],
        mode: &SelectionMode,
        video_keys: &[usize],
    ) -> Result<Var> {
        if videos.is_empty() || queries.is_empty() {
            return Err(Error::data("empty batch"));
        }
        if video_keys.len() != videos.len() {
            return Err(Error::data("one noise key per video is required"));
        }
        for v in videos {
            self.config.check_video(v)?;
        }
        for q in queries {
            self.config.check_query(q)?;
        }
        let qn: Vec<QueryNodes> = queries.iter().map(|q| query_nodes(tape, q)).collect();
        let mut cells = Vec::with_capacity(videos.len() * queries.len());
        for (v, &key) in videos.iter().zip(video_keys) {
            let (f, p) = video_leaves(tape, v);
            let vn = self.encode_video_on(tape, vars, f, p, mode, key)?;
            for q in &qn {
                cells.push(self.pair_score_on(tape, vars, &vn, q)?);
            }
        }
        tape.assemble(&cells, videos.len(), queries.len())
    }

    /// Score grid without gradients.
    pub fn batch_scores(
        &self,
        videos: &[&FeatureBundle],
        queries: &[&QueryFeatures],
        mode: &SelectionMode,
    ) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let (vars, _) = self.bind(&mut tape);
        let keys: Vec<usize> = (0..videos.len()).collect();
        let r = self.batch_scores_on(&mut tape, &vars, videos, queries, mode, &keys)?;
        Ok(tape.value(r).clone())
    }

    /// Per-level scores (each multiplied by the logit scale) for every
    /// (video, query) pair, with hard patch selection.
    pub fn score_levels(
        &self,
        videos: &[FeatureBundle],
        queries: &[QueryFeatures],
    ) -> Result<[Array2<f64>; 3]> {
        for v in videos {
            self.config.check_video(v)?;
        }
        for q in queries {
            self.config.check_query(q)?;
        }
        let scale = self.config.effective_logit_scale();
        let mut out: [Array2<f64>; 3] =
            std::array::from_fn(|_| Array2::zeros((videos.len(), queries.len())));
        for (i, v) in videos.iter().enumerate() {
            let mut tape = Tape::new();
            let (vars, _) = self.bind(&mut tape);
            let (f, p) = video_leaves(&mut tape, v);
            let vn = self.encode_video_on(&mut tape, &vars, f, p, &SelectionMode::Hard, i)?;
            for (j, q) in queries.iter().enumerate() {
                let qn = query_nodes(&mut tape, q);
                let levels = self.pair_levels_on(&mut tape, &vars, &vn, &qn)?;
                for (l, s) in levels.iter().enumerate() {
                    out[l][[i, j]] = scale * tape.scalar(*s);
                }
            }
        }
        Ok(out)
    }

    /// Score file holding the enabled levels.
    pub fn score_file(&self, videos: &[FeatureBundle], queries: &[QueryFeatures]) -> Result<ScoreFile> {
        let levels = self.score_levels(videos, queries)?;
        let mut file = ScoreFile {
            row_ids: videos.iter().map(|v| v.id.clone()).collect(),
            col_ids: queries.iter().map(|q| q.id.clone()).collect(),
            ..Default::default()
        };
        for (l, m) in Level::ALL.iter().zip(levels) {
            if self.config.uses(*l) {
                file.levels.insert(*l, m);
            }
        }
        Ok(file)
    }
}
