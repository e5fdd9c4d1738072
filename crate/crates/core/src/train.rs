//! Symmetric contrastive training of the scoring pipeline, plus checkpoints.

use std::path::Path;
use std::rc::Rc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::container::{read_container, write_container, Tensor, TensorMap};
use crate::diffmath::{grad_check, Mat, ParamGroup, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::patch_select::{NoiseBank, SelectionMode, DEFAULT_SAMPLES, DEFAULT_SIGMA};
use crate::store::{Dataset, FeatureBundle, QueryFeatures};
use crate::unify::sidecar_path;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-8;
pub const WARMUP_FRACTION: f64 = 0.1;

/// Both directions of the loss on the tape: rows (video to text) plus
/// columns (text to video), positives on the diagonal.
pub fn contrastive_loss_on(tape: &mut Tape, r: Var) -> Result<Var> {
    let v2t = tape.diag_xent(r)?;
    let rt = tape.transpose(r);
    let t2v = tape.diag_xent(rt)?;
    tape.add(v2t, t2v)
}

/// `(video-to-text, text-to-video)` loss terms of a score grid.
pub fn contrastive_terms(r: &Array2<f64>) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let x = tape.leaf(r.clone());
    let v2t = tape.diag_xent(x)?;
    let xt = tape.transpose(x);
    let t2v = tape.diag_xent(xt)?;
    Ok((tape.scalar(v2t), tape.scalar(t2v)))
}

pub fn contrastive_loss(r: &Array2<f64>) -> Result<f64> {
    let (a, b) = contrastive_terms(r)?;
    Ok(a + b)
}

/// Linear warm-up over the first tenth of the steps, then cosine decay to zero.
pub fn learning_rate(base: f64, step: usize, total: usize) -> f64 {
    let warmup = ((total as f64 * WARMUP_FRACTION).ceil() as usize).max(1);
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let rest = total.saturating_sub(warmup).max(1);
    let progress = (step - warmup) as f64 / rest as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

#[derive(Clone, Debug)]
pub struct Adam {
    t: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Adam {
            t: 0,
            m: shapes.iter().map(|&s| Mat::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Mat::zeros(s)).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Mat>, grads: &[Mat], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    let step = lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
                    *p = (*p - step) as f32 as f64;
                });
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub sigma: f64,
    pub n_samples: usize,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        TrainConfig {
            model,
            batch_size: 16,
            epochs: 10,
            lr: 1e-4,
            seed: 0,
            sigma: DEFAULT_SIGMA,
            n_samples: DEFAULT_SAMPLES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size < 2 {
            return Err(Error::data(format!(
                "batch size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::data(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !(self.sigma > 0.0) || self.n_samples == 0 {
            return Err(Error::data("perturbed top-K needs sigma > 0 and at least one sample"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub step_losses: Vec<f64>,
    pub steps: usize,
}

/// Query-index batches of one epoch; a trailing batch of one is dropped.
fn epoch_batches(order: &[usize], b: usize) -> Vec<&[usize]> {
    order.chunks(b).filter(|c| c.len() >= 2).collect()
}

/// Loss and parameter gradients of one batch in train mode.
pub fn batch_loss_and_grads(
    params: &ModelParams,
    videos: &[&FeatureBundle],
    queries: &[&QueryFeatures],
    video_keys: &[usize],
    bank: Rc<NoiseBank>,
) -> Result<(f64, Vec<Mat>)> {
    let mut tape = Tape::new();
    let (vars, leaves) = params.bind(&mut tape);
    let mode = SelectionMode::Perturbed(bank);
    let r = params.batch_scores_on(&mut tape, &vars, videos, queries, &mode, video_keys)?;
    let loss = contrastive_loss_on(&mut tape, r)?;
    let grads = tape.backward(loss)?;
    let g = leaves
        .iter()
        .zip(params.tensors())
        .map(|(l, (_, t))| grads.get_or_zeros(*l, t.dim()))
        .collect();
    Ok((tape.scalar(loss), g))
}

pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<(ModelParams, TrainReport)> {
    let params = ModelParams::init(cfg.model.clone(), cfg.seed)?;
    train_from(ds, cfg, params)
}

/// Trains starting from `params`.
pub fn train_from(
    ds: &Dataset,
    cfg: &TrainConfig,
    mut params: ModelParams,
) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    params.check()?;
    if ds.queries.len() < cfg.batch_size {
        return Err(Error::data(format!(
            "{} training pairs is fewer than the batch size {}",
            ds.queries.len(),
            cfg.batch_size
        )));
    }
    let mut order: Vec<usize> = (0..ds.queries.len()).collect();
    let per_epoch = epoch_batches(&order, cfg.batch_size).len();
    let total = per_epoch * cfg.epochs;
    let shapes: Vec<(usize, usize)> = params.tensors().iter().map(|(_, t)| t.dim()).collect();
    let mut adam = Adam::new(&shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport {
        epoch_losses: Vec::with_capacity(cfg.epochs),
        step_losses: Vec::with_capacity(total),
        steps: 0,
    };

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let batches = epoch_batches(&order, cfg.batch_size);
        for batch in &batches {
            let step = report.steps;
            let keys: Vec<usize> = batch.iter().map(|&j| ds.gt[j]).collect();
            let videos: Vec<&FeatureBundle> = keys.iter().map(|&i| &ds.videos[i]).collect();
            let queries: Vec<&QueryFeatures> = batch.iter().map(|&j| &ds.queries[j]).collect();
            let bank = Rc::new(NoiseBank::new(cfg.sigma, cfg.n_samples, cfg.seed, step as u64));
            let (loss, grads) = batch_loss_and_grads(&params, &videos, &queries, &keys, bank)
                .map_err(|e| match e {
                    Error::Numeric(m) => Error::numeric(format!("step {step}: {m}")),
                    other => other,
                })?;
            if !loss.is_finite() {
                return Err(Error::numeric(format!("step {step}: loss is {loss}")));
            }
            let lr = learning_rate(cfg.lr, step, total);
            let tensors: Vec<&mut Mat> = params.tensors_mut().into_iter().map(|(_, t)| t).collect();
            adam.step(tensors, &grads, lr);
            report.step_losses.push(loss);
            report.steps += 1;
            sum += loss;
        }
        report.epoch_losses.push(sum / batches.len() as f64);
    }
    params.check()?;
    Ok((params, report))
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    params.check()?;
    let map: TensorMap = params
        .tensors()
        .into_iter()
        .map(|(name, t)| (name, Tensor::from_array2(t)))
        .collect();
    write_container(&map, path)?;
    let sp = sidecar_path(path);
    std::fs::write(&sp, serde_json::to_string_pretty(&params.config)?)
        .map_err(|e| Error::io(&sp, e))
}

fn read_config(path: &Path) -> Result<ModelConfig> {
    let sp = sidecar_path(path);
    let text = std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let cfg: ModelConfig = serde_json::from_str(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a checkpoint. With `expect`, tensors are checked against that
/// configuration instead of the sidecar's.
pub fn load_checkpoint(path: &Path, expect: Option<&ModelConfig>) -> Result<ModelParams> {
    let stored = read_config(path)?;
    let cfg = expect.cloned().unwrap_or(stored);
    let mut map = read_container(path)?;
    let mut params = ModelParams::init(cfg, 0)?;
    for (name, t) in params.tensors_mut() {
        let tensor = map
            .remove(&name)
            .ok_or_else(|| Error::data(format!("checkpoint lacks tensor '{name}'")))?;
        let value = tensor.to_array2()?;
        if value.dim() != t.dim() {
            return Err(Error::data(format!(
                "tensor '{name}' is {:?}, config needs {:?}",
                value.dim(),
                t.dim()
            )));
        }
        *t = value;
    }
    if let Some(extra) = map.keys().next() {
        return Err(Error::data(format!("checkpoint has unknown tensor '{extra}'")));
    }
    params.check()?;
    Ok(params)
}

/// Worst relative gradient error per parameter group and overall.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub groups: Vec<(String, f64)>,
    pub max_rel_err: f64,
    /// Largest analytic gradient entry; near zero means the check says little.
    pub max_abs_grad: f64,
    pub n_params: usize,
}

/// Finite-difference check of loss(batch scores) against every parameter
/// tensor. Perturbed selection reuses one noise bank so the noise stays fixed.
pub fn pipeline_grad_check(
    params: &ModelParams,
    videos: &[&FeatureBundle],
    queries: &[&QueryFeatures],
    mode: &SelectionMode,
    eps: f64,
) -> Result<GradReport> {
    let names: Vec<String> = params.tensors().iter().map(|(n, _)| n.clone()).collect();
    let keys: Vec<usize> = (0..videos.len()).collect();
    let mut groups: Vec<(String, f64)> = Vec::new();
    for (k, name) in names.iter().enumerate() {
        let inputs: Vec<Mat> = vec![params.tensors()[k].1.clone()];
        let f = |tape: &mut Tape, leaves: &[Var]| -> Result<Var> {
            let mut all: Vec<Var> = Vec::with_capacity(names.len());
            for (i, (_, t)) in params.tensors().into_iter().enumerate() {
                all.push(if i == k { leaves[0] } else { tape.leaf(t.clone()) });
            }
            let vars = params.vars_from(&mut all.into_iter());
            let r = params.batch_scores_on(tape, &vars, videos, queries, mode, &keys)?;
            contrastive_loss_on(tape, r)
        };
        let err = grad_check(f, &inputs, eps)?;
        let group = name.split('.').next().unwrap_or(name).to_string();
        match groups.iter_mut().find(|(g, _)| *g == group) {
            Some((_, e)) => *e = e.max(err),
            None => groups.push((group, err)),
        }
    }
    let max_rel_err = groups.iter().map(|(_, e)| *e).fold(0.0, f64::max);

    let mut tape = Tape::new();
    let (vars, leaves) = params.bind(&mut tape);
    let r = params.batch_scores_on(&mut tape, &vars, videos, queries, mode, &keys)?;
    let loss = contrastive_loss_on(&mut tape, r)?;
    let grads = tape.backward(loss)?;
    let max_abs_grad = leaves
        .iter()
        .filter_map(|l| grads.get(*l))
        .flat_map(|g| g.iter().map(|v| v.abs()))
        .fold(0.0, f64::max);
    Ok(GradReport {
        groups,
        max_rel_err,
        max_abs_grad,
        n_params: params.num_scalars(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{synthetic_dataset, SyntheticSpec};
    use ndarray::array;
    use proptest::prelude::*;

    /// Mean row cross-entropy against the diagonal, written out directly.
    fn xent_oracle(r: &Array2<f64>) -> f64 {
        let b = r.nrows();
        let mut total = 0.0;
        for i in 0..b {
            let z: f64 = (0..b).map(|j| r[[i, j]].exp()).sum();
            total += -(r[[i, i]].exp() / z).ln();
        }
        total / b as f64
    }

    #[test]
    fn loss_examples() {
        let l = contrastive_loss(&Array2::zeros((4, 4))).unwrap();
        assert!((l - 2.0 * 4f64.ln()).abs() < 1e-12);
        assert!((l - 2.77259).abs() < 1e-5);
        let l = contrastive_loss(&(Array2::eye(2) * 100.0)).unwrap();
        assert!(l < 1e-8 && l >= 0.0);
        assert!(matches!(
            contrastive_loss(&array![[f64::NAN, 0.0], [0.0, 0.0]]),
            Err(Error::Numeric(_))
        ));
        assert!(contrastive_loss(&Array2::zeros((2, 3))).is_err());
    }

    proptest! {
        #[test]
        fn loss_matches_oracle_and_is_nonnegative(
            vals in prop::collection::vec(-5.0f64..5.0, 9),
        ) {
            let r = Array2::from_shape_vec((3, 3), vals).unwrap();
            let (v2t, t2v) = contrastive_terms(&r).unwrap();
            prop_assert!((v2t - xent_oracle(&r)).abs() < 1e-12);
            prop_assert!((t2v - xent_oracle(&r.t().to_owned())).abs() < 1e-12);
            prop_assert!(v2t + t2v >= 0.0);
        }

        #[test]
        fn symmetric_grids_have_equal_terms(vals in prop::collection::vec(-5.0f64..5.0, 16)) {
            let a = Array2::from_shape_vec((4, 4), vals).unwrap();
            let r = &a + &a.t();
            let (v2t, t2v) = contrastive_terms(&r).unwrap();
            prop_assert!((v2t - t2v).abs() < 1e-9);
        }

        #[test]
        fn aligned_permutation_keeps_loss(vals in prop::collection::vec(-5.0f64..5.0, 16)) {
            let r = Array2::from_shape_vec((4, 4), vals).unwrap();
            let perm = [3, 1, 0, 2];
            let pr = r.select(ndarray::Axis(0), &perm).select(ndarray::Axis(1), &perm);
            prop_assert!((contrastive_loss(&r).unwrap() - contrastive_loss(&pr).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let lrs: Vec<f64> = (0..100).map(|s| learning_rate(1.0, s, 100)).collect();
        assert!((lrs[0] - 0.1).abs() < 1e-12);
        assert!((lrs[9] - 1.0).abs() < 1e-12);
        assert!((lrs[10] - 1.0).abs() < 1e-12);
        assert!(lrs[10..].windows(2).all(|w| w[1] <= w[0]));
        assert!(lrs[99] < 1e-3);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = array![[1.0, -2.0]];
        let mut adam = Adam::new(&[(1, 2)]);
        adam.step(vec![&mut p], &[array![[0.5, -3.0]]], 0.25);
        // bias-corrected first step is lr * sign(g)
        assert!((p[[0, 0]] - 0.75).abs() < 1e-6);
        assert!((p[[0, 1]] + 1.75).abs() < 1e-6);
    }

    fn tiny() -> (Dataset, TrainConfig) {
        let spec = SyntheticSpec { num_pairs: 6, dim: 8, frames: 3, patches: 4, max_words: 3, noise: 0.2, seed: 9 };
        let (ds, _) = synthetic_dataset(&spec).unwrap();
        let mut cfg = TrainConfig::new(ModelConfig::for_dataset(&ds, 2));
        cfg.batch_size = 4;
        cfg.epochs = 3;
        cfg.n_samples = 10;
        cfg.lr = 1e-3;
        (ds, cfg)
    }

    #[test]
    fn training_is_deterministic() {
        let (ds, cfg) = tiny();
        let (pa, ra) = train(&ds, &cfg).unwrap();
        let (pb, rb) = train(&ds, &cfg).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(pa, pb);
        assert_eq!(ra.steps, 6);
        assert_eq!(ra.epoch_losses.len(), 3);
        assert_ne!(pa, ModelParams::init(cfg.model.clone(), cfg.seed).unwrap());
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let (ds, mut cfg) = tiny();
        cfg.lr = 0.0;
        cfg.batch_size = 6;
        let (p, r) = train(&ds, &cfg).unwrap();
        assert_eq!(p, ModelParams::init(cfg.model.clone(), cfg.seed).unwrap());
        // same batch every epoch, different noise per step
        let first = r.epoch_losses[0];
        assert!(r.epoch_losses.iter().all(|l| (l - first).abs() < 1e-6 * first.max(1.0)));
    }

    #[test]
    fn loss_falls_after_warm_up() {
        let spec = SyntheticSpec { num_pairs: 12, dim: 8, frames: 3, patches: 4, max_words: 4, noise: 0.6, seed: 21 };
        let (ds, _) = synthetic_dataset(&spec).unwrap();
        let mut model = ModelConfig::for_dataset(&ds, 2);
        model.strict_mode = true;
        let mut cfg = TrainConfig::new(model);
        cfg.batch_size = 12;
        cfg.epochs = 40;
        cfg.lr = 1e-2;
        let (_, r) = train(&ds, &cfg).unwrap();
        let warm = cfg.epochs.div_ceil(10);
        let tail = &r.epoch_losses[warm..];
        let rises: Vec<f64> = tail.windows(2).map(|w| w[1] - w[0]).filter(|d| *d > 0.0).collect();
        let (first, last) = (tail[0], *tail.last().unwrap());
        assert!(last < first, "{:?}", r.epoch_losses);
        // epoch averages wobble with the selection noise, but only slightly and in a minority of epochs
        assert!(rises.len() < tail.len() / 2, "{rises:?}");
        assert!(rises.iter().all(|d| *d < 1e-2 * first), "{rises:?}");
    }

    #[test]
    fn train_rejects_small_datasets() {
        let (ds, mut cfg) = tiny();
        cfg.batch_size = 7;
        assert!(matches!(train(&ds, &cfg), Err(Error::Data(_))));
        cfg.batch_size = 1;
        assert!(matches!(train(&ds, &cfg), Err(Error::Data(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let (ds, _) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.ucfa");
        let p = ModelParams::random(ModelConfig::for_dataset(&ds, 2), 3).unwrap();
        save_checkpoint(&p, &path).unwrap();
        let back = load_checkpoint(&path, None).unwrap();
        assert_eq!(back, p);
        for ((_, a), (_, b)) in back.tensors().iter().zip(p.tensors()) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn checkpoint_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.ucfa");
        let p = ModelParams::init(ModelConfig::new(12, 4, 2, 8, 3), 0).unwrap();
        save_checkpoint(&p, &path).unwrap();
        let err = load_checkpoint(&path, Some(&ModelConfig::new(8, 4, 2, 8, 3))).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(err.to_string().contains("isa_frame"), "{err}");

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path, None), Err(Error::Data(_))));
    }

    #[test]
    fn pipeline_gradients_match_finite_differences() {
        let spec = SyntheticSpec { num_pairs: 2, dim: 4, frames: 2, patches: 3, max_words: 2, noise: 0.3, seed: 4 };
        let (ds, _) = synthetic_dataset(&spec).unwrap();
        let mut cfg = ModelConfig::for_dataset(&ds, 2);
        cfg.strict_mode = true;
        let p = ModelParams::random(cfg, 1).unwrap();
        let v: Vec<&FeatureBundle> = ds.videos.iter().collect();
        let q: Vec<&QueryFeatures> = ds.queries.iter().collect();
        let bank = Rc::new(NoiseBank::new(0.05, 20, 0, 0));
        let rep = pipeline_grad_check(&p, &v, &q, &SelectionMode::Perturbed(bank), 1e-6).unwrap();
        assert_eq!(rep.groups.len(), 5);
        assert!(rep.max_rel_err < 1e-4, "{rep:?}");
        assert!(rep.max_abs_grad > 1e-3, "{rep:?}");
    }
}
