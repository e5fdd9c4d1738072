use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::rc::Rc;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use coarsefine::isa::Aggregator;
use coarsefine::metrics::{compute_metrics, Direction};
use coarsefine::model::{ModelConfig, DEFAULT_LOGIT_SCALE};
use coarsefine::patch_select::{NoiseBank, SelectionMode, DEFAULT_SAMPLES, DEFAULT_SIGMA};
use coarsefine::store::{Dataset, Manifest};
use coarsefine::synthetic::{synthetic_dataset, SyntheticSpec};
use coarsefine::train::{load_checkpoint, pipeline_grad_check, save_checkpoint, train, TrainConfig};
use coarsefine::unify::{unify_levels, Level, Normalization, ScoreFile, DEFAULT_SK_ITERS};
use coarsefine::Error;
use ndarray::Array2;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "coarsefine", version, about = "Multi-granularity video-text retrieval scoring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (containers plus manifest.json).
    GenSynthetic(GenArgs),
    /// Train on a manifest and write a checkpoint.
    Train(TrainArgs),
    /// Score every (video, query) pair and write the per-level matrices.
    Score(ScoreArgs),
    /// Sinkhorn-normalize and fuse the levels of a score file.
    SkNorm(SkNormArgs),
    /// Retrieval metrics for a score file.
    Eval(EvalArgs),
    /// Finite-difference check of the training gradient.
    GradCheck(GradArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pairs: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    frames: usize,
    #[arg(long, default_value_t = 9)]
    patches: usize,
    #[arg(long, default_value_t = 8)]
    words: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ModelArgs {
    /// Patches kept per frame.
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = DEFAULT_LOGIT_SCALE)]
    logit_scale: f64,
    /// Use a unit logit scale.
    #[arg(long)]
    strict: bool,
    /// Comma-separated subset of vs,fs,pw.
    #[arg(long, value_delimiter = ',', default_values_t = Level::ALL.map(|l| l.as_str().to_string()))]
    levels: Vec<String>,
    #[arg(long, default_value = "isa")]
    aggregator: String,
}

impl ModelArgs {
    fn config(&self, ds: &Dataset) -> anyhow::Result<ModelConfig> {
        let mut cfg = ModelConfig::for_dataset(ds, self.k);
        cfg.logit_scale = self.logit_scale;
        cfg.strict_mode = self.strict;
        cfg.levels = self
            .levels
            .iter()
            .map(|s| s.parse::<Level>())
            .collect::<Result<_, _>>()?;
        cfg.aggregator = self.aggregator.parse::<Aggregator>()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint path; the config goes to `<out>.json`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Videos (and queries, unless --queries is given).
    #[arg(long)]
    manifest: PathBuf,
    /// Take the queries from this manifest instead, e.g. to build a reference set.
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SkNormArgs {
    #[arg(long)]
    scores: PathBuf,
    /// Reference score file with the same videos; defaults to the input itself.
    #[arg(long)]
    sk_ref: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SK_ITERS)]
    iters: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scores: PathBuf,
    /// Manifest giving each query's ground-truth video.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    sk_norm: bool,
    #[arg(long, requires = "sk_norm")]
    sk_ref: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SK_ITERS)]
    sk_iters: usize,
    #[arg(long, default_value = "t2v")]
    direction: String,
}

#[derive(Args)]
struct GradArgs {
    /// Dataset to draw the batch from; a small synthetic one when absent.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pairs: usize,
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Check the perturbed selection path instead of hard top-K.
    #[arg(long)]
    perturbed: bool,
    #[arg(long, default_value_t = 2)]
    k: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(report) => {
            emit(&report);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Pretty JSON on stdout; a closed pipe is not an error.
fn emit(v: &Value) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", serde_json::to_string_pretty(v).expect("json"));
}

fn exit_code(e: &anyhow::Error) -> u8 {
    e.chain()
        .find_map(|c| c.downcast_ref::<Error>())
        .map_or(2, |e| e.exit_code() as u8)
}

fn run(cmd: Command) -> anyhow::Result<Value> {
    match cmd {
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::Train(a) => train_cmd(a),
        Command::Score(a) => score(a),
        Command::SkNorm(a) => sk_norm(a),
        Command::Eval(a) => eval(a),
        Command::GradCheck(a) => grad_check(a),
    }
}

fn gen_synthetic(a: GenArgs) -> anyhow::Result<Value> {
    let spec = SyntheticSpec {
        num_pairs: a.pairs,
        dim: a.dim,
        frames: a.frames,
        patches: a.patches,
        max_words: a.words,
        noise: a.noise,
        seed: a.seed,
    };
    let (ds, manifest) = synthetic_dataset(&spec)?;
    let path = ds.save(&manifest, &a.out)?;
    Ok(json!({ "manifest": path, "pairs": a.pairs }))
}

fn load(manifest: &Path) -> anyhow::Result<(Manifest, Dataset)> {
    Dataset::load(manifest).with_context(|| format!("loading {}", manifest.display()))
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<Value> {
    let (_, ds) = load(&a.manifest)?;
    let mut cfg = TrainConfig::new(a.model.config(&ds)?);
    cfg.epochs = a.epochs;
    cfg.batch_size = a.batch_size;
    cfg.lr = a.lr;
    cfg.seed = a.seed;
    let (params, report) = train(&ds, &cfg)?;
    save_checkpoint(&params, &a.out)?;
    Ok(json!({
        "checkpoint": a.out,
        "steps": report.steps,
        "epoch_losses": report.epoch_losses,
    }))
}

fn score(a: ScoreArgs) -> anyhow::Result<Value> {
    let params = load_checkpoint(&a.checkpoint, None)?;
    let (_, ds) = load(&a.manifest)?;
    let queries = match &a.queries {
        Some(q) => load(q)?.1.queries,
        None => ds.queries,
    };
    let file = params.score_file(&ds.videos, &queries)?;
    file.save(&a.out)?;
    Ok(json!({
        "scores": a.out,
        "videos": file.row_ids.len(),
        "queries": file.col_ids.len(),
        "levels": file.levels.keys().map(|l| l.as_str()).collect::<Vec<_>>(),
    }))
}

/// Fused matrix and whether the biases came from the test matrices themselves.
fn fuse(file: &ScoreFile, sk_ref: Option<&Path>, iters: usize) -> anyhow::Result<(Array2<f64>, bool)> {
    let levels = file.level_matrices();
    if levels.is_empty() {
        bail!(Error::data("score file holds no level matrices to normalize"));
    }
    let refs = match sk_ref {
        Some(p) => {
            let r = ScoreFile::load(p)?;
            if r.row_ids != file.row_ids {
                bail!(Error::data(format!(
                    "reference {} has different videos than the scores",
                    p.display()
                )));
            }
            let mats = levels
                .iter()
                .map(|l| {
                    let level = l.level.expect("level matrix");
                    r.levels.get(&level).cloned().ok_or_else(|| {
                        Error::data(format!("reference lacks level {}", level.as_str()))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            Some(mats)
        }
        None => None,
    };
    let unified = unify_levels(&levels, refs.as_deref(), Normalization::Sinkhorn { n_iter: iters })?;
    Ok((unified.r.values, unified.self_reference))
}

fn sk_norm(a: SkNormArgs) -> anyhow::Result<Value> {
    let mut file = ScoreFile::load(&a.scores)?;
    let (r, self_reference) = fuse(&file, a.sk_ref.as_deref(), a.iters)?;
    file.r = Some(r);
    file.save(&a.out)?;
    Ok(json!({ "scores": a.out, "sk_iters": a.iters, "self_reference": self_reference }))
}

/// Row index of each query's ground-truth video, in score-file column order.
fn ground_truth(manifest: &Manifest, file: &ScoreFile) -> anyhow::Result<Vec<usize>> {
    let rows: HashMap<&str, usize> = file
        .row_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let partner: HashMap<&str, &[String]> = manifest
        .queries()
        .map(|e| (e.id.as_str(), e.gt_partner_ids.as_slice()))
        .collect();
    file.col_ids
        .iter()
        .map(|q| {
            let partners = partner
                .get(q.as_str())
                .ok_or_else(|| Error::data(format!("query '{q}' is not in the gt manifest")))?;
            partners
                .iter()
                .find_map(|v| rows.get(v.as_str()).copied())
                .ok_or_else(|| anyhow!(Error::data(format!("query '{q}' has no ground-truth video among the scored rows"))))
        })
        .collect()
}

fn eval(a: EvalArgs) -> anyhow::Result<Value> {
    let direction: Direction = a.direction.parse()?;
    let file = ScoreFile::load(&a.scores)?;
    let manifest = Manifest::load(&a.gt)?;
    let gt = ground_truth(&manifest, &file)?;
    let (r, self_reference) = if a.sk_norm {
        fuse(&file, a.sk_ref.as_deref(), a.sk_iters)?
    } else {
        (file.total()?, false)
    };
    let report = compute_metrics(&r, &gt, direction)?;
    let mut out = serde_json::to_value(&report)?;
    out["sk_norm"] = json!(a.sk_norm);
    if a.sk_norm {
        out["sk_iters"] = json!(a.sk_iters);
        out["self_reference"] = json!(self_reference);
    }
    Ok(out)
}

fn grad_check(a: GradArgs) -> anyhow::Result<Value> {
    let ds = match &a.manifest {
        Some(m) => load(m)?.1,
        None => {
            let spec = SyntheticSpec {
                num_pairs: a.pairs,
                dim: 8,
                frames: 3,
                patches: 4,
                max_words: 3,
                noise: 0.5,
                seed: a.seed,
            };
            synthetic_dataset(&spec)?.0
        }
    };
    let n = a.pairs.min(ds.queries.len());
    if n < 2 {
        bail!(Error::data("grad-check needs at least two pairs"));
    }
    let mut cfg = ModelConfig::for_dataset(&ds, a.k);
    // a unit scale keeps the loss away from saturation so gradients are not vanishingly small
    cfg.strict_mode = true;
    let params = coarsefine::model::ModelParams::random(cfg, a.seed)?;
    let queries: Vec<_> = ds.queries[..n].iter().collect();
    let videos: Vec<_> = ds.gt[..n].iter().map(|&v| &ds.videos[v]).collect();
    let mode = if a.perturbed {
        SelectionMode::Perturbed(Rc::new(NoiseBank::new(DEFAULT_SIGMA, DEFAULT_SAMPLES, a.seed, 0)))
    } else {
        SelectionMode::Hard
    };
    let report = pipeline_grad_check(&params, &videos, &queries, &mode, a.eps)?;
    let passed = report.max_rel_err < a.tol;
    let mut out = serde_json::to_value(&report)?;
    out["tol"] = json!(a.tol);
    out["pass"] = json!(passed);
    if !passed {
        emit(&out);
        bail!(Error::numeric(format!(
            "max relative gradient error {:.3e} exceeds {:.1e}",
            report.max_rel_err, a.tol
        )));
    }
    Ok(out)
}
