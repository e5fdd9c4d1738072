//! Feature bundles, query features and the JSON manifest tying them together.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::container::{read_container, write_container, Tensor, TensorMap};
use crate::error::{Error, Result};

/// Pre-extracted features of one video: per-frame [CLS] rows and per-frame patch tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub id: String,
    /// N x C
    pub frames: Array2<f32>,
    /// N x M x C
    pub patches: Array3<f32>,
}

/// Pre-extracted features of one text query, zero-padded to a fixed word count.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryFeatures {
    pub id: String,
    /// L_t x C; rows at and after `valid_len` are padding.
    pub words: Array2<f32>,
    pub sentence: Array1<f32>,
    pub valid_len: usize,
}

fn all_finite<'a>(mut it: impl Iterator<Item = &'a f32>) -> bool {
    it.all(|v| v.is_finite())
}

impl FeatureBundle {
    pub fn new(id: impl Into<String>, frames: Array2<f32>, patches: Array3<f32>) -> Result<Self> {
        let b = FeatureBundle {
            id: id.into(),
            frames,
            patches,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn num_patches(&self) -> usize {
        self.patches.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, c) = self.frames.dim();
        let (pn, m, pc) = self.patches.dim();
        if n == 0 || c == 0 || m == 0 {
            return Err(Error::data(format!(
                "video '{}': frames {n}x{c} / patches {pn}x{m}x{pc} has an empty axis",
                self.id
            )));
        }
        if pn != n || pc != c {
            return Err(Error::data(format!(
                "video '{}': patches {pn}x{m}x{pc} inconsistent with frames {n}x{c}",
                self.id
            )));
        }
        if !all_finite(self.frames.iter()) || !all_finite(self.patches.iter()) {
            return Err(Error::data(format!(
                "video '{}' holds non-finite values",
                self.id
            )));
        }
        Ok(())
    }

    pub fn to_tensors(&self) -> TensorMap {
        let mut m = TensorMap::new();
        let (n, c) = self.frames.dim();
        let (_, mm, _) = self.patches.dim();
        m.insert(
            "frames".into(),
            Tensor::new(vec![n, c], self.frames.iter().copied().collect()).expect("shape"),
        );
        m.insert(
            "patches".into(),
            Tensor::new(vec![n, mm, c], self.patches.iter().copied().collect()).expect("shape"),
        );
        m
    }

    pub fn from_tensors(id: impl Into<String>, tensors: &TensorMap) -> Result<Self> {
        let id = id.into();
        let frames = get(tensors, "frames", &id)?;
        let patches = get(tensors, "patches", &id)?;
        let frames = match frames.dims() {
            [n, c] => Array2::from_shape_vec((*n, *c), frames.data().to_vec()),
            d => return Err(Error::data(format!("video '{id}': frames must be rank 2, got {d:?}"))),
        }
        .map_err(|e| Error::data(e.to_string()))?;
        let patches = match patches.dims() {
            [n, m, c] => Array3::from_shape_vec((*n, *m, *c), patches.data().to_vec()),
            d => return Err(Error::data(format!("video '{id}': patches must be rank 3, got {d:?}"))),
        }
        .map_err(|e| Error::data(e.to_string()))?;
        FeatureBundle::new(id, frames, patches)
    }
}

impl QueryFeatures {
    pub fn new(
        id: impl Into<String>,
        words: Array2<f32>,
        sentence: Array1<f32>,
        valid_len: usize,
    ) -> Result<Self> {
        let q = QueryFeatures {
            id: id.into(),
            words,
            sentence,
            valid_len,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn max_words(&self) -> usize {
        self.words.nrows()
    }

    pub fn dim(&self) -> usize {
        self.sentence.len()
    }

    /// `true` for real words, `false` for padding rows.
    pub fn word_mask(&self) -> Vec<bool> {
        (0..self.max_words()).map(|j| j < self.valid_len).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let (lt, c) = self.words.dim();
        if c == 0 || c != self.sentence.len() {
            return Err(Error::data(format!(
                "query '{}': words {lt}x{c} inconsistent with sentence length {}",
                self.id,
                self.sentence.len()
            )));
        }
        if self.valid_len == 0 || self.valid_len > lt {
            return Err(Error::data(format!(
                "query '{}': valid_len {} outside 1..={lt}",
                self.id, self.valid_len
            )));
        }
        if !all_finite(self.words.iter()) || !all_finite(self.sentence.iter()) {
            return Err(Error::data(format!(
                "query '{}' holds non-finite values",
                self.id
            )));
        }
        Ok(())
    }

    pub fn to_tensors(&self) -> TensorMap {
        let mut m = TensorMap::new();
        let (lt, c) = self.words.dim();
        m.insert(
            "words".into(),
            Tensor::new(vec![lt, c], self.words.iter().copied().collect()).expect("shape"),
        );
        m.insert("sentence".into(), Tensor::vector(self.sentence.to_vec()));
        m.insert(
            "mask".into(),
            Tensor::vector(
                (0..lt)
                    .map(|j| if j < self.valid_len { 1.0 } else { 0.0 })
                    .collect(),
            ),
        );
        m
    }

    pub fn from_tensors(id: impl Into<String>, tensors: &TensorMap) -> Result<Self> {
        let id = id.into();
        let words = get(tensors, "words", &id)?;
        let sentence = get(tensors, "sentence", &id)?;
        let words = match words.dims() {
            [lt, c] => Array2::from_shape_vec((*lt, *c), words.data().to_vec()),
            d => return Err(Error::data(format!("query '{id}': words must be rank 2, got {d:?}"))),
        }
        .map_err(|e| Error::data(e.to_string()))?;
        if sentence.rank() != 1 {
            return Err(Error::data(format!("query '{id}': sentence must be rank 1")));
        }
        let sentence = Array1::from(sentence.data().to_vec());
        let valid_len = match tensors.get("mask") {
            None => words.nrows(),
            Some(mask) => mask_valid_len(&id, mask, words.nrows())?,
        };
        QueryFeatures::new(id, words, sentence, valid_len)
    }
}

/// The mask must be a prefix of ones followed by zeros.
fn mask_valid_len(id: &str, mask: &Tensor, max_words: usize) -> Result<usize> {
    if mask.dims() != [max_words] {
        return Err(Error::data(format!(
            "query '{id}': mask dims {:?} do not match {max_words} words",
            mask.dims()
        )));
    }
    let valid = mask.data().iter().take_while(|&&v| v == 1.0).count();
    if mask.data()[valid..].iter().any(|&v| v != 0.0) {
        return Err(Error::data(format!(
            "query '{id}': mask is not a 1..1 0..0 prefix"
        )));
    }
    Ok(valid)
}

fn get<'a>(tensors: &'a TensorMap, name: &str, id: &str) -> Result<&'a Tensor> {
    tensors
        .get(name)
        .ok_or_else(|| Error::data(format!("'{id}': missing tensor '{name}'")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Video,
    Query,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub kind: EntryKind,
    pub path: PathBuf,
    #[serde(default)]
    pub gt_partner_ids: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn videos(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.kind == EntryKind::Video)
    }

    pub fn queries(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.kind == EntryKind::Query)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids: HashMap<EntryKind, HashSet<&str>> = HashMap::new();
        for e in &self.entries {
            if !ids.entry(e.kind).or_default().insert(e.id.as_str()) {
                return Err(Error::data(format!(
                    "manifest: duplicate {:?} id '{}'",
                    e.kind, e.id
                )));
            }
        }
        for kind in [EntryKind::Video, EntryKind::Query] {
            if ids.get(&kind).map_or(true, |s| s.is_empty()) {
                return Err(Error::data(format!("manifest: no {kind:?} entries")));
            }
        }
        for e in &self.entries {
            let other = match e.kind {
                EntryKind::Video => EntryKind::Query,
                EntryKind::Query => EntryKind::Video,
            };
            for p in &e.gt_partner_ids {
                if !ids[&other].contains(p.as_str()) {
                    return Err(Error::data(format!(
                        "manifest: '{}' names unknown {other:?} partner '{p}'",
                        e.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Videos, queries and the query -> video ground truth of one manifest, loaded in manifest order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub videos: Vec<FeatureBundle>,
    pub queries: Vec<QueryFeatures>,
    /// `gt[j]` is the index into `videos` of query j's ground-truth video.
    pub gt: Vec<usize>,
}

impl Dataset {
    pub fn from_parts(
        videos: Vec<FeatureBundle>,
        queries: Vec<QueryFeatures>,
        manifest: &Manifest,
    ) -> Result<Self> {
        let index: HashMap<&str, usize> = videos
            .iter()
            .enumerate()
            .map(|(i, v)| (v.id.as_str(), i))
            .collect();
        let by_id: HashMap<&str, &ManifestEntry> = manifest
            .queries()
            .map(|e| (e.id.as_str(), e))
            .collect();
        let mut gt = Vec::with_capacity(queries.len());
        for q in &queries {
            let entry = by_id
                .get(q.id.as_str())
                .ok_or_else(|| Error::data(format!("query '{}' not in manifest", q.id)))?;
            let partner = entry.gt_partner_ids.first().ok_or_else(|| {
                Error::data(format!("query '{}' has no ground-truth video", q.id))
            })?;
            let vi = index.get(partner.as_str()).ok_or_else(|| {
                Error::data(format!("query '{}': unknown video '{partner}'", q.id))
            })?;
            gt.push(*vi);
        }
        let ds = Dataset {
            videos,
            queries,
            gt,
        };
        ds.check_uniform_shapes()?;
        Ok(ds)
    }

    /// Loads every container named by a manifest; paths resolve relative to the manifest file.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<(Manifest, Dataset)> {
        let manifest_path = manifest_path.as_ref();
        let manifest = Manifest::load(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let mut videos = Vec::new();
        let mut queries = Vec::new();
        for e in &manifest.entries {
            let tensors = read_container(base.join(&e.path))?;
            match e.kind {
                EntryKind::Video => videos.push(FeatureBundle::from_tensors(&e.id, &tensors)?),
                EntryKind::Query => queries.push(QueryFeatures::from_tensors(&e.id, &tensors)?),
            }
        }
        let ds = Dataset::from_parts(videos, queries, &manifest)?;
        Ok((manifest, ds))
    }

    /// Writes `videos/<id>.ucfa`, `queries/<id>.ucfa` and `manifest.json` under `dir`.
    pub fn save(&self, manifest: &Manifest, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        for sub in ["videos", "queries"] {
            fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
        let paths: HashMap<(EntryKind, &str), &Path> = manifest
            .entries
            .iter()
            .map(|e| ((e.kind, e.id.as_str()), e.path.as_path()))
            .collect();
        for v in &self.videos {
            let rel = paths
                .get(&(EntryKind::Video, v.id.as_str()))
                .ok_or_else(|| Error::data(format!("video '{}' not in manifest", v.id)))?;
            write_container(&v.to_tensors(), dir.join(rel))?;
        }
        for q in &self.queries {
            let rel = paths
                .get(&(EntryKind::Query, q.id.as_str()))
                .ok_or_else(|| Error::data(format!("query '{}' not in manifest", q.id)))?;
            write_container(&q.to_tensors(), dir.join(rel))?;
        }
        let mpath = dir.join("manifest.json");
        manifest.save(&mpath)?;
        Ok(mpath)
    }

    fn check_uniform_shapes(&self) -> Result<()> {
        let first = self
            .videos
            .first()
            .ok_or_else(|| Error::data("dataset has no videos"))?;
        let q0 = self
            .queries
            .first()
            .ok_or_else(|| Error::data("dataset has no queries"))?;
        let (n, m, c) = first.patches.dim();
        for v in &self.videos {
            if v.patches.dim() != (n, m, c) {
                return Err(Error::data(format!(
                    "video '{}' has shape {:?}, expected {:?}",
                    v.id,
                    v.patches.dim(),
                    (n, m, c)
                )));
            }
        }
        let lt = q0.max_words();
        for q in &self.queries {
            if q.words.dim() != (lt, c) {
                return Err(Error::data(format!(
                    "query '{}' words {:?}, expected {:?}",
                    q.id,
                    q.words.dim(),
                    (lt, c)
                )));
            }
        }
        Ok(())
    }

    /// (N, M, C, L_t)
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let (n, m, c) = self.videos[0].patches.dim();
        (n, m, c, self.queries[0].max_words())
    }
}
