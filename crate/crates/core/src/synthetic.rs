//! Deterministic synthetic video/query features for desk-scale experiments.
//!
//! Pair `i` shares a latent unit direction `z_i`. Every frame row, patch row,
//! valid word row and the sentence vector of the pair is `z_i` plus i.i.d.
//! Gaussian noise with standard deviation `noise` per coordinate.

use std::path::PathBuf;

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::store::{Dataset, EntryKind, FeatureBundle, Manifest, ManifestEntry, QueryFeatures};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_pairs: usize,
    pub dim: usize,
    pub frames: usize,
    pub patches: usize,
    pub max_words: usize,
    pub noise: f64,
    pub seed: u64,
}

pub fn video_id(i: usize) -> String {
    format!("v{i:04}")
}

pub fn query_id(i: usize) -> String {
    format!("q{i:04}")
}

/// Number of real words for pair `i`: cycles downward from `max_words` so
/// that some queries carry padding.
fn valid_len(i: usize, max_words: usize) -> usize {
    max_words - i % (max_words / 2 + 1)
}

pub fn gen_synthetic(
    spec: &SyntheticSpec,
) -> Result<(Vec<FeatureBundle>, Vec<QueryFeatures>, Manifest)> {
    let SyntheticSpec {
        num_pairs,
        dim,
        frames,
        patches,
        max_words,
        noise,
        seed,
    } = *spec;
    if num_pairs == 0 || dim == 0 || frames == 0 || patches == 0 || max_words == 0 {
        return Err(Error::data("synthetic dimensions must all be >= 1"));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::data(format!("noise must be finite and >= 0, got {noise}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy = |z: &Array1<f64>, rng: &mut ChaCha8Rng| -> Vec<f32> {
        z.iter()
            .map(|&v| {
                let g: f64 = rng.sample(StandardNormal);
                (v + noise * g) as f32
            })
            .collect()
    };

    let mut videos = Vec::with_capacity(num_pairs);
    let mut queries = Vec::with_capacity(num_pairs);
    let mut entries = Vec::with_capacity(2 * num_pairs);
    for i in 0..num_pairs {
        let z = latent(dim, &mut rng);

        let mut f = Vec::with_capacity(frames * dim);
        for _ in 0..frames {
            f.extend(noisy(&z, &mut rng));
        }
        let mut p = Vec::with_capacity(frames * patches * dim);
        for _ in 0..frames * patches {
            p.extend(noisy(&z, &mut rng));
        }
        let vlen = valid_len(i, max_words);
        let mut w = Vec::with_capacity(max_words * dim);
        for j in 0..max_words {
            if j < vlen {
                w.extend(noisy(&z, &mut rng));
            } else {
                w.extend(std::iter::repeat(0.0f32).take(dim));
            }
        }
        let s = noisy(&z, &mut rng);

        let (vid, qid) = (video_id(i), query_id(i));
        videos.push(FeatureBundle::new(
            vid.clone(),
            Array2::from_shape_vec((frames, dim), f).expect("shape"),
            Array3::from_shape_vec((frames, patches, dim), p).expect("shape"),
        )?);
        queries.push(QueryFeatures::new(
            qid.clone(),
            Array2::from_shape_vec((max_words, dim), w).expect("shape"),
            Array1::from(s),
            vlen,
        )?);
        entries.push(ManifestEntry {
            id: vid.clone(),
            kind: EntryKind::Video,
            path: PathBuf::from(format!("videos/{vid}.ucfa")),
            gt_partner_ids: vec![qid.clone()],
        });
        entries.push(ManifestEntry {
            id: qid,
            kind: EntryKind::Query,
            path: PathBuf::from(format!("queries/{}.ucfa", query_id(i))),
            gt_partner_ids: vec![vid],
        });
    }
    let manifest = Manifest { entries };
    manifest.validate()?;
    Ok((videos, queries, manifest))
}

/// Convenience wrapper returning a ready [`Dataset`].
pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<(Dataset, Manifest)> {
    let (v, q, m) = gen_synthetic(spec)?;
    let ds = Dataset::from_parts(v, q, &m)?;
    Ok((ds, m))
}

fn latent(dim: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    loop {
        let z: Array1<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = z.dot(&z).sqrt();
        if norm > 1e-12 {
            return z / norm;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cos(a: &[f32], b: &[f32]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
        let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    fn spec(num_pairs: usize, dim: usize, frames: usize, patches: usize, max_words: usize, noise: f64, seed: u64) -> SyntheticSpec {
        SyntheticSpec { num_pairs, dim, frames, patches, max_words, noise, seed }
    }

    #[test]
    fn zero_noise_frames_align_with_sentence() {
        let (v, q, m) = gen_synthetic(&spec(2, 8, 2, 4, 3, 0.0, 7)).unwrap();
        assert_eq!(m.entries.len(), 4);
        for i in 0..2 {
            let s = q[i].sentence.as_slice().unwrap();
            for row in v[i].frames.rows() {
                assert!((cos(row.as_slice().unwrap(), s) - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = gen_synthetic(&spec(3, 5, 2, 3, 4, 0.2, 7)).unwrap();
        let b = gen_synthetic(&spec(3, 5, 2, 3, 4, 0.2, 7)).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(&spec(3, 5, 2, 3, 4, 0.2, 8)).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn padding_rows_are_zero_and_masked() {
        let (_, q, _) = gen_synthetic(&spec(4, 4, 1, 1, 4, 0.1, 3)).unwrap();
        let lens: Vec<usize> = q.iter().map(|q| q.valid_len).collect();
        assert_eq!(lens, vec![4, 3, 2, 4]);
        for qq in &q {
            for j in qq.valid_len..4 {
                assert!(qq.words.row(j).iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn diagonal_dominates_at_low_noise() {
        let (v, q, _) = gen_synthetic(&spec(16, 32, 4, 9, 8, 0.1, 1)).unwrap();
        for (i, vi) in v.iter().enumerate() {
            let mean: Vec<f32> = vi
                .frames
                .mean_axis(ndarray::Axis(0))
                .unwrap()
                .to_vec();
            let scores: Vec<f64> = q
                .iter()
                .map(|qj| cos(&mean, qj.sentence.as_slice().unwrap()))
                .collect();
            let best = scores
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(best, i);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(gen_synthetic(&spec(0, 4, 1, 1, 1, 0.0, 0)).is_err());
        assert!(gen_synthetic(&spec(1, 4, 1, 1, 1, -1.0, 0)).is_err());
    }
}
