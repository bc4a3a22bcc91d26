//! Per-image detected concepts, deterministic concept embeddings, ROI
//! feature projection, and the image-context feature.
//!
//! Concept detection is an input here: records carry the per-image top-10
//! concept lists that a detector service would otherwise produce.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conceptnet::normalize_concept;
use crate::error::{Error, Result};
use crate::params::seeded_rng;
use crate::tensor::{matmul, norm, Tensor};

/// One training/inference record: k ordered images' ROI features, per-image
/// concept lists, and (for training) the ground-truth caption. `story`
/// optionally carries the per-image sentences used by dataset verification.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub images: Vec<Tensor>,
    pub detected: Vec<Vec<String>>,
    pub caption: Option<String>,
    pub story: Option<Vec<String>>,
}

impl Sample {
    pub fn k(&self) -> usize {
        self.images.len()
    }

    /// Total ROI count across the image sequence.
    pub fn total_rois(&self) -> usize {
        self.images.iter().map(Tensor::rows).sum()
    }

    /// All detected concepts in temporal order, normalized.
    pub fn detected_flat(&self) -> Vec<String> {
        self.detected
            .iter()
            .flatten()
            .map(|c| normalize_concept(c))
            .collect()
    }
}

/// Serialized form of a sample (one JSON object per line in corpus files).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub k: usize,
    pub feature_dim: usize,
    pub images: Vec<Vec<Vec<f64>>>,
    pub detected: Vec<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub story: Option<Vec<String>>,
}

/// Validate and convert a parsed record. `concepts_per_image` is the
/// corpus-wide detected-concept count (10 in every shipped profile).
pub fn load_sample(record: SampleRecord, concepts_per_image: usize) -> Result<Sample> {
    let SampleRecord {
        id,
        k,
        feature_dim,
        images,
        detected,
        caption,
        story,
    } = record;
    if images.len() != k || detected.len() != k {
        return Err(Error::Schema {
            id,
            detail: format!(
                "expected {k} image slots, got {} images / {} concept lists",
                images.len(),
                detected.len()
            ),
        });
    }
    for (i, list) in detected.iter().enumerate() {
        if list.len() != concepts_per_image {
            return Err(Error::Schema {
                id,
                detail: format!(
                    "image {i} has {} detected concepts, expected {concepts_per_image}",
                    list.len()
                ),
            });
        }
    }
    let mut tensors = Vec::with_capacity(k);
    for (i, rows) in images.into_iter().enumerate() {
        for row in &rows {
            if row.len() != feature_dim {
                return Err(Error::Schema {
                    id,
                    detail: format!(
                        "image {i} has a ROI of width {}, expected {feature_dim}",
                        row.len()
                    ),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parse(format!(
                    "record `{id}`: non-finite feature value in image {i}"
                )));
            }
        }
        tensors.push(Tensor::from_rows(&rows)?);
    }
    if let Some(s) = &story {
        if s.len() != k {
            return Err(Error::Schema {
                id,
                detail: format!("story has {} sentences, expected {k}", s.len()),
            });
        }
    }
    Ok(Sample {
        id,
        images: tensors,
        detected,
        caption,
        story,
    })
}

pub fn sample_to_record(sample: &Sample, feature_dim: usize) -> SampleRecord {
    SampleRecord {
        id: sample.id.clone(),
        k: sample.k(),
        feature_dim,
        images: sample
            .images
            .iter()
            .map(|t| (0..t.rows()).map(|r| t.row(r).to_vec()).collect())
            .collect(),
        detected: sample.detected.clone(),
        caption: sample.caption.clone(),
        story: sample.story.clone(),
    }
}

/// Read a JSON-lines corpus file of sample records.
pub fn load_samples_file(path: &Path, concepts_per_image: usize) -> Result<Vec<Sample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(line)?;
        out.push(load_sample(record, concepts_per_image)?);
    }
    Ok(out)
}

/// Embedding source. Table mode serves corpus-provided vectors with a hashed
/// fallback; hashed mode derives every vector from a seeded hash of the
/// normalized concept string. Output is always unit-norm.
#[derive(Debug, Clone)]
pub enum ProviderMode {
    Hashed,
    Table(BTreeMap<String, Vec<f64>>),
}

#[derive(Debug, Clone)]
pub struct EmbeddingProvider {
    pub mode: ProviderMode,
    pub dim: usize,
    pub seed: u64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for b in bytes {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

impl EmbeddingProvider {
    pub fn hashed(dim: usize, seed: u64) -> Self {
        Self {
            mode: ProviderMode::Hashed,
            dim,
            seed,
        }
    }

    pub fn with_table(table: BTreeMap<String, Vec<f64>>, dim: usize, seed: u64) -> Self {
        Self {
            mode: ProviderMode::Table(table),
            dim,
            seed,
        }
    }

    /// Deterministic unit-norm embedding of a concept.
    pub fn embed(&self, concept: &str) -> Tensor {
        let key = normalize_concept(concept);
        if let ProviderMode::Table(table) = &self.mode {
            if let Some(vec) = table.get(&key) {
                let mut v = vec.clone();
                v.resize(self.dim, 0.0);
                let n = norm(&v);
                if n > 0.0 {
                    for x in &mut v {
                        *x /= n;
                    }
                    return Tensor::vector(v);
                }
            }
        }
        self.hashed_embed(&key)
    }

    fn hashed_embed(&self, key: &str) -> Tensor {
        let mut rng = seeded_rng(self.seed ^ fnv1a(key.as_bytes()));
        let mut v: Vec<f64> = (0..self.dim).map(|_| standard_normal(&mut rng)).collect();
        let n = norm(&v);
        for x in &mut v {
            *x /= n;
        }
        Tensor::vector(v)
    }
}

fn standard_normal(rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    // Box-Muller on two uniform draws.
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Project every ROI row through the frozen backbone embedding layer and
/// concatenate over images in temporal order: one row per ROI, width d.
pub fn project_rois(sample: &Sample, proj: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = proj.cols();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(sample.total_rois());
    for image in &sample.images {
        if image.cols() != proj.rows() {
            return Err(Error::Shape {
                op: "project_rois",
                lhs: image.shape().to_vec(),
                rhs: proj.shape().to_vec(),
            });
        }
        let projected = matmul(image, proj)?.add_row_broadcast(bias)?;
        for r in 0..projected.rows() {
            rows.push(projected.row(r).to_vec());
        }
    }
    if rows.is_empty() {
        return Err(Error::Degenerate {
            op: "project_rois",
            detail: "sample has no ROI rows".into(),
        });
    }
    debug_assert!(rows.iter().all(|r| r.len() == d));
    Tensor::from_rows(&rows)
}

/// Arithmetic mean over ROI rows: the image-context feature.
pub fn context_feature(rois: &Tensor) -> Result<Tensor> {
    if rois.rows() == 0 {
        return Err(Error::Degenerate {
            op: "context_feature",
            detail: "no ROI rows".into(),
        });
    }
    Ok(rois.column_sums().scale(1.0 / rois.rows() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_record(k: usize, per_image: usize) -> SampleRecord {
        SampleRecord {
            id: "s0".into(),
            k,
            feature_dim: 3,
            images: (0..k).map(|_| vec![vec![0.1, 0.2, 0.3]; 2]).collect(),
            detected: (0..k)
                .map(|i| (0..per_image).map(|j| format!("c{i}_{j}")).collect())
                .collect(),
            caption: Some("a toy caption".into()),
            story: None,
        }
    }

    #[test]
    fn paper_shape_record_loads_forty_concepts() {
        let record = toy_record(4, 10);
        let sample = load_sample(record, 10).unwrap();
        assert_eq!(sample.detected_flat().len(), 40);
    }

    #[test]
    fn wrong_concept_count_names_image_index() {
        let mut record = toy_record(4, 10);
        record.detected[2].pop();
        let err = load_sample(record, 10).unwrap_err();
        assert!(err.to_string().contains("image 2"), "{err}");
    }

    #[test]
    fn non_finite_feature_is_a_parse_error() {
        let mut record = toy_record(2, 10);
        record.images[1][0][1] = f64::NAN;
        let err = load_sample(record, 10).unwrap_err();
        assert!(matches!(err, Error::Parse(_)));
    }

    #[test]
    fn record_round_trip_is_identity() {
        let record = toy_record(3, 10);
        let json = serde_json::to_string(&record).unwrap();
        let back: SampleRecord = serde_json::from_str(&json).unwrap();
        let a = load_sample(record, 10).unwrap();
        let b = load_sample(back, 10).unwrap();
        assert_eq!(a.id, b.id);
        assert_eq!(a.detected, b.detected);
        assert_eq!(a.caption, b.caption);
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn embeddings_deterministic_and_unit_norm() {
        let provider = EmbeddingProvider::hashed(32, 7);
        let a = provider.embed("Hockey Game");
        let b = provider.embed("hockey_game");
        assert_eq!(a, b);
        assert!((norm(a.data()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hashed_embeddings_rarely_collinear() {
        let provider = EmbeddingProvider::hashed(32, 3);
        for i in 0..1000 {
            let a = provider.embed(&format!("word{i}"));
            let b = provider.embed(&format!("word{}", i + 1000));
            let cos = crate::tensor::dot(a.data(), b.data());
            assert!(cos.abs() < 0.999, "pair {i} nearly collinear: {cos}");
        }
    }

    #[test]
    fn table_mode_returns_normalized_vector() {
        let mut table = BTreeMap::new();
        table.insert("dog".to_string(), vec![3.0, 0.0, 0.0, 0.0]);
        let provider = EmbeddingProvider::with_table(table, 4, 0);
        let v = provider.embed("dog");
        assert_eq!(v.data(), &[1.0, 0.0, 0.0, 0.0]);
        // Unknown concepts fall through to hashed mode.
        let w = provider.embed("cat");
        assert!((norm(w.data()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_projection_passes_features_through() {
        let sample = load_sample(toy_record(2, 10), 10).unwrap();
        let eye = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let bias = Tensor::zeros(vec![3]);
        let out = project_rois(&sample, &eye, &bias).unwrap();
        assert_eq!(out.shape(), &[4, 3]);
        assert_eq!(out.row(0), &[0.1, 0.2, 0.3]);
    }

    #[test]
    fn projection_shape_contract() {
        let mut record = toy_record(3, 10);
        record.feature_dim = 3;
        let sample = load_sample(record, 10).unwrap();
        let mut rng = seeded_rng(1);
        let proj = crate::params::xavier_uniform(3, 5, &mut rng);
        let bias = Tensor::zeros(vec![5]);
        let out = project_rois(&sample, &proj, &bias).unwrap();
        assert_eq!(out.shape(), &[6, 5]);
    }

    #[test]
    fn context_feature_mean_and_symmetry() {
        let one = Tensor::from_rows(&[vec![2.0, -4.0]]).unwrap();
        assert_eq!(context_feature(&one).unwrap().data(), &[2.0, -4.0]);

        let sym = Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, -2.0]]).unwrap();
        let ctx = context_feature(&sym).unwrap();
        assert!(ctx.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn context_feature_matches_column_sum_oracle() {
        let mut state = 5u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let rows: Vec<Vec<f64>> = (0..7).map(|_| (0..5).map(|_| next()).collect()).collect();
        let m = Tensor::from_rows(&rows).unwrap();
        let ctx = context_feature(&m).unwrap();
        for c in 0..5 {
            let oracle: f64 = rows.iter().map(|r| r[c]).sum::<f64>() / 7.0;
            assert!((ctx.data()[c] - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn context_feature_permutation_invariant() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        let a = context_feature(&Tensor::from_rows(&rows).unwrap()).unwrap();
        let permuted = vec![rows[2].clone(), rows[0].clone(), rows[1].clone()];
        let b = context_feature(&Tensor::from_rows(&permuted).unwrap()).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
