use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{compute_cmc_map, Protocol, RankingResult, RetrievalMeta};
use crate::dataio::{normalize_image, Sample, Split};
use crate::error::{ReidError, Result};
use crate::model::Model;

/// Descriptors for every sample, in input order.
pub fn extract_descriptors(model: &Model<f32>, samples: &[Sample]) -> Result<Vec<Array1<f32>>> {
    samples
        .par_iter()
        .map(|s| {
            let image = normalize_image::<f32>(&s.image);
            Ok(model.extract_feature(&image, &s.keypoints)?.vector)
        })
        .collect()
}

/// `1 - <q, g>` between L2-normalized descriptors, computed in f64.
pub fn cosine_distances(query: &[Array1<f32>], gallery: &[Array1<f32>]) -> Array2<f64> {
    let normalize = |v: &Array1<f32>| {
        let v = v.mapv(f64::from);
        let n = v.dot(&v).sqrt().max(1e-12);
        v / n
    };
    let stack = |set: &[Array1<f32>]| {
        let dim = set.first().map_or(0, |v| v.len());
        let mut m = Array2::<f64>::zeros((set.len(), dim));
        for (mut row, v) in m.rows_mut().into_iter().zip(set) {
            row.assign(&normalize(v));
        }
        m
    };
    let q = stack(query);
    let g = stack(gallery);
    q.dot(&g.t()).mapv(|s| 1.0 - s)
}

pub fn evaluate(
    model: &Model<f32>,
    query: &[Sample],
    gallery: &[Sample],
    protocol: Protocol,
    max_rank: usize,
) -> Result<RankingResult> {
    if query.is_empty() {
        return Err(ReidError::EmptySplit(Split::Query.to_string()));
    }
    if gallery.is_empty() {
        return Err(ReidError::EmptySplit(Split::Gallery.to_string()));
    }
    let qd = extract_descriptors(model, query)?;
    let gd = extract_descriptors(model, gallery)?;
    let distances = cosine_distances(&qd, &gd);
    let qm: Vec<RetrievalMeta> = query.iter().map(|s| (&s.record).into()).collect();
    let gm: Vec<RetrievalMeta> = gallery.iter().map(|s| (&s.record).into()).collect();
    compute_cmc_map(distances.view(), &qm, &gm, protocol, max_rank)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankSummary {
    #[serde(rename = "1")]
    pub r1: f64,
    #[serde(rename = "5")]
    pub r5: f64,
    #[serde(rename = "10")]
    pub r10: f64,
    #[serde(rename = "20")]
    pub r20: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetFingerprint {
    pub query: String,
    pub gallery: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub rank: RankSummary,
    pub map: f64,
    pub num_query: usize,
    pub num_gallery: usize,
    pub num_valid_queries: usize,
    #[serde(rename = "K")]
    pub max_rank: usize,
    /// SHA-256 of the checkpoint file.
    pub checkpoint: String,
    pub dataset_root: String,
    pub dataset_fingerprint: DatasetFingerprint,
    pub cmc: Vec<f64>,
}

impl EvalReport {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        protocol: Protocol,
        result: &RankingResult,
        num_query: usize,
        num_gallery: usize,
        checkpoint: String,
        dataset_root: String,
        dataset_fingerprint: DatasetFingerprint,
    ) -> Self {
        Self {
            protocol,
            rank: RankSummary {
                r1: result.rank(1),
                r5: result.rank(5),
                r10: result.rank(10),
                r20: result.rank(20),
            },
            map: result.map,
            num_query,
            num_gallery,
            num_valid_queries: result.num_valid_queries,
            max_rank: result.cmc.len(),
            checkpoint,
            dataset_root,
            dataset_fingerprint,
            cmc: result.cmc.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageEmbedding {
    pub stage: usize,
    pub f_plus: Vec<f32>,
    pub f_minus: Vec<f32>,
}

/// One line of an embedding export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub image: String,
    pub split: Split,
    pub person_id: u32,
    pub cloth_id: u32,
    pub camera_id: u32,
    pub stages: Vec<StageEmbedding>,
}

/// Writes one JSON line per sample, split by split in the given order.
/// Returns the number of lines written.
pub fn export_embeddings(model: &Model<f32>, sets: &[(Split, &[Sample])], path: &Path) -> Result<usize> {
    let tmp = path.with_extension("tmp");
    let mut out = BufWriter::new(fs::File::create(&tmp)?);
    let mut lines = 0;
    for (split, samples) in sets {
        let records: Vec<EmbeddingRecord> = samples
            .par_iter()
            .map(|s| {
                let image = normalize_image::<f32>(&s.image);
                let pooled = model.pooled_features(&image, &s.keypoints)?;
                Ok(EmbeddingRecord {
                    image: s.record.file_name(),
                    split: *split,
                    person_id: s.record.person_id,
                    cloth_id: s.record.cloth_id,
                    camera_id: s.record.camera_id,
                    stages: pooled
                        .into_iter()
                        .map(|p| StageEmbedding {
                            stage: p.stage,
                            f_plus: p.f_plus.to_vec(),
                            f_minus: p.f_minus.to_vec(),
                        })
                        .collect(),
                })
            })
            .collect::<Result<_>>()?;
        for r in &records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        lines += records.len();
    }
    out.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn cosine_distance_is_scale_free() {
        let q = vec![arr1(&[1.0f32, 0.0]), arr1(&[3.0, 4.0])];
        let g = vec![arr1(&[2.0f32, 0.0]), arr1(&[0.0, 5.0])];
        let d = cosine_distances(&q, &g);
        assert!((d[[0, 0]] - 0.0).abs() < 1e-12);
        assert!((d[[0, 1]] - 1.0).abs() < 1e-12);
        assert!((d[[1, 0]] - 0.4).abs() < 1e-12);
        assert!((d[[1, 1]] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn report_serializes_rank_keys() {
        let r = RankingResult {
            cmc: vec![0.5, 0.75, 1.0],
            map: 0.6,
            num_valid_queries: 4,
        };
        let report = EvalReport::new(
            Protocol::Standard,
            &r,
            4,
            10,
            "abc".into(),
            "/data".into(),
            DatasetFingerprint {
                query: "q".into(),
                gallery: "g".into(),
            },
        );
        let v = serde_json::to_value(&report).unwrap();
        assert_eq!(v["rank"]["1"], 0.5);
        assert_eq!(v["rank"]["20"], 1.0);
        assert_eq!(v["K"], 3);
        assert_eq!(v["protocol"], "standard");
    }
}
