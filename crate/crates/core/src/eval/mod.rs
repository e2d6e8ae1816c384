//! Retrieval protocols, CMC / mAP, and descriptor-level evaluation.

mod pipeline;

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::dataio::AnnotationRecord;
use crate::error::{ReidError, Result};

pub use pipeline::{
    cosine_distances, evaluate, export_embeddings, extract_descriptors, EmbeddingRecord,
    DatasetFingerprint, EvalReport, RankSummary, StageEmbedding,
};

/// Ranks reported in evaluation summaries.
pub const REPORT_RANKS: [usize; 4] = [1, 5, 10, 20];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Discards same-identity entries seen by the query's camera.
    Standard,
    /// Additionally discards same-identity entries wearing the query's outfit.
    ClothChanging,
}

impl Protocol {
    pub const ALL: [Protocol; 2] = [Protocol::Standard, Protocol::ClothChanging];

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Standard => "standard",
            Protocol::ClothChanging => "cloth_changing",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = ReidError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Protocol::Standard),
            "cloth-changing" | "cloth_changing" => Ok(Protocol::ClothChanging),
            other => Err(ReidError::InvalidConfig(format!("unknown protocol '{other}'"))),
        }
    }
}

/// The annotation fields that matter for retrieval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalMeta {
    pub person_id: u32,
    pub cloth_id: u32,
    pub camera_id: u32,
}

impl From<&AnnotationRecord> for RetrievalMeta {
    fn from(r: &AnnotationRecord) -> Self {
        Self {
            person_id: r.person_id,
            cloth_id: r.cloth_id,
            camera_id: r.camera_id,
        }
    }
}

/// Whether a gallery entry survives the protocol's filter for this query.
pub fn is_valid_entry(query: &RetrievalMeta, gallery: &RetrievalMeta, protocol: Protocol) -> bool {
    let same_id = query.person_id == gallery.person_id;
    let same_cam = same_id && query.camera_id == gallery.camera_id;
    match protocol {
        Protocol::Standard => !same_cam,
        Protocol::ClothChanging => !(same_cam || (same_id && query.cloth_id == gallery.cloth_id)),
    }
}

pub fn is_valid_match(query: &AnnotationRecord, gallery: &AnnotationRecord, protocol: Protocol) -> bool {
    is_valid_entry(&query.into(), &gallery.into(), protocol)
}

pub fn filter_gallery(
    query: &AnnotationRecord,
    gallery: &[AnnotationRecord],
    protocol: Protocol,
) -> Vec<bool> {
    let q = RetrievalMeta::from(query);
    gallery
        .iter()
        .map(|g| is_valid_entry(&q, &g.into(), protocol))
        .collect()
}

/// Ranking of one query over the filtered gallery.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryResult {
    pub query: usize,
    /// Valid gallery indices by ascending distance, ties by index.
    pub ranked: Vec<usize>,
    /// Validity of every gallery entry under the protocol.
    pub valid: Vec<bool>,
    /// For each entry of `ranked`, whether it shares the query's identity.
    pub matches: Vec<bool>,
}

impl QueryResult {
    /// 1-based rank of the first correct match.
    pub fn first_match_rank(&self) -> Option<usize> {
        self.matches.iter().position(|&m| m).map(|p| p + 1)
    }

    pub fn average_precision(&self) -> Option<f64> {
        let mut hits = 0usize;
        let mut sum = 0.0;
        for (pos, _) in self.matches.iter().enumerate().filter(|(_, &m)| m) {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
        (hits > 0).then(|| sum / hits as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    /// `cmc[k - 1]` is the Rank-k accuracy.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub num_valid_queries: usize,
}

impl RankingResult {
    /// Rank-k accuracy; ranks beyond the computed range saturate.
    pub fn rank(&self, k: usize) -> f64 {
        assert!(k >= 1, "ranks are 1-based");
        self.cmc[(k - 1).min(self.cmc.len() - 1)]
    }
}

pub fn rank_query(
    query_index: usize,
    distances: &[f64],
    query: &RetrievalMeta,
    gallery: &[RetrievalMeta],
    protocol: Protocol,
) -> QueryResult {
    let valid: Vec<bool> = gallery
        .iter()
        .map(|g| is_valid_entry(query, g, protocol))
        .collect();
    let mut ranked: Vec<usize> = (0..gallery.len()).filter(|&g| valid[g]).collect();
    ranked.sort_by(|&a, &b| {
        distances[a]
            .partial_cmp(&distances[b])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let matches = ranked
        .iter()
        .map(|&g| gallery[g].person_id == query.person_id)
        .collect();
    QueryResult {
        query: query_index,
        ranked,
        valid,
        matches,
    }
}

/// CMC over ranks `1..=max_rank` and mAP. Queries without a valid correct
/// match are excluded from both averages.
pub fn compute_cmc_map(
    distances: ArrayView2<'_, f64>,
    query: &[RetrievalMeta],
    gallery: &[RetrievalMeta],
    protocol: Protocol,
    max_rank: usize,
) -> Result<RankingResult> {
    if distances.dim() != (query.len(), gallery.len()) {
        return Err(ReidError::ShapeMismatch(format!(
            "distance matrix {:?} vs {} queries x {} gallery",
            distances.dim(),
            query.len(),
            gallery.len()
        )));
    }
    if max_rank == 0 {
        return Err(ReidError::InvalidParams("max rank must be at least 1".into()));
    }
    if distances.iter().any(|d| !d.is_finite()) {
        return Err(ReidError::InvalidParams("distance matrix has non-finite entries".into()));
    }
    let mut hits = vec![0usize; max_rank];
    let mut ap_sum = 0.0;
    let mut num_valid = 0usize;
    for (qi, q) in query.iter().enumerate() {
        let row = distances.row(qi);
        let row = row.as_slice().map(|s| s.to_vec()).unwrap_or_else(|| row.to_vec());
        let result = rank_query(qi, &row, q, gallery, protocol);
        let Some(ap) = result.average_precision() else {
            continue;
        };
        num_valid += 1;
        ap_sum += ap;
        let first = result.first_match_rank().expect("a query with AP has a match");
        for h in hits.iter_mut().skip(first - 1) {
            *h += 1;
        }
    }
    if num_valid == 0 {
        return Err(ReidError::NoValidQueries);
    }
    let n = num_valid as f64;
    Ok(RankingResult {
        cmc: hits.iter().map(|&h| h as f64 / n).collect(),
        map: ap_sum / n,
        num_valid_queries: num_valid,
    })
}
