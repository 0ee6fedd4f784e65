//! Rank-k and mean average precision over composed-query sets.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cache::FeatureTable;
use crate::dataset::Triplet;
use crate::retrieval::{rank_gallery, RetrievalResult};
use crate::{Embedding, Error, Result};

fn check_gt(ranked_ids: &[String], gt: &BTreeSet<String>) -> Result<()> {
    if gt.is_empty() {
        return Err(Error::Empty("ground-truth set"));
    }
    let present: BTreeSet<&str> = ranked_ids.iter().map(String::as_str).collect();
    for id in gt {
        if !present.contains(id.as_str()) {
            return Err(Error::UnknownId(format!("ground truth {id} is not in the ranking")));
        }
    }
    Ok(())
}

/// 1-based rank of the first ground-truth hit. `result` must be a full
/// ranking of the gallery.
pub fn first_hit_rank(result: &RetrievalResult, gt: &BTreeSet<String>) -> Result<usize> {
    check_gt(&result.ranked_ids, gt)?;
    Ok(result
        .ranked_ids
        .iter()
        .position(|id| gt.contains(id))
        .map(|p| p + 1)
        .expect("ground truth checked"))
}

/// Whether any ground truth lies within the top `k`.
pub fn rank_k(result: &RetrievalResult, gt: &BTreeSet<String>, k: usize) -> Result<bool> {
    Ok(first_hit_rank(result, gt)? <= k)
}

/// Mean of `hits≤r / r` over the ranks `r` of the relevant items, taken over
/// the full ranking.
pub fn average_precision(result: &RetrievalResult, gt: &BTreeSet<String>) -> Result<f64> {
    check_gt(&result.ranked_ids, gt)?;
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, id) in result.ranked_ids.iter().enumerate() {
        if gt.contains(id) {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    Ok(sum / gt.len() as f64)
}

/// One evaluation query: a reference image, an optional caption and the set
/// of correct gallery images.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalQuery {
    pub query_id: String,
    pub image_id: String,
    pub caption: Option<String>,
    pub gt: BTreeSet<String>,
}

/// Merges triplets sharing `(image, caption)` into one query whose ground
/// truth is the union of their targets. Order follows first appearance.
pub fn group_triplets(triplets: &[Triplet]) -> Vec<EvalQuery> {
    let mut slots: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    let mut out: Vec<EvalQuery> = Vec::new();
    for t in triplets {
        let key = (t.query_image_id.as_str(), t.relative_caption.as_str());
        let slot = *slots.entry(key).or_insert_with(|| {
            out.push(EvalQuery {
                query_id: format!("q{:05}", out.len()),
                image_id: t.query_image_id.clone(),
                caption: Some(t.relative_caption.clone()),
                gt: BTreeSet::new(),
            });
            out.len() - 1
        });
        out[slot].gt.extend(t.target_image_ids.iter().cloned());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query_id: String,
    pub image_id: String,
    pub first_hit_rank: usize,
    pub average_precision: f64,
}

/// Percentages in `[0, 100]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub num_queries: usize,
    pub per_query: Vec<QueryOutcome>,
}

impl EvalReport {
    pub fn from_outcomes(per_query: Vec<QueryOutcome>) -> Result<Self> {
        if per_query.is_empty() {
            return Err(Error::Empty("query set"));
        }
        let n = per_query.len() as f64;
        let rate = |k: usize| 100.0 * per_query.iter().filter(|q| q.first_hit_rank <= k).count() as f64 / n;
        Ok(Self {
            rank1: rate(1),
            rank5: rate(5),
            rank10: rate(10),
            map: 100.0 * per_query.iter().map(|q| q.average_precision).sum::<f64>() / n,
            num_queries: per_query.len(),
            per_query,
        })
    }

    /// Headline metrics rounded to three decimals, as printed in tables.
    pub fn summary(&self) -> [(&'static str, f64); 4] {
        let r = |x: f64| libm::round(x * 1000.0) / 1000.0;
        [
            ("rank1", r(self.rank1)),
            ("rank5", r(self.rank5)),
            ("rank10", r(self.rank10)),
            ("map", r(self.map)),
        ]
    }
}

/// Ranks the full gallery for every query and aggregates the metrics.
/// `embed` builds the query embedding; `exclude_reference` drops the query
/// image from its own ranking.
pub fn evaluate_queries(
    queries: &[EvalQuery],
    gallery: &FeatureTable,
    exclude_reference: bool,
    mut embed: impl FnMut(&EvalQuery) -> Result<Embedding>,
) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::Empty("query set"));
    }
    let mut outcomes = Vec::with_capacity(queries.len());
    for q in queries {
        for id in &q.gt {
            if gallery.position(id).is_none() {
                return Err(Error::DanglingReference {
                    kind: "ground truth",
                    id: q.query_id.clone(),
                    missing: id.clone(),
                });
            }
        }
        let emb = embed(q)?;
        let exclude = exclude_reference.then_some(q.image_id.as_str());
        let ranking = rank_gallery(&emb, gallery, gallery.len(), exclude)?;
        outcomes.push(QueryOutcome {
            query_id: q.query_id.clone(),
            image_id: q.image_id.clone(),
            first_hit_rank: first_hit_rank(&ranking, &q.gt)?,
            average_precision: average_precision(&ranking, &q.gt)?,
        });
    }
    EvalReport::from_outcomes(outcomes)
}

/// [`evaluate_queries`] over triplets grouped by `(image, caption)`.
pub fn evaluate(
    triplets: &[Triplet],
    gallery: &FeatureTable,
    exclude_reference: bool,
    embed: impl FnMut(&EvalQuery) -> Result<Embedding>,
) -> Result<EvalReport> {
    evaluate_queries(&group_triplets(triplets), gallery, exclude_reference, embed)
}
