//! Dataset curation: retrieval-assisted false-negative mining, verdict
//! application and resolution filtering.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cache::FeatureCache;
use crate::dataset::{ImageDataset, Triplet};
use crate::encoder::DualEncoder;
use crate::retrieval::rank_gallery;
use crate::{Error, Result};

/// Candidate count per target when none is given.
pub const DEFAULT_CANDIDATES: usize = 5;

/// Stable identifier of a `(target, candidate)` pair: 16 hex digits of a
/// SHA-256 over both ids.
pub fn pair_id(target_id: &str, candidate_id: &str) -> String {
    let mut h = Sha256::new();
    h.update(b"w4p-pair");
    h.update((target_id.len() as u64).to_le_bytes());
    h.update(target_id.as_bytes());
    h.update(candidate_id.as_bytes());
    let digest = h.finalize();
    let mut out = String::with_capacity(16);
    for b in &digest[..8] {
        let _ = write!(out, "{b:02x}");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub pair_id: String,
    pub target_id: String,
    pub candidate_id: String,
    pub similarity: f64,
    /// 1-based position among this target's candidates.
    pub rank: usize,
}

/// Ground truths already recorded for each target: every target listed
/// alongside it in some triplet.
fn annotated_with(triplets: &[Triplet]) -> BTreeMap<&str, BTreeSet<&str>> {
    let mut out: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for t in triplets {
        for a in &t.target_image_ids {
            out.entry(a.as_str())
                .or_default()
                .extend(t.target_image_ids.iter().map(String::as_str));
        }
    }
    out
}

/// For every target, the `k` gallery images most similar to it, skipping the
/// target itself and images already annotated as its ground truth.
pub fn false_negative_candidates<E: DualEncoder + ?Sized>(
    encoder: &E,
    gallery: &FeatureCache,
    triplets: &[Triplet],
    target_ids: &[String],
    k: usize,
) -> Result<Vec<Candidate>> {
    gallery.check_encoder(encoder)?;
    if k == 0 {
        return Err(Error::InvalidConfig("candidate count must be at least 1".into()));
    }
    let annotated = annotated_with(triplets);
    let table = &gallery.images;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for target in target_ids {
        if !seen.insert(target.as_str()) {
            continue;
        }
        let query = table.require(target)?;
        let known = annotated.get(target.as_str());
        let ranking = rank_gallery(query, table, table.len(), Some(target))?;
        let picks = ranking
            .ranked_ids
            .into_iter()
            .zip(ranking.scores)
            .filter(|(id, _)| !known.is_some_and(|k| k.contains(id.as_str())))
            .take(k);
        for (rank, (candidate_id, similarity)) in picks.enumerate() {
            out.push(Candidate {
                pair_id: pair_id(target, &candidate_id),
                target_id: target.clone(),
                candidate_id,
                similarity,
                rank: rank + 1,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Accept,
    Reject,
}

impl core::str::FromStr for Decision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accept" => Ok(Self::Accept),
            "reject" => Ok(Self::Reject),
            other => Err(Error::InvalidConfig(format!("unknown decision `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub pair_id: String,
    pub target_id: String,
    pub candidate_id: String,
    pub decision: Decision,
    pub annotator: String,
    /// ISO-8601 timestamp.
    pub ts: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictOutcome {
    pub triplets: Vec<Triplet>,
    /// Pair ids whose candidate was appended to at least one triplet.
    pub added: Vec<String>,
    /// One entry per rejected pair, in log order.
    pub rejected: Vec<Verdict>,
}

/// Every accepted candidate becomes an extra target of each triplet that
/// lists its target image. Repeated identical verdicts are harmless;
/// contradictory ones fail with the offending pair ids.
pub fn apply_verdicts(triplets: &[Triplet], candidates: &[Candidate], verdicts: &[Verdict]) -> Result<VerdictOutcome> {
    let by_pair: BTreeMap<&str, &Candidate> = candidates.iter().map(|c| (c.pair_id.as_str(), c)).collect();
    let mut decided: BTreeMap<&str, Decision> = BTreeMap::new();
    let mut order: Vec<&Verdict> = Vec::new();
    let mut conflicts = BTreeSet::new();
    for (i, v) in verdicts.iter().enumerate() {
        let c = by_pair
            .get(v.pair_id.as_str())
            .ok_or_else(|| Error::UnknownId(format!("pair {}", v.pair_id)))?;
        if c.target_id != v.target_id || c.candidate_id != v.candidate_id {
            return Err(Error::InvalidRecord {
                index: i,
                reason: format!("verdict ids do not match pair {}", v.pair_id),
            });
        }
        match decided.get(v.pair_id.as_str()) {
            None => {
                decided.insert(&v.pair_id, v.decision);
                order.push(v);
            }
            Some(d) if *d != v.decision => {
                conflicts.insert(v.pair_id.clone());
            }
            Some(_) => {}
        }
    }
    if !conflicts.is_empty() {
        return Err(Error::VerdictConflict(conflicts.into_iter().collect()));
    }
    let mut out = triplets.to_vec();
    let mut added = Vec::new();
    let mut rejected = Vec::new();
    for v in order {
        if v.decision == Decision::Reject {
            rejected.push(v.clone());
            continue;
        }
        let mut changed = false;
        for t in out.iter_mut() {
            if t.target_image_ids.contains(&v.target_id)
                && t.query_image_id != v.candidate_id
                && !t.target_image_ids.contains(&v.candidate_id)
            {
                t.target_image_ids.push(v.candidate_id.clone());
                changed = true;
            }
        }
        if changed {
            added.push(v.pair_id.clone());
        }
    }
    Ok(VerdictOutcome {
        triplets: out,
        added,
        rejected,
    })
}

/// Keeps the `⌈fraction·N⌉` images of largest pixel area (ties broken by
/// image id), in their original order.
pub fn filter_by_resolution(dataset: &ImageDataset, top_fraction: f64) -> Result<ImageDataset> {
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::OutOfRange {
            what: "top fraction",
            detail: format!("{top_fraction} not in (0, 1]"),
        });
    }
    let n = dataset.len();
    let keep = (libm::ceil(top_fraction * n as f64 - 1e-9) as usize).clamp(1, n);
    let images = dataset.images();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        images[b]
            .area()
            .cmp(&images[a].area())
            .then_with(|| images[a].image_id.cmp(&images[b].image_id))
    });
    order.truncate(keep);
    dataset.select(&order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ImageRecord, ManifestKind};
    use alloc::vec;

    fn ds(areas: &[(u32, u32)]) -> ImageDataset {
        let entries = areas
            .iter()
            .enumerate()
            .map(|(i, &(w, h))| {
                (
                    ImageRecord {
                        image_id: format!("img{i}"),
                        identity_id: format!("p{i}"),
                        path: format!("img{i}.png"),
                        width: w,
                        height: h,
                        source: "test".into(),
                    },
                    None,
                )
            })
            .collect();
        ImageDataset::new(entries, ManifestKind::ImageOnly).unwrap()
    }

    #[test]
    fn resolution_filter() {
        let d = ds(&[(10, 10), (10, 20), (10, 30), (10, 40)]);
        let f = filter_by_resolution(&d, 0.5).unwrap();
        let ids: Vec<&str> = f.images().iter().map(|r| r.image_id.as_str()).collect();
        assert_eq!(ids, vec!["img2", "img3"]);
        assert_eq!(filter_by_resolution(&d, 1.0).unwrap(), d);
        assert!(filter_by_resolution(&d, 0.0).is_err());
        assert!(filter_by_resolution(&d, 1.5).is_err());
    }

    #[test]
    fn resolution_ties_by_id() {
        let d = ds(&[(5, 5), (5, 5), (5, 5)]);
        let f = filter_by_resolution(&d, 0.34).unwrap();
        assert_eq!(f.len(), 2);
        assert_eq!(f.images()[0].image_id, "img0");
    }

    #[test]
    fn pair_ids_are_stable_and_directional() {
        assert_eq!(pair_id("a", "b"), pair_id("a", "b"));
        assert_ne!(pair_id("a", "b"), pair_id("b", "a"));
        assert_ne!(pair_id("ab", "c"), pair_id("a", "bc"));
        assert_eq!(pair_id("a", "b").len(), 16);
    }

    fn setup() -> (Vec<Triplet>, Vec<Candidate>) {
        let triplets = vec![Triplet {
            query_image_id: "q".into(),
            relative_caption: "red coat".into(),
            target_image_ids: vec!["t".into()],
        }];
        let candidates = ["x", "y"]
            .iter()
            .enumerate()
            .map(|(i, c)| Candidate {
                pair_id: pair_id("t", c),
                target_id: "t".into(),
                candidate_id: String::from(*c),
                similarity: 0.9 - i as f64 * 0.1,
                rank: i + 1,
            })
            .collect();
        (triplets, candidates)
    }

    fn verdict(c: &Candidate, d: Decision) -> Verdict {
        Verdict {
            pair_id: c.pair_id.clone(),
            target_id: c.target_id.clone(),
            candidate_id: c.candidate_id.clone(),
            decision: d,
            annotator: "ann".into(),
            ts: "2024-01-01T00:00:00Z".into(),
        }
    }

    #[test]
    fn verdicts_apply_idempotently() {
        let (t, c) = setup();
        let v = vec![verdict(&c[0], Decision::Accept), verdict(&c[1], Decision::Reject)];
        let once = apply_verdicts(&t, &c, &v).unwrap();
        assert_eq!(once.triplets[0].target_image_ids, vec!["t", "x"]);
        assert_eq!(once.rejected.len(), 1);
        let twice = apply_verdicts(&once.triplets, &c, &v).unwrap();
        assert_eq!(twice.triplets, once.triplets);
        let doubled: Vec<Verdict> = v.iter().chain(&v).cloned().collect();
        assert_eq!(apply_verdicts(&t, &c, &doubled).unwrap().triplets, once.triplets);
    }

    #[test]
    fn conflicting_and_unknown_verdicts() {
        let (t, c) = setup();
        let v = vec![verdict(&c[0], Decision::Accept), verdict(&c[0], Decision::Reject)];
        assert_eq!(
            apply_verdicts(&t, &c, &v),
            Err(Error::VerdictConflict(vec![c[0].pair_id.clone()]))
        );
        let mut bad = verdict(&c[0], Decision::Accept);
        bad.pair_id = "nope".into();
        assert!(matches!(apply_verdicts(&t, &c, &[bad]), Err(Error::UnknownId(_))));
    }
}
