//! Image/caption corpora, composed-retrieval triplets, match labels and the
//! identity-aware batch sampler.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::random::derived_rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub identity_id: String,
    pub path: String,
    pub width: u32,
    pub height: u32,
    pub source: String,
}

impl ImageRecord {
    pub fn area(&self) -> u64 {
        self.width as u64 * self.height as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub query_image_id: String,
    pub relative_caption: String,
    pub target_image_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ManifestKind {
    ImageCaption,
    ImageOnly,
    Triplets,
}

/// Immutable, validated image corpus. Captions, when present, are aligned
/// one-to-one with images.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    images: Vec<ImageRecord>,
    captions: Option<Vec<CaptionRecord>>,
    index: BTreeMap<String, usize>,
}

impl ImageDataset {
    /// Validates and freezes a corpus. For [`ManifestKind::ImageCaption`]
    /// every entry needs a nonempty caption; for [`ManifestKind::ImageOnly`]
    /// captions are dropped.
    pub fn new(entries: Vec<(ImageRecord, Option<String>)>, kind: ManifestKind) -> Result<Self> {
        if kind == ManifestKind::Triplets {
            return Err(Error::InvalidConfig("triplet files are not image corpora".into()));
        }
        if entries.is_empty() {
            return Err(Error::Empty("manifest"));
        }
        let mut index = BTreeMap::new();
        let mut images = Vec::with_capacity(entries.len());
        let mut captions = Vec::with_capacity(entries.len());
        for (i, (record, caption)) in entries.into_iter().enumerate() {
            if record.width == 0 || record.height == 0 {
                return Err(Error::InvalidRecord {
                    index: i,
                    reason: format!("image `{}` has zero width or height", record.image_id),
                });
            }
            if index.insert(record.image_id.clone(), i).is_some() {
                return Err(Error::DuplicateId(record.image_id));
            }
            if kind == ManifestKind::ImageCaption {
                let text = match caption {
                    Some(t) if !t.trim().is_empty() => t,
                    _ => {
                        return Err(Error::InvalidRecord {
                            index: i,
                            reason: format!("image `{}` has no caption", record.image_id),
                        })
                    }
                };
                captions.push(CaptionRecord {
                    image_id: record.image_id.clone(),
                    text,
                });
            }
            images.push(record);
        }
        Ok(Self {
            images,
            captions: (kind == ManifestKind::ImageCaption).then_some(captions),
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn captions(&self) -> Option<&[CaptionRecord]> {
        self.captions.as_deref()
    }

    pub fn has_captions(&self) -> bool {
        self.captions.is_some()
    }

    pub fn position(&self, image_id: &str) -> Option<usize> {
        self.index.get(image_id).copied()
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageRecord> {
        self.position(image_id).map(|i| &self.images[i])
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.index.contains_key(image_id)
    }

    /// Distinct identities in first-appearance order.
    pub fn identities(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.images
            .iter()
            .filter(|r| seen.insert(r.identity_id.as_str()))
            .map(|r| r.identity_id.clone())
            .collect()
    }

    /// Subset in original order.
    pub fn select(&self, keep: &[usize]) -> Result<Self> {
        let keep: BTreeSet<usize> = keep.iter().copied().collect();
        let kind = if self.has_captions() {
            ManifestKind::ImageCaption
        } else {
            ManifestKind::ImageOnly
        };
        let entries = keep
            .into_iter()
            .map(|i| {
                let caption = self.captions.as_ref().map(|c| c[i].text.clone());
                (self.images[i].clone(), caption)
            })
            .collect();
        Self::new(entries, kind)
    }

    pub fn entries(&self) -> Vec<(ImageRecord, Option<String>)> {
        self.images
            .iter()
            .enumerate()
            .map(|(i, r)| (r.clone(), self.captions.as_ref().map(|c| c[i].text.clone())))
            .collect()
    }
}

/// Checks triplets against the set of known image ids.
pub fn validate_triplets(triplets: &[Triplet], known: impl Fn(&str) -> bool) -> Result<()> {
    if triplets.is_empty() {
        return Err(Error::Empty("triplet file"));
    }
    for (i, t) in triplets.iter().enumerate() {
        if t.target_image_ids.is_empty() {
            return Err(Error::InvalidRecord {
                index: i,
                reason: "triplet has no targets".into(),
            });
        }
        if t.relative_caption.trim().is_empty() {
            return Err(Error::InvalidRecord {
                index: i,
                reason: "triplet has an empty relative caption".into(),
            });
        }
        if !known(&t.query_image_id) {
            return Err(Error::DanglingReference {
                kind: "triplet query",
                id: format!("#{i}"),
                missing: t.query_image_id.clone(),
            });
        }
        for target in &t.target_image_ids {
            if target == &t.query_image_id {
                return Err(Error::InvalidRecord {
                    index: i,
                    reason: format!("query image `{target}` listed among its own targets"),
                });
            }
            if !known(target) {
                return Err(Error::DanglingReference {
                    kind: "triplet target",
                    id: format!("#{i}"),
                    missing: target.clone(),
                });
            }
        }
    }
    Ok(())
}

/// Binary identity-match matrix `l` and its row-normalised form `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchLabelMatrix {
    labels: Matrix,
    true_match: Matrix,
}

impl MatchLabelMatrix {
    /// Builds labels from explicit 0/1 entries. Every row needs a positive.
    pub fn from_labels(labels: Matrix) -> Result<Self> {
        let mut true_match = labels.clone();
        for i in 0..labels.rows() {
            let row = true_match.row_mut(i);
            if row.iter().any(|&x| x != 0.0 && x != 1.0) {
                return Err(Error::InvalidConfig("match labels must be 0 or 1".into()));
            }
            let total: f64 = row.iter().sum();
            if total == 0.0 {
                return Err(Error::DegenerateLabelRow { row: i });
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        Ok(Self { labels, true_match })
    }

    /// Identity-diagonal labels for `n` distinct items.
    pub fn diagonal(n: usize) -> Self {
        Self::from_labels(Matrix::identity(n)).expect("identity rows are nonzero")
    }

    pub fn labels(&self) -> &Matrix {
        &self.labels
    }

    pub fn true_match(&self) -> &Matrix {
        &self.true_match
    }

    pub fn len(&self) -> usize {
        self.labels.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.rows() == 0
    }

    /// Labels for the reverse direction (columns become rows).
    pub fn transposed(&self) -> Result<Self> {
        Self::from_labels(self.labels.transpose())
    }
}

/// `l[i][j] = 1` iff `rows[i] == cols[j]`; `q` is `l` normalised per row.
///
/// A row with no positive is an error: the normalisation would divide by zero.
pub fn build_match_labels<S: AsRef<str>>(rows: &[S], cols: &[S]) -> Result<MatchLabelMatrix> {
    if rows.is_empty() || cols.is_empty() {
        return Err(Error::Empty("identity list"));
    }
    let mut labels = Matrix::zeros(rows.len(), cols.len());
    for (i, r) in rows.iter().enumerate() {
        for (j, c) in cols.iter().enumerate() {
            if r.as_ref() == c.as_ref() {
                labels[(i, j)] = 1.0;
            }
        }
    }
    MatchLabelMatrix::from_labels(labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Vec<ImageRecord>,
    pub captions: Option<Vec<CaptionRecord>>,
    pub identity_ids: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn match_labels(&self) -> Result<MatchLabelMatrix> {
        build_match_labels(&self.identity_ids, &self.identity_ids)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub batch_size: usize,
    pub seed: u64,
    /// At most this many images per identity in one batch; `None` disables
    /// identity-aware packing.
    pub identity_cap: Option<usize>,
}

impl SamplerConfig {
    pub const DEFAULT_IDENTITY_CAP: usize = 2;

    pub fn identity_aware(batch_size: usize, seed: u64) -> Self {
        Self {
            batch_size,
            seed,
            identity_cap: Some(Self::DEFAULT_IDENTITY_CAP),
        }
    }

    pub fn shuffled(batch_size: usize, seed: u64) -> Self {
        Self {
            batch_size,
            seed,
            identity_cap: None,
        }
    }
}

/// Without-replacement batch sampler. A batch is a pure function of
/// `(dataset, seed, epoch, step)`; incomplete trailing batches are dropped.
#[derive(Debug, Clone)]
pub struct BatchSampler<'a> {
    dataset: &'a ImageDataset,
    cfg: SamplerConfig,
    identity_of: Vec<usize>,
}

impl<'a> BatchSampler<'a> {
    pub fn new(dataset: &'a ImageDataset, cfg: SamplerConfig) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        if cfg.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if cfg.batch_size > dataset.len() {
            return Err(Error::BatchTooLarge {
                requested: cfg.batch_size,
                capacity: dataset.len(),
            });
        }
        let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
        let identity_of: Vec<usize> = dataset
            .images()
            .iter()
            .map(|r| {
                let next = ids.len();
                *ids.entry(r.identity_id.as_str()).or_insert(next)
            })
            .collect();
        if let Some(cap) = cfg.identity_cap {
            if cap == 0 {
                return Err(Error::InvalidConfig("identity_cap must be positive".into()));
            }
            let mut per_identity = alloc::vec![0usize; ids.len()];
            for &k in &identity_of {
                per_identity[k] += 1;
            }
            let capacity: usize = per_identity.iter().map(|&n| n.min(cap)).sum();
            if cfg.batch_size > capacity {
                return Err(Error::BatchTooLarge {
                    requested: cfg.batch_size,
                    capacity,
                });
            }
        }
        Ok(Self {
            dataset,
            cfg,
            identity_of,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    /// Index lists of every complete batch of `epoch`.
    pub fn epoch_plan(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.dataset.len()).collect();
        order.shuffle(&mut derived_rng(self.cfg.seed, epoch, 0));
        let bs = self.cfg.batch_size;
        let Some(cap) = self.cfg.identity_cap else {
            return order.chunks_exact(bs).map(<[usize]>::to_vec).collect();
        };
        let mut open: Vec<(Vec<usize>, BTreeMap<usize, usize>)> = Vec::new();
        let mut first_open = 0;
        for idx in order {
            let ident = self.identity_of[idx];
            let slot = open[first_open..].iter().position(|(members, counts)| {
                members.len() < bs && counts.get(&ident).copied().unwrap_or(0) < cap
            });
            let slot = match slot {
                Some(s) => first_open + s,
                None => {
                    open.push((Vec::with_capacity(bs), BTreeMap::new()));
                    open.len() - 1
                }
            };
            let (members, counts) = &mut open[slot];
            members.push(idx);
            *counts.entry(ident).or_insert(0) += 1;
            while first_open < open.len() && open[first_open].0.len() == bs {
                first_open += 1;
            }
        }
        open.into_iter()
            .map(|(m, _)| m)
            .filter(|m| m.len() == bs)
            .collect()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.epoch_plan(0).len()
    }

    pub fn batch(&self, epoch: u64, step: usize) -> Result<Batch> {
        let plan = self.epoch_plan(epoch);
        let indices = plan.into_iter().nth(step).ok_or_else(|| Error::OutOfRange {
            what: "sampler step",
            detail: format!("step {step} of epoch {epoch}"),
        })?;
        Ok(self.materialize(indices))
    }

    pub fn materialize(&self, indices: Vec<usize>) -> Batch {
        let images: Vec<ImageRecord> = indices.iter().map(|&i| self.dataset.images()[i].clone()).collect();
        let captions = self
            .dataset
            .captions()
            .map(|c| indices.iter().map(|&i| c[i].clone()).collect());
        let identity_ids = images.iter().map(|r| r.identity_id.clone()).collect();
        Batch {
            indices,
            images,
            captions,
            identity_ids,
        }
    }
}

/// First batch of epoch 0 under identity-aware sampling with the default cap.
pub fn sample_batch(dataset: &ImageDataset, batch_size: usize, seed: u64) -> Result<Batch> {
    BatchSampler::new(dataset, SamplerConfig::identity_aware(batch_size, seed))?.batch(0, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn record(id: &str, identity: &str) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            identity_id: identity.into(),
            path: format!("{id}.png"),
            width: 128,
            height: 384,
            source: "test".into(),
        }
    }

    pub(crate) fn corpus(identities: usize, per_identity: usize) -> ImageDataset {
        let mut entries = Vec::new();
        for p in 0..identities {
            for k in 0..per_identity {
                entries.push((record(&format!("p{p}_{k}"), &format!("p{p}")), Some(format!("person {p} view {k}"))));
            }
        }
        ImageDataset::new(entries, ManifestKind::ImageCaption).unwrap()
    }

    #[test]
    fn match_labels_definition() {
        let m = build_match_labels(&["a", "a", "b"], &["a", "a", "b"]).unwrap();
        assert_eq!(m.labels().as_slice(), &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(m.true_match().row(0), &[0.5, 0.5, 0.0]);
        assert_eq!(m.true_match().row(2), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn degenerate_label_row_is_an_error() {
        assert_eq!(build_match_labels(&["a"], &["b"]), Err(Error::DegenerateLabelRow { row: 0 }));
        assert!(matches!(build_match_labels::<&str>(&[], &["b"]), Err(Error::Empty(_))));
    }

    #[test]
    fn duplicate_and_invalid_records_rejected() {
        let dup = vec![(record("x", "a"), Some("c".into())), (record("x", "b"), Some("d".into()))];
        assert_eq!(ImageDataset::new(dup, ManifestKind::ImageCaption), Err(Error::DuplicateId("x".into())));
        let mut zero = record("z", "a");
        zero.width = 0;
        assert!(ImageDataset::new(vec![(zero, None)], ManifestKind::ImageOnly).is_err());
        assert!(ImageDataset::new(vec![(record("y", "a"), None)], ManifestKind::ImageCaption).is_err());
        assert_eq!(ImageDataset::new(vec![], ManifestKind::ImageOnly), Err(Error::Empty("manifest")));
    }

    #[test]
    fn triplet_validation() {
        let ds = corpus(2, 2);
        let ok = Triplet {
            query_image_id: "p0_0".into(),
            relative_caption: "wearing red".into(),
            target_image_ids: vec!["p1_0".into()],
        };
        assert!(validate_triplets(core::slice::from_ref(&ok), |id| ds.contains(id)).is_ok());
        let mut dangling = ok.clone();
        dangling.target_image_ids.push("nope".into());
        assert!(matches!(
            validate_triplets(&[dangling], |id| ds.contains(id)),
            Err(Error::DanglingReference { .. })
        ));
        let mut self_target = ok;
        self_target.target_image_ids = vec!["p0_0".into()];
        assert!(validate_triplets(&[self_target], |id| ds.contains(id)).is_err());
    }

    #[test]
    fn sampler_is_deterministic() {
        let ds = corpus(16, 4);
        assert_eq!(sample_batch(&ds, 8, 7).unwrap(), sample_batch(&ds, 8, 7).unwrap());
        assert_ne!(sample_batch(&ds, 8, 7).unwrap().indices, sample_batch(&ds, 8, 8).unwrap().indices);
    }

    #[test]
    fn identity_cap_capacity_error() {
        let ds = corpus(16, 8);
        assert_eq!(
            sample_batch(&ds, 128, 7).unwrap_err(),
            Error::BatchTooLarge {
                requested: 128,
                capacity: 32
            }
        );
    }

    #[test]
    fn no_replacement_size_error() {
        let ds = corpus(2, 2);
        let cfg = SamplerConfig::shuffled(5, 0);
        assert!(matches!(BatchSampler::new(&ds, cfg), Err(Error::BatchTooLarge { .. })));
    }

    #[test]
    fn every_batch_respects_cap() {
        let ds = corpus(16, 4);
        let sampler = BatchSampler::new(&ds, SamplerConfig::identity_aware(8, 3)).unwrap();
        for epoch in 0..5 {
            let plan = sampler.epoch_plan(epoch);
            assert!(plan.len() >= 7);
            for batch in plan {
                let mut counts = BTreeMap::new();
                for i in batch {
                    *counts.entry(ds.images()[i].identity_id.to_string()).or_insert(0) += 1;
                }
                assert!(counts.values().all(|&c| c <= 2));
            }
        }
    }
}
