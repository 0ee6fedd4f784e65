//! Query construction in the four retrieval modes, multi-TINet fusion and
//! exact cosine ranking of a gallery.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::cache::FeatureTable;
use crate::encoder::{inject_pseudo_word, DualEncoder, Template};
use crate::linalg::{cosine_f32, normalized, to_f32, to_f64};
use crate::tinet::TiNet;
use crate::{Embedding, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryMode {
    ImageOnly,
    TextOnly,
    Avg,
    Composed,
}

impl core::str::FromStr for QueryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image-only" => Ok(Self::ImageOnly),
            "text-only" => Ok(Self::TextOnly),
            "avg" => Ok(Self::Avg),
            "composed" => Ok(Self::Composed),
            other => Err(Error::InvalidConfig(format!("unknown query mode `{other}`"))),
        }
    }
}

impl core::fmt::Display for QueryMode {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            Self::ImageOnly => "image-only",
            Self::TextOnly => "text-only",
            Self::Avg => "avg",
            Self::Composed => "composed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub mode: QueryMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tinet_ids: Vec<String>,
}

impl QuerySpec {
    pub fn composed(image_id: &str, caption: &str, tinet_ids: &[&str]) -> Self {
        Self {
            mode: QueryMode::Composed,
            image_id: Some(image_id.into()),
            caption: Some(caption.into()),
            tinet_ids: tinet_ids.iter().map(|s| String::from(*s)).collect(),
        }
    }

    /// Checks that the fields required by the mode are present. A composed
    /// query without a caption uses the training template.
    pub fn validate(&self) -> Result<()> {
        let has_caption = self.caption.as_deref().is_some_and(|c| !c.trim().is_empty());
        let needs_image = matches!(self.mode, QueryMode::ImageOnly | QueryMode::Avg | QueryMode::Composed);
        let needs_caption = matches!(self.mode, QueryMode::TextOnly | QueryMode::Avg);
        if needs_image && self.image_id.is_none() {
            return Err(Error::MissingInput("image"));
        }
        if needs_caption && !has_caption {
            return Err(Error::MissingInput("caption"));
        }
        if self.mode == QueryMode::Composed && self.tinet_ids.is_empty() {
            return Err(Error::Empty("tinet list"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub ranked_ids: Vec<String>,
    pub scores: Vec<f64>,
    /// Gallery row of every ranked id.
    pub indices: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<QuerySpec>,
}

impl RetrievalResult {
    pub fn len(&self) -> usize {
        self.ranked_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranked_ids.is_empty()
    }
}

fn check_fingerprint<E: DualEncoder + ?Sized>(encoder: &E, tinet: &TiNet) -> Result<()> {
    match tinet.encoder_fingerprint() {
        Some(fp) if *fp == encoder.fingerprint() => Ok(()),
        _ => Err(Error::FingerprintMismatch),
    }
}

/// Text embedding of the pseudo-word prompt built from one TINet: the
/// inference template when `caption` is given, the training template
/// otherwise.
pub fn pseudo_word_query<E: DualEncoder + ?Sized>(
    encoder: &E,
    tinet: &TiNet,
    image_embedding: &[f32],
    caption: Option<&str>,
) -> Result<Embedding> {
    check_fingerprint(encoder, tinet)?;
    let pseudo = tinet.forward_f32(image_embedding)?;
    let (template, text) = match caption {
        Some(c) => (Template::Infer, c),
        None => (Template::Train, ""),
    };
    let seq = inject_pseudo_word(encoder, template, &pseudo.vector, text)?;
    encoder.encode_token_embeddings(&seq)
}

/// Unit-normalises every candidate, averages and renormalises.
pub fn fuse(candidates: &[Embedding]) -> Result<Embedding> {
    let first = candidates.first().ok_or(Error::Empty("fusion candidates"))?;
    let dim = first.len();
    let mut acc = alloc::vec![0.0f64; dim];
    for (row, c) in candidates.iter().enumerate() {
        if c.len() != dim {
            return Err(Error::shape("fusion candidate", dim, c.len()));
        }
        let unit = normalized(&to_f64(c)).ok_or(Error::ZeroNorm {
            context: "fusion candidate",
            row,
        })?;
        for (a, u) in acc.iter_mut().zip(unit) {
            *a += u;
        }
    }
    let inv = 1.0 / candidates.len() as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    let fused = normalized(&acc).ok_or(Error::ZeroNorm {
        context: "fused query",
        row: 0,
    })?;
    Ok(to_f32(&fused))
}

/// Composed query: one pseudo-word prompt per TINet, fused.
pub fn compose_query<E: DualEncoder + ?Sized>(
    encoder: &E,
    tinets: &[&TiNet],
    image_embedding: &[f32],
    caption: Option<&str>,
) -> Result<Embedding> {
    if tinets.is_empty() {
        return Err(Error::Empty("tinet list"));
    }
    for t in tinets {
        check_fingerprint(encoder, t)?;
    }
    let candidates = tinets
        .iter()
        .map(|t| pseudo_word_query(encoder, t, image_embedding, caption))
        .collect::<Result<Vec<_>>>()?;
    fuse(&candidates)
}

/// Image-only, text-only and averaged baselines.
pub fn baseline_query<E: DualEncoder + ?Sized>(
    encoder: &E,
    mode: QueryMode,
    image_embedding: Option<&[f32]>,
    caption: Option<&str>,
) -> Result<Embedding> {
    let caption = caption.filter(|c| !c.trim().is_empty());
    match mode {
        QueryMode::ImageOnly => Ok(image_embedding.ok_or(Error::MissingInput("image"))?.to_vec()),
        QueryMode::TextOnly => encoder.encode_text(caption.ok_or(Error::MissingInput("caption"))?),
        QueryMode::Avg => {
            let image = image_embedding.ok_or(Error::MissingInput("image"))?;
            let text = encoder.encode_text(caption.ok_or(Error::MissingInput("caption"))?)?;
            fuse(&[image.to_vec(), text])
        }
        QueryMode::Composed => Err(Error::InvalidConfig("composed queries need TINets".into())),
    }
}

fn by_score_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

fn scored(query: &[f32], gallery: &FeatureTable, exclude: Option<&str>) -> Result<Vec<(f64, usize)>> {
    if gallery.is_empty() {
        return Err(Error::Empty("gallery"));
    }
    if query.len() != gallery.dim() {
        return Err(Error::shape("query dimension", gallery.dim(), query.len()));
    }
    if query.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("query".into()));
    }
    if query.iter().all(|&x| x == 0.0) {
        return Err(Error::ZeroNorm { context: "query", row: 0 });
    }
    let skip = exclude.and_then(|id| gallery.position(id));
    Ok((0..gallery.len())
        .filter(|&i| Some(i) != skip)
        .map(|i| (cosine_f32(query, gallery.row(i)), i))
        .collect())
}

fn into_result(gallery: &FeatureTable, ranked: Vec<(f64, usize)>) -> RetrievalResult {
    RetrievalResult {
        ranked_ids: ranked.iter().map(|&(_, i)| gallery.ids()[i].clone()).collect(),
        scores: ranked.iter().map(|&(s, _)| s).collect(),
        indices: ranked.iter().map(|&(_, i)| i).collect(),
        query: None,
    }
}

/// Exact full-scan ranking by cosine similarity; equal scores keep gallery
/// order. `exclude` drops one gallery id (typically the reference image).
pub fn rank_gallery(
    query: &[f32],
    gallery: &FeatureTable,
    k: usize,
    exclude: Option<&str>,
) -> Result<RetrievalResult> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let mut all = scored(query, gallery, exclude)?;
    all.sort_by(by_score_then_index);
    all.truncate(k);
    Ok(into_result(gallery, all))
}

/// Top-`k` by partial selection. Uses the same total order as
/// [`rank_gallery`], so results are identical.
pub fn rank_gallery_partial(
    query: &[f32],
    gallery: &FeatureTable,
    k: usize,
    exclude: Option<&str>,
) -> Result<RetrievalResult> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let mut all = scored(query, gallery, exclude)?;
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, by_score_then_index);
        all.truncate(k);
    }
    all.sort_by(by_score_then_index);
    Ok(into_result(gallery, all))
}

/// Everything needed to answer a [`QuerySpec`]: encoder, reference-image
/// features, the gallery and a set of named TINets.
pub struct QueryEngine<'a, E: DualEncoder + ?Sized> {
    pub encoder: &'a E,
    /// Image embeddings of reference images; the gallery is searched as a
    /// fallback.
    pub references: &'a FeatureTable,
    pub gallery: &'a FeatureTable,
    pub tinets: &'a BTreeMap<String, TiNet>,
}

impl<'a, E: DualEncoder + ?Sized> QueryEngine<'a, E> {
    pub fn reference_embedding(&self, image_id: &str) -> Result<&'a [f32]> {
        self.references
            .get(image_id)
            .or_else(|| self.gallery.get(image_id))
            .ok_or_else(|| Error::UnknownId(image_id.into()))
    }

    pub fn tinets_for(&self, ids: &[String]) -> Result<Vec<&'a TiNet>> {
        ids.iter()
            .map(|id| self.tinets.get(id).ok_or_else(|| Error::UnknownId(format!("tinet {id}"))))
            .collect()
    }

    /// Query embedding for `spec`; `image_embedding` overrides the lookup of
    /// `spec.image_id`.
    pub fn embed(&self, spec: &QuerySpec, image_embedding: Option<&[f32]>) -> Result<Embedding> {
        if image_embedding.is_none() {
            spec.validate()?;
        }
        let image = match (image_embedding, spec.image_id.as_deref()) {
            (Some(e), _) => Some(e),
            (None, Some(id)) => Some(self.reference_embedding(id)?),
            (None, None) => None,
        };
        let caption = spec.caption.as_deref().filter(|c| !c.trim().is_empty());
        match spec.mode {
            QueryMode::Composed => {
                let tinets = self.tinets_for(&spec.tinet_ids)?;
                compose_query(self.encoder, &tinets, image.ok_or(Error::MissingInput("image"))?, caption)
            }
            mode => baseline_query(self.encoder, mode, image, caption),
        }
    }

    pub fn retrieve(&self, spec: &QuerySpec, k: usize, exclude_reference: bool) -> Result<RetrievalResult> {
        let query = self.embed(spec, None)?;
        let exclude = if exclude_reference { spec.image_id.as_deref() } else { None };
        let mut result = rank_gallery(&query, self.gallery, k, exclude)?;
        result.query = Some(spec.clone());
        Ok(result)
    }
}
