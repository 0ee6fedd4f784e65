//! Frozen-encoder feature cache.
//!
//! Stage-2 training only needs the global image and caption embeddings of a
//! frozen encoder, so they are computed once and replayed. A cache carries
//! the fingerprint of the encoder that produced it and refuses to be used
//! with any other.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::dataset::{ImageDataset, ImageRecord};
use crate::encoder::{DualEncoder, ImageTensor};
use crate::{Error, Fingerprint, Result};

/// Id-addressed rows of `dim` `f32` values, in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureTable {
    dim: usize,
    ids: Vec<String>,
    index: BTreeMap<String, usize>,
    data: Vec<f32>,
}

impl FeatureTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Default::default()
        }
    }

    pub fn from_rows(dim: usize, rows: impl IntoIterator<Item = (String, Vec<f32>)>) -> Result<Self> {
        let mut t = Self::new(dim);
        for (id, v) in rows {
            t.push(id, &v)?;
        }
        Ok(t)
    }

    pub fn push(&mut self, id: String, vector: &[f32]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::shape("feature row", self.dim, vector.len()));
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("feature row `{id}`")));
        }
        if self.index.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.position(id).map(|i| self.row(i))
    }

    pub fn require(&self, id: &str) -> Result<&[f32]> {
        self.get(id).ok_or_else(|| Error::UnknownId(id.into()))
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn raw(&self) -> &[f32] {
        &self.data
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids.iter().enumerate().map(move |(i, id)| (id.as_str(), self.row(i)))
    }

    /// Rows restricted to `ids`, in the order given.
    pub fn subset<S: AsRef<str>>(&self, ids: &[S]) -> Result<Self> {
        let mut t = Self::new(self.dim);
        for id in ids {
            let id = id.as_ref();
            t.push(id.into(), self.require(id)?)?;
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCache {
    pub fingerprint: Fingerprint,
    pub images: FeatureTable,
    /// Caption embeddings keyed by image id; absent for image-only corpora.
    pub texts: Option<FeatureTable>,
}

impl FeatureCache {
    pub fn dim(&self) -> usize {
        self.images.dim()
    }

    pub fn check_encoder<E: DualEncoder + ?Sized>(&self, encoder: &E) -> Result<()> {
        if self.fingerprint != encoder.fingerprint() {
            return Err(Error::FingerprintMismatch);
        }
        Ok(())
    }
}

/// Supplies decoded images for records.
pub trait ImageSource {
    fn load(&self, record: &ImageRecord) -> Result<ImageTensor>;
}

impl<F> ImageSource for F
where
    F: Fn(&ImageRecord) -> Result<ImageTensor>,
{
    fn load(&self, record: &ImageRecord) -> Result<ImageTensor> {
        self(record)
    }
}

/// One image embedding per image and, when the corpus has captions, one
/// caption embedding per caption.
pub fn build_feature_cache<E: DualEncoder + ?Sized>(
    encoder: &E,
    dataset: &ImageDataset,
    images: &dyn ImageSource,
) -> Result<FeatureCache> {
    if !encoder.is_frozen() {
        return Err(Error::EncoderNotFrozen);
    }
    let dim = encoder.embed_dim();
    let mut image_table = FeatureTable::new(dim);
    for record in dataset.images() {
        let img = images.load(record)?;
        image_table.push(record.image_id.clone(), &encoder.encode_image(&img)?)?;
    }
    let texts = match dataset.captions() {
        Some(captions) => {
            let mut t = FeatureTable::new(dim);
            for c in captions {
                t.push(c.image_id.clone(), &encoder.encode_text(&c.text)?)?;
            }
            Some(t)
        }
        None => None,
    };
    Ok(FeatureCache {
        fingerprint: encoder.fingerprint(),
        images: image_table,
        texts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn table_rejects_bad_rows() {
        let mut t = FeatureTable::new(2);
        t.push("a".into(), &[1.0, 2.0]).unwrap();
        assert!(matches!(t.push("a".into(), &[1.0, 2.0]), Err(Error::DuplicateId(_))));
        assert!(t.push("b".into(), &[1.0]).is_err());
        assert!(t.push("c".into(), &[f32::NAN, 0.0]).is_err());
        assert_eq!(t.get("a"), Some(&[1.0, 2.0][..]));
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn subset_preserves_requested_order() {
        let t = FeatureTable::from_rows(1, vec![("x".into(), vec![1.0]), ("y".into(), vec![2.0])]).unwrap();
        let s = t.subset(&["y", "x"]).unwrap();
        assert_eq!(s.ids(), &["y".to_string(), "x".to_string()]);
        assert!(t.subset(&["z"]).is_err());
    }
}
