//! Probes of what pseudo-words encode: nearest vocabulary words, word
//! substitution in composed queries, and caption-free self-retrieval.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cache::FeatureTable;
use crate::encoder::{embed_slots, prompt_layout, DualEncoder, Template, TokenEmbeddingSequence};
use crate::linalg::{dot, norm, Matrix};
use crate::metrics::{evaluate_queries, EvalQuery, EvalReport};
use crate::retrieval::{compose_query, fuse};
use crate::tinet::TiNet;
use crate::tokenizer::Tokenizer;
use crate::{Embedding, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub token_id: u32,
    pub word: String,
    /// Set for sub-word pieces that do not end a word.
    pub partial: bool,
    pub similarity: f64,
}

fn similarities(pseudo: &[f64], table: &Matrix) -> Result<Vec<(f64, u32)>> {
    if pseudo.len() != table.cols() {
        return Err(Error::shape("pseudo-word dimension", table.cols(), pseudo.len()));
    }
    let pn = norm(pseudo);
    if pn == 0.0 {
        return Err(Error::ZeroNorm {
            context: "pseudo-word",
            row: 0,
        });
    }
    if !pn.is_finite() {
        return Err(Error::NonFinite("pseudo-word".into()));
    }
    Ok(table
        .iter_rows()
        .enumerate()
        .map(|(i, row)| {
            let rn = norm(row);
            let s = if rn == 0.0 { 0.0 } else { dot(pseudo, row) / (pn * rn) };
            (s, i as u32)
        })
        .collect())
}

fn sort_desc(v: &mut [(f64, u32)]) {
    v.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(core::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
}

/// The `k` token-table rows most cosine-similar to `pseudo`, best first.
/// Equal similarities keep vocabulary order.
pub fn vocab_neighbors(
    pseudo: &[f64],
    tokenizer: &dyn Tokenizer,
    table: &Matrix,
    k: usize,
) -> Result<Vec<Neighbor>> {
    if table.rows() != tokenizer.vocab_size() {
        return Err(Error::shape("token table rows", tokenizer.vocab_size(), table.rows()));
    }
    if k == 0 || k > table.rows() {
        return Err(Error::OutOfRange {
            what: "neighbor count",
            detail: format!("{k} not in 1..={}", table.rows()),
        });
    }
    let mut sims = similarities(pseudo, table)?;
    sort_desc(&mut sims);
    sims.truncate(k);
    Ok(sims
        .into_iter()
        .map(|(similarity, token_id)| {
            let d = tokenizer.decode_token(token_id);
            Neighbor {
                token_id,
                word: d.as_ref().map(|d| d.word.clone()).unwrap_or_default(),
                partial: d.is_some_and(|d| d.partial),
                similarity,
            }
        })
        .collect())
}

/// Most similar non-special vocabulary token.
pub fn nearest_word(pseudo: &[f64], tokenizer: &dyn Tokenizer, table: &Matrix) -> Result<u32> {
    let specials = tokenizer.specials();
    let mut sims = similarities(pseudo, table)?;
    sims.retain(|&(_, id)| !specials.contains(id));
    sort_desc(&mut sims);
    sims.first().map(|&(_, id)| id).ok_or(Error::Empty("non-special vocabulary"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubstitutionStrategy {
    /// The pseudo-word itself.
    Pseudo,
    /// The table row of the pseudo-word's nearest vocabulary word.
    FirstSim,
    /// The caption alone.
    TextOnly,
}

impl core::str::FromStr for SubstitutionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pseudo" => Ok(Self::Pseudo),
            "1st-sim" | "first-sim" => Ok(Self::FirstSim),
            "text-only" => Ok(Self::TextOnly),
            other => Err(Error::InvalidConfig(format!("unknown substitution strategy `{other}`"))),
        }
    }
}

/// Inference-template prompt with the pseudo-word replaced by its nearest
/// word. Returns that word's id and the embedded sequence.
pub fn first_sim_sequence<E: DualEncoder + ?Sized>(
    encoder: &E,
    tinet: &TiNet,
    image_embedding: &[f32],
    caption: &str,
) -> Result<(u32, TokenEmbeddingSequence)> {
    if tinet.encoder_fingerprint() != Some(&encoder.fingerprint()) {
        return Err(Error::FingerprintMismatch);
    }
    let pseudo = tinet.forward_f32(image_embedding)?;
    let word = nearest_word(&pseudo.vector, encoder.tokenizer(), encoder.token_table())?;
    let slots = prompt_layout(encoder.tokenizer(), Template::Infer, caption, encoder.max_len())?;
    let row = encoder.token_table().row(word as usize);
    let seq = embed_slots(
        &slots,
        encoder.token_table(),
        encoder.tokenizer().specials().pad,
        Some(row),
        encoder.max_len(),
    )?;
    Ok((word, seq))
}

/// Composed query under a substitution strategy, fused over `tinets`.
pub fn substitute_word_query<E: DualEncoder + ?Sized>(
    encoder: &E,
    tinets: &[&TiNet],
    image_embedding: &[f32],
    caption: &str,
    strategy: SubstitutionStrategy,
) -> Result<Embedding> {
    if caption.trim().is_empty() {
        return Err(Error::MissingInput("caption"));
    }
    match strategy {
        SubstitutionStrategy::Pseudo => compose_query(encoder, tinets, image_embedding, Some(caption)),
        SubstitutionStrategy::FirstSim => {
            if tinets.is_empty() {
                return Err(Error::Empty("tinet list"));
            }
            let candidates = tinets
                .iter()
                .map(|t| {
                    let (_, seq) = first_sim_sequence(encoder, t, image_embedding, caption)?;
                    encoder.encode_token_embeddings(&seq)
                })
                .collect::<Result<Vec<_>>>()?;
            fuse(&candidates)
        }
        SubstitutionStrategy::TextOnly => fuse(&[encoder.encode_text(caption)?]),
    }
}

/// Caption-free composed queries (training template) for each reference,
/// scored against a gallery that must contain every reference; the only
/// correct answer is the reference itself.
pub fn self_retrieval_probe<E: DualEncoder + ?Sized>(
    encoder: &E,
    tinets: &[&TiNet],
    references: &[String],
    reference_features: &FeatureTable,
    gallery: &FeatureTable,
) -> Result<EvalReport> {
    let queries: Vec<EvalQuery> = references
        .iter()
        .enumerate()
        .map(|(i, id)| EvalQuery {
            query_id: format!("s{i:05}"),
            image_id: id.clone(),
            caption: None,
            gt: BTreeSet::from([id.clone()]),
        })
        .collect();
    evaluate_queries(&queries, gallery, false, |q| {
        let f_v = reference_features
            .get(&q.image_id)
            .or_else(|| gallery.get(&q.image_id))
            .ok_or_else(|| Error::UnknownId(q.image_id.clone()))?;
        compose_query(encoder, tinets, f_v, None)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::WhitespaceTokenizer;

    #[test]
    fn own_row_is_first_neighbor() {
        let tok = WhitespaceTokenizer::desk();
        let mut r = crate::random::rng(3);
        let table = crate::random::normal_matrix(&mut r, tok.vocab_size(), 8, 1.0);
        let id = tok.id("coat").unwrap();
        let n = vocab_neighbors(table.row(id as usize), &tok, &table, 3).unwrap();
        assert_eq!(n[0].word, "coat");
        assert!((n[0].similarity - 1.0).abs() < 1e-12);
        assert!(n.windows(2).all(|w| w[0].similarity >= w[1].similarity));
        assert_eq!(nearest_word(table.row(id as usize), &tok, &table).unwrap(), id);
    }

    #[test]
    fn neighbor_errors() {
        let tok = WhitespaceTokenizer::desk();
        let table = Matrix::filled(tok.vocab_size(), 4, 1.0);
        assert!(vocab_neighbors(&[0.0; 4], &tok, &table, 1).is_err());
        assert!(vocab_neighbors(&[1.0; 4], &tok, &table, 0).is_err());
        assert!(vocab_neighbors(&[1.0; 4], &tok, &table, tok.vocab_size() + 1).is_err());
        assert_eq!(vocab_neighbors(&[1.0; 4], &tok, &table, tok.vocab_size()).unwrap().len(), tok.vocab_size());
    }
}
