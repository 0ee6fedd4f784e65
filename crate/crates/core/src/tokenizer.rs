//! Tokenizer contract and the whitespace tokenizer used by the desk-scale
//! encoders.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Context length of the text encoder, BOS and EOS included.
pub const MAX_LEN: usize = 77;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub pad: u32,
    pub bos: u32,
    pub eos: u32,
    pub unk: u32,
    pub mask: u32,
}

impl SpecialTokens {
    pub fn contains(&self, id: u32) -> bool {
        id == self.pad || id == self.bos || id == self.eos || id == self.unk || id == self.mask
    }
}

/// A vocabulary entry rendered back to text. `partial` marks sub-word pieces
/// that do not end a word.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodedToken {
    pub word: String,
    pub partial: bool,
}

pub trait Tokenizer {
    fn vocab_size(&self) -> usize;

    fn specials(&self) -> SpecialTokens;

    /// Content token ids for `text`, without BOS/EOS.
    fn word_ids(&self, text: &str) -> Vec<u32>;

    fn token_str(&self, id: u32) -> Option<&str>;

    fn decode_token(&self, id: u32) -> Option<DecodedToken> {
        let raw = self.token_str(id)?;
        Some(match raw.strip_suffix("</w>") {
            Some(word) => DecodedToken {
                word: word.to_string(),
                partial: false,
            },
            None => DecodedToken {
                word: raw.to_string(),
                partial: self.is_subword_vocab(),
            },
        })
    }

    /// Whether tokens without an end-of-word marker are word fragments.
    fn is_subword_vocab(&self) -> bool {
        false
    }

    /// Inverse of [`Tokenizer::word_ids`] up to normalisation.
    fn detokenize(&self, ids: &[u32]) -> String {
        let sp = self.specials();
        let mut out = String::new();
        for &id in ids {
            if id == sp.bos || id == sp.pad {
                continue;
            }
            if id == sp.eos {
                break;
            }
            if let Some(t) = self.decode_token(id) {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(&t.word);
            }
        }
        out
    }
}

/// `[BOS, words…, EOS, PAD…]` padded to the context length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub token_ids: Vec<u32>,
    /// Number of non-PAD tokens.
    pub length: usize,
}

impl TokenSequence {
    pub fn valid(&self) -> &[u32] {
        &self.token_ids[..self.length]
    }
}

/// Tokenizes `text` into a padded sequence of `max_len`, truncating the
/// content so that EOS is always the last non-PAD token.
pub fn tokenize<T: Tokenizer + ?Sized>(tokenizer: &T, text: &str, max_len: usize) -> Result<TokenSequence> {
    if max_len < 2 {
        return Err(Error::InvalidConfig("max_len must leave room for BOS and EOS".into()));
    }
    let sp = tokenizer.specials();
    let mut words = tokenizer.word_ids(text);
    words.truncate(max_len - 2);
    let mut token_ids = Vec::with_capacity(max_len);
    token_ids.push(sp.bos);
    token_ids.extend_from_slice(&words);
    token_ids.push(sp.eos);
    let length = token_ids.len();
    token_ids.resize(max_len, sp.pad);
    Ok(TokenSequence { token_ids, length })
}

const PAD: &str = "<pad>";
const BOS: &str = "<|startoftext|>";
const EOS: &str = "<|endoftext|>";
const UNK: &str = "<unk>";
const MASK: &str = "<mask>";

/// Words every desk vocabulary carries: prompt-template words plus a
/// pedestrian-description lexicon.
const BASE_WORDS: &str = "a an the of is are was with and or in on at to from by for his her \
their its this that who which while has have wears wearing wore carries carrying holding \
holds walks walking stands standing sitting looking photo picture image person man woman \
boy girl lady gentleman child kid adult teen teenager male female people pedestrian he she \
they it one two three black white red blue green yellow orange purple pink brown gray grey \
dark light navy beige khaki maroon tan cream golden silver indigo violet teal olive \
turquoise striped plaid checkered patterned plain floral dotted colorful bright pale \
shirt t-shirt tee top blouse sweater hoodie jacket coat vest cardigan suit dress skirt \
pants trousers jeans shorts leggings uniform sleeves sleeve sleeveless short long collar \
hood zipper buttons pocket shoes sneakers boots sandals heels slippers socks hat cap \
helmet scarf glasses sunglasses mask gloves belt tie watch bracelet necklace earrings \
bag backpack handbag purse suitcase umbrella bottle phone newspaper book box paper \
bicycle bike scooter stroller cart hair haired ponytail bald curly straight shoulder \
length tied bun beard mustache hairstyle slim thin fat tall heavy young old middle aged \
left right front back side behind near into over under down up across along street \
road sidewalk crosswalk building door background camera grass tree car wall shadow \
cotton denim leather wool knit silk casual formal loose tight fitted cropped rolled \
high low over-the-shoulder crossbody small large big little medium logo letters words \
print pattern design lines stripes graphic chest waist knee knees ankle ankles hand \
hands arm arms foot feet head face body neck shoulders strap straps handle also both \
other another something some not no very dark-colored light-colored multi-colored \
appears seems looks";

/// Whitespace tokenizer over a fixed vocabulary. Text is lowercased and
/// stripped of leading/trailing punctuation per word; unknown words map
/// to UNK.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WhitespaceTokenizer {
    words: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, u32>,
}

impl WhitespaceTokenizer {
    /// Specials followed by the base lexicon.
    pub fn desk() -> Self {
        Self::with_corpus(core::iter::empty::<&str>())
    }

    /// Desk vocabulary extended by every normalised word of `texts`, new
    /// words appended in sorted order.
    pub fn with_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<String> = [PAD, BOS, EOS, UNK, MASK].iter().map(|s| s.to_string()).collect();
        let mut index: BTreeMap<String, u32> = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            index.insert(w.clone(), i as u32);
        }
        let mut push = |w: String, words: &mut Vec<String>| {
            if !index.contains_key(&w) {
                index.insert(w.clone(), words.len() as u32);
                words.push(w);
            }
        };
        for w in BASE_WORDS.split_whitespace() {
            push(w.to_string(), &mut words);
        }
        let mut extra: Vec<String> = texts.into_iter().flat_map(normalize_words).collect();
        extra.sort();
        extra.dedup();
        for w in extra {
            push(w, &mut words);
        }
        Self { words, index }
    }

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let expected = [PAD, BOS, EOS, UNK, MASK];
        if words.len() < expected.len() || words.iter().zip(expected).any(|(w, e)| w != e) {
            return Err(Error::InvalidConfig("vocabulary must start with the special tokens".into()));
        }
        let mut index = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::InvalidConfig(alloc::format!("duplicate vocabulary word `{w}`")));
            }
        }
        Ok(Self { words, index })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    /// Rebuilds the lookup index after deserialisation.
    pub fn reindex(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
    }
}

fn normalize_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().filter_map(|raw| {
        if [PAD, BOS, EOS, UNK, MASK].contains(&raw) {
            return Some(raw.to_string());
        }
        let trimmed = raw.trim_matches(|c: char| !c.is_alphanumeric());
        (!trimmed.is_empty()).then(|| trimmed.to_lowercase())
    })
}

impl Tokenizer for WhitespaceTokenizer {
    fn vocab_size(&self) -> usize {
        self.words.len()
    }

    fn specials(&self) -> SpecialTokens {
        SpecialTokens {
            pad: 0,
            bos: 1,
            eos: 2,
            unk: 3,
            mask: 4,
        }
    }

    fn word_ids(&self, text: &str) -> Vec<u32> {
        normalize_words(text)
            .map(|w| self.index.get(&w).copied().unwrap_or(3))
            .collect()
    }

    fn token_str(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text() {
        let t = WhitespaceTokenizer::desk();
        let seq = tokenize(&t, "", MAX_LEN).unwrap();
        assert_eq!(seq.length, 2);
        assert_eq!(&seq.token_ids[..3], &[1, 2, 0]);
        assert_eq!(seq.token_ids.len(), MAX_LEN);
    }

    #[test]
    fn prompt_words() {
        let t = WhitespaceTokenizer::desk();
        let seq = tokenize(&t, "a photo of", MAX_LEN).unwrap();
        let ids: Vec<u32> = ["a", "photo", "of"].iter().map(|w| t.id(w).unwrap()).collect();
        assert_eq!(seq.valid(), &[1, ids[0], ids[1], ids[2], 2]);
    }

    #[test]
    fn truncation_keeps_eos() {
        let t = WhitespaceTokenizer::desk();
        let text = alloc::vec!["red"; 200].join(" ");
        let seq = tokenize(&t, &text, MAX_LEN).unwrap();
        assert_eq!(seq.length, 77);
        assert_eq!(seq.token_ids[76], 2);
    }

    #[test]
    fn normalisation_and_unknowns() {
        let t = WhitespaceTokenizer::desk();
        assert_eq!(t.word_ids("A Red, coat!"), t.word_ids("a red coat"));
        assert_eq!(t.word_ids("zzyzx"), alloc::vec![3]);
        assert_eq!(t.detokenize(&t.word_ids("zzyzx red")), "<unk> red");
    }

    #[test]
    fn corpus_words_extend_vocab() {
        let base = WhitespaceTokenizer::desk();
        let t = WhitespaceTokenizer::with_corpus(["a fedora and galoshes"]);
        assert_eq!(t.vocab_size(), base.vocab_size() + 2);
        assert_ne!(t.id("fedora"), None);
        let rebuilt = WhitespaceTokenizer::from_words(t.words().to_vec()).unwrap();
        assert_eq!(rebuilt, t);
    }
}
