//! Binary artifacts: feature caches, inversion-network checkpoints and toy
//! encoder checkpoints.
//!
//! Feature cache (`*.w4pc`), little-endian:
//!
//! ```text
//! magic "W4PCACHE" | version u32 | dim u32 | count u64 | fingerprint [u8; 32]
//! count × dim f32 rows
//! ```
//!
//! with a sidecar `*.index.json` mapping each image id to its row.
//!
//! Checkpoints share one archive layout:
//!
//! ```text
//! magic [u8; 8] | version u32 | header length u64 | JSON header | tensor data
//! ```
//!
//! The header lists tensor names and shapes; data follows in that order,
//! row-major. TINet tensors are f32, encoder tensors f64.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use word4per_core::cache::{FeatureCache, FeatureTable};
use word4per_core::encoder::{DualEncoder, ToyDualEncoder, ToyEncoderConfig, ToyParams};
use word4per_core::losses::Supervision;
use word4per_core::tinet::{Layer, TiNet, TiNetConfig};
use word4per_core::tokenizer::WhitespaceTokenizer;
use word4per_core::{Fingerprint, Matrix};

use crate::error::{AppError, Result};
use crate::manifest::write_atomic;

pub const CACHE_MAGIC: &[u8; 8] = b"W4PCACHE";
pub const CACHE_VERSION: u32 = 1;
pub const TINET_MAGIC: &[u8; 8] = b"W4PTINET";
pub const ENCODER_MAGIC: &[u8; 8] = b"W4PTOYEN";
pub const ARCHIVE_VERSION: u32 = 1;

const CACHE_HEADER_LEN: usize = 8 + 4 + 4 + 8 + 32;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| AppError::io(path, e))
}

/// Little-endian cursor over a byte buffer.
struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Self { path, bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| AppError::format(self.path, "file is truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn magic(&mut self, want: &[u8; 8]) -> Result<()> {
        let got = self.take(8)?;
        if got != want {
            return Err(AppError::format(
                self.path,
                format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(got), String::from_utf8_lossy(want)),
            ));
        }
        Ok(())
    }

    fn version(&mut self, want: u32) -> Result<()> {
        let v = self.u32()?;
        if v != want {
            return Err(AppError::format(self.path, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }
}

pub fn index_path(path: &Path) -> PathBuf {
    path.with_extension("index.json")
}

/// Writes a feature table and its id sidecar.
pub fn write_features(path: &Path, fingerprint: &Fingerprint, table: &FeatureTable) -> Result<()> {
    let mut buf = Vec::with_capacity(CACHE_HEADER_LEN + table.raw().len() * 4);
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(table.dim() as u32).to_le_bytes());
    buf.extend_from_slice(&(table.len() as u64).to_le_bytes());
    buf.extend_from_slice(fingerprint);
    for x in table.raw() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    write_atomic(path, &buf)?;
    let index: serde_json::Map<String, Value> =
        table.ids().iter().enumerate().map(|(i, id)| (id.clone(), Value::from(i))).collect();
    let json = serde_json::to_vec_pretty(&index).map_err(|e| AppError::format(path, e.to_string()))?;
    write_atomic(&index_path(path), &json)
}

/// Reads a feature table written by [`write_features`].
pub fn read_features(path: &Path) -> Result<(Fingerprint, FeatureTable)> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(path, &bytes);
    r.magic(CACHE_MAGIC)?;
    r.version(CACHE_VERSION)?;
    let dim = r.u32()? as usize;
    let count = r.u64()? as usize;
    let fingerprint: Fingerprint = r.take(32)?.try_into().unwrap();
    let expected = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| AppError::format(path, "header sizes overflow"))?;
    if r.rest().len() != expected {
        return Err(AppError::format(
            path,
            format!("expected {expected} bytes of rows for {count}×{dim}, found {}", r.rest().len()),
        ));
    }
    let data: Vec<f32> = r
        .rest()
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let ipath = index_path(path);
    let index: BTreeMap<String, usize> =
        serde_json::from_slice(&read_file(&ipath)?).map_err(|e| AppError::format(&ipath, e.to_string()))?;
    if index.len() != count {
        return Err(AppError::format(&ipath, format!("index lists {} ids for {count} rows", index.len())));
    }
    let mut ids: Vec<Option<String>> = vec![None; count];
    for (id, row) in index {
        match ids.get_mut(row) {
            Some(slot @ None) => *slot = Some(id),
            Some(Some(_)) => return Err(AppError::format(&ipath, format!("row {row} is listed twice"))),
            None => return Err(AppError::format(&ipath, format!("row {row} of `{id}` is out of range"))),
        }
    }
    let mut table = FeatureTable::new(dim);
    for (i, id) in ids.into_iter().enumerate() {
        table.push(id.expect("rows form a permutation"), &data[i * dim..(i + 1) * dim])?;
    }
    Ok((fingerprint, table))
}

/// A cache directory holds `images.w4pc` and optionally `texts.w4pc`.
pub fn write_cache(dir: &Path, cache: &FeatureCache) -> Result<()> {
    write_features(&dir.join("images.w4pc"), &cache.fingerprint, &cache.images)?;
    if let Some(t) = &cache.texts {
        write_features(&dir.join("texts.w4pc"), &cache.fingerprint, t)?;
    }
    Ok(())
}

pub fn read_cache(dir: &Path) -> Result<FeatureCache> {
    let (fingerprint, images) = read_features(&dir.join("images.w4pc"))?;
    let tpath = dir.join("texts.w4pc");
    let texts = if tpath.exists() {
        let (fp, t) = read_features(&tpath)?;
        if fp != fingerprint {
            return Err(AppError::format(&tpath, "text features come from a different encoder than image features"));
        }
        Some(t)
    } else {
        None
    };
    Ok(FeatureCache {
        fingerprint,
        images,
        texts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

fn write_archive<H: Serialize>(path: &Path, magic: &[u8; 8], header: &H, payload: &[u8]) -> Result<()> {
    let json = serde_json::to_vec(header).map_err(|e| AppError::format(path, e.to_string()))?;
    let mut buf = Vec::with_capacity(20 + json.len() + payload.len());
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(payload);
    write_atomic(path, &buf)
}

fn read_archive<H: for<'de> Deserialize<'de>>(path: &Path, magic: &[u8; 8]) -> Result<(H, Vec<u8>)> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(path, &bytes);
    r.magic(magic)?;
    r.version(ARCHIVE_VERSION)?;
    let len = r.u64()? as usize;
    let header = serde_json::from_slice(r.take(len)?).map_err(|e| AppError::format(path, format!("header: {e}")))?;
    Ok((header, r.rest().to_vec()))
}

fn check_payload(path: &Path, tensors: &[TensorEntry], width: usize, payload: &[u8]) -> Result<()> {
    let values: usize = tensors.iter().map(|t| t.shape[0] * t.shape[1]).sum();
    if values * width != payload.len() {
        return Err(AppError::format(
            path,
            format!("header declares {} bytes of tensors, found {}", values * width, payload.len()),
        ));
    }
    Ok(())
}

/// A trained (or random) inversion network with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct TinetCheckpoint {
    pub name: String,
    pub mode: Supervision,
    pub tinet: TiNet,
    /// Free-form creation metadata (tool version, steps, final loss).
    pub metadata: BTreeMap<String, Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TinetHeader {
    name: String,
    mode: Supervision,
    config: TiNetConfig,
    encoder_fingerprint: Option<String>,
    metadata: BTreeMap<String, Value>,
    tensors: Vec<TensorEntry>,
}

pub fn write_tinet(path: &Path, ckpt: &TinetCheckpoint) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (i, layer) in ckpt.tinet.layers().iter().enumerate() {
        for (part, m) in [("weight", &layer.weight), ("bias", &layer.bias)] {
            tensors.push(TensorEntry {
                name: format!("layers.{i}.{part}"),
                shape: [m.rows(), m.cols()],
            });
            for &x in m.as_slice() {
                payload.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
    }
    let header = TinetHeader {
        name: ckpt.name.clone(),
        mode: ckpt.mode,
        config: *ckpt.tinet.config(),
        encoder_fingerprint: ckpt.tinet.encoder_fingerprint().map(hex::encode),
        metadata: ckpt.metadata.clone(),
        tensors,
    };
    write_archive(path, TINET_MAGIC, &header, &payload)
}

pub fn read_tinet(path: &Path) -> Result<TinetCheckpoint> {
    let (h, payload): (TinetHeader, _) = read_archive(path, TINET_MAGIC)?;
    check_payload(path, &h.tensors, 4, &payload)?;
    if h.tensors.len() % 2 != 0 {
        return Err(AppError::format(path, "tensors must come in weight/bias pairs"));
    }
    let mut values = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    let mut mats = Vec::with_capacity(h.tensors.len());
    for t in &h.tensors {
        let data: Vec<f64> = values.by_ref().take(t.shape[0] * t.shape[1]).collect();
        mats.push(Matrix::from_vec(t.shape[0], t.shape[1], data)?);
    }
    let mut it = mats.into_iter();
    let mut layers = Vec::with_capacity(h.tensors.len() / 2);
    while let (Some(weight), Some(bias)) = (it.next(), it.next()) {
        layers.push(Layer { weight, bias });
    }
    let mut tinet = TiNet::from_layers(h.config, layers)?;
    if let Some(fp) = h.encoder_fingerprint {
        tinet.bind_encoder(parse_fingerprint(&fp).map_err(|m| AppError::format(path, m))?);
    }
    Ok(TinetCheckpoint {
        name: h.name,
        mode: h.mode,
        tinet,
        metadata: h.metadata,
    })
}

pub fn parse_fingerprint(s: &str) -> std::result::Result<Fingerprint, String> {
    let bytes = hex::decode(s).map_err(|e| format!("fingerprint: {e}"))?;
    bytes.try_into().map_err(|_| "fingerprint must be 32 bytes".to_string())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncoderHeader {
    backend: String,
    config: ToyEncoderConfig,
    vocabulary: Vec<String>,
    fingerprint: String,
    tensors: Vec<TensorEntry>,
}

/// Saves the toy encoder pair at full precision so the fingerprint survives
/// a round trip.
pub fn write_encoder(path: &Path, encoder: &ToyDualEncoder) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (name, m) in ToyParams::NAMES.iter().zip(encoder.params().tensors()) {
        tensors.push(TensorEntry {
            name: (*name).to_string(),
            shape: [m.rows(), m.cols()],
        });
        for &x in m.as_slice() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let header = EncoderHeader {
        backend: "toy".into(),
        config: *encoder.config(),
        vocabulary: encoder.whitespace_tokenizer().words().to_vec(),
        fingerprint: hex::encode(encoder.fingerprint()),
        tensors,
    };
    write_archive(path, ENCODER_MAGIC, &header, &payload)
}

/// Loads a toy encoder (trainable) and verifies its stored fingerprint.
pub fn read_encoder(path: &Path) -> Result<ToyDualEncoder> {
    let (h, payload): (EncoderHeader, _) = read_archive(path, ENCODER_MAGIC)?;
    if h.backend != "toy" {
        return Err(AppError::format(path, format!("unsupported encoder backend `{}`", h.backend)));
    }
    check_payload(path, &h.tensors, 8, &payload)?;
    let names: Vec<&str> = h.tensors.iter().map(|t| t.name.as_str()).collect();
    if names != ToyParams::NAMES {
        return Err(AppError::format(path, format!("unexpected tensor list {names:?}")));
    }
    let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut mats = Vec::with_capacity(h.tensors.len());
    for t in &h.tensors {
        let data: Vec<f64> = values.by_ref().take(t.shape[0] * t.shape[1]).collect();
        mats.push(Matrix::from_vec(t.shape[0], t.shape[1], data)?);
    }
    let tokenizer = WhitespaceTokenizer::from_words(h.vocabulary)?;
    let encoder = ToyDualEncoder::with_params(h.config, tokenizer, ToyParams::from_tensors(mats)?)?;
    if hex::encode(encoder.fingerprint()) != h.fingerprint {
        return Err(AppError::format(path, "stored fingerprint does not match the parameters"));
    }
    Ok(encoder)
}
