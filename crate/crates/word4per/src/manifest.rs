//! JSONL manifests: image corpora, triplet files and generic line-oriented
//! records.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use word4per_core::dataset::{validate_triplets, ImageDataset, ImageRecord, ManifestKind, Triplet};

use crate::error::{AppError, Result};

/// One line of an image or image-caption manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestLine {
    pub image_id: String,
    pub identity_id: String,
    pub path: String,
    pub width: u32,
    pub height: u32,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

impl ManifestLine {
    pub fn new(record: &ImageRecord, caption: Option<&str>) -> Self {
        Self {
            image_id: record.image_id.clone(),
            identity_id: record.identity_id.clone(),
            path: record.path.clone(),
            width: record.width,
            height: record.height,
            source: record.source.clone(),
            caption: caption.map(str::to_owned),
        }
    }

    fn split(self) -> (ImageRecord, Option<String>) {
        (
            ImageRecord {
                image_id: self.image_id,
                identity_id: self.identity_id,
                path: self.path,
                width: self.width,
                height: self.height,
                source: self.source,
            },
            self.caption,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TripletLine {
    query_image_id: String,
    relative_caption: String,
    target_image_ids: Vec<String>,
}

/// An image corpus together with the directory its relative paths resolve
/// against.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageManifest {
    pub dataset: ImageDataset,
    pub root: PathBuf,
}

impl ImageManifest {
    pub fn resolve(&self, record: &ImageRecord) -> PathBuf {
        self.root.join(&record.path)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Manifest {
    Images(ImageManifest),
    Triplets(Vec<Triplet>),
}

/// Parsed records of a JSONL file with their 1-based line numbers. Blank
/// lines are skipped.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = File::open(path).map_err(|e| AppError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| AppError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| AppError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, value));
    }
    Ok(out)
}

/// Writes one compact JSON object per line, atomically.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).map_err(|e| AppError::format(path, e.to_string()))?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

/// Replaces `path` by writing a sibling temp file, syncing it and renaming.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| AppError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| AppError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| AppError::io(path, e))?;
    tmp.persist(path).map_err(|e| AppError::io(path, e.error))?;
    Ok(())
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> AppError {
    AppError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Loads an image or image-caption manifest. Relative image paths resolve
/// against the manifest's directory.
pub fn load_images(path: &Path, kind: ManifestKind) -> Result<ImageManifest> {
    if kind == ManifestKind::Triplets {
        return Err(AppError::Usage("triplet files are not image manifests".into()));
    }
    let lines: Vec<(usize, ManifestLine)> = read_jsonl(path)?;
    if lines.is_empty() {
        return Err(AppError::format(path, "manifest is empty"));
    }
    let mut first_seen: HashMap<&str, usize> = HashMap::with_capacity(lines.len());
    for (line, rec) in &lines {
        if let Some(prev) = first_seen.insert(rec.image_id.as_str(), *line) {
            return Err(parse_error(
                path,
                *line,
                format!("duplicate image_id `{}` (first on line {prev})", rec.image_id),
            ));
        }
    }
    let line_of: Vec<usize> = lines.iter().map(|(l, _)| *l).collect();
    let entries = lines.into_iter().map(|(_, rec)| rec.split()).collect();
    let dataset = ImageDataset::new(entries, kind).map_err(|e| match e {
        word4per_core::Error::InvalidRecord { index, reason } => parse_error(path, line_of[index], reason),
        other => other.into(),
    })?;
    Ok(ImageManifest {
        dataset,
        root: parent_dir(path),
    })
}

/// Loads a triplet file without checking image references.
pub fn load_triplets(path: &Path) -> Result<Vec<Triplet>> {
    Ok(load_triplet_lines(path)?.into_iter().map(|(_, t)| t).collect())
}

fn load_triplet_lines(path: &Path) -> Result<Vec<(usize, Triplet)>> {
    let lines: Vec<(usize, TripletLine)> = read_jsonl(path)?;
    if lines.is_empty() {
        return Err(AppError::format(path, "triplet file is empty"));
    }
    Ok(lines
        .into_iter()
        .map(|(l, t)| {
            (
                l,
                Triplet {
                    query_image_id: t.query_image_id,
                    relative_caption: t.relative_caption,
                    target_image_ids: t.target_image_ids,
                },
            )
        })
        .collect())
}

/// Loads a triplet file and checks every referenced id with `known`.
pub fn load_triplets_checked(path: &Path, known: impl Fn(&str) -> bool) -> Result<Vec<Triplet>> {
    let lines = load_triplet_lines(path)?;
    for (line, t) in &lines {
        validate_triplets(std::slice::from_ref(t), &known).map_err(|e| parse_error(path, *line, e.to_string()))?;
    }
    Ok(lines.into_iter().map(|(_, t)| t).collect())
}

pub fn load_manifest(path: &Path, kind: ManifestKind) -> Result<Manifest> {
    match kind {
        ManifestKind::Triplets => load_triplets(path).map(Manifest::Triplets),
        kind => load_images(path, kind).map(Manifest::Images),
    }
}

pub fn write_images(path: &Path, dataset: &ImageDataset) -> Result<()> {
    let lines: Vec<ManifestLine> = dataset
        .entries()
        .iter()
        .map(|(r, c)| ManifestLine::new(r, c.as_deref()))
        .collect();
    write_jsonl(path, &lines)
}

pub fn write_triplets(path: &Path, triplets: &[Triplet]) -> Result<()> {
    let lines: Vec<TripletLine> = triplets
        .iter()
        .map(|t| TripletLine {
            query_image_id: t.query_image_id.clone(),
            relative_caption: t.relative_caption.clone(),
            target_image_ids: t.target_image_ids.clone(),
        })
        .collect();
    write_jsonl(path, &lines)
}
