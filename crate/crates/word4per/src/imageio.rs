//! Image decoding and the filesystem-backed image source.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageFormat, RgbImage};
use word4per_core::cache::ImageSource;
use word4per_core::dataset::ImageRecord;
use word4per_core::encoder::ImageTensor;

use crate::error::{AppError, Result};

fn image_error(what: impl Into<String>, e: impl std::fmt::Display) -> AppError {
    AppError::Image {
        what: what.into(),
        message: e.to_string(),
    }
}

/// Resizes to `height × width` unless the image already has that size.
pub fn to_tensor(img: RgbImage, height: usize, width: usize) -> Result<ImageTensor> {
    let (w, h) = (width as u32, height as u32);
    let img = if img.dimensions() == (w, h) {
        img
    } else {
        image::imageops::resize(&img, w, h, FilterType::Triangle)
    };
    Ok(ImageTensor::from_rgb8(height, width, img.as_raw())?)
}

pub fn decode_file(path: &Path, height: usize, width: usize) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| image_error(path.display().to_string(), e))?;
    to_tensor(img.to_rgb8(), height, width)
}

pub fn decode_bytes(bytes: &[u8], height: usize, width: usize) -> Result<ImageTensor> {
    let img = image::load_from_memory(bytes).map_err(|e| image_error("upload", e))?;
    to_tensor(img.to_rgb8(), height, width)
}

/// Encodes `H × W × 3` pixels as PNG.
pub fn write_png(path: &Path, height: usize, width: usize, rgb: Vec<u8>) -> Result<()> {
    let img = RgbImage::from_raw(width as u32, height as u32, rgb)
        .ok_or_else(|| image_error(path.display().to_string(), "pixel buffer does not match its size"))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| image_error(path.display().to_string(), e))
}

/// Content type for serving an image file, from its extension.
pub fn content_type(path: &Path) -> &'static str {
    match ImageFormat::from_path(path) {
        Ok(ImageFormat::Png) => "image/png",
        Ok(ImageFormat::Jpeg) => "image/jpeg",
        _ => "application/octet-stream",
    }
}

/// Loads manifest images from disk, resolving relative paths against `root`.
#[derive(Debug, Clone)]
pub struct FsImages {
    pub root: PathBuf,
    pub height: usize,
    pub width: usize,
}

impl FsImages {
    pub fn new(root: impl Into<PathBuf>, height: usize, width: usize) -> Self {
        Self {
            root: root.into(),
            height,
            width,
        }
    }

    pub fn path(&self, record: &ImageRecord) -> PathBuf {
        self.root.join(&record.path)
    }
}

impl ImageSource for FsImages {
    fn load(&self, record: &ImageRecord) -> word4per_core::Result<ImageTensor> {
        decode_file(&self.path(record), self.height, self.width).map_err(|e| match e {
            AppError::Core(c) => c,
            other => word4per_core::Error::ImageSource(format!("image `{}`: {other}", record.image_id)),
        })
    }
}
