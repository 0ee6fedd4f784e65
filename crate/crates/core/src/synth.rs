//! Seeded synthetic pedestrians for desk-scale runs.
//!
//! Each identity is a combination of upper-body colour, lower-body colour
//! and an optional accessory, rendered as flat blocks over a per-image
//! background with pixel noise, and described by a template caption.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cache::ImageSource;
use crate::dataset::{ImageDataset, ImageRecord, ManifestKind, Triplet};
use crate::encoder::{ImageTensor, IMAGE_HEIGHT, IMAGE_WIDTH};
use crate::random::{derived_rng, rng};
use crate::{Error, Result};

const PALETTE: [(&str, [u8; 3]); 8] = [
    ("black", [25, 25, 28]),
    ("white", [235, 235, 230]),
    ("red", [200, 35, 35]),
    ("blue", [35, 70, 200]),
    ("green", [40, 150, 60]),
    ("yellow", [225, 205, 45]),
    ("gray", [128, 128, 128]),
    ("purple", [125, 45, 160]),
];

const ACCESSORIES: [Option<&str>; 5] = [None, Some("backpack"), Some("hat"), Some("handbag"), Some("umbrella")];

const SKIN: [u8; 3] = [205, 165, 135];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub identities: usize,
    pub images_per_identity: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Uniform pixel noise amplitude in 8-bit units.
    pub noise: u8,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            identities: 16,
            images_per_identity: 4,
            seed: 0,
            height: IMAGE_HEIGHT,
            width: IMAGE_WIDTH,
            noise: 12,
        }
    }
}

impl SynthConfig {
    pub fn capacity() -> usize {
        PALETTE.len() * (PALETTE.len() - 1) * ACCESSORIES.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.identities == 0 || self.identities > Self::capacity() {
            return Err(Error::OutOfRange {
                what: "synthetic identities",
                detail: format!("{} not in 1..={}", self.identities, Self::capacity()),
            });
        }
        if self.images_per_identity < 2 {
            return Err(Error::InvalidConfig("each identity needs at least two images".into()));
        }
        if self.height < 20 || self.width < 10 {
            return Err(Error::InvalidConfig("synthetic images must be at least 20x10".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticIdentity {
    pub identity_id: String,
    pub upper: String,
    pub lower: String,
    pub accessory: Option<String>,
    pub caption: String,
}

/// A generated corpus: image-caption dataset, one triplet per identity
/// (first image as reference, the others as targets) and the gallery of
/// all non-reference images.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub config: SynthConfig,
    pub identities: Vec<SyntheticIdentity>,
    pub dataset: ImageDataset,
    pub triplets: Vec<Triplet>,
    pub gallery_ids: Vec<String>,
}

fn color(name: &str) -> [u8; 3] {
    PALETTE.iter().find(|(n, _)| *n == name).map(|(_, c)| *c).unwrap_or([0, 0, 0])
}

pub fn image_id(identity: usize, image: usize) -> String {
    format!("p{identity:03}_{image:02}")
}

impl SyntheticCorpus {
    pub fn generate(config: SynthConfig) -> Result<Self> {
        config.validate()?;
        let mut combos: Vec<(usize, usize, usize)> = Vec::with_capacity(SynthConfig::capacity());
        for a in 0..ACCESSORIES.len() {
            for u in 0..PALETTE.len() {
                for l in 0..PALETTE.len() {
                    if u != l {
                        combos.push((u, l, a));
                    }
                }
            }
        }
        let mut r = rng(config.seed);
        // Shuffle within each accessory tier.
        let tier = PALETTE.len() * (PALETTE.len() - 1);
        for chunk in combos.chunks_mut(tier) {
            chunk.shuffle(&mut r);
        }
        let identities: Vec<SyntheticIdentity> = combos
            .into_iter()
            .take(config.identities)
            .enumerate()
            .map(|(i, (u, l, a))| {
                let (upper, lower) = (PALETTE[u].0, PALETTE[l].0);
                let mut caption = format!("a person wearing a {upper} shirt and {lower} pants");
                match ACCESSORIES[a] {
                    Some("hat") => caption.push_str(" with a hat"),
                    Some(acc) => caption.push_str(&format!(" carrying a {acc}")),
                    None => {}
                }
                SyntheticIdentity {
                    identity_id: format!("p{i:03}"),
                    upper: upper.into(),
                    lower: lower.into(),
                    accessory: ACCESSORIES[a].map(String::from),
                    caption,
                }
            })
            .collect();
        let mut entries = Vec::new();
        let mut triplets = Vec::new();
        let mut gallery_ids = Vec::new();
        for (i, ident) in identities.iter().enumerate() {
            for j in 0..config.images_per_identity {
                let id = image_id(i, j);
                let mut meta = derived_rng(config.seed, 1_000 + i as u64, j as u64);
                let width: u32 = meta.random_range(48..=256);
                let height: u32 = width * 2 + meta.random_range(0..=width);
                entries.push((
                    ImageRecord {
                        image_id: id.clone(),
                        identity_id: ident.identity_id.clone(),
                        path: format!("images/{id}.png"),
                        width,
                        height,
                        source: "synthetic".into(),
                    },
                    Some(ident.caption.clone()),
                ));
                if j > 0 {
                    gallery_ids.push(id);
                }
            }
            triplets.push(Triplet {
                query_image_id: image_id(i, 0),
                relative_caption: ident.caption.clone(),
                target_image_ids: (1..config.images_per_identity).map(|j| image_id(i, j)).collect(),
            });
        }
        Ok(Self {
            config,
            dataset: ImageDataset::new(entries, ManifestKind::ImageCaption)?,
            identities,
            triplets,
            gallery_ids,
        })
    }

    fn locate(&self, image_id: &str) -> Result<(usize, usize)> {
        let pos = self
            .dataset
            .position(image_id)
            .ok_or_else(|| Error::UnknownId(image_id.into()))?;
        let per = self.config.images_per_identity;
        Ok((pos / per, pos % per))
    }

    /// `H × W × 3` 8-bit pixels of one image.
    pub fn render_rgb8(&self, image_id: &str) -> Result<Vec<u8>> {
        let (i, j) = self.locate(image_id)?;
        Ok(self.draw(i, Some(j)))
    }

    /// Noise-free, centred rendering of an identity.
    pub fn prototype_rgb8(&self, identity: usize) -> Result<Vec<u8>> {
        if identity >= self.identities.len() {
            return Err(Error::UnknownId(format!("identity {identity}")));
        }
        Ok(self.draw(identity, None))
    }

    pub fn render(&self, image_id: &str) -> Result<ImageTensor> {
        ImageTensor::from_rgb8(self.config.height, self.config.width, &self.render_rgb8(image_id)?)
    }

    fn draw(&self, identity: usize, image: Option<usize>) -> Vec<u8> {
        let (h, w) = (self.config.height as i64, self.config.width as i64);
        let ident = &self.identities[identity];
        let mut r = derived_rng(self.config.seed, identity as u64, image.map_or(u64::MAX, |j| j as u64));
        let (background, dx, dy, noise) = match image {
            Some(_) => {
                let bg = [
                    r.random_range(70..=180u8),
                    r.random_range(70..=180u8),
                    r.random_range(70..=180u8),
                ];
                (bg, r.random_range(-w / 16..=w / 16), r.random_range(-h / 40..=h / 40), self.config.noise)
            }
            None => ([150, 150, 150], 0, 0, 0),
        };
        let upper = color(&ident.upper);
        let lower = color(&ident.lower);
        let accessory = ident.accessory.as_deref();
        let (x0, x1) = (w / 5 + dx, 4 * w / 5 + dx);
        let mut out = Vec::with_capacity((h * w * 3) as usize);
        for y in 0..h {
            for x in 0..w {
                let yy = y - dy;
                let inside = x >= x0 && x < x1;
                let mut px = background;
                if inside && yy >= h / 20 && yy < h / 5 && x >= x0 + (x1 - x0) / 4 && x < x1 - (x1 - x0) / 4 {
                    px = SKIN;
                    if accessory == Some("hat") && yy < h / 10 {
                        px = [30, 30, 30];
                    }
                } else if inside && yy >= h / 5 && yy < h / 2 {
                    px = upper;
                } else if inside && yy >= h / 2 && yy < 19 * h / 20 {
                    px = lower;
                }
                match accessory {
                    Some("backpack") if yy >= h / 4 && yy < 9 * h / 20 && x >= x1 && x < x1 + w / 10 => {
                        px = [110, 65, 30];
                    }
                    Some("handbag") if yy >= h / 2 && yy < 5 * h / 8 && x >= x0 - w / 10 && x < x0 => {
                        px = [190, 120, 60];
                    }
                    Some("umbrella") if yy < h / 20 && x >= x0 - w / 10 && x < x1 + w / 10 => {
                        px = [20, 20, 120];
                    }
                    _ => {}
                }
                for c in px {
                    let v = if noise > 0 {
                        let n = r.random_range(-(noise as i16)..=noise as i16);
                        (c as i16 + n).clamp(0, 255) as u8
                    } else {
                        c
                    };
                    out.push(v);
                }
            }
        }
        out
    }
}

impl ImageSource for SyntheticCorpus {
    fn load(&self, record: &ImageRecord) -> Result<ImageTensor> {
        self.render(&record.image_id)
    }
}
