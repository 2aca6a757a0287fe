//! Extracted ground-truth instances kept on disk for pasting.
//!
//! Layout of a bank directory:
//!
//! ```text
//! manifest.json
//! crops/<index>.png   8-bit RGB, tight bounding box of the instance
//! masks/<index>.png   1-bit grayscale, same size as the crop
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetBundle, DatasetError, ImageSource};
use crate::mask::BinaryMask;

#[derive(Debug, Error)]
pub enum BankError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt bank entry {index}: {reason}")]
    CorruptBank { index: usize, reason: String },
    #[error("corrupt bank manifest {path}: {reason}")]
    CorruptManifest { path: PathBuf, reason: String },
    #[error("entity bank is empty")]
    EmptyBank,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BankError + '_ {
    move |source| BankError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityRecord {
    pub source_image_id: u64,
    pub source_annotation_id: u64,
    pub category_id: u64,
    /// Source pixels inside the mask's bounding box, background included.
    pub crop: RgbImage,
    /// Crop-local instance mask.
    pub mask: BinaryMask,
    /// Top-left of the crop in the source image.
    pub crop_origin: (u32, u32),
}

impl EntityRecord {
    pub fn width(&self) -> u32 {
        self.crop.width()
    }

    pub fn height(&self) -> u32 {
        self.crop.height()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub source_image_id: u64,
    pub source_annotation_id: u64,
    pub category_id: u64,
    pub crop_origin_x: u32,
    pub crop_origin_y: u32,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EntityBank {
    pub entries: Vec<EntityRecord>,
}

impl EntityBank {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&EntityRecord> {
        self.entries.get(index)
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        self.entries
            .iter()
            .enumerate()
            .map(|(index, e)| ManifestEntry {
                index,
                source_image_id: e.source_image_id,
                source_annotation_id: e.source_annotation_id,
                category_id: e.category_id,
                crop_origin_x: e.crop_origin.0,
                crop_origin_y: e.crop_origin.1,
                width: e.width(),
                height: e.height(),
            })
            .collect()
    }
}

/// Annotations left out of a bank.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SkipReport {
    pub empty_masks: Vec<u64>,
    pub crowd: Vec<u64>,
}

/// One entry per non-crowd annotation with a nonempty mask, in annotation
/// order.
pub fn extract_entities(
    bundle: &DatasetBundle,
    images: &dyn ImageSource,
) -> Result<(EntityBank, SkipReport), BankError> {
    let mut bank = EntityBank::default();
    let mut skipped = SkipReport::default();
    for record in &bundle.images {
        let anns: Vec<_> = bundle.annotations_for(record.id).collect();
        if anns.is_empty() {
            continue;
        }
        let pixels = images.load(record)?;
        for ann in anns {
            if ann.iscrowd {
                skipped.crowd.push(ann.id);
                continue;
            }
            let mask = bundle.decode_mask(ann)?;
            let Some(rect) = mask.bbox() else {
                skipped.empty_masks.push(ann.id);
                continue;
            };
            let crop = image::imageops::crop_imm(
                &pixels,
                rect.x as u32,
                rect.y as u32,
                rect.width as u32,
                rect.height as u32,
            )
            .to_image();
            bank.entries.push(EntityRecord {
                source_image_id: record.id,
                source_annotation_id: ann.id,
                category_id: ann.category_id,
                crop,
                mask: mask.crop(rect),
                crop_origin: (rect.x as u32, rect.y as u32),
            });
        }
    }
    Ok((bank, skipped))
}

pub fn save_bank(bank: &EntityBank, root: &Path) -> Result<(), BankError> {
    let crops = root.join("crops");
    let masks = root.join("masks");
    fs::create_dir_all(&crops).map_err(io_err(&crops))?;
    fs::create_dir_all(&masks).map_err(io_err(&masks))?;
    for (i, e) in bank.entries.iter().enumerate() {
        let crop_path = crops.join(format!("{i}.png"));
        e.crop
            .save_with_format(&crop_path, image::ImageFormat::Png)
            .map_err(|source| DatasetError::Image {
                path: crop_path.clone(),
                source,
            })?;
        write_mask_png(&masks.join(format!("{i}.png")), &e.mask)?;
    }
    let manifest_path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&bank.manifest()).expect("manifest serialises");
    fs::write(&manifest_path, text).map_err(io_err(&manifest_path))
}

pub fn load_bank(root: &Path) -> Result<EntityBank, BankError> {
    let manifest_path = root.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Vec<ManifestEntry> =
        serde_json::from_str(&text).map_err(|e| BankError::CorruptManifest {
            path: manifest_path.clone(),
            reason: e.to_string(),
        })?;
    let mut entries = Vec::with_capacity(manifest.len());
    for (pos, m) in manifest.iter().enumerate() {
        if m.index != pos {
            return Err(BankError::CorruptManifest {
                path: manifest_path,
                reason: format!("entry at position {pos} has index {}", m.index),
            });
        }
        let corrupt = |reason: String| BankError::CorruptBank {
            index: m.index,
            reason,
        };
        let crop_path = root.join("crops").join(format!("{}.png", m.index));
        let mask_path = root.join("masks").join(format!("{}.png", m.index));
        if !crop_path.is_file() {
            return Err(corrupt(format!("missing crop {}", crop_path.display())));
        }
        if !mask_path.is_file() {
            return Err(corrupt(format!("missing mask {}", mask_path.display())));
        }
        let crop = image::open(&crop_path)
            .map_err(|e| corrupt(format!("unreadable crop: {e}")))?
            .to_rgb8();
        let mask = read_mask_png(&mask_path).map_err(|e| corrupt(format!("unreadable mask: {e}")))?;
        if crop.dimensions() != (m.width, m.height) {
            return Err(corrupt(format!(
                "crop is {}x{}, manifest says {}x{}",
                crop.width(),
                crop.height(),
                m.width,
                m.height
            )));
        }
        if mask.dims() != (m.height as usize, m.width as usize) {
            return Err(corrupt("mask and crop sizes differ".into()));
        }
        entries.push(EntityRecord {
            source_image_id: m.source_image_id,
            source_annotation_id: m.source_annotation_id,
            category_id: m.category_id,
            crop,
            mask,
            crop_origin: (m.crop_origin_x, m.crop_origin_y),
        });
    }
    Ok(EntityBank { entries })
}

fn write_mask_png(path: &Path, mask: &BinaryMask) -> Result<(), BankError> {
    let (h, w) = mask.dims();
    let stride = w.div_ceil(8);
    let mut packed = vec![0u8; stride * h];
    for (r, c) in mask.foreground() {
        packed[r * stride + c / 8] |= 0x80 >> (c % 8);
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::One);
    let to_io = |e: png::EncodingError| BankError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    };
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(&packed).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

fn read_mask_png(path: &Path) -> Result<BinaryMask, String> {
    let file = File::open(path).map_err(|e| e.to_string())?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| e.to_string())?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::One {
        return Err("mask must be a 1-bit grayscale png".into());
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or("mask too large")?];
    let frame = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    let stride = frame.line_size;
    Ok(BinaryMask::from_fn(h, w, |r, c| {
        buf[r * stride + c / 8] & (0x80 >> (c % 8)) != 0
    }))
}

/// A bank entry chosen for pasting.
#[derive(Debug, Clone, Copy)]
pub struct SampledEntity<'a> {
    pub index: usize,
    pub entity: &'a EntityRecord,
}

/// Uniform sampling with replacement.
pub fn sample_entities<'a, R: Rng + ?Sized>(
    bank: &'a EntityBank,
    count: usize,
    rng: &mut R,
) -> Result<Vec<SampledEntity<'a>>, BankError> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if bank.is_empty() {
        return Err(BankError::EmptyBank);
    }
    Ok((0..count)
        .map(|_| {
            let index = rng.random_range(0..bank.len());
            SampledEntity {
                index,
                entity: &bank.entries[index],
            }
        })
        .collect())
}
