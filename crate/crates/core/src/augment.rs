//! Location-aware copy-paste augmentation.
//!
//! Each image may receive a random number of bank entities, pasted at
//! anchors drawn from the detected court (or the fallback bounds). After
//! every pasted entity an occluder may be dropped onto its top-left
//! quadrant. Later pastes hide whatever lies beneath them, and annotations
//! whose visible area falls below `min_visible_fraction` of what they had
//! before occlusion are removed. The result then goes through the base
//! chain: random resize, photometric jitter, flip, crop and pad to the
//! output size.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{imageops, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::{sample_entities, BankError, EntityBank, EntityRecord};
use crate::color::{apply_photometric, PhotometricParams};
use crate::court::{
    detect_playable_region, fallback_bounds, infer_court_side, sample_anchor, CourtError,
    CourtSide, DetectorConfig, PlacementArea,
};
use crate::dataset::{
    write_json, DatasetBundle, DatasetError, ImageRecord, ImageSource, InstanceAnnotation,
    Segmentation,
};
use crate::mask::{self, rle_encode_placed, BinaryMask, MaskError, PixelRect};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("entity bank is empty")]
    EmptyBank,
    #[error("jittered entity has an empty mask")]
    DegenerateResult,
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Court(#[from] CourtError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl From<BankError> for AugmentError {
    fn from(e: BankError) -> Self {
        match e {
            BankError::EmptyBank => AugmentError::EmptyBank,
            BankError::Dataset(d) => AugmentError::Dataset(d),
            other => AugmentError::InvalidConfig(other.to_string()),
        }
    }
}

/// Symmetric photometric jitter ranges: each delta is drawn from `[-x, x]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhotometricRanges {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    /// Hue units on the 0..180 scale.
    pub hue: f32,
}

impl Default for PhotometricRanges {
    fn default() -> Self {
        PhotometricRanges {
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 10.0,
        }
    }
}

impl PhotometricRanges {
    pub const NONE: PhotometricRanges = PhotometricRanges {
        brightness: 0.0,
        contrast: 0.0,
        saturation: 0.0,
        hue: 0.0,
    };

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> PhotometricParams {
        let mut draw = |x: f32| if x > 0.0 { rng.random_range(-x..=x) } else { 0.0 };
        PhotometricParams {
            brightness: draw(self.brightness),
            contrast: draw(self.contrast),
            saturation: draw(self.saturation),
            hue: draw(self.hue),
        }
    }
}

/// Per-entity jitter applied before pasting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JitterRanges {
    pub scale: (f64, f64),
    pub rotation_degrees: (f64, f64),
    pub hflip_probability: f64,
    pub photometric: PhotometricRanges,
}

impl Default for JitterRanges {
    fn default() -> Self {
        JitterRanges {
            scale: (0.8, 1.2),
            rotation_degrees: (-15.0, 15.0),
            hflip_probability: 0.5,
            photometric: PhotometricRanges::default(),
        }
    }
}

impl JitterRanges {
    pub const IDENTITY: JitterRanges = JitterRanges {
        scale: (1.0, 1.0),
        rotation_degrees: (0.0, 0.0),
        hflip_probability: 0.0,
        photometric: PhotometricRanges::NONE,
    };
}

/// Default resize targets, `(width, height)`.
pub const DEFAULT_RESIZE_SCALES: [(u32, u32); 11] = [
    (3680, 3080),
    (3200, 2400),
    (2680, 2080),
    (2000, 1400),
    (1920, 1440),
    (1800, 1200),
    (1600, 1024),
    (1333, 800),
    (1624, 1234),
    (2336, 1752),
    (2456, 2054),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub paste_probability: f64,
    pub occluder_probability: f64,
    /// Cap on pasted entities per image, occluders included.
    pub max_entities: usize,
    pub min_visible_fraction: f64,
    pub entity_jitter: JitterRanges,
    pub global_photometric: PhotometricRanges,
    pub global_hflip_probability: f64,
    pub resize_scales: Vec<(u32, u32)>,
    /// `(width, height)` of every output image.
    pub output_size: (u32, u32),
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            paste_probability: 0.80,
            occluder_probability: 0.70,
            max_entities: 40,
            min_visible_fraction: 0.10,
            entity_jitter: JitterRanges::default(),
            global_photometric: PhotometricRanges::default(),
            global_hflip_probability: 0.5,
            resize_scales: DEFAULT_RESIZE_SCALES.to_vec(),
            output_size: (1760, 1280),
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |msg: String| Err(AugmentError::InvalidConfig(msg));
        for (name, p) in [
            ("paste_probability", self.paste_probability),
            ("occluder_probability", self.occluder_probability),
            ("min_visible_fraction", self.min_visible_fraction),
            ("global_hflip_probability", self.global_hflip_probability),
            ("hflip_probability", self.entity_jitter.hflip_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is outside [0, 1]"));
            }
        }
        if self.max_entities == 0 {
            return bad("max_entities must be at least 1".into());
        }
        if self.output_size.0 == 0 || self.output_size.1 == 0 {
            return bad(format!("output_size {:?} must be positive", self.output_size));
        }
        if self.resize_scales.is_empty() {
            return bad("resize_scales is empty".into());
        }
        if self.resize_scales.iter().any(|&(w, h)| w == 0 || h == 0) {
            return bad("resize_scales entries must be positive".into());
        }
        let (lo, hi) = self.entity_jitter.scale;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("scale range ({lo}, {hi}) is invalid"));
        }
        let (lo, hi) = self.entity_jitter.rotation_degrees;
        if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
            return bad(format!("rotation range ({lo}, {hi}) is invalid"));
        }
        Ok(())
    }
}

/// Concrete jitter drawn for one entity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterParams {
    pub hflip: bool,
    pub scale: f64,
    pub rotation_degrees: f64,
    pub photometric: PhotometricParams,
}

impl JitterParams {
    pub const IDENTITY: JitterParams = JitterParams {
        hflip: false,
        scale: 1.0,
        rotation_degrees: 0.0,
        photometric: PhotometricParams {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
        },
    };

    pub fn sample<R: Rng + ?Sized>(ranges: &JitterRanges, rng: &mut R) -> Self {
        let hflip = rng.random_bool(ranges.hflip_probability);
        let span = |rng: &mut R, (lo, hi): (f64, f64)| {
            if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            }
        };
        let scale = span(rng, ranges.scale);
        let rotation_degrees = span(rng, ranges.rotation_degrees);
        JitterParams {
            hflip,
            scale,
            rotation_degrees,
            photometric: ranges.photometric.sample(rng),
        }
    }
}

/// Samples jitter parameters and applies them.
pub fn jitter_entity<R: Rng + ?Sized>(
    entity: &EntityRecord,
    ranges: &JitterRanges,
    rng: &mut R,
) -> Result<(EntityRecord, JitterParams), AugmentError> {
    let params = JitterParams::sample(ranges, rng);
    Ok((apply_jitter(entity, &params)?, params))
}

/// Flip, then scale and rotate about the crop centre (bilinear pixels,
/// nearest-neighbour mask), then photometric jitter on the instance
/// pixels. The result is re-cropped to its mask's bounding box.
pub fn apply_jitter(entity: &EntityRecord, params: &JitterParams) -> Result<EntityRecord, AugmentError> {
    let mut crop = entity.crop.clone();
    let mut mask = entity.mask.clone();
    if params.hflip {
        crop = imageops::flip_horizontal(&crop);
        mask = mask.flip_horizontal();
    }
    if params.scale != 1.0 || params.rotation_degrees != 0.0 {
        (crop, mask) = warp(&crop, &mask, params.scale, params.rotation_degrees);
    }
    let rect = mask.bbox().ok_or(AugmentError::DegenerateResult)?;
    if rect.width != mask.width() || rect.height != mask.height() {
        crop = imageops::crop_imm(&crop, rect.x as u32, rect.y as u32, rect.width as u32, rect.height as u32)
            .to_image();
        mask = mask.crop(rect);
    }
    let selected = |x: u32, y: u32| mask.get(y as usize, x as usize);
    apply_photometric(&mut crop, &params.photometric, Some(&selected));
    Ok(EntityRecord {
        crop,
        mask,
        ..entity.clone()
    })
}

fn warp(crop: &RgbImage, mask: &BinaryMask, scale: f64, degrees: f64) -> (RgbImage, BinaryMask) {
    let (w, h) = (crop.width() as f64, crop.height() as f64);
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let half_w = scale * (cos.abs() * w + sin.abs() * h) / 2.0;
    let half_h = scale * (sin.abs() * w + cos.abs() * h) / 2.0;
    let out_w = ((2.0 * half_w - 1e-9).ceil() as u32).max(1);
    let out_h = ((2.0 * half_h - 1e-9).ceil() as u32).max(1);
    let (ocx, ocy) = (out_w as f64 / 2.0, out_h as f64 / 2.0);
    let (cx, cy) = (w / 2.0, h / 2.0);

    let mut out = RgbImage::new(out_w, out_h);
    let mut out_mask = BinaryMask::new(out_h as usize, out_w as usize);
    for y in 0..out_h {
        for x in 0..out_w {
            let dx = x as f64 + 0.5 - ocx;
            let dy = y as f64 + 0.5 - ocy;
            // inverse rotation, inverse scale
            let sx = (cos * dx + sin * dy) / scale + cx;
            let sy = (-sin * dx + cos * dy) / scale + cy;
            let (col, row) = (sx.floor(), sy.floor());
            if col >= 0.0 && row >= 0.0 && col < w && row < h && mask.get(row as usize, col as usize) {
                out_mask.set(y as usize, x as usize, true);
            }
            out.put_pixel(x, y, bilinear(crop, sx - 0.5, sy - 0.5));
        }
    }
    (out, out_mask)
}

/// Bilinear sample at continuous pixel coordinates, clamped to the edge.
fn bilinear(img: &RgbImage, u: f64, v: f64) -> Rgb<u8> {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let u = u.clamp(0.0, (w - 1) as f64);
    let v = v.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (u.floor() as i64, v.floor() as i64);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (u - x0 as f64, v - y0 as f64);
    let p = |x: i64, y: i64| img.get_pixel(x as u32, y as u32).0;
    let (a, b, c, d) = (p(x0, y0), p(x1, y0), p(x0, y1), p(x1, y1));
    let mut out = [0u8; 3];
    for i in 0..3 {
        let top = a[i] as f64 * (1.0 - fx) + b[i] as f64 * fx;
        let bottom = c[i] as f64 * (1.0 - fx) + d[i] as f64 * fx;
        out[i] = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
    }
    Rgb(out)
}

/// Occluder anchor whose centre lies uniformly on the pixels of the
/// initial entity's top-left quadrant.
pub fn place_occluder<R: Rng + ?Sized>(
    initial_anchor: (i64, i64),
    initial_size: (u32, u32),
    occluder_size: (u32, u32),
    rng: &mut R,
) -> (i64, i64) {
    let qw = (initial_size.0 as i64 + 1) / 2;
    let qh = (initial_size.1 as i64 + 1) / 2;
    let cx = initial_anchor.0 + rng.random_range(0..qw.max(1));
    let cy = initial_anchor.1 + rng.random_range(0..qh.max(1));
    occluder_anchor((cx, cy), occluder_size)
}

/// Top-left anchor for an occluder centred on `center`.
pub fn occluder_anchor(center: (i64, i64), occluder_size: (u32, u32)) -> (i64, i64) {
    (
        center.0 - occluder_size.0 as i64 / 2,
        center.1 - occluder_size.1 as i64 / 2,
    )
}

/// One pasted entity, as written to the provenance log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PasteRecord {
    pub bank_index: usize,
    pub anchor: (i64, i64),
    pub occluder: bool,
    pub jitter: JitterParams,
    /// `None` when the entity landed entirely outside the image.
    pub annotation_id: Option<u64>,
    pub dropped_annotation_ids: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub target_scale: (u32, u32),
    pub resized: (u32, u32),
    pub photometric: PhotometricParams,
    pub hflip: bool,
    pub crop_origin: (u32, u32),
    pub dropped_annotation_ids: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SampleLog {
    pub paste_event: bool,
    /// Primary pastes requested for this image.
    pub requested: usize,
    pub pastes: Vec<PasteRecord>,
    /// Occluder coin flips, one per pasted primary, and how many came up.
    pub occluder_draws: usize,
    pub occluder_hits: usize,
    pub degenerate_skips: usize,
    pub transform: Option<TransformRecord>,
}

impl SampleLog {
    pub fn total_pasted(&self) -> usize {
        self.pastes.len()
    }

    pub fn occluders_pasted(&self) -> usize {
        self.pastes.iter().filter(|p| p.occluder).count()
    }

    pub fn dropped(&self) -> impl Iterator<Item = u64> + '_ {
        self.pastes
            .iter()
            .flat_map(|p| p.dropped_annotation_ids.iter().copied())
            .chain(self.transform.iter().flat_map(|t| t.dropped_annotation_ids.iter().copied()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    pub image: RgbImage,
    pub annotations: Vec<InstanceAnnotation>,
    pub log: SampleLog,
}

/// A mask stored as its bounding window within the frame.
struct Placed {
    template: InstanceAnnotation,
    local: BinaryMask,
    origin: (usize, usize),
    reference: usize,
    visible: usize,
    modified: bool,
}

impl Placed {
    fn from_full(template: InstanceAnnotation, full: &BinaryMask) -> Self {
        let rect = full.bbox().unwrap_or(PixelRect {
            x: 0,
            y: 0,
            width: 0,
            height: 0,
        });
        let local = full.crop(rect);
        let count = local.count();
        Placed {
            template,
            local,
            origin: (rect.x, rect.y),
            reference: count,
            visible: count,
            modified: false,
        }
    }

    fn into_annotation(self, height: usize, width: usize) -> InstanceAnnotation {
        if !self.modified {
            return self.template;
        }
        let rle = rle_encode_placed(&self.local, self.origin, height, width);
        let bbox = self.local.bbox().map(|b| {
            [
                (b.x + self.origin.0) as f64,
                (b.y + self.origin.1) as f64,
                b.width as f64,
                b.height as f64,
            ]
        });
        InstanceAnnotation {
            segmentation: Segmentation::Rle(rle),
            bbox: bbox.unwrap_or([0.0; 4]),
            area: self.visible as f64,
            ..self.template
        }
    }
}

struct Canvas<'a> {
    image: RgbImage,
    instances: Vec<Placed>,
    min_visible_fraction: f64,
    next_id: u64,
    image_id: u64,
    _bank: &'a EntityBank,
}

impl Canvas<'_> {
    /// Composites `entity` at `anchor`, hides what it covers and returns the
    /// new annotation id (if any pixel landed) and the ids dropped.
    fn paste(&mut self, entity: &EntityRecord, anchor: (i64, i64)) -> (Option<u64>, Vec<u64>) {
        let (w, h) = self.image.dimensions();
        let mut landed = BinaryMask::new(entity.mask.height(), entity.mask.width());
        mask::for_each_overlap((h as usize, w as usize), &entity.mask, anchor, |r, c, sr, sc| {
            if entity.mask.get(sr, sc) {
                self.image
                    .put_pixel(c as u32, r as u32, *entity.crop.get_pixel(sc as u32, sr as u32));
                landed.set(sr, sc, true);
            }
        });
        let Some(rect) = landed.bbox() else {
            return (None, Vec::new());
        };

        let mut dropped = Vec::new();
        let frac = self.min_visible_fraction;
        self.instances.retain_mut(|inst| {
            let offset = (
                anchor.0 - inst.origin.0 as i64,
                anchor.1 - inst.origin.1 as i64,
            );
            let cleared = mask::clear_under(&mut inst.local, &entity.mask, offset);
            if cleared == 0 {
                return true;
            }
            inst.visible -= cleared;
            inst.modified = true;
            let keep = inst.visible > 0 && inst.visible as f64 >= frac * inst.reference as f64;
            if !keep {
                dropped.push(inst.template.id);
            }
            keep
        });

        let id = self.next_id;
        self.next_id += 1;
        let local = landed.crop(rect);
        let count = local.count();
        self.instances.push(Placed {
            template: InstanceAnnotation {
                id,
                image_id: self.image_id,
                category_id: entity.category_id,
                segmentation: Segmentation::Polygons(Vec::new()),
                bbox: [0.0; 4],
                area: 0.0,
                iscrowd: false,
                score: None,
            },
            local,
            origin: (
                (anchor.0 + rect.x as i64) as usize,
                (anchor.1 + rect.y as i64) as usize,
            ),
            reference: count,
            visible: count,
            modified: true,
        });
        (Some(id), dropped)
    }
}

/// Pastes bank entities into one image.
///
/// `annotations` must all belong to the image; their masks are decoded at
/// the image's size. New annotations get ids above the largest input id.
pub fn copy_paste<R: Rng + ?Sized>(
    image: &RgbImage,
    annotations: &[InstanceAnnotation],
    bank: &EntityBank,
    area: &PlacementArea,
    config: &AugmentationConfig,
    rng: &mut R,
) -> Result<AugmentedSample, AugmentError> {
    if bank.is_empty() {
        return Err(AugmentError::EmptyBank);
    }
    let (w, h) = image.dimensions();
    let (hu, wu) = (h as usize, w as usize);
    let mut instances = Vec::with_capacity(annotations.len());
    for ann in annotations {
        let full = ann.segmentation.to_mask(hu, wu)?;
        instances.push(Placed::from_full(ann.clone(), &full));
    }
    let image_id = annotations.first().map(|a| a.image_id).unwrap_or(0);
    let mut canvas = Canvas {
        image: image.clone(),
        instances,
        min_visible_fraction: config.min_visible_fraction,
        next_id: annotations.iter().map(|a| a.id).max().map_or(1, |m| m + 1),
        image_id,
        _bank: bank,
    };
    let mut log = SampleLog {
        paste_event: rng.random_bool(config.paste_probability),
        ..Default::default()
    };
    if log.paste_event {
        log.requested = rng.random_range(1..=config.max_entities);
    }

    for _ in 0..log.requested {
        if log.pastes.len() >= config.max_entities {
            break;
        }
        let pick = sample_entities(bank, 1, rng)?[0];
        let params = JitterParams::sample(&config.entity_jitter, rng);
        let entity = match apply_jitter(pick.entity, &params) {
            Ok(e) => e,
            Err(AugmentError::DegenerateResult) => {
                log.degenerate_skips += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let anchor = sample_anchor(area, rng)?;
        let (annotation_id, dropped) = canvas.paste(&entity, anchor);
        log.pastes.push(PasteRecord {
            bank_index: pick.index,
            anchor,
            occluder: false,
            jitter: params,
            annotation_id,
            dropped_annotation_ids: dropped,
        });

        log.occluder_draws += 1;
        if !rng.random_bool(config.occluder_probability) {
            continue;
        }
        log.occluder_hits += 1;
        if log.pastes.len() >= config.max_entities {
            continue;
        }
        let pick = sample_entities(bank, 1, rng)?[0];
        let params = JitterParams::sample(&config.entity_jitter, rng);
        let occluder = match apply_jitter(pick.entity, &params) {
            Ok(e) => e,
            Err(AugmentError::DegenerateResult) => {
                log.degenerate_skips += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let occ_anchor = place_occluder(
            anchor,
            (entity.width(), entity.height()),
            (occluder.width(), occluder.height()),
            rng,
        );
        let (annotation_id, dropped) = canvas.paste(&occluder, occ_anchor);
        log.pastes.push(PasteRecord {
            bank_index: pick.index,
            anchor: occ_anchor,
            occluder: true,
            jitter: params,
            annotation_id,
            dropped_annotation_ids: dropped,
        });
    }

    let annotations = canvas
        .instances
        .into_iter()
        .map(|p| p.into_annotation(hu, wu))
        .collect();
    Ok(AugmentedSample {
        image: canvas.image,
        annotations,
        log,
    })
}

/// Nearest-neighbour source index for each of `dst` output positions.
fn nearest_map(src: usize, dst: usize) -> Vec<usize> {
    (0..dst)
        .map(|i| (((2 * i + 1) * src) / (2 * dst)).min(src - 1))
        .collect()
}

/// Resize to fit a random scale, optional flip, random crop to at most
/// `output_size`, photometric jitter (contrast pivot taken over the crop),
/// then black padding on the bottom and right up to exactly `output_size`.
/// Masks follow the same geometry with nearest-neighbour sampling.
pub fn base_transform_chain<R: Rng + ?Sized>(
    sample: AugmentedSample,
    config: &AugmentationConfig,
    rng: &mut R,
) -> Result<AugmentedSample, AugmentError> {
    let AugmentedSample {
        image,
        annotations,
        mut log,
    } = sample;
    let (w, h) = image.dimensions();
    let (out_w, out_h) = config.output_size;

    let target = config.resize_scales[rng.random_range(0..config.resize_scales.len())];
    let factor = (target.0 as f64 / w as f64).min(target.1 as f64 / h as f64);
    let nw = ((w as f64 * factor).round() as u32).max(1);
    let nh = ((h as f64 * factor).round() as u32).max(1);
    let resized = if (nw, nh) == (w, h) {
        image
    } else {
        imageops::resize(&image, nw, nh, imageops::FilterType::Triangle)
    };

    let photometric = config.global_photometric.sample(rng);
    let hflip = rng.random_bool(config.global_hflip_probability);
    let cw = nw.min(out_w);
    let ch = nh.min(out_h);
    let ox = rng.random_range(0..=nw - cw);
    let oy = rng.random_range(0..=nh - ch);

    // crop first so pixel work is bounded by the output size; `ox` is in
    // flipped coordinates
    let src_x = if hflip { nw - ox - cw } else { ox };
    let mut window = imageops::crop_imm(&resized, src_x, oy, cw, ch).to_image();
    drop(resized);
    if hflip {
        imageops::flip_horizontal_in_place(&mut window);
    }
    apply_photometric(&mut window, &photometric, None);
    let mut out = RgbImage::new(out_w, out_h);
    imageops::replace(&mut out, &window, 0, 0);

    let rmap = nearest_map(h as usize, nh as usize);
    let cmap = nearest_map(w as usize, nw as usize);
    let mut rmult = vec![0usize; h as usize];
    rmap.iter().for_each(|&r| rmult[r] += 1);
    let mut cmult = vec![0usize; w as usize];
    cmap.iter().for_each(|&c| cmult[c] += 1);

    let (oxu, oyu, cwu, chu) = (ox as usize, oy as usize, cw as usize, ch as usize);
    let nwu = nw as usize;
    let mut kept = Vec::with_capacity(annotations.len());
    let mut dropped = Vec::new();
    for ann in annotations {
        let full = ann.segmentation.to_mask(h as usize, w as usize)?;
        let Some(bb) = full.bbox() else {
            dropped.push(ann.id);
            continue;
        };
        let before: usize = full.foreground().map(|(r, c)| rmult[r] * cmult[c]).sum();

        // output rows/cols whose source falls inside the mask's bbox
        let rows: Vec<usize> = (0..chu)
            .filter(|&y| (bb.y..bb.y + bb.height).contains(&rmap[oyu + y]))
            .collect();
        let src_col = |x: usize| {
            let c = oxu + x;
            cmap[if hflip { nwu - 1 - c } else { c }]
        };
        let cols: Vec<usize> = (0..cwu)
            .filter(|&x| (bb.x..bb.x + bb.width).contains(&src_col(x)))
            .collect();
        let (Some(&y0), Some(&y1), Some(&x0), Some(&x1)) =
            (rows.first(), rows.last(), cols.first(), cols.last())
        else {
            dropped.push(ann.id);
            continue;
        };
        let local = BinaryMask::from_fn(y1 - y0 + 1, x1 - x0 + 1, |r, c| {
            full.get(rmap[oyu + y0 + r], src_col(x0 + c))
        });
        let after = local.count();
        if after == 0 || (after as f64) < config.min_visible_fraction * before as f64 {
            dropped.push(ann.id);
            continue;
        }
        let tight = local.bbox().expect("nonempty");
        let local = local.crop(tight);
        let origin = (x0 + tight.x, y0 + tight.y);
        kept.push(InstanceAnnotation {
            segmentation: Segmentation::Rle(rle_encode_placed(
                &local,
                origin,
                out_h as usize,
                out_w as usize,
            )),
            bbox: [
                origin.0 as f64,
                origin.1 as f64,
                tight.width as f64,
                tight.height as f64,
            ],
            area: after as f64,
            ..ann
        });
    }

    log.transform = Some(TransformRecord {
        target_scale: target,
        resized: (nw, nh),
        photometric,
        hflip,
        crop_origin: (ox, oy),
        dropped_annotation_ids: dropped,
    });
    Ok(AugmentedSample {
        image: out,
        annotations: kept,
        log,
    })
}

/// Stable per-image seed.
pub fn image_seed(seed: u64, image_id: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(seed ^ splitmix(image_id))
}

pub fn image_rng(seed: u64, image_id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(image_seed(seed, image_id))
}

#[derive(Debug, Clone, Default)]
pub struct BatchOptions {
    pub augmentation: AugmentationConfig,
    pub detector: DetectorConfig,
    pub side_overrides: HashMap<u64, CourtSide>,
}

/// Where each image's anchors came from.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PlacementSource {
    Detected,
    Fallback { side: CourtSide },
}

/// Runs detection (or fallback) and copy-paste for one image.
pub fn augment_image(
    record: &ImageRecord,
    pixels: &RgbImage,
    annotations: &[InstanceAnnotation],
    bank: &EntityBank,
    options: &BatchOptions,
) -> Result<(AugmentedSample, PlacementSource), AugmentError> {
    let config = &options.augmentation;
    let mut rng = image_rng(config.seed, record.id);
    let detection = detect_playable_region(pixels, &options.detector);
    let (area, source) = match detection {
        Ok(region) => (PlacementArea::Region(region), PlacementSource::Detected),
        Err(failure) => {
            let side = infer_court_side(
                Err(&failure),
                record.width,
                options.side_overrides.get(&record.id).copied(),
            );
            let bounds = fallback_bounds(record.width, record.height, side)?;
            (PlacementArea::Bounds(bounds), PlacementSource::Fallback { side })
        }
    };
    let sample = copy_paste(pixels, annotations, bank, &area, config, &mut rng)?;
    let sample = base_transform_chain(sample, config, &mut rng)?;
    Ok((sample, source))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AugmentReport {
    pub images: usize,
    pub skipped: Vec<(u64, String)>,
    pub paste_events: usize,
    pub pastes: usize,
    pub occluders: usize,
    pub drops: usize,
    pub detected: usize,
    pub fallback: usize,
}

#[derive(Serialize)]
struct ProvenanceLine<'a> {
    image_id: u64,
    bank_index: usize,
    anchor: (i64, i64),
    occluder: bool,
    jitter: &'a JitterParams,
    annotation_id: Option<u64>,
    dropped_annotation_ids: &'a [u64],
}

fn output_name(file_name: &str) -> String {
    let stem = Path::new(file_name)
        .with_extension("")
        .to_string_lossy()
        .replace(['/', '\\'], "_");
    format!("{stem}.png")
}

/// Augments every image of `bundle` and writes the result under `out`:
/// `images/*.png`, `annotations.json` and `provenance.jsonl`.
///
/// Images are processed in parallel on the current rayon pool; each one
/// draws from its own generator seeded by `(seed, image_id)`, so the output
/// does not depend on scheduling. Failing images are logged and left out.
pub fn augment_dataset(
    bundle: &DatasetBundle,
    images: &dyn ImageSource,
    bank: &EntityBank,
    options: &BatchOptions,
    out: &Path,
) -> Result<(DatasetBundle, AugmentReport), AugmentError> {
    options.augmentation.validate()?;
    if bank.is_empty() {
        return Err(AugmentError::EmptyBank);
    }
    let image_dir = out.join("images");
    fs::create_dir_all(&image_dir).map_err(|source| AugmentError::Io {
        path: image_dir.clone(),
        source,
    })?;

    let mut records: Vec<&ImageRecord> = bundle.images.iter().collect();
    records.sort_by_key(|r| r.id);
    let mut by_image: HashMap<u64, Vec<InstanceAnnotation>> = HashMap::new();
    for ann in &bundle.annotations {
        by_image.entry(ann.image_id).or_default().push(ann.clone());
    }
    let (out_w, out_h) = options.augmentation.output_size;

    let results: Vec<Result<(ImageRecord, Vec<InstanceAnnotation>, SampleLog, PlacementSource), String>> =
        records
            .par_iter()
            .map(|record| {
                let run = || -> Result<_, AugmentError> {
                    let pixels = images.load(record)?;
                    let anns = by_image.get(&record.id).map(Vec::as_slice).unwrap_or(&[]);
                    let (sample, source) = augment_image(record, &pixels, anns, bank, options)?;
                    let name = output_name(&record.file_name);
                    crate::dataset::save_png(&image_dir.join(&name), &sample.image)?;
                    let rec = ImageRecord {
                        id: record.id,
                        file_name: name,
                        width: out_w,
                        height: out_h,
                    };
                    Ok((rec, sample.annotations, sample.log, source))
                };
                run().map_err(|e| e.to_string())
            })
            .collect();

    let mut next_id = bundle.annotations.iter().map(|a| a.id).max().unwrap_or(0) + 1;
    let mut out_bundle = DatasetBundle {
        categories: bundle.categories.clone(),
        ..Default::default()
    };
    let mut report = AugmentReport::default();
    let prov_path = out.join("provenance.jsonl");
    let io = |source| AugmentError::Io {
        path: prov_path.clone(),
        source,
    };
    let mut prov = BufWriter::new(File::create(&prov_path).map_err(io)?);

    for (record, result) in records.iter().zip(results) {
        let (rec, mut anns, log, source) = match result {
            Ok(r) => r,
            Err(msg) => {
                log::warn!("skipping image {}: {msg}", record.id);
                report.skipped.push((record.id, msg));
                continue;
            }
        };
        // pasted ids are local to the image until here
        let mut remap: HashMap<u64, u64> = HashMap::new();
        for p in &log.pastes {
            if let Some(local) = p.annotation_id {
                remap.insert(local, next_id);
                next_id += 1;
            }
        }
        let map = |id: u64| remap.get(&id).copied().unwrap_or(id);
        for a in &mut anns {
            a.id = map(a.id);
        }
        for p in &log.pastes {
            let dropped: Vec<u64> = p.dropped_annotation_ids.iter().map(|&d| map(d)).collect();
            let line = ProvenanceLine {
                image_id: rec.id,
                bank_index: p.bank_index,
                anchor: p.anchor,
                occluder: p.occluder,
                jitter: &p.jitter,
                annotation_id: p.annotation_id.map(map),
                dropped_annotation_ids: &dropped,
            };
            serde_json::to_writer(&mut prov, &line).expect("provenance serialises");
            prov.write_all(b"\n").map_err(io)?;
        }

        report.images += 1;
        report.paste_events += log.paste_event as usize;
        report.pastes += log.total_pasted();
        report.occluders += log.occluders_pasted();
        report.drops += log.dropped().count();
        match source {
            PlacementSource::Detected => report.detected += 1,
            PlacementSource::Fallback { .. } => report.fallback += 1,
        }
        out_bundle.images.push(rec);
        out_bundle.annotations.extend(anns);
    }
    prov.flush().map_err(io)?;
    out_bundle.canonicalize();
    write_json(&out.join("annotations.json"), &out_bundle)?;
    Ok((out_bundle, report))
}
