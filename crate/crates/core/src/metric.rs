//! The occlusion metric: OM = OIR × DPR.
//!
//! A ground-truth instance whose mask falls into two or more connected
//! components is "split". OIR is the fraction of split instances matched
//! by some prediction; DPR is the fraction of their pixels outside the
//! largest component that the matched predictions cover.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{read_json, DatasetBundle, DatasetError, ImageRecord, InstanceAnnotation};
use crate::mask::{connected_components, BinaryMask, ComponentSet, Connectivity, MaskError, PixelRect};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("ground truth has no images")]
    EmptyGroundTruth,
    #[error("annotation {id}: {source}")]
    DimensionMismatch {
        id: u64,
        #[source]
        source: MaskError,
    },
    #[error("prediction {id} refers to unknown image {image_id}")]
    UnknownImage { id: u64, image_id: u64 },
    #[error("invalid metric options: {0}")]
    InvalidOptions(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DprAggregation {
    /// Ratio of summed pixel counts.
    #[default]
    Micro,
    /// Mean of per-instance ratios.
    Macro,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    pub connectivity: Connectivity,
    pub iou_threshold: f64,
    pub dpr_aggregation: DprAggregation,
    /// Count unmatched split instances in DPR with zero recall.
    pub unmatched_in_dpr: bool,
    pub per_image: bool,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            connectivity: Connectivity::Four,
            iou_threshold: 0.5,
            dpr_aggregation: DprAggregation::Micro,
            unmatched_in_dpr: false,
            per_image: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitInstance {
    pub annotation_id: u64,
    pub mask: BinaryMask,
    pub components: ComponentSet,
    pub main_component_label: u32,
    pub disconnected_pixels: BinaryMask,
}

impl SplitInstance {
    pub fn disconnected_count(&self) -> usize {
        self.disconnected_pixels.count()
    }
}

/// Ground-truth instances with at least two connected components, in input
/// order.
pub fn find_split_instances(
    gt: &[(u64, BinaryMask)],
    connectivity: Connectivity,
) -> Vec<SplitInstance> {
    gt.iter()
        .filter_map(|(id, mask)| {
            let components = connected_components(mask, connectivity);
            if components.count < 2 {
                return None;
            }
            let main = components.largest().expect("at least two components");
            let disconnected = BinaryMask::from_fn(mask.height(), mask.width(), |r, c| {
                let l = components.label(r, c);
                l != 0 && l != main
            });
            Some(SplitInstance {
                annotation_id: *id,
                mask: mask.clone(),
                components,
                main_component_label: main,
                disconnected_pixels: disconnected,
            })
        })
        .collect()
}

fn rect_overlap(a: PixelRect, b: PixelRect) -> Option<PixelRect> {
    let x0 = a.x.max(b.x);
    let y0 = a.y.max(b.y);
    let x1 = (a.x + a.width).min(b.x + b.width);
    let y1 = (a.y + a.height).min(b.y + b.height);
    (x0 < x1 && y0 < y1).then(|| PixelRect {
        x: x0,
        y: y0,
        width: x1 - x0,
        height: y1 - y0,
    })
}

fn overlap_count(a: &BinaryMask, b: &BinaryMask, window: Option<PixelRect>) -> usize {
    let Some(w) = window else { return 0 };
    let mut n = 0;
    for r in w.y..w.y + w.height {
        for c in w.x..w.x + w.width {
            n += (a.get(r, c) && b.get(r, c)) as usize;
        }
    }
    n
}

/// Mask with its cached bounding box and pixel count.
struct Indexed<'a> {
    id: u64,
    mask: &'a BinaryMask,
    bbox: Option<PixelRect>,
    count: usize,
}

impl<'a> Indexed<'a> {
    fn new(id: u64, mask: &'a BinaryMask) -> Self {
        Indexed {
            id,
            mask,
            bbox: mask.bbox(),
            count: mask.count(),
        }
    }

    fn iou(&self, other: &Indexed) -> f64 {
        let window = self.bbox.zip(other.bbox).and_then(|(a, b)| rect_overlap(a, b));
        let inter = overlap_count(self.mask, other.mask, window);
        let union = self.count + other.count - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub gt_id: u64,
    pub pred_id: u64,
    pub iou: f64,
}

/// Greedy one-to-one matching within one image. Pairs with IoU at or above
/// the threshold are taken in order of decreasing IoU, ties by lower ground
/// truth id and then lower prediction id.
pub fn match_predictions(
    split: &[SplitInstance],
    preds: &[(u64, BinaryMask)],
    iou_threshold: f64,
) -> Result<Vec<Match>, MetricError> {
    for s in split {
        for (pid, p) in preds {
            if p.dims() != s.mask.dims() {
                return Err(MetricError::DimensionMismatch {
                    id: *pid,
                    source: MaskError::DimensionMismatch(s.mask.dims(), p.dims()),
                });
            }
        }
    }
    let gts: Vec<Indexed> = split.iter().map(|s| Indexed::new(s.annotation_id, &s.mask)).collect();
    let ps: Vec<Indexed> = preds.iter().map(|(id, m)| Indexed::new(*id, m)).collect();
    let mut pairs = Vec::new();
    for (gi, g) in gts.iter().enumerate() {
        for (pi, p) in ps.iter().enumerate() {
            let iou = g.iou(p);
            if iou >= iou_threshold {
                pairs.push((iou, g.id, p.id, gi, pi));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = vec![false; gts.len()];
    let mut pred_used = vec![false; ps.len()];
    let mut out = Vec::new();
    for (iou, gid, pid, gi, pi) in pairs {
        if gt_used[gi] || pred_used[pi] {
            continue;
        }
        gt_used[gi] = true;
        pred_used[pi] = true;
        out.push(Match {
            gt_id: gid,
            pred_id: pid,
            iou,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub image_id: u64,
    pub annotation_id: u64,
    pub matched_prediction_id: Option<u64>,
    pub iou: Option<f64>,
    pub disconnected_total: usize,
    pub disconnected_recalled: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub image_id: u64,
    pub split_instance_count: usize,
    pub oir: f64,
    pub dpr: f64,
    pub om: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OMReport {
    pub oir: f64,
    pub dpr: f64,
    pub om: f64,
    pub split_instance_count: usize,
    pub recalled_count: usize,
    pub per_instance: Vec<InstanceResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_image: Option<Vec<ImageScore>>,
    /// Mean OM over images that contain at least one split instance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_image_mean_om: Option<f64>,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

/// OIR, DPR and OM over a set of per-instance results.
fn score(instances: &[InstanceResult], options: &MetricOptions) -> (f64, f64, f64, usize) {
    let total = instances.len();
    let recalled = instances.iter().filter(|i| i.matched_prediction_id.is_some()).count();
    let oir = ratio(recalled as f64, total as f64);
    let in_dpr: Vec<&InstanceResult> = instances
        .iter()
        .filter(|i| options.unmatched_in_dpr || i.matched_prediction_id.is_some())
        .collect();
    let dpr = match options.dpr_aggregation {
        DprAggregation::Micro => {
            let num: usize = in_dpr.iter().map(|i| i.disconnected_recalled).sum();
            let den: usize = in_dpr.iter().map(|i| i.disconnected_total).sum();
            ratio(num as f64, den as f64)
        }
        DprAggregation::Macro => {
            let per: f64 = in_dpr
                .iter()
                .map(|i| ratio(i.disconnected_recalled as f64, i.disconnected_total as f64))
                .sum();
            ratio(per, in_dpr.len() as f64)
        }
    };
    (oir, dpr, oir * dpr, recalled)
}

fn decode_all(
    anns: &[&InstanceAnnotation],
    record: &ImageRecord,
) -> Result<Vec<(u64, BinaryMask)>, MetricError> {
    anns.iter()
        .map(|a| {
            a.segmentation
                .to_mask(record.height as usize, record.width as usize)
                .map(|m| (a.id, m))
                .map_err(|source| MetricError::DimensionMismatch { id: a.id, source })
        })
        .collect()
}

fn evaluate_image(
    record: &ImageRecord,
    gt: &[&InstanceAnnotation],
    preds: &[&InstanceAnnotation],
    options: &MetricOptions,
) -> Result<Vec<InstanceResult>, MetricError> {
    let gt_masks = decode_all(gt, record)?;
    let split = find_split_instances(&gt_masks, options.connectivity);
    if split.is_empty() {
        return Ok(Vec::new());
    }
    let pred_masks = decode_all(preds, record)?;
    let matches = match_predictions(&split, &pred_masks, options.iou_threshold)?;
    let by_gt: HashMap<u64, &Match> = matches.iter().map(|m| (m.gt_id, m)).collect();
    let by_pred: HashMap<u64, &BinaryMask> = pred_masks.iter().map(|(id, m)| (*id, m)).collect();
    Ok(split
        .iter()
        .map(|s| {
            let m = by_gt.get(&s.annotation_id);
            let recalled = m.map_or(0, |m| {
                s.disconnected_pixels
                    .intersection_count(by_pred[&m.pred_id])
                    .expect("dimensions checked")
            });
            InstanceResult {
                image_id: record.id,
                annotation_id: s.annotation_id,
                matched_prediction_id: m.map(|m| m.pred_id),
                iou: m.map(|m| m.iou),
                disconnected_total: s.disconnected_count(),
                disconnected_recalled: recalled,
            }
        })
        .collect())
}

/// Evaluates predictions against ground truth. Scores are aggregated over
/// the whole dataset; per-image scores are added when requested.
pub fn evaluate_om(
    gt: &DatasetBundle,
    preds: &[InstanceAnnotation],
    options: &MetricOptions,
) -> Result<OMReport, MetricError> {
    if gt.images.is_empty() {
        return Err(MetricError::EmptyGroundTruth);
    }
    if !(0.0..=1.0).contains(&options.iou_threshold) {
        return Err(MetricError::InvalidOptions(format!(
            "iou_threshold {} is outside [0, 1]",
            options.iou_threshold
        )));
    }
    let index = gt.image_index();
    let mut gt_by: HashMap<u64, Vec<&InstanceAnnotation>> = HashMap::new();
    for a in &gt.annotations {
        if !index.contains_key(&a.image_id) {
            return Err(DatasetError::DanglingReference(format!(
                "annotation {} refers to unknown image {}",
                a.id, a.image_id
            ))
            .into());
        }
        gt_by.entry(a.image_id).or_default().push(a);
    }
    let mut pred_by: HashMap<u64, Vec<&InstanceAnnotation>> = HashMap::new();
    for p in preds {
        if !index.contains_key(&p.image_id) {
            return Err(MetricError::UnknownImage {
                id: p.id,
                image_id: p.image_id,
            });
        }
        pred_by.entry(p.image_id).or_default().push(p);
    }

    let mut records: Vec<&ImageRecord> = gt.images.iter().collect();
    records.sort_by_key(|r| r.id);
    let per_image: Vec<Vec<InstanceResult>> = records
        .par_iter()
        .map(|r| {
            let empty = Vec::new();
            evaluate_image(
                r,
                gt_by.get(&r.id).unwrap_or(&empty),
                pred_by.get(&r.id).unwrap_or(&empty),
                options,
            )
        })
        .collect::<Result<_, _>>()?;

    let all: Vec<InstanceResult> = per_image.iter().flatten().cloned().collect();
    let (oir, dpr, om, recalled) = score(&all, options);
    let (image_scores, mean) = if options.per_image {
        let scores: Vec<ImageScore> = records
            .iter()
            .zip(&per_image)
            .map(|(r, inst)| {
                let (oir, dpr, om, _) = score(inst, options);
                ImageScore {
                    image_id: r.id,
                    split_instance_count: inst.len(),
                    oir,
                    dpr,
                    om,
                }
            })
            .collect();
        let with_split: Vec<f64> = scores
            .iter()
            .filter(|s| s.split_instance_count > 0)
            .map(|s| s.om)
            .collect();
        let mean = ratio(with_split.iter().sum(), with_split.len() as f64);
        (Some(scores), Some(mean))
    } else {
        (None, None)
    };
    Ok(OMReport {
        oir,
        dpr,
        om,
        split_instance_count: all.len(),
        recalled_count: recalled,
        per_instance: all,
        per_image: image_scores,
        per_image_mean_om: mean,
    })
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PredictionFile {
    Bundle(DatasetBundle),
    List(Vec<InstanceAnnotation>),
}

/// Reads predictions from either a COCO instance file or a bare JSON array
/// of annotations. Missing ids (zero) are replaced by 1-based positions.
pub fn load_predictions(path: &Path) -> Result<Vec<InstanceAnnotation>, MetricError> {
    let mut preds = match read_json::<PredictionFile>(path)? {
        PredictionFile::Bundle(b) => b.annotations,
        PredictionFile::List(l) => l,
    };
    if preds.iter().any(|p| p.id == 0) {
        for (i, p) in preds.iter_mut().enumerate() {
            p.id = i as u64 + 1;
        }
    }
    Ok(preds)
}
