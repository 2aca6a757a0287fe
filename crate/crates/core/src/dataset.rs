//! COCO-style instance segmentation datasets.
//!
//! A [`DatasetBundle`] holds image records, instance annotations and
//! categories. Pixels are not part of the bundle; they are read on demand
//! through an [`ImageSource`].

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::mask::{self, BinaryMask, MaskError, RleMask};

pub type DatasetResult<T> = Result<T, DatasetError>;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("malformed annotation {id}: {reason}")]
    MalformedAnnotation { id: u64, reason: String },
    #[error("dangling reference: {0}")]
    DanglingReference(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl DatasetError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DatasetError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supercategory: Option<String>,
}

/// Instance geometry, as found in COCO files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Segmentation {
    /// Flat `[x0, y0, x1, y1, ...]` lists, one per polygon.
    Polygons(Vec<Vec<f64>>),
    Rle(RleMask),
    /// pycocotools packed-string counts. Read-only: decoded, never produced.
    CompressedRle { size: [usize; 2], counts: String },
}

impl Segmentation {
    /// Decodes to a mask of the given image size.
    pub fn to_mask(&self, height: usize, width: usize) -> Result<BinaryMask, MaskError> {
        match self {
            Segmentation::Polygons(polys) => {
                let polys: Vec<Vec<(f64, f64)>> = polys
                    .iter()
                    .map(|flat| flat.chunks_exact(2).map(|p| (p[0], p[1])).collect())
                    .collect();
                mask::rasterize_polygons(&polys, height, width)
            }
            Segmentation::Rle(rle) => {
                check_size(rle.size, height, width)?;
                mask::rle_decode(rle)
            }
            Segmentation::CompressedRle { size, counts } => {
                check_size(*size, height, width)?;
                let counts = mask::decode_compressed_counts(counts)?;
                mask::rle_decode(&RleMask {
                    size: *size,
                    counts,
                })
            }
        }
    }

    fn structural_problem(&self) -> Option<String> {
        if let Segmentation::Polygons(polys) = self {
            for (i, p) in polys.iter().enumerate() {
                if p.len() % 2 != 0 {
                    return Some(format!("polygon {i} has an odd coordinate count"));
                }
                if p.iter().any(|v| !v.is_finite()) {
                    return Some(format!("polygon {i} has non-finite coordinates"));
                }
            }
        }
        None
    }
}

fn check_size(size: [usize; 2], height: usize, width: usize) -> Result<(), MaskError> {
    if size != [height, width] {
        return Err(MaskError::DimensionMismatch(
            (size[0], size[1]),
            (height, width),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceAnnotation {
    #[serde(default)]
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub segmentation: Segmentation,
    #[serde(default)]
    pub bbox: [f64; 4],
    #[serde(default)]
    pub area: f64,
    #[serde(
        default,
        serialize_with = "serialize_flag",
        deserialize_with = "deserialize_flag"
    )]
    pub iscrowd: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

fn serialize_flag<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_u8(*v as u8)
}

fn deserialize_flag<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Flag {
        Bool(bool),
        Int(u8),
    }
    Ok(match Flag::deserialize(d)? {
        Flag::Bool(b) => b,
        Flag::Int(i) => i != 0,
    })
}

impl InstanceAnnotation {
    /// Builds an annotation from a mask, with RLE segmentation and derived
    /// fields filled in.
    pub fn from_mask(id: u64, image_id: u64, category_id: u64, mask: &BinaryMask) -> Self {
        InstanceAnnotation {
            id,
            image_id,
            category_id,
            segmentation: Segmentation::Rle(mask::rle_encode(mask)),
            bbox: mask.bbox().map(|b| b.to_coco()).unwrap_or([0.0; 4]),
            area: mask.count() as f64,
            iscrowd: false,
            score: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetBundle {
    #[serde(default)]
    pub images: Vec<ImageRecord>,
    #[serde(default)]
    pub annotations: Vec<InstanceAnnotation>,
    #[serde(default)]
    pub categories: Vec<Category>,
}

impl DatasetBundle {
    /// Checks every structural invariant, including that every segmentation
    /// decodes at its image's size.
    pub fn validate(&self) -> DatasetResult<()> {
        let mut image_ids = HashSet::new();
        for img in &self.images {
            if img.width == 0 || img.height == 0 {
                return Err(DatasetError::Invalid(format!(
                    "image {} has zero dimension {}x{}",
                    img.id, img.width, img.height
                )));
            }
            if img.file_name.is_empty() {
                return Err(DatasetError::Invalid(format!(
                    "image {} has an empty file_name",
                    img.id
                )));
            }
            if !image_ids.insert(img.id) {
                return Err(DatasetError::Invalid(format!("duplicate image id {}", img.id)));
            }
        }
        let mut category_ids = HashSet::new();
        for cat in &self.categories {
            if !category_ids.insert(cat.id) {
                return Err(DatasetError::Invalid(format!(
                    "duplicate category id {}",
                    cat.id
                )));
            }
        }
        let images = self.image_index();
        let mut ann_ids = HashSet::new();
        for ann in &self.annotations {
            if !ann_ids.insert(ann.id) {
                return Err(DatasetError::Invalid(format!(
                    "duplicate annotation id {}",
                    ann.id
                )));
            }
            let Some(img) = images.get(&ann.image_id) else {
                return Err(DatasetError::DanglingReference(format!(
                    "annotation {} references missing image {}",
                    ann.id, ann.image_id
                )));
            };
            if !category_ids.contains(&ann.category_id) {
                return Err(DatasetError::DanglingReference(format!(
                    "annotation {} references missing category {}",
                    ann.id, ann.category_id
                )));
            }
            if let Some(reason) = ann.segmentation.structural_problem() {
                return Err(DatasetError::MalformedAnnotation { id: ann.id, reason });
            }
            ann.segmentation
                .to_mask(img.height as usize, img.width as usize)
                .map_err(|e| DatasetError::MalformedAnnotation {
                    id: ann.id,
                    reason: e.to_string(),
                })?;
        }
        Ok(())
    }

    pub fn image_index(&self) -> HashMap<u64, &ImageRecord> {
        self.images.iter().map(|i| (i.id, i)).collect()
    }

    pub fn image(&self, id: u64) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.id == id)
    }

    /// Annotations of one image, in stored order.
    pub fn annotations_for(&self, image_id: u64) -> impl Iterator<Item = &InstanceAnnotation> {
        self.annotations.iter().filter(move |a| a.image_id == image_id)
    }

    /// Decodes an annotation's mask at its image's size.
    pub fn decode_mask(&self, ann: &InstanceAnnotation) -> DatasetResult<BinaryMask> {
        let img = self.image(ann.image_id).ok_or_else(|| {
            DatasetError::DanglingReference(format!(
                "annotation {} references missing image {}",
                ann.id, ann.image_id
            ))
        })?;
        ann.segmentation
            .to_mask(img.height as usize, img.width as usize)
            .map_err(|e| DatasetError::MalformedAnnotation {
                id: ann.id,
                reason: e.to_string(),
            })
    }

    /// Sorts images, annotations and categories by id.
    pub fn canonicalize(&mut self) {
        self.images.sort_by_key(|i| i.id);
        self.annotations.sort_by_key(|a| a.id);
        self.categories.sort_by_key(|c| c.id);
    }

    /// Recomputes every annotation's bbox and area from its decoded mask.
    pub fn recompute_derived(&mut self) -> DatasetResult<()> {
        let dims: HashMap<u64, (usize, usize)> = self
            .images
            .iter()
            .map(|i| (i.id, (i.height as usize, i.width as usize)))
            .collect();
        for ann in &mut self.annotations {
            let (h, w) = *dims.get(&ann.image_id).ok_or_else(|| {
                DatasetError::DanglingReference(format!(
                    "annotation {} references missing image {}",
                    ann.id, ann.image_id
                ))
            })?;
            let m = ann
                .segmentation
                .to_mask(h, w)
                .map_err(|e| DatasetError::MalformedAnnotation {
                    id: ann.id,
                    reason: e.to_string(),
                })?;
            ann.area = m.count() as f64;
            ann.bbox = m.bbox().map(|b| b.to_coco()).unwrap_or([0.0; 4]);
        }
        Ok(())
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> DatasetResult<T> {
    if !path.exists() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| DatasetError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses and validates an annotation file without touching images.
pub fn load_annotations(annotation_path: &Path) -> DatasetResult<DatasetBundle> {
    let bundle: DatasetBundle = read_json(annotation_path)?;
    bundle.validate()?;
    Ok(bundle)
}

/// Loads and validates a dataset, confirming every image file exists.
pub fn load_dataset(annotation_path: &Path, image_root: &Path) -> DatasetResult<DatasetBundle> {
    let bundle = load_annotations(annotation_path)?;
    for img in &bundle.images {
        let p = image_root.join(&img.file_name);
        if !p.is_file() {
            return Err(DatasetError::MissingFile(p));
        }
    }
    Ok(bundle)
}

/// Writes the bundle in canonical order with bboxes and areas recomputed
/// from the masks. `image_root` is created if absent.
pub fn save_dataset(
    bundle: &DatasetBundle,
    annotation_path: &Path,
    image_root: &Path,
) -> DatasetResult<()> {
    let mut out = bundle.clone();
    out.canonicalize();
    out.recompute_derived()?;
    fs::create_dir_all(image_root).map_err(|e| DatasetError::io(image_root, e))?;
    if let Some(parent) = annotation_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| DatasetError::io(parent, e))?;
        }
    }
    write_json(annotation_path, &out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> DatasetResult<()> {
    let text = serde_json::to_string(value).map_err(|source| DatasetError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text).map_err(|e| DatasetError::io(path, e))
}

/// Reads any supported raster as 8-bit RGB. Grayscale is promoted and alpha
/// dropped.
pub fn load_rgb(path: &Path) -> DatasetResult<RgbImage> {
    if !path.is_file() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path).map_err(|source| DatasetError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

pub fn save_png(path: &Path, img: &RgbImage) -> DatasetResult<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| DatasetError::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Where image pixels come from.
pub trait ImageSource: Sync {
    fn load(&self, record: &ImageRecord) -> DatasetResult<RgbImage>;
}

/// Images stored under a directory by `file_name`.
#[derive(Debug, Clone)]
pub struct ImageDir(pub PathBuf);

impl ImageSource for ImageDir {
    fn load(&self, record: &ImageRecord) -> DatasetResult<RgbImage> {
        let img = load_rgb(&self.0.join(&record.file_name))?;
        if img.dimensions() != (record.width, record.height) {
            return Err(DatasetError::Invalid(format!(
                "image {} is {}x{} on disk but {}x{} in the annotations",
                record.file_name,
                img.width(),
                img.height(),
                record.width,
                record.height
            )));
        }
        Ok(img)
    }
}

impl ImageSource for HashMap<u64, RgbImage> {
    fn load(&self, record: &ImageRecord) -> DatasetResult<RgbImage> {
        self.get(&record.id)
            .cloned()
            .ok_or_else(|| DatasetError::MissingFile(PathBuf::from(&record.file_name)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_bundle() -> DatasetBundle {
        DatasetBundle {
            images: vec![ImageRecord {
                id: 1,
                file_name: "a.png".into(),
                width: 8,
                height: 6,
            }],
            annotations: vec![InstanceAnnotation {
                id: 10,
                image_id: 1,
                category_id: 1,
                segmentation: Segmentation::Polygons(vec![vec![
                    1.0, 1.0, 5.0, 1.0, 5.0, 4.0, 1.0, 4.0,
                ]]),
                bbox: [0.0; 4],
                area: 0.0,
                iscrowd: false,
                score: None,
            }],
            categories: vec![Category {
                id: 1,
                name: "person".into(),
                supercategory: None,
            }],
        }
    }

    fn write_images(dir: &Path, bundle: &DatasetBundle) {
        for img in &bundle.images {
            save_png(&dir.join(&img.file_name), &RgbImage::new(img.width, img.height)).unwrap();
        }
    }

    #[test]
    fn parses_both_segmentation_encodings() {
        let json = r#"{
            "images": [{"id": 3, "file_name": "x.jpg", "width": 3, "height": 3}],
            "categories": [{"id": 1, "name": "person"}],
            "annotations": [
                {"id": 1, "image_id": 3, "category_id": 1, "iscrowd": 0,
                 "segmentation": [[0, 0, 2, 0, 2, 2]], "bbox": [0,0,2,2], "area": 2.0},
                {"id": 2, "image_id": 3, "category_id": 1, "iscrowd": false,
                 "segmentation": {"size": [3, 3], "counts": [1, 2, 6]}}
            ]
        }"#;
        let b: DatasetBundle = serde_json::from_str(json).unwrap();
        b.validate().unwrap();
        assert!(matches!(b.annotations[0].segmentation, Segmentation::Polygons(_)));
        let m = b.decode_mask(&b.annotations[1]).unwrap();
        assert_eq!(m.count(), 2);
    }

    #[test]
    fn empty_annotation_list_loads() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = tiny_bundle();
        b.annotations.clear();
        write_images(dir.path(), &b);
        let path = dir.path().join("ann.json");
        write_json(&path, &b).unwrap();
        let loaded = load_dataset(&path, dir.path()).unwrap();
        assert_eq!(loaded.annotations.len(), 0);
        assert_eq!(loaded.images.len(), 1);
    }

    #[test]
    fn dangling_image_reference() {
        let mut b = tiny_bundle();
        b.annotations[0].image_id = 999;
        assert!(matches!(b.validate(), Err(DatasetError::DanglingReference(_))));
        let mut b = tiny_bundle();
        b.annotations[0].category_id = 7;
        assert!(matches!(b.validate(), Err(DatasetError::DanglingReference(_))));
    }

    #[test]
    fn malformed_annotation_names_id() {
        let mut b = tiny_bundle();
        b.annotations[0].segmentation = Segmentation::Rle(RleMask {
            size: [6, 8],
            counts: vec![5, 5],
        });
        match b.validate() {
            Err(DatasetError::MalformedAnnotation { id, .. }) => assert_eq!(id, 10),
            other => panic!("unexpected {other:?}"),
        }
        let mut b = tiny_bundle();
        b.annotations[0].segmentation = Segmentation::Polygons(vec![vec![0.0, 1.0, 2.0]]);
        assert!(matches!(
            b.validate(),
            Err(DatasetError::MalformedAnnotation { id: 10, .. })
        ));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut b = tiny_bundle();
        let dup = b.annotations[0].clone();
        b.annotations.push(dup);
        assert!(matches!(b.validate(), Err(DatasetError::Invalid(_))));
    }

    #[test]
    fn missing_image_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.json");
        write_json(&path, &tiny_bundle()).unwrap();
        assert!(matches!(
            load_dataset(&path, dir.path()),
            Err(DatasetError::MissingFile(_))
        ));
        assert!(matches!(
            load_dataset(&dir.path().join("nope.json"), dir.path()),
            Err(DatasetError::MissingFile(_))
        ));
    }

    #[test]
    fn save_recomputes_area_and_bbox() {
        let dir = tempfile::tempdir().unwrap();
        let b = tiny_bundle();
        write_images(dir.path(), &b);
        let path = dir.path().join("ann.json");
        save_dataset(&b, &path, dir.path()).unwrap();
        let loaded = load_dataset(&path, dir.path()).unwrap();
        let ann = &loaded.annotations[0];
        assert_eq!(ann.area, 12.0);
        assert_eq!(ann.bbox, [1.0, 1.0, 4.0, 3.0]);
        assert_eq!(loaded.decode_mask(ann).unwrap().count() as f64, ann.area);
    }

    #[test]
    fn unwritable_target_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let err = save_dataset(&tiny_bundle(), &blocker.join("ann.json"), &blocker.join("img"))
            .unwrap_err();
        assert!(matches!(err, DatasetError::Io { .. }));
    }

    fn arb_bundle() -> impl Strategy<Value = DatasetBundle> {
        let image = (1u32..24, 1u32..24);
        (proptest::collection::vec(image, 1..4), 1usize..3).prop_flat_map(|(dims, ncat)| {
            let n_img = dims.len();
            let ann = (
                0..n_img,
                0..ncat,
                any::<bool>(),
                proptest::collection::vec(any::<bool>(), 24 * 24),
                proptest::collection::vec((0.0f64..30.0, -3.0f64..30.0), 3..6),
            );
            (Just(dims), Just(ncat), proptest::collection::vec(ann, 0..6))
        })
        .prop_map(|(dims, ncat, anns)| {
            let images: Vec<ImageRecord> = dims
                .iter()
                .enumerate()
                .map(|(i, &(w, h))| ImageRecord {
                    id: i as u64 * 7 + 1,
                    file_name: format!("img_{i}.png"),
                    width: w,
                    height: h,
                })
                .collect();
            let categories = (0..ncat)
                .map(|c| Category {
                    id: c as u64 + 1,
                    name: format!("cat{c}"),
                    supercategory: None,
                })
                .collect();
            let annotations = anns
                .into_iter()
                .enumerate()
                .map(|(k, (img, cat, as_rle, bits, poly))| {
                    let rec = &images[img];
                    let (h, w) = (rec.height as usize, rec.width as usize);
                    let segmentation = if as_rle {
                        let m = BinaryMask::from_fn(h, w, |r, c| bits[r * 24 + c]);
                        Segmentation::Rle(mask::rle_encode(&m))
                    } else {
                        Segmentation::Polygons(vec![poly
                            .iter()
                            .flat_map(|&(x, y)| [x, y])
                            .collect()])
                    };
                    InstanceAnnotation {
                        id: 100 - k as u64,
                        image_id: rec.id,
                        category_id: cat as u64 + 1,
                        segmentation,
                        bbox: [0.0; 4],
                        area: 0.0,
                        iscrowd: k % 3 == 0,
                        score: None,
                    }
                })
                .collect();
            let mut b = DatasetBundle {
                images,
                annotations,
                categories,
            };
            b.recompute_derived().unwrap();
            b
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn save_load_roundtrip(bundle in arb_bundle()) {
            let dir = tempfile::tempdir().unwrap();
            write_images(dir.path(), &bundle);
            let path = dir.path().join("ann.json");
            save_dataset(&bundle, &path, dir.path()).unwrap();
            let loaded = load_dataset(&path, dir.path()).unwrap();
            let mut expected = bundle.clone();
            expected.canonicalize();
            prop_assert_eq!(loaded, expected);
        }
    }
}
