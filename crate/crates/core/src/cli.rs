//! Command-line front end.
//!
//! Settings come from three layers: built-in defaults, an optional flat
//! TOML config file (`--config`), and explicit flags, later layers winning.
//! Results go to stdout, logs to stderr (level from `OF_LOG`). Usage errors
//! exit with 2 and data errors with 1, each as one line on stderr.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_dataset, AugmentationConfig, BatchOptions};
use crate::bank::{extract_entities, load_bank, save_bank};
use crate::court::{detect_playable_region, infer_court_side, CourtSide, DetectionFailure, DetectorConfig};
use crate::dataset::{load_annotations, load_dataset, load_rgb, save_png, write_json, ImageDir};
use crate::mask::Connectivity;
use crate::metric::{evaluate_om, load_predictions, DprAggregation, MetricOptions};
use crate::swa::{average_checkpoints, write_checkpoint};

#[derive(Debug, Parser)]
#[command(name = "occlupaste", version, about = "Court-aware copy-paste augmentation and occlusion metric tooling")]
pub struct Cli {
    /// Worker threads [default: available cores]
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Extract every annotated instance into an entity bank
    Extract(ExtractArgs),
    /// Detect the playable court region in each image
    Detect(DetectArgs),
    /// Run copy-paste augmentation over a dataset
    Augment(AugmentArgs),
    /// Compute OIR, DPR and OM for predictions against ground truth
    Evaluate(EvaluateArgs),
    /// Average NTCK checkpoints element-wise
    Swa(SwaArgs),
}

#[derive(Debug, Args)]
struct ExtractArgs {
    /// COCO instance annotation file
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Directory holding the images named in the annotations
    #[arg(long)]
    images: Option<PathBuf>,
    /// Output bank directory
    #[arg(long)]
    out_bank: Option<PathBuf>,
    /// Flat TOML config file
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DetectArgs {
    /// Directory of PNG/JPEG images
    #[arg(long)]
    images: Option<PathBuf>,
    /// Output JSON file with one record per image
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for debug overlay PNGs
    #[arg(long)]
    overlays: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AugmentArgs {
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    /// Entity bank directory written by `extract`
    #[arg(long)]
    bank: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON object mapping image id to "left", "right" or "unknown"
    #[arg(long)]
    sides: Option<PathBuf>,
    #[arg(long, default_value = "0")]
    seed: u64,
    /// Probability that an image receives pasted entities
    #[arg(long, default_value = "0.80")]
    paste_probability: f64,
    /// Probability of an occluder after each pasted entity
    #[arg(long, default_value = "0.70")]
    occluder_probability: f64,
    /// Maximum pasted entities per image, occluders included
    #[arg(long, default_value = "40")]
    max_entities: usize,
    /// Annotations keeping less than this share of their area are dropped
    #[arg(long, default_value = "0.10")]
    min_visible_fraction: f64,
    /// Output image size as WIDTHxHEIGHT
    #[arg(long, default_value = "1760x1280", value_parser = parse_size)]
    output_size: (u32, u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Aggregation {
    Micro,
    Macro,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Ground-truth COCO instance file
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Predictions: COCO instance file or bare annotation array
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long, default_value = "4", value_parser = ["4", "8"])]
    connectivity: String,
    #[arg(long, default_value = "0.5")]
    iou_threshold: f64,
    /// DPR aggregation over matched instances
    #[arg(long, value_enum, default_value = "micro")]
    dpr_aggregation: Aggregation,
    /// Count unmatched split instances in DPR with zero recall
    #[arg(long)]
    unmatched_in_dpr: bool,
    /// Add per-image scores to the report
    #[arg(long)]
    per_image: bool,
    /// JSON report path
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SwaArgs {
    /// Checkpoints to average
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    /// Output checkpoint
    #[arg(long)]
    out: PathBuf,
    /// Per-input weights, comma separated [default: equal]
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    weights: Option<Vec<f64>>,
}

fn parse_size(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
    let w: u32 = w.trim().parse().map_err(|e| format!("width: {e}"))?;
    let h: u32 = h.trim().parse().map_err(|e| format!("height: {e}"))?;
    if w == 0 || h == 0 {
        return Err("sizes must be positive".into());
    }
    Ok((w, h))
}

/// Keys accepted in a `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub annotations: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub bank: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub out_bank: Option<PathBuf>,
    pub overlays: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub pred: Option<PathBuf>,
    pub sides: Option<PathBuf>,

    pub seed: Option<u64>,
    pub paste_probability: Option<f64>,
    pub occluder_probability: Option<f64>,
    pub max_entities: Option<usize>,
    pub min_visible_fraction: Option<f64>,
    pub output_width: Option<u32>,
    pub output_height: Option<u32>,
    pub resize_scales: Option<Vec<[u32; 2]>>,
    pub global_hflip_probability: Option<f64>,
    pub brightness: Option<f32>,
    pub contrast: Option<f32>,
    pub saturation: Option<f32>,
    pub hue: Option<f32>,
    pub entity_scale_min: Option<f64>,
    pub entity_scale_max: Option<f64>,
    pub entity_rotation_min: Option<f64>,
    pub entity_rotation_max: Option<f64>,
    pub entity_hflip_probability: Option<f64>,
    pub entity_brightness: Option<f32>,
    pub entity_contrast: Option<f32>,
    pub entity_saturation: Option<f32>,
    pub entity_hue: Option<f32>,

    pub hue_tolerance: Option<f32>,
    pub saturation_floor: Option<u8>,
    pub value_floor: Option<u8>,
    pub close_kernel: Option<usize>,
    pub hough_threshold_fraction: Option<f64>,
    pub hough_angle_bins: Option<usize>,
    pub max_lines: Option<usize>,
    pub region_min_fraction: Option<f64>,
    pub min_band_fraction: Option<f64>,

    pub connectivity: Option<u8>,
    pub iou_threshold: Option<f64>,
    pub dpr_aggregation: Option<DprAggregation>,
    pub unmatched_in_dpr: Option<bool>,
    pub per_image: Option<bool>,
}

fn set<T>(dst: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *dst = v;
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {}", path.display(), e.message())))
    }

    pub fn apply_augmentation(&self, c: &mut AugmentationConfig) {
        set(&mut c.seed, self.seed);
        set(&mut c.paste_probability, self.paste_probability);
        set(&mut c.occluder_probability, self.occluder_probability);
        set(&mut c.max_entities, self.max_entities);
        set(&mut c.min_visible_fraction, self.min_visible_fraction);
        set(&mut c.output_size.0, self.output_width);
        set(&mut c.output_size.1, self.output_height);
        if let Some(s) = &self.resize_scales {
            c.resize_scales = s.iter().map(|&[w, h]| (w, h)).collect();
        }
        set(&mut c.global_hflip_probability, self.global_hflip_probability);
        let g = &mut c.global_photometric;
        set(&mut g.brightness, self.brightness);
        set(&mut g.contrast, self.contrast);
        set(&mut g.saturation, self.saturation);
        set(&mut g.hue, self.hue);
        let j = &mut c.entity_jitter;
        set(&mut j.scale.0, self.entity_scale_min);
        set(&mut j.scale.1, self.entity_scale_max);
        set(&mut j.rotation_degrees.0, self.entity_rotation_min);
        set(&mut j.rotation_degrees.1, self.entity_rotation_max);
        set(&mut j.hflip_probability, self.entity_hflip_probability);
        set(&mut j.photometric.brightness, self.entity_brightness);
        set(&mut j.photometric.contrast, self.entity_contrast);
        set(&mut j.photometric.saturation, self.entity_saturation);
        set(&mut j.photometric.hue, self.entity_hue);
    }

    pub fn apply_detector(&self, d: &mut DetectorConfig) {
        set(&mut d.hue_tolerance, self.hue_tolerance);
        set(&mut d.saturation_floor, self.saturation_floor);
        set(&mut d.value_floor, self.value_floor);
        set(&mut d.close_kernel, self.close_kernel);
        set(&mut d.hough_threshold_fraction, self.hough_threshold_fraction);
        set(&mut d.hough_angle_bins, self.hough_angle_bins);
        set(&mut d.max_lines, self.max_lines);
        set(&mut d.region_min_fraction, self.region_min_fraction);
        set(&mut d.min_band_fraction, self.min_band_fraction);
    }

    pub fn apply_metric(&self, m: &mut MetricOptions) -> Result<(), CliError> {
        if let Some(n) = self.connectivity {
            m.connectivity = Connectivity::from_neighbors(n)
                .ok_or_else(|| CliError::Usage(format!("connectivity must be 4 or 8, got {n}")))?;
        }
        set(&mut m.iou_threshold, self.iou_threshold);
        set(&mut m.dpr_aggregation, self.dpr_aggregation);
        set(&mut m.unmatched_in_dpr, self.unmatched_in_dpr);
        set(&mut m.per_image, self.per_image);
        Ok(())
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 1,
        }
    }

    fn line(&self) -> String {
        let (kind, msg) = match self {
            CliError::Usage(m) => ("usage", m),
            CliError::Data(m) => ("data", m),
        };
        format!("error: {kind}: {}", msg.replace(['\n', '\r'], " "))
    }
}

fn data<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

/// Value of `id` only if it was given on the command line.
fn explicit<T: Clone + Send + Sync + 'static>(m: &ArgMatches, id: &str) -> Option<T> {
    (m.value_source(id) == Some(ValueSource::CommandLine))
        .then(|| m.get_one::<T>(id).cloned())
        .flatten()
}

fn load_config(path: &Option<PathBuf>) -> Result<FileConfig, CliError> {
    path.as_deref().map_or_else(|| Ok(FileConfig::default()), FileConfig::load)
}

/// Flag value, else config value, else a usage error naming the flag.
fn required(flag: &Option<PathBuf>, file: &Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    flag.clone()
        .or_else(|| file.clone())
        .ok_or_else(|| CliError::Usage(format!("--{name} is required")))
}

fn existing(path: PathBuf, name: &str) -> Result<PathBuf, CliError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::Usage(format!("--{name}: {} does not exist", path.display())))
    }
}

/// Parses `args` (program name first), runs the command, and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("OF_LOG", "warn"))
        .format_timestamp(None)
        .try_init();
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(
                e.kind(),
                ErrorKind::DisplayHelp
                    | ErrorKind::DisplayVersion
                    | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
            ) {
                let _ = e.print();
                return e.exit_code();
            }
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            let msg = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("{}", CliError::Usage(msg.to_string()).line());
            return 2;
        }
    };
    let cli = Cli::from_arg_matches(&matches).expect("matches come from the same command");
    let sub = matches.subcommand().expect("subcommand is required").1;

    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.jobs.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("{}", CliError::Usage(format!("--jobs: {e}")).line());
            return 2;
        }
    };
    let result = pool.install(|| match &cli.command {
        Command::Extract(a) => cmd_extract(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Augment(a) => cmd_augment(a, sub),
        Command::Evaluate(a) => cmd_evaluate(a, sub),
        Command::Swa(a) => cmd_swa(a),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.code()
        }
    }
}

fn cmd_extract(a: &ExtractArgs) -> Result<(), CliError> {
    let file = load_config(&a.config)?;
    let annotations = existing(required(&a.annotations, &file.annotations, "annotations")?, "annotations")?;
    let images = existing(required(&a.images, &file.images, "images")?, "images")?;
    let out = required(&a.out_bank, &file.out_bank, "out-bank")?;

    let bundle = load_dataset(&annotations, &images).map_err(data)?;
    let (bank, skipped) = extract_entities(&bundle, &ImageDir(images)).map_err(data)?;
    save_bank(&bank, &out).map_err(data)?;
    println!(
        "entities={} skipped_empty={} skipped_crowd={}",
        bank.len(),
        skipped.empty_masks.len(),
        skipped.crowd.len()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct DetectRecord {
    file: String,
    width: u32,
    height: u32,
    detected: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    polygon: Option<Vec<(f64, f64)>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    confidence: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    area_fraction: Option<f64>,
    side: CourtSide,
    #[serde(skip_serializing_if = "Option::is_none")]
    failure: Option<DetectionFailure>,
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| matches!(x.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn draw_overlay(img: &RgbImage, polygon: Option<&[(f64, f64)]>, interior: Option<&crate::mask::BinaryMask>) -> RgbImage {
    let mut out = img.clone();
    if let Some(mask) = interior {
        for (r, c) in mask.foreground() {
            let p = out.get_pixel_mut(c as u32, r as u32);
            p.0 = [p.0[0] / 2, p.0[1] / 2 + 64, p.0[2] / 2];
        }
    }
    if let Some(poly) = polygon {
        let (w, h) = out.dimensions();
        for i in 0..poly.len() {
            let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
            let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                let x = (a.0 + (b.0 - a.0) * t).floor() as i64;
                let y = (a.1 + (b.1 - a.1) * t).floor() as i64;
                if x >= 0 && y >= 0 && (x as u32) < w && (y as u32) < h {
                    out.put_pixel(x as u32, y as u32, Rgb([255, 0, 0]));
                }
            }
        }
    }
    out
}

fn cmd_detect(a: &DetectArgs) -> Result<(), CliError> {
    let file = load_config(&a.config)?;
    let images = existing(required(&a.images, &file.images, "images")?, "images")?;
    let out = required(&a.out, &file.out, "out")?;
    let overlays = a.overlays.clone().or_else(|| file.overlays.clone());
    let mut cfg = DetectorConfig::default();
    file.apply_detector(&mut cfg);
    if let Some(dir) = &overlays {
        fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    }

    let files = list_images(&images)?;
    let records = files
        .par_iter()
        .map(|path| -> Result<DetectRecord, CliError> {
            let img = load_rgb(path).map_err(data)?;
            let (w, h) = img.dimensions();
            let detection = detect_playable_region(&img, &cfg);
            let side = infer_court_side(detection.as_ref(), w, None);
            let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
            if let Some(dir) = &overlays {
                let overlay = match &detection {
                    Ok(r) => draw_overlay(&img, Some(&r.polygon), Some(&r.interior_mask)),
                    Err(_) => draw_overlay(&img, None, None),
                };
                let stem = path.file_stem().unwrap_or_default().to_string_lossy();
                save_png(&dir.join(format!("{stem}.png")), &overlay).map_err(data)?;
            }
            Ok(match detection {
                Ok(r) => DetectRecord {
                    file: name,
                    width: w,
                    height: h,
                    detected: true,
                    area_fraction: Some(r.area_fraction()),
                    confidence: Some(r.confidence),
                    polygon: Some(r.polygon),
                    side,
                    failure: None,
                },
                Err(f) => DetectRecord {
                    file: name,
                    width: w,
                    height: h,
                    detected: false,
                    polygon: None,
                    confidence: None,
                    area_fraction: None,
                    side,
                    failure: Some(f),
                },
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    write_json(&out, &records).map_err(data)?;
    let detected = records.iter().filter(|r| r.detected).count();
    println!("images={} detected={} failed={}", records.len(), detected, records.len() - detected);
    Ok(())
}

fn load_sides(path: &Path) -> Result<HashMap<u64, CourtSide>, CliError> {
    let raw: HashMap<String, CourtSide> = crate::dataset::read_json(path).map_err(data)?;
    raw.into_iter()
        .map(|(k, v)| {
            k.parse::<u64>()
                .map(|id| (id, v))
                .map_err(|_| CliError::Data(format!("side map key {k:?} is not an image id")))
        })
        .collect()
}

fn cmd_augment(a: &AugmentArgs, m: &ArgMatches) -> Result<(), CliError> {
    let file = load_config(&a.config)?;
    let annotations = existing(required(&a.annotations, &file.annotations, "annotations")?, "annotations")?;
    let images = existing(required(&a.images, &file.images, "images")?, "images")?;
    let bank_dir = existing(required(&a.bank, &file.bank, "bank")?, "bank")?;
    let out = required(&a.out, &file.out, "out")?;
    let sides = match a.sides.clone().or_else(|| file.sides.clone()) {
        Some(p) => load_sides(&existing(p, "sides")?)?,
        None => HashMap::new(),
    };

    let mut cfg = AugmentationConfig::default();
    file.apply_augmentation(&mut cfg);
    set(&mut cfg.seed, explicit(m, "seed"));
    set(&mut cfg.paste_probability, explicit(m, "paste_probability"));
    set(&mut cfg.occluder_probability, explicit(m, "occluder_probability"));
    set(&mut cfg.max_entities, explicit(m, "max_entities"));
    set(&mut cfg.min_visible_fraction, explicit(m, "min_visible_fraction"));
    set(&mut cfg.output_size, explicit(m, "output_size"));
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let mut detector = DetectorConfig::default();
    file.apply_detector(&mut detector);

    let bundle = load_dataset(&annotations, &images).map_err(data)?;
    let bank = load_bank(&bank_dir).map_err(data)?;
    let options = BatchOptions {
        augmentation: cfg,
        detector,
        side_overrides: sides,
    };
    let (_, report) = augment_dataset(&bundle, &ImageDir(images), &bank, &options, &out).map_err(data)?;
    write_json(&out.join("report.json"), &report).map_err(data)?;
    println!(
        "images={} pastes={} occluders={} drops={} skipped={}",
        report.images,
        report.pastes,
        report.occluders,
        report.drops,
        report.skipped.len()
    );
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs, m: &ArgMatches) -> Result<(), CliError> {
    let file = load_config(&a.config)?;
    let gt_path = existing(required(&a.gt, &file.gt, "gt")?, "gt")?;
    let pred_path = existing(required(&a.pred, &file.pred, "pred")?, "pred")?;
    let mut opts = MetricOptions::default();
    file.apply_metric(&mut opts)?;
    if let Some(c) = explicit::<String>(m, "connectivity") {
        opts.connectivity = if c == "8" { Connectivity::Eight } else { Connectivity::Four };
    }
    set(&mut opts.iou_threshold, explicit(m, "iou_threshold"));
    if let Some(agg) = explicit::<Aggregation>(m, "dpr_aggregation") {
        opts.dpr_aggregation = match agg {
            Aggregation::Micro => DprAggregation::Micro,
            Aggregation::Macro => DprAggregation::Macro,
        };
    }
    opts.unmatched_in_dpr |= a.unmatched_in_dpr;
    opts.per_image |= a.per_image;
    if !(0.0..=1.0).contains(&opts.iou_threshold) {
        return Err(CliError::Usage(format!(
            "--iou-threshold {} is outside [0, 1]",
            opts.iou_threshold
        )));
    }

    let gt = load_annotations(&gt_path).map_err(data)?;
    let preds = load_predictions(&pred_path).map_err(data)?;
    let report = evaluate_om(&gt, &preds, &opts).map_err(data)?;
    if let Some(out) = a.out.clone().or_else(|| file.out.clone()) {
        write_json(&out, &report).map_err(data)?;
    }
    println!("OIR={:?} DPR={:?} OM={:?}", report.oir, report.dpr, report.om);
    if let Some(mean) = report.per_image_mean_om {
        println!("per_image_mean_OM={mean:?}");
    }
    Ok(())
}

fn cmd_swa(a: &SwaArgs) -> Result<(), CliError> {
    for p in &a.inputs {
        if !p.exists() {
            return Err(CliError::Usage(format!("--inputs: {} does not exist", p.display())));
        }
    }
    let avg = average_checkpoints(&a.inputs, a.weights.as_deref()).map_err(data)?;
    write_checkpoint(&avg, &a.out).map_err(data)?;
    println!("tensors={} inputs={}", avg.tensors.len(), a.inputs.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn help_shows_defaults() {
        let mut cmd = Cli::command();
        let help = cmd
            .find_subcommand_mut("augment")
            .unwrap()
            .render_long_help()
            .to_string();
        for needle in ["0.80", "0.70", "40", "1760x1280", "0.10"] {
            assert!(help.contains(&format!("[default: {needle}]")), "missing {needle} in\n{help}");
        }
        let cfg = AugmentationConfig::default();
        assert_eq!(parse_size("1760x1280").unwrap(), cfg.output_size);
    }

    #[test]
    fn config_keys() {
        let file: FileConfig = toml::from_str(
            "paste_probability = 0.5\nmax_entities = 7\nresize_scales = [[640, 480]]\nconnectivity = 8\nhue_tolerance = 9.0\n",
        )
        .unwrap();
        let mut c = AugmentationConfig::default();
        file.apply_augmentation(&mut c);
        assert_eq!(c.paste_probability, 0.5);
        assert_eq!(c.max_entities, 7);
        assert_eq!(c.resize_scales, vec![(640, 480)]);
        let mut m = MetricOptions::default();
        file.apply_metric(&mut m).unwrap();
        assert_eq!(m.connectivity, Connectivity::Eight);
        let mut d = DetectorConfig::default();
        file.apply_detector(&mut d);
        assert_eq!(d.hue_tolerance, 9.0);
        assert!(toml::from_str::<FileConfig>("paste_prob = 1").is_err());
    }

    #[test]
    fn size_parsing() {
        assert_eq!(parse_size("64x32"), Ok((64, 32)));
        assert!(parse_size("64").is_err());
        assert!(parse_size("0x5").is_err());
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["occlupaste", "evaluate", "--bogus"]), 2);
        assert_eq!(run(["occlupaste", "evaluate", "--gt", "/nonexistent.json", "--pred", "/x.json"]), 2);
        assert_eq!(run(["occlupaste", "swa", "--out", "/tmp/x"]), 2);
    }
}
