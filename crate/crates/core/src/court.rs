//! Playable-area estimation for basketball court images, and the placement
//! rules used when the estimate is unavailable.
//!
//! Detection runs a fixed classical pipeline: dominant-colour band from the
//! image centre, colour threshold, morphological close, largest contour,
//! Hough-line refinement of the contour's convex hull. Nothing in it is
//! random, so a given image always yields the same region.

use std::f64::consts::PI;

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::color::{hue_distance, rgb_to_hsv, HUE_RANGE};
use crate::mask::{connected_components, rasterize_polygons, BinaryMask, Connectivity};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CourtError {
    #[error("invalid image dimensions {0}x{1}")]
    InvalidDimensions(u32, u32),
    #[error("placement region is empty")]
    EmptyRegion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Half-width of the accepted hue band, in 0..180 hue units.
    pub hue_tolerance: f32,
    pub saturation_floor: u8,
    pub value_floor: u8,
    /// Side of the square closing kernel; must be odd.
    pub close_kernel: usize,
    /// Minimum Hough votes, as a fraction of the image diagonal.
    pub hough_threshold_fraction: f64,
    pub hough_angle_bins: usize,
    pub max_lines: usize,
    pub region_min_fraction: f64,
    /// Minimum share of the central third that must fall in the colour band.
    pub min_band_fraction: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            hue_tolerance: 12.0,
            saturation_floor: 40,
            value_floor: 40,
            close_kernel: 9,
            hough_threshold_fraction: 0.3,
            hough_angle_bins: 360,
            max_lines: 8,
            region_min_fraction: 0.20,
            min_band_fraction: 0.30,
        }
    }
}

/// Hue band taken to be the court floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorBand {
    pub hue_center: f32,
    pub hue_tolerance: f32,
    pub saturation_floor: u8,
    pub value_floor: u8,
    /// False when too few central pixels were saturated to trust the hue.
    pub reliable: bool,
}

impl ColorBand {
    pub fn contains(&self, p: [u8; 3]) -> bool {
        let hsv = rgb_to_hsv(p);
        hsv.s >= self.saturation_floor as f32
            && hsv.v >= self.value_floor as f32
            && hue_distance(hsv.h, self.hue_center) <= self.hue_tolerance
    }
}

const MIN_SATURATED_SHARE: f64 = 0.10;

/// Modal hue of the central third of the image, widened by the configured
/// tolerance.
pub fn dominant_court_color(image: &RgbImage, config: &DetectorConfig) -> ColorBand {
    let (w, h) = image.dimensions();
    let (x0, x1) = (w / 3, (2 * w / 3).max(w / 3 + 1).min(w));
    let (y0, y1) = (h / 3, (2 * h / 3).max(h / 3 + 1).min(h));

    let mut saturated = Vec::new();
    let mut all = Vec::new();
    for y in y0..y1 {
        for x in x0..x1 {
            let hsv = rgb_to_hsv(image.get_pixel(x, y).0);
            all.push(hsv.h);
            if hsv.s >= config.saturation_floor as f32 && hsv.v >= config.value_floor as f32 {
                saturated.push(hsv.h);
            }
        }
    }
    let reliable =
        !all.is_empty() && saturated.len() as f64 >= MIN_SATURATED_SHARE * all.len() as f64;
    let hues = if reliable { &saturated } else { &all };

    ColorBand {
        hue_center: modal_hue(hues, config.hue_tolerance),
        hue_tolerance: config.hue_tolerance,
        saturation_floor: config.saturation_floor,
        value_floor: config.value_floor,
        reliable,
    }
}

/// Mode of a 180-bin hue histogram smoothed over +-2 bins, refined to the
/// circular mean of the hues within `tolerance` of it.
fn modal_hue(hues: &[f32], tolerance: f32) -> f32 {
    let bins = HUE_RANGE as usize;
    let mut hist = vec![0usize; bins];
    for &h in hues {
        hist[(h as usize).min(bins - 1)] += 1;
    }
    let mut best = (0usize, 0usize);
    for b in 0..bins {
        let score: usize = (0..5).map(|d| hist[(b + bins + d - 2) % bins]).sum();
        if score > best.1 {
            best = (b, score);
        }
    }
    let mode = best.0 as f32 + 0.5;
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for &h in hues {
        if hue_distance(h, mode) <= tolerance {
            let mut d = h - mode;
            if d > HUE_RANGE / 2.0 {
                d -= HUE_RANGE;
            } else if d < -HUE_RANGE / 2.0 {
                d += HUE_RANGE;
            }
            sum += d as f64;
            n += 1;
        }
    }
    if n == 0 {
        return mode;
    }
    (mode + (sum / n as f64) as f32).rem_euclid(HUE_RANGE)
}

/// Estimated court area.
#[derive(Debug, Clone, PartialEq)]
pub struct PlayableRegion {
    pub polygon: Vec<(f64, f64)>,
    pub confidence: f64,
    pub interior_mask: BinaryMask,
    interior: Vec<u32>,
}

impl PlayableRegion {
    /// Rasterises `polygon` into an image of `height x width`.
    pub fn from_polygon(
        polygon: Vec<(f64, f64)>,
        confidence: f64,
        height: usize,
        width: usize,
    ) -> Result<Self, CourtError> {
        let interior_mask = rasterize_polygons(std::slice::from_ref(&polygon), height, width)
            .map_err(|_| CourtError::EmptyRegion)?;
        let interior = interior_mask
            .bits()
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i as u32)
            .collect();
        Ok(PlayableRegion {
            polygon,
            confidence,
            interior_mask,
            interior,
        })
    }

    pub fn area_fraction(&self) -> f64 {
        self.interior.len() as f64 / self.interior_mask.bits().len() as f64
    }

    /// Mean x of interior pixel centres.
    pub fn centroid_x(&self) -> f64 {
        let w = self.interior_mask.width();
        let sum: f64 = self.interior.iter().map(|&i| (i as usize % w) as f64 + 0.5).sum();
        sum / self.interior.len().max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectionStage {
    Contour,
    Area,
    Hough,
}

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[error("court detection failed at {stage:?} stage: {detail}")]
pub struct DetectionFailure {
    pub stage: DetectionStage,
    pub detail: String,
}

fn fail(stage: DetectionStage, detail: impl Into<String>) -> DetectionFailure {
    DetectionFailure {
        stage,
        detail: detail.into(),
    }
}

/// A straight court boundary in normal form `x cos(theta) + y sin(theta) = rho`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoughLine {
    pub theta: f64,
    pub rho: f64,
    pub votes: usize,
}

impl HoughLine {
    fn distance(&self, x: f64, y: f64) -> f64 {
        (x * self.theta.cos() + y * self.theta.sin() - self.rho).abs()
    }
}

pub fn detect_playable_region(
    image: &RgbImage,
    config: &DetectorConfig,
) -> Result<PlayableRegion, DetectionFailure> {
    let (w, h) = image.dimensions();
    let (wu, hu) = (w as usize, h as usize);
    if w == 0 || h == 0 {
        return Err(fail(DetectionStage::Contour, "empty image"));
    }
    let total = (wu * hu) as f64;

    let band = dominant_court_color(image, config);
    let in_band = BinaryMask::from_fn(hu, wu, |r, c| {
        band.contains(image.get_pixel(c as u32, r as u32).0)
    });
    if in_band.is_empty() {
        return Err(fail(DetectionStage::Contour, "no court-coloured pixels"));
    }
    let central_share = central_third_share(&in_band);
    if central_share < config.min_band_fraction {
        return Err(fail(
            DetectionStage::Contour,
            format!("court colour covers only {central_share:.3} of the image centre"),
        ));
    }

    let closed = close(&in_band, config.close_kernel);
    let components = connected_components(&closed, Connectivity::Eight);
    let Some(largest) = components.largest() else {
        return Err(fail(DetectionStage::Contour, "no contour"));
    };
    let blob = fill_holes(&components.component_mask(largest));
    let blob_fraction = blob.count() as f64 / total;
    if blob_fraction < config.region_min_fraction {
        return Err(fail(
            DetectionStage::Area,
            format!("largest contour covers {blob_fraction:.3} of the image"),
        ));
    }

    let boundary = boundary_pixels(&blob);
    let lines = hough_lines(&boundary, wu, hu, config);
    if lines.len() < 2 {
        return Err(fail(
            DetectionStage::Hough,
            format!("{} supporting boundary line(s), need 2", lines.len()),
        ));
    }

    let (cx, cy) = centroid(&blob);
    let mut polygon = convex_hull(hull_points(&blob));
    for line in &lines {
        let (n, rho) = ((line.theta.cos(), line.theta.sin()), line.rho);
        let side = (cx * n.0 + cy * n.1 - rho).signum();
        polygon = clip_half_plane(&polygon, |x, y| side * (x * n.0 + y * n.1 - rho) + 0.5);
    }
    let explained = boundary
        .iter()
        .filter(|&&(x, y)| lines.iter().any(|l| l.distance(x, y) <= 2.0))
        .count();
    let confidence = explained as f64 / boundary.len().max(1) as f64;

    if polygon.len() < 3 {
        return Err(fail(DetectionStage::Area, "refined polygon collapsed"));
    }
    let region = PlayableRegion::from_polygon(polygon, confidence, hu, wu)
        .map_err(|_| fail(DetectionStage::Area, "refined polygon collapsed"))?;
    if region.area_fraction() < config.region_min_fraction {
        return Err(fail(
            DetectionStage::Area,
            format!("refined polygon covers {:.3} of the image", region.area_fraction()),
        ));
    }
    Ok(region)
}

fn central_third_share(mask: &BinaryMask) -> f64 {
    let (h, w) = mask.dims();
    let (r0, r1) = (h / 3, (2 * h / 3).max(h / 3 + 1).min(h));
    let (c0, c1) = (w / 3, (2 * w / 3).max(w / 3 + 1).min(w));
    let mut hit = 0usize;
    for r in r0..r1 {
        for c in c0..c1 {
            hit += mask.get(r, c) as usize;
        }
    }
    hit as f64 / ((r1 - r0) * (c1 - c0)) as f64
}

/// Square-kernel dilation or erosion; the window is clipped at the border.
fn morph(mask: &BinaryMask, kernel: usize, dilate: bool) -> BinaryMask {
    let (h, w) = mask.dims();
    let rad = kernel / 2;
    let pass = |len: usize, get: &dyn Fn(usize) -> bool| -> Vec<bool> {
        let mut prefix = vec![0usize; len + 1];
        for i in 0..len {
            prefix[i + 1] = prefix[i] + get(i) as usize;
        }
        (0..len)
            .map(|i| {
                let lo = i.saturating_sub(rad);
                let hi = (i + rad + 1).min(len);
                let n = prefix[hi] - prefix[lo];
                if dilate {
                    n > 0
                } else {
                    n == hi - lo
                }
            })
            .collect()
    };
    let mut horiz = BinaryMask::new(h, w);
    for r in 0..h {
        let row = pass(w, &|c| mask.get(r, c));
        for (c, v) in row.into_iter().enumerate() {
            horiz.set(r, c, v);
        }
    }
    let mut out = BinaryMask::new(h, w);
    for c in 0..w {
        let col = pass(h, &|r| horiz.get(r, c));
        for (r, v) in col.into_iter().enumerate() {
            out.set(r, c, v);
        }
    }
    out
}

pub(crate) fn close(mask: &BinaryMask, kernel: usize) -> BinaryMask {
    if kernel <= 1 {
        return mask.clone();
    }
    morph(&morph(mask, kernel, true), kernel, false)
}

/// Fills background regions that do not reach the image border.
fn fill_holes(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = mask.dims();
    let inverse = BinaryMask::from_fn(h, w, |r, c| !mask.get(r, c));
    let comps = connected_components(&inverse, Connectivity::Four);
    let mut touches = vec![false; comps.count + 1];
    for r in 0..h {
        for c in 0..w {
            if r == 0 || c == 0 || r + 1 == h || c + 1 == w {
                touches[comps.label(r, c) as usize] = true;
            }
        }
    }
    BinaryMask::from_fn(h, w, |r, c| {
        let l = comps.label(r, c);
        l == 0 || !touches[l as usize]
    })
}

/// Centres of foreground pixels with a background 4-neighbour inside the
/// image. Pixels along the frame edge do not count.
fn boundary_pixels(mask: &BinaryMask) -> Vec<(f64, f64)> {
    let (h, w) = mask.dims();
    let mut out = Vec::new();
    for (r, c) in mask.foreground() {
        let edge = (r > 0 && !mask.get(r - 1, c))
            || (r + 1 < h && !mask.get(r + 1, c))
            || (c > 0 && !mask.get(r, c - 1))
            || (c + 1 < w && !mask.get(r, c + 1));
        if edge {
            out.push((c as f64 + 0.5, r as f64 + 0.5));
        }
    }
    out
}

/// Sequential Hough transform: take the strongest line, drop the points it
/// explains, repeat until no line reaches the vote threshold.
pub fn hough_lines(
    points: &[(f64, f64)],
    width: usize,
    height: usize,
    config: &DetectorConfig,
) -> Vec<HoughLine> {
    let diag = ((width * width + height * height) as f64).sqrt();
    let threshold = config.hough_threshold_fraction * diag;
    let bins = config.hough_angle_bins.max(1);
    let trig: Vec<(f64, f64)> = (0..bins)
        .map(|t| {
            let theta = PI * t as f64 / bins as f64;
            (theta.cos(), theta.sin())
        })
        .collect();
    let offset = diag.ceil() as i64 + 1;
    let n_rho = (2 * offset + 1) as usize;

    let mut remaining: Vec<(f64, f64)> = points.to_vec();
    let mut lines = Vec::new();
    let mut acc = vec![0u32; bins * n_rho];
    while lines.len() < config.max_lines && !remaining.is_empty() {
        acc.iter_mut().for_each(|a| *a = 0);
        for &(x, y) in &remaining {
            for (t, &(cos, sin)) in trig.iter().enumerate() {
                let rho = (x * cos + y * sin).round() as i64 + offset;
                acc[t * n_rho + rho as usize] += 1;
            }
        }
        let mut best: Option<(u32, usize, usize)> = None;
        for t in 0..bins {
            let row = &acc[t * n_rho..(t + 1) * n_rho];
            for r in 1..n_rho - 1 {
                let score = row[r - 1] + row[r] + row[r + 1];
                if best.is_none_or(|(s, _, _)| score > s) {
                    best = Some((score, t, r));
                }
            }
        }
        let Some((score, t, r)) = best else { break };
        if (score as f64) < threshold {
            break;
        }
        let (cos, sin) = trig[t];
        // refine rho to the mean offset of the points within the peak window
        let rho_bin = (r as i64 - offset) as f64;
        let support: Vec<f64> = remaining
            .iter()
            .map(|&(x, y)| x * cos + y * sin)
            .filter(|d| (d - rho_bin).abs() <= 1.5)
            .collect();
        let rho = support.iter().sum::<f64>() / support.len().max(1) as f64;
        let line = HoughLine {
            theta: PI * t as f64 / bins as f64,
            rho,
            votes: score as usize,
        };
        remaining.retain(|&(x, y)| line.distance(x, y) > 2.0);
        lines.push(line);
    }
    lines
}

fn centroid(mask: &BinaryMask) -> (f64, f64) {
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut n = 0usize;
    for (r, c) in mask.foreground() {
        sx += c as f64 + 0.5;
        sy += r as f64 + 0.5;
        n += 1;
    }
    (sx / n.max(1) as f64, sy / n.max(1) as f64)
}

/// Corners of the leftmost and rightmost foreground pixel of every row.
fn hull_points(mask: &BinaryMask) -> Vec<(f64, f64)> {
    let (h, w) = mask.dims();
    let mut pts = Vec::new();
    for r in 0..h {
        let row = &mask.bits()[r * w..(r + 1) * w];
        if let (Some(a), Some(b)) = (row.iter().position(|&x| x), row.iter().rposition(|&x| x)) {
            let (y0, y1) = (r as f64, r as f64 + 1.0);
            pts.extend([
                (a as f64, y0),
                (a as f64, y1),
                (b as f64 + 1.0, y0),
                (b as f64 + 1.0, y1),
            ]);
        }
    }
    pts
}

/// Andrew's monotone chain; counter-clockwise in image coordinates
/// (clockwise on screen), collinear points removed.
pub(crate) fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(pts.len() * 2);
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    // the upper chain may not pop back into the lower one
    let lower_len = hull.len();
    for &p in pts.iter().rev().skip(1) {
        while hull.len() > lower_len
            && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0
        {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Sutherland-Hodgman clip keeping points where `f(x, y) >= 0`.
fn clip_half_plane(poly: &[(f64, f64)], f: impl Fn(f64, f64) -> f64) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let (fa, fb) = (f(a.0, a.1), f(b.0, b.1));
        if fa >= 0.0 {
            out.push(a);
        }
        if (fa >= 0.0) != (fb >= 0.0) {
            let t = fa / (fa - fb);
            out.push((a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1)));
        }
    }
    out
}

pub fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    let mut s = 0.0;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        s += a.0 * b.1 - b.0 * a.1;
    }
    s.abs() / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CourtSide {
    Left,
    Right,
    Unknown,
}

/// Chooses which default placement rule applies to an image. A per-image
/// override wins; otherwise a detected region votes by its centroid (a
/// centroid exactly on the midline counts as right) and failure gives
/// `Unknown`.
pub fn infer_court_side(
    detection: Result<&PlayableRegion, &DetectionFailure>,
    image_width: u32,
    override_side: Option<CourtSide>,
) -> CourtSide {
    if let Some(side) = override_side {
        return side;
    }
    match detection {
        Ok(region) if region.centroid_x() < image_width as f64 / 2.0 => CourtSide::Left,
        Ok(_) => CourtSide::Right,
        Err(_) => CourtSide::Unknown,
    }
}

/// Inclusive integer rectangle of allowed paste anchors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementBounds {
    pub x_lo: i64,
    pub x_hi: i64,
    pub y_lo: i64,
    pub y_hi: i64,
}

impl PlacementBounds {
    pub fn contains(&self, x: i64, y: i64) -> bool {
        (self.x_lo..=self.x_hi).contains(&x) && (self.y_lo..=self.y_hi).contains(&y)
    }
}

/// Default anchor bounds for images where the court could not be found.
///
/// * left:  `w/5 <= x <= w`
/// * right: `0 <= x <= w - w/5`
/// * unknown: both of the above
/// * all:   `h/2 - h/5 <= y <= h/2 + h/5`
///
/// Fractional endpoints are rounded inward. Images one pixel wide or tall
/// admit no integer anchor and are rejected.
pub fn fallback_bounds(width: u32, height: u32, side: CourtSide) -> Result<PlacementBounds, CourtError> {
    let (w, h) = (width as i64, height as i64);
    if w <= 0 || h <= 0 {
        return Err(CourtError::InvalidDimensions(width, height));
    }
    let left_lo = (w + 4) / 5; // ceil(w/5)
    let right_hi = (4 * w) / 5; // floor(w - w/5)
    let (x_lo, x_hi) = match side {
        CourtSide::Left => (left_lo, w),
        CourtSide::Right => (0, right_hi),
        CourtSide::Unknown => (left_lo, right_hi),
    };
    let y_lo = (3 * h + 9) / 10; // ceil(h/2 - h/5)
    let y_hi = (7 * h) / 10; // floor(h/2 + h/5)
    if x_lo > x_hi || y_lo > y_hi {
        return Err(CourtError::InvalidDimensions(width, height));
    }
    Ok(PlacementBounds {
        x_lo,
        x_hi,
        y_lo,
        y_hi,
    })
}

/// Where paste anchors are drawn from for one image.
#[derive(Debug, Clone, PartialEq)]
pub enum PlacementArea {
    Region(PlayableRegion),
    Bounds(PlacementBounds),
}

/// Uniform anchor `(x_min, y_min)`: over the interior pixels of a detected
/// region, or over the integer lattice of fallback bounds.
pub fn sample_anchor<R: Rng + ?Sized>(area: &PlacementArea, rng: &mut R) -> Result<(i64, i64), CourtError> {
    match area {
        PlacementArea::Region(region) => {
            if region.interior.is_empty() {
                return Err(CourtError::EmptyRegion);
            }
            let i = region.interior[rng.random_range(0..region.interior.len())] as usize;
            let w = region.interior_mask.width();
            Ok(((i % w) as i64, (i / w) as i64))
        }
        PlacementArea::Bounds(b) => {
            if b.x_lo > b.x_hi || b.y_lo > b.y_hi {
                return Err(CourtError::EmptyRegion);
            }
            let x = rng.random_range(b.x_lo..=b.x_hi);
            let y = rng.random_range(b.y_lo..=b.y_hi);
            Ok((x, y))
        }
    }
}
