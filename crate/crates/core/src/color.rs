//! HSV conversion and photometric adjustments on 8-bit RGB.
//!
//! Hue is expressed on the 0..180 scale (two degrees per unit), saturation
//! and value on 0..255, matching the common OpenCV convention.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

pub const HUE_RANGE: f32 = 180.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hsv {
    pub h: f32,
    pub s: f32,
    pub v: f32,
}

pub fn rgb_to_hsv(p: [u8; 3]) -> Hsv {
    let [r, g, b] = p.map(|x| x as f32);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { 255.0 * delta / max } else { 0.0 };
    let h_deg = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * (g - b) / delta
    } else if max == g {
        120.0 + 60.0 * (b - r) / delta
    } else {
        240.0 + 60.0 * (r - g) / delta
    };
    let h = (h_deg / 2.0).rem_euclid(HUE_RANGE);
    Hsv { h, s, v: max }
}

pub fn hsv_to_rgb(hsv: Hsv) -> [u8; 3] {
    let h = hsv.h.rem_euclid(HUE_RANGE) * 2.0 / 60.0;
    let s = (hsv.s / 255.0).clamp(0.0, 1.0);
    let v = hsv.v.clamp(0.0, 255.0);
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m].map(to_u8)
}

/// Circular distance between two hues on the 0..180 scale.
pub fn hue_distance(a: f32, b: f32) -> f32 {
    let d = (a - b).rem_euclid(HUE_RANGE);
    d.min(HUE_RANGE - d)
}

fn to_u8(x: f32) -> u8 {
    x.round().clamp(0.0, 255.0) as u8
}

fn luma(p: [u8; 3]) -> f32 {
    0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32
}

/// Concrete photometric deltas; all zero is the identity.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhotometricParams {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    /// Hue shift on the 0..180 scale.
    pub hue: f32,
}

impl PhotometricParams {
    pub fn is_identity(&self) -> bool {
        self.brightness == 0.0 && self.contrast == 0.0 && self.saturation == 0.0 && self.hue == 0.0
    }
}

/// Applies brightness, contrast, saturation and hue shifts in that order to
/// the pixels selected by `select` (all pixels when `None`). The contrast
/// pivot is the mean luma of the selected pixels.
pub fn apply_photometric(
    img: &mut RgbImage,
    params: &PhotometricParams,
    select: Option<&dyn Fn(u32, u32) -> bool>,
) {
    if params.is_identity() {
        return;
    }
    let selected = |x: u32, y: u32| select.is_none_or(|f| f(x, y));
    let (w, h) = img.dimensions();

    let pivot = if params.contrast != 0.0 {
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for y in 0..h {
            for x in 0..w {
                if selected(x, y) {
                    sum += luma(img.get_pixel(x, y).0) as f64;
                    n += 1;
                }
            }
        }
        if n == 0 {
            return;
        }
        (sum / n as f64) as f32
    } else {
        0.0
    };

    for y in 0..h {
        for x in 0..w {
            if !selected(x, y) {
                continue;
            }
            let mut p = img.get_pixel(x, y).0.map(|c| c as f32);
            if params.brightness != 0.0 {
                p = p.map(|c| c * (1.0 + params.brightness));
            }
            if params.contrast != 0.0 {
                p = p.map(|c| (c - pivot) * (1.0 + params.contrast) + pivot);
            }
            if params.saturation != 0.0 {
                let g = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
                p = p.map(|c| g + (c - g) * (1.0 + params.saturation));
            }
            let mut out = p.map(to_u8);
            if params.hue != 0.0 {
                let mut hsv = rgb_to_hsv(out);
                hsv.h += params.hue;
                out = hsv_to_rgb(hsv);
            }
            img.put_pixel(x, y, Rgb(out));
        }
    }
}
