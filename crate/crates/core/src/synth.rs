//! Synthetic basketball scenes with known geometry.
//!
//! Courts are rendered from a ground-truth polygon and players from known
//! silhouettes, so detectors and augmenters can be checked against exact
//! answers.

use std::collections::HashMap;

use image::{Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::color::{hsv_to_rgb, Hsv};
use crate::dataset::{Category, DatasetBundle, ImageRecord, InstanceAnnotation, Segmentation};
use crate::mask::{rasterize_polygons, BinaryMask};

#[derive(Debug, Clone, PartialEq)]
pub struct CourtScene {
    pub width: u32,
    pub height: u32,
    /// Ground-truth court outline in pixel coordinates.
    pub polygon: Vec<(f64, f64)>,
    /// Court floor hue on the 0..180 scale.
    pub court_hue: f32,
    /// Render a noisy crowd instead of a flat dark background.
    pub crowd: bool,
}

/// A trapezoidal court filling roughly the bottom `coverage` of the frame,
/// seen from a slightly elevated camera.
pub fn random_court_scene<R: Rng + ?Sized>(
    rng: &mut R,
    width: u32,
    height: u32,
    coverage: f64,
) -> CourtScene {
    let (w, h) = (width as f64, height as f64);
    let top = h * (1.0 - coverage);
    let tilt = rng.random_range(-0.04..0.04) * h;
    let polygon = vec![
        (rng.random_range(0.08..0.25) * w, top + tilt),
        (rng.random_range(0.75..0.92) * w, top - tilt),
        (rng.random_range(0.92..1.0) * w, h),
        (rng.random_range(0.0..0.08) * w, h),
    ];
    CourtScene {
        width,
        height,
        polygon,
        court_hue: rng.random_range(6.0..22.0),
        crowd: true,
    }
}

pub fn render_court<R: Rng + ?Sized>(scene: &CourtScene, rng: &mut R) -> RgbImage {
    let (w, h) = (scene.width, scene.height);
    let mut img = if scene.crowd {
        render_crowd(w, h, scene.court_hue, rng)
    } else {
        RgbImage::from_pixel(w, h, Rgb([38, 38, 44]))
    };

    let court = rasterize_polygons(&[scene.polygon.clone()], h as usize, w as usize)
        .expect("court polygon has at least 3 vertices");
    for (r, c) in court.foreground() {
        let px = hsv_to_rgb(Hsv {
            h: scene.court_hue + rng.random_range(-2.0..2.0),
            s: rng.random_range(150.0..190.0),
            v: rng.random_range(180.0..220.0),
        });
        img.put_pixel(c as u32, r as u32, Rgb(px));
    }

    // painted lines: low saturation, thin enough for a 9x9 close to bridge
    let p = &scene.polygon;
    let mid_top = midpoint(p[0], p[1]);
    let mid_bottom = midpoint(p[3], p[2]);
    let left = lerp(p[0], p[3], 0.6);
    let right = lerp(p[1], p[2], 0.6);
    for (a, b) in [(mid_top, mid_bottom), (left, right)] {
        draw_segment(&mut img, &court, a, b, Rgb([235, 235, 235]));
    }
    img
}

fn render_crowd<R: Rng + ?Sized>(w: u32, h: u32, court_hue: f32, rng: &mut R) -> RgbImage {
    let mut img = RgbImage::new(w, h);
    let mut y = 0;
    while y < h {
        let bh = rng.random_range(4..9);
        let mut x = 0;
        while x < w {
            let bw = rng.random_range(4..9);
            // a few court-coloured specks, the rest anything but the floor
            let hue = if rng.random_bool(0.03) {
                court_hue
            } else {
                (court_hue + rng.random_range(35.0..145.0)) % 180.0
            };
            let px = hsv_to_rgb(Hsv {
                h: hue,
                s: rng.random_range(0.0..255.0),
                v: rng.random_range(20.0..150.0),
            });
            for yy in y..(y + bh).min(h) {
                for xx in x..(x + bw).min(w) {
                    img.put_pixel(xx, yy, Rgb(px));
                }
            }
            x += bw;
        }
        y += bh;
    }
    img
}

fn midpoint(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    lerp(a, b, 0.5)
}

fn lerp(a: (f64, f64), b: (f64, f64), t: f64) -> (f64, f64) {
    (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t)
}

fn draw_segment(img: &mut RgbImage, clip: &BinaryMask, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()) * 2.0).ceil() as usize + 1;
    for i in 0..=steps {
        let (x, y) = lerp(a, b, i as f64 / steps as f64);
        for dx in 0..2 {
            let (c, r) = (x as i64 + dx, y as i64);
            if c >= 0 && r >= 0 && (c as usize) < clip.width() && (r as usize) < clip.height() && clip.get(r as usize, c as usize) {
                img.put_pixel(c as u32, r as u32, color);
            }
        }
    }
}

/// Silhouette of a standing player whose feet rest at `(x, y)`: a torso
/// rectangle with a head on top.
pub fn player_polygons(x: f64, y: f64, body_w: f64, body_h: f64) -> Vec<Vec<(f64, f64)>> {
    let head = body_w * 0.6;
    let hx = x - head / 2.0;
    let top = y - body_h;
    vec![
        vec![
            (x - body_w / 2.0, top),
            (x + body_w / 2.0, top),
            (x + body_w / 2.0, y),
            (x - body_w / 2.0, y),
        ],
        vec![
            (hx, top - head),
            (hx + head, top - head),
            (hx + head, top + 1.0),
            (hx, top + 1.0),
        ],
    ]
}

/// A small labelled dataset of rendered courts with players. Players are
/// drawn back to front; occluded players get visibility-corrected RLE
/// masks, unoccluded ones keep their polygons.
pub fn synthetic_dataset(
    n_images: usize,
    width: u32,
    height: u32,
    players: std::ops::RangeInclusive<usize>,
    seed: u64,
) -> (DatasetBundle, HashMap<u64, RgbImage>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bundle = DatasetBundle {
        categories: vec![Category {
            id: 1,
            name: "human".into(),
            supercategory: None,
        }],
        ..Default::default()
    };
    let mut pixels = HashMap::new();
    let (hu, wu) = (height as usize, width as usize);
    let mut next_ann = 1u64;
    for i in 0..n_images {
        let image_id = i as u64 + 1;
        let coverage = rng.random_range(0.5..0.7);
        let scene = random_court_scene(&mut rng, width, height, coverage);
        let mut img = render_court(&scene, &mut rng);

        let n = rng.random_range(players.clone());
        let mut shapes: Vec<(Vec<Vec<f64>>, BinaryMask)> = Vec::new();
        for _ in 0..n {
            let body_w = rng.random_range(0.03..0.05) * width as f64;
            let body_h = rng.random_range(0.10..0.16) * height as f64;
            let x = rng.random_range(0.15..0.85) * width as f64;
            let y = rng.random_range(0.55..0.95) * height as f64;
            let polys = player_polygons(x, y, body_w, body_h);
            let m = rasterize_polygons(&polys, hu, wu).expect("player polygons are quads");
            if m.is_empty() {
                continue;
            }
            let jersey = hsv_to_rgb(Hsv {
                h: rng.random_range(0.0..180.0),
                s: rng.random_range(120.0..255.0),
                v: rng.random_range(60.0..230.0),
            });
            let skin = [rng.random_range(90..230), rng.random_range(60..180), rng.random_range(40..140)];
            let head_top = polys[1][0].1;
            let head_bottom = polys[1][2].1;
            for (r, c) in m.foreground() {
                let y = r as f64 + 0.5;
                let px = if y >= head_top && y < head_bottom - 1.0 { skin } else { jersey };
                img.put_pixel(c as u32, r as u32, Rgb(px));
            }
            for (_, earlier) in shapes.iter_mut() {
                *earlier = crate::mask::subtract(earlier, &m).expect("same frame");
            }
            let flat = polys
                .iter()
                .map(|p| p.iter().flat_map(|&(x, y)| [x, y]).collect())
                .collect();
            shapes.push((flat, m));
        }

        for (flat, m) in shapes {
            if m.is_empty() {
                continue;
            }
            let full = rasterize_polygons(
                &flat
                    .iter()
                    .map(|p: &Vec<f64>| p.chunks_exact(2).map(|q| (q[0], q[1])).collect())
                    .collect::<Vec<_>>(),
                hu,
                wu,
            )
            .expect("player polygons are quads");
            let mut ann = InstanceAnnotation::from_mask(next_ann, image_id, 1, &m);
            if full == m {
                ann.segmentation = Segmentation::Polygons(flat);
            }
            bundle.annotations.push(ann);
            next_ann += 1;
        }

        bundle.images.push(ImageRecord {
            id: image_id,
            file_name: format!("frame_{image_id:04}.png"),
            width,
            height,
        });
        pixels.insert(image_id, img);
    }
    (bundle, pixels)
}
