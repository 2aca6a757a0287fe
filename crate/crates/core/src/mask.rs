//! Binary instance masks and the pixel algorithms built on them.
//!
//! Masks are stored row-major, one `bool` per pixel. Run-length encoding
//! follows the COCO convention (column-major runs, first run background),
//! so encoded masks interoperate with pycocotools and friends.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MaskError {
    #[error("rle counts sum to {sum}, expected {expected} for a {height}x{width} mask")]
    CountSumMismatch {
        sum: u64,
        expected: u64,
        height: usize,
        width: usize,
    },
    #[error("mask dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("polygon {index} has {vertices} vertices, need at least 3")]
    DegeneratePolygon { index: usize, vertices: usize },
    #[error("bit buffer has {len} entries, expected {expected}")]
    BadLength { len: usize, expected: usize },
    #[error("malformed compressed rle string at byte {0}")]
    BadCompressedRle(usize),
}

/// Pixel adjacency used for connectivity questions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Connectivity {
    #[default]
    Four,
    Eight,
}

impl Connectivity {
    pub fn from_neighbors(n: u8) -> Option<Self> {
        match n {
            4 => Some(Connectivity::Four),
            8 => Some(Connectivity::Eight),
            _ => None,
        }
    }

    pub fn neighbors(self) -> u8 {
        match self {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

/// A per-instance binary bitmap.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BinaryMask({}x{}, {} set)", self.height, self.width, self.count())
    }
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self, MaskError> {
        if bits.len() != height * width {
            return Err(MaskError::BadLength {
                len: bits.len(),
                expected: height * width,
            });
        }
        Ok(BinaryMask {
            height,
            width,
            bits,
        })
    }

    /// Builds a mask from a predicate over `(row, col)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                bits.push(f(r, c));
            }
        }
        BinaryMask {
            height,
            width,
            bits,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    /// Number of foreground pixels.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Tight bounding box of the foreground as `(x, y, w, h)`.
    pub fn bbox(&self) -> Option<PixelRect> {
        let mut x0 = usize::MAX;
        let mut y0 = usize::MAX;
        let mut x1 = 0;
        let mut y1 = 0;
        for r in 0..self.height {
            let row = &self.bits[r * self.width..(r + 1) * self.width];
            if let Some(first) = row.iter().position(|&b| b) {
                let last = row.iter().rposition(|&b| b).unwrap_or(first);
                x0 = x0.min(first);
                x1 = x1.max(last + 1);
                y0 = y0.min(r);
                y1 = r + 1;
            }
        }
        (x0 != usize::MAX).then(|| PixelRect {
            x: x0,
            y: y0,
            width: x1 - x0,
            height: y1 - y0,
        })
    }

    /// Copies out the sub-rectangle `rect`, which must lie inside the mask.
    pub fn crop(&self, rect: PixelRect) -> BinaryMask {
        assert!(rect.x + rect.width <= self.width && rect.y + rect.height <= self.height);
        let mut out = BinaryMask::new(rect.height, rect.width);
        for r in 0..rect.height {
            let src = (rect.y + r) * self.width + rect.x;
            out.bits[r * rect.width..(r + 1) * rect.width]
                .copy_from_slice(&self.bits[src..src + rect.width]);
        }
        out
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> BinaryMask {
        BinaryMask::from_fn(self.height, self.width, |r, c| self.get(r, self.width - 1 - c))
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> Result<usize, MaskError> {
        self.check_dims(other)?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a && b)
            .count())
    }

    pub fn intersection(&self, other: &BinaryMask) -> Result<BinaryMask, MaskError> {
        self.check_dims(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect();
        Ok(BinaryMask {
            height: self.height,
            width: self.width,
            bits,
        })
    }

    /// Iterator over `(row, col)` of foreground pixels in row-major order.
    pub fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i / w, i % w))
    }

    fn check_dims(&self, other: &BinaryMask) -> Result<(), MaskError> {
        if self.dims() != other.dims() {
            return Err(MaskError::DimensionMismatch(self.dims(), other.dims()));
        }
        Ok(())
    }
}

/// Axis-aligned pixel rectangle `[x, x+width) x [y, y+height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelRect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl PixelRect {
    pub fn area(&self) -> usize {
        self.width * self.height
    }

    /// COCO `[x, y, w, h]`.
    pub fn to_coco(self) -> [f64; 4] {
        [self.x as f64, self.y as f64, self.width as f64, self.height as f64]
    }
}

/// COCO-style uncompressed run-length encoding.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RleMask {
    /// `[height, width]`
    pub size: [usize; 2],
    pub counts: Vec<u32>,
}

impl RleMask {
    pub fn height(&self) -> usize {
        self.size[0]
    }

    pub fn width(&self) -> usize {
        self.size[1]
    }

    /// Foreground pixel count, read straight off the odd runs.
    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).map(|&c| c as u64).sum()
    }
}

/// Accumulates alternating runs, merging consecutive same-valued pushes.
struct RunBuilder {
    counts: Vec<u32>,
    current: bool,
}

impl RunBuilder {
    fn new() -> Self {
        RunBuilder {
            counts: vec![0],
            current: false,
        }
    }

    fn push(&mut self, value: bool, len: usize) {
        if len == 0 {
            return;
        }
        if value != self.current {
            self.counts.push(0);
            self.current = value;
        }
        *self.counts.last_mut().unwrap() += len as u32;
    }

    fn finish(self) -> Vec<u32> {
        self.counts
    }
}

pub fn rle_encode(mask: &BinaryMask) -> RleMask {
    let mut runs = RunBuilder::new();
    for c in 0..mask.width {
        for r in 0..mask.height {
            runs.push(mask.get(r, c), 1);
        }
    }
    RleMask {
        size: [mask.height, mask.width],
        counts: runs.finish(),
    }
}

/// Encodes a mask that is known to be zero outside `origin + local.dims()`,
/// without materialising the full frame.
pub fn rle_encode_placed(
    local: &BinaryMask,
    origin: (usize, usize),
    height: usize,
    width: usize,
) -> RleMask {
    let (ox, oy) = origin;
    assert!(ox + local.width <= width && oy + local.height <= height);
    let mut runs = RunBuilder::new();
    for c in 0..width {
        if c < ox || c >= ox + local.width {
            runs.push(false, height);
            continue;
        }
        runs.push(false, oy);
        let lc = c - ox;
        for r in 0..local.height {
            runs.push(local.get(r, lc), 1);
        }
        runs.push(false, height - oy - local.height);
    }
    RleMask {
        size: [height, width],
        counts: runs.finish(),
    }
}

pub fn rle_decode(rle: &RleMask) -> Result<BinaryMask, MaskError> {
    let (h, w) = (rle.height(), rle.width());
    let sum: u64 = rle.counts.iter().map(|&c| c as u64).sum();
    let expected = (h * w) as u64;
    if sum != expected {
        return Err(MaskError::CountSumMismatch {
            sum,
            expected,
            height: h,
            width: w,
        });
    }
    let mut mask = BinaryMask::new(h, w);
    let mut offset = 0usize;
    for (i, &run) in rle.counts.iter().enumerate() {
        let run = run as usize;
        if i % 2 == 1 {
            for k in offset..offset + run {
                mask.set(k % h, k / h, true);
            }
        }
        offset += run;
    }
    Ok(mask)
}

/// Decodes the packed-string `counts` form used by pycocotools.
pub fn decode_compressed_counts(s: &str) -> Result<Vec<u32>, MaskError> {
    let bytes = s.as_bytes();
    let mut counts: Vec<i64> = Vec::new();
    let mut p = 0;
    while p < bytes.len() {
        let mut x: i64 = 0;
        let mut k = 0;
        loop {
            let Some(&b) = bytes.get(p) else {
                return Err(MaskError::BadCompressedRle(p));
            };
            if !(48..48 + 64).contains(&b) {
                return Err(MaskError::BadCompressedRle(p));
            }
            let c = (b - 48) as i64;
            x |= (c & 0x1f) << (5 * k);
            p += 1;
            k += 1;
            if c & 0x20 == 0 {
                if c & 0x10 != 0 {
                    x |= -1i64 << (5 * k);
                }
                break;
            }
            if k > 12 {
                return Err(MaskError::BadCompressedRle(p));
            }
        }
        if counts.len() > 2 {
            x += counts[counts.len() - 2];
        }
        counts.push(x);
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| u32::try_from(c).map_err(|_| MaskError::BadCompressedRle(i)))
        .collect()
}

/// Fills the union of the given polygons with the even-odd rule.
///
/// Pixel `(r, c)` is foreground iff its center `(c + 0.5, r + 0.5)` lies
/// inside. Crossings use the half-open convention on y, so a vertex shared
/// by two edges is counted once.
pub fn rasterize_polygons(
    polygons: &[Vec<(f64, f64)>],
    height: usize,
    width: usize,
) -> Result<BinaryMask, MaskError> {
    for (index, poly) in polygons.iter().enumerate() {
        if poly.len() < 3 {
            return Err(MaskError::DegeneratePolygon {
                index,
                vertices: poly.len(),
            });
        }
    }
    let mut mask = BinaryMask::new(height, width);
    let mut xs: Vec<f64> = Vec::new();
    for poly in polygons {
        for r in 0..height {
            let py = r as f64 + 0.5;
            xs.clear();
            for i in 0..poly.len() {
                let (x0, y0) = poly[i];
                let (x1, y1) = poly[(i + 1) % poly.len()];
                if (y0 > py) != (y1 > py) {
                    xs.push(x0 + (py - y0) * (x1 - x0) / (y1 - y0));
                }
            }
            xs.sort_by(f64::total_cmp);
            for span in xs.chunks_exact(2) {
                let start = first_center_at_or_after(span[0]);
                let end = first_center_at_or_after(span[1]);
                let start = start.clamp(0, width as i64) as usize;
                let end = end.clamp(0, width as i64) as usize;
                for c in start..end {
                    mask.set(r, c, true);
                }
            }
        }
    }
    Ok(mask)
}

/// Smallest column `c` with `c + 0.5 >= x`.
fn first_center_at_or_after(x: f64) -> i64 {
    if !x.is_finite() {
        return if x > 0.0 { i64::MAX / 2 } else { i64::MIN / 2 };
    }
    let mut c = (x - 0.5).ceil() as i64;
    while (c as f64) + 0.5 < x {
        c += 1;
    }
    while ((c - 1) as f64) + 0.5 >= x {
        c -= 1;
    }
    c
}

/// Labelled connected components of a mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentSet {
    pub height: usize,
    pub width: usize,
    /// Row-major labels; 0 is background, components are numbered from 1.
    pub labels: Vec<u32>,
    pub count: usize,
    /// `component_sizes[k - 1]` is the pixel count of label `k`.
    pub component_sizes: Vec<usize>,
}

impl ComponentSet {
    pub fn label(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    /// Mask of a single component.
    pub fn component_mask(&self, label: u32) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.labels.iter().map(|&l| l == label).collect(),
        }
    }

    /// Label of the largest component, ties going to the lowest label.
    pub fn largest(&self) -> Option<u32> {
        let mut best: Option<(usize, u32)> = None;
        for (i, &size) in self.component_sizes.iter().enumerate() {
            if best.is_none_or(|(s, _)| size > s) {
                best = Some((size, i as u32 + 1));
            }
        }
        best.map(|(_, l)| l)
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        parent[x as usize] = parent[parent[x as usize] as usize];
        x = parent[x as usize];
    }
    x
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

/// Two-pass union-find labelling. Final labels are assigned in row-major
/// first-encounter order.
pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> ComponentSet {
    let (h, w) = mask.dims();
    let mut provisional = vec![0u32; h * w];
    let mut parent: Vec<u32> = vec![0];
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let mut neighbors = [0u32; 4];
            let mut n = 0;
            if c > 0 && mask.get(r, c - 1) {
                neighbors[n] = provisional[r * w + c - 1];
                n += 1;
            }
            if r > 0 {
                if mask.get(r - 1, c) {
                    neighbors[n] = provisional[(r - 1) * w + c];
                    n += 1;
                }
                if connectivity == Connectivity::Eight {
                    if c > 0 && mask.get(r - 1, c - 1) {
                        neighbors[n] = provisional[(r - 1) * w + c - 1];
                        n += 1;
                    }
                    if c + 1 < w && mask.get(r - 1, c + 1) {
                        neighbors[n] = provisional[(r - 1) * w + c + 1];
                        n += 1;
                    }
                }
            }
            let label = if n == 0 {
                let l = parent.len() as u32;
                parent.push(l);
                l
            } else {
                let first = neighbors[0];
                for &other in &neighbors[1..n] {
                    union(&mut parent, first, other);
                }
                first
            };
            provisional[r * w + c] = label;
        }
    }

    let mut remap = vec![0u32; parent.len()];
    let mut sizes: Vec<usize> = Vec::new();
    let mut labels = provisional;
    for l in labels.iter_mut() {
        if *l == 0 {
            continue;
        }
        let root = find(&mut parent, *l) as usize;
        if remap[root] == 0 {
            sizes.push(0);
            remap[root] = sizes.len() as u32;
        }
        *l = remap[root];
        sizes[*l as usize - 1] += 1;
    }
    ComponentSet {
        height: h,
        width: w,
        labels,
        count: sizes.len(),
        component_sizes: sizes,
    }
}

/// Intersection over union; 0 when both masks are empty.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MaskError> {
    a.check_dims(b)?;
    let mut inter = 0usize;
    let mut uni = 0usize;
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        uni += (x || y) as usize;
    }
    Ok(if uni == 0 {
        0.0
    } else {
        inter as f64 / uni as f64
    })
}

/// Pixels of `base` not covered by `overlay`.
pub fn subtract(base: &BinaryMask, overlay: &BinaryMask) -> Result<BinaryMask, MaskError> {
    base.check_dims(overlay)?;
    let bits = base
        .bits
        .iter()
        .zip(&overlay.bits)
        .map(|(&a, &b)| a && !b)
        .collect();
    Ok(BinaryMask {
        height: base.height,
        width: base.width,
        bits,
    })
}

/// Union of `canvas` with `stamp` translated by `offset = (x, y)`; stamp
/// pixels falling outside the canvas are discarded.
pub fn paste_mask(canvas: &BinaryMask, stamp: &BinaryMask, offset: (i64, i64)) -> BinaryMask {
    let mut out = canvas.clone();
    for_each_overlap(canvas.dims(), stamp, offset, |cr, cc, sr, sc| {
        if stamp.get(sr, sc) {
            out.set(cr, cc, true);
        }
    });
    out
}

/// Clears canvas pixels under the translated stamp's foreground and returns
/// how many were cleared. The in-place counterpart of [`subtract`] for
/// a stamp that only covers a small window of the canvas.
pub fn clear_under(canvas: &mut BinaryMask, stamp: &BinaryMask, offset: (i64, i64)) -> usize {
    let mut cleared = 0;
    let dims = canvas.dims();
    for_each_overlap(dims, stamp, offset, |cr, cc, sr, sc| {
        if stamp.get(sr, sc) && canvas.get(cr, cc) {
            canvas.set(cr, cc, false);
            cleared += 1;
        }
    });
    cleared
}

/// Visits every stamp pixel that lands inside a canvas of `dims`, passing
/// `(canvas_row, canvas_col, stamp_row, stamp_col)`.
pub(crate) fn for_each_overlap(
    dims: (usize, usize),
    stamp: &BinaryMask,
    offset: (i64, i64),
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    let (ch, cw) = (dims.0 as i64, dims.1 as i64);
    let (ox, oy) = offset;
    let r0 = (-oy).max(0);
    let r1 = (ch - oy).min(stamp.height as i64);
    let c0 = (-ox).max(0);
    let c1 = (cw - ox).min(stamp.width as i64);
    for sr in r0..r1 {
        for sc in c0..c1 {
            f((sr + oy) as usize, (sc + ox) as usize, sr as usize, sc as usize);
        }
    }
}
