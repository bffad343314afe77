//! Tissue segmentation on slide thumbnails and patch-grid extraction.
//!
//! A thumbnail is segmented by Otsu thresholding the background-distance
//! channel `255 - min(R, G, B)`, refined with a binary median filter,
//! morphological closing and small-component/hole filtering, and finally
//! scanned with non-overlapping windows that correspond to patches at the
//! target magnification.

use std::io::Write;
use std::ops::RangeInclusive;
use std::path::Path;

use image::imageops::FilterType;
use image::RgbImage;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng;

/// Channel means used to normalize backbone input crops.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];
pub const BACKBONE_INPUT_PX: u32 = 224;

#[derive(Clone, Debug, PartialEq)]
pub struct Thumbnail {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
    scale: f64,
}

impl Thumbnail {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>, scale: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("thumbnail must be at least 1x1"));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "thumbnail pixel buffer has {} bytes, expected {}",
                pixels.len(),
                width * height * 3
            )));
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::invalid("thumbnail scale must be positive"));
        }
        Ok(Thumbnail {
            width,
            height,
            pixels,
            scale,
        })
    }

    /// Solid-color thumbnail.
    pub fn filled(width: usize, height: usize, rgb: [u8; 3], scale: f64) -> Result<Self> {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Thumbnail::new(width, height, pixels, scale)
    }

    /// Reads a PNG or binary PPM (P6) file.
    pub fn load(path: &Path, scale: f64) -> Result<Self> {
        let img = image::ImageReader::open(path)?
            .with_guessed_format()?
            .decode()?
            .to_rgb8();
        Thumbnail::from_rgb(&img, scale)
    }

    pub fn from_rgb(img: &RgbImage, scale: f64) -> Result<Self> {
        Thumbnail::new(
            img.width() as usize,
            img.height() as usize,
            img.as_raw().clone(),
            scale,
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Per-pixel `255 - min(R, G, B)`: zero on white background.
    pub fn background_distance(&self) -> Vec<u8> {
        self.pixels
            .chunks_exact(3)
            .map(|p| 255 - p[0].min(p[1]).min(p[2]))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TissueMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl TissueMask {
    pub fn empty(width: usize, height: usize) -> Self {
        TissueMask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        TissueMask {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::invalid(format!(
                "mask has {} bits, expected {}",
                bits.len(),
                width * height
            )));
        }
        Ok(TissueMask {
            width,
            height,
            bits,
        })
    }

    /// Builds a mask from a predicate over pixel coordinates.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        TissueMask {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Tissue count inside `[x0, x1) x [y0, y1)`.
    pub fn count_in(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> usize {
        let mut n = 0;
        for y in y0..y1.min(self.height) {
            let row = &self.bits[y * self.width..(y + 1) * self.width];
            n += row[x0.min(self.width)..x1.min(self.width)]
                .iter()
                .filter(|&&b| b)
                .count();
        }
        n
    }

    /// 8-connected tissue components.
    pub fn components(&self) -> Vec<Vec<usize>> {
        label_components(&self.bits, self.width, self.height, true, Connectivity::Eight)
    }
}

#[derive(Clone, Debug)]
pub struct Segmentation {
    pub mask: TissueMask,
    /// Otsu level; pixels strictly above it are tissue. `None` when degenerate.
    pub threshold: Option<u8>,
    /// Set when every pixel has the same background distance, so no
    /// bimodal split exists. The mask is then empty.
    pub degenerate: bool,
    /// The shared background distance of a degenerate image.
    pub uniform_level: Option<u8>,
}

impl Segmentation {
    /// Mask to use when the caller treats a degenerate uniform image as
    /// tissue. Pure white stays empty.
    pub fn resolved_as_tissue(&self) -> TissueMask {
        match (self.degenerate, self.uniform_level) {
            (true, Some(level)) if level > 0 => {
                TissueMask::full(self.mask.width, self.mask.height)
            }
            _ => self.mask.clone(),
        }
    }
}

/// Range of split points `k` (class 0 = bins `0..=k`) maximizing the
/// between-class variance. `None` when fewer than two bins are populated.
pub fn otsu_split_range(hist: &[u64]) -> Option<RangeInclusive<usize>> {
    if hist.iter().filter(|&&h| h > 0).count() < 2 {
        return None;
    }
    let total: f64 = hist.iter().map(|&h| h as f64).sum();
    let sum_total: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &h)| i as f64 * h as f64)
        .sum();
    let mut w_b = 0.0;
    let mut sum_b = 0.0;
    let mut best = f64::NEG_INFINITY;
    let mut first = 0;
    let mut last = 0;
    for (k, &h) in hist.iter().enumerate().take(hist.len() - 1) {
        w_b += h as f64;
        sum_b += k as f64 * h as f64;
        let w_f = total - w_b;
        if w_b == 0.0 || w_f == 0.0 {
            continue;
        }
        let m_b = sum_b / w_b;
        let m_f = (sum_total - sum_b) / w_f;
        let var = w_b * w_f * (m_b - m_f) * (m_b - m_f);
        if var > best {
            best = var;
            first = k;
            last = k;
        } else if var == best {
            last = k;
        }
    }
    Some(first..=last)
}

pub fn segment_tissue(thumb: &Thumbnail) -> Segmentation {
    let channel = thumb.background_distance();
    let mut hist = [0u64; 256];
    for &v in &channel {
        hist[v as usize] += 1;
    }
    let (w, h) = (thumb.width, thumb.height);
    match otsu_split_range(&hist) {
        None => Segmentation {
            mask: TissueMask::empty(w, h),
            threshold: None,
            degenerate: true,
            uniform_level: Some(channel[0]),
        },
        Some(range) => {
            let t = *range.start() as u8;
            Segmentation {
                mask: TissueMask {
                    width: w,
                    height: h,
                    bits: channel.iter().map(|&v| v > t).collect(),
                },
                threshold: Some(t),
                degenerate: false,
                uniform_level: None,
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineParams {
    /// Side of the square median window (odd).
    pub median_window: usize,
    pub closing_radius: usize,
    pub min_area: usize,
    pub min_hole_area: usize,
}

impl Default for RefineParams {
    fn default() -> Self {
        RefineParams {
            median_window: 7,
            closing_radius: 4,
            min_area: 64,
            min_hole_area: 64,
        }
    }
}

/// Median filter, closing, then small-component removal and small-hole
/// filling.
pub fn refine_mask(mask: &TissueMask, params: &RefineParams, exec: Exec) -> TissueMask {
    if mask.is_empty() {
        return mask.clone();
    }
    let mut m = median_filter(mask, params.median_window, exec);
    m = closing(&m, params.closing_radius, exec);
    remove_small_components(&mut m, params.min_area);
    fill_small_holes(&mut m, params.min_hole_area);
    m
}

/// Binary median (majority vote) over a `window x window` square with
/// replicated borders.
pub fn median_filter(mask: &TissueMask, window: usize, exec: Exec) -> TissueMask {
    if window <= 1 {
        return mask.clone();
    }
    let r = window / 2;
    let side = 2 * r + 1;
    let (w, h) = (mask.width, mask.height);
    let pw = w + 2 * r;
    let ph = h + 2 * r;
    // integral image of the replicate-padded mask
    let mut integral = vec![0u32; (pw + 1) * (ph + 1)];
    for py in 0..ph {
        let sy = py.saturating_sub(r).min(h - 1);
        let mut run = 0u32;
        for px in 0..pw {
            let sx = px.saturating_sub(r).min(w - 1);
            run += mask.bits[sy * w + sx] as u32;
            integral[(py + 1) * (pw + 1) + px + 1] = integral[py * (pw + 1) + px + 1] + run;
        }
    }
    let half = (side * side) as u32 / 2;
    let mut bits = vec![false; w * h];
    exec.for_each_chunk_mut(&mut bits, w, |y, row| {
        for (x, out) in row.iter_mut().enumerate() {
            let (x0, y0, x1, y1) = (x, y, x + side, y + side);
            let s = integral[y1 * (pw + 1) + x1] + integral[y0 * (pw + 1) + x0]
                - integral[y0 * (pw + 1) + x1]
                - integral[y1 * (pw + 1) + x0];
            *out = s > half;
        }
    });
    TissueMask {
        width: w,
        height: h,
        bits,
    }
}

fn disk_half_widths(radius: usize) -> Vec<usize> {
    let r2 = (radius * radius) as i64;
    (0..=radius)
        .map(|dy| {
            let mut dx = 0usize;
            while ((dx + 1) * (dx + 1)) as i64 + (dy * dy) as i64 <= r2 {
                dx += 1;
            }
            dx
        })
        .collect()
}

fn row_prefix(mask: &TissueMask) -> Vec<u32> {
    let w = mask.width;
    let mut pre = vec![0u32; (w + 1) * mask.height];
    for y in 0..mask.height {
        for x in 0..w {
            pre[y * (w + 1) + x + 1] = pre[y * (w + 1) + x] + mask.bits[y * w + x] as u32;
        }
    }
    pre
}

/// Dilation (`erode == false`) or erosion with a disk. Pixels outside the
/// image are ignored, so erosion does not eat in from the image border.
fn morph_disk(mask: &TissueMask, radius: usize, erode: bool, exec: Exec) -> TissueMask {
    let (w, h) = (mask.width, mask.height);
    let half = disk_half_widths(radius);
    let pre = row_prefix(mask);
    let mut bits = vec![false; w * h];
    exec.for_each_chunk_mut(&mut bits, w, |y, row| {
        for (x, out) in row.iter_mut().enumerate() {
            let mut hit = erode;
            for dy in -(radius as i64)..=radius as i64 {
                let yy = y as i64 + dy;
                if yy < 0 || yy >= h as i64 {
                    continue;
                }
                let dx = half[dy.unsigned_abs() as usize];
                let x0 = x.saturating_sub(dx);
                let x1 = (x + dx + 1).min(w);
                let base = yy as usize * (w + 1);
                let count = pre[base + x1] - pre[base + x0];
                if erode {
                    if count as usize != x1 - x0 {
                        hit = false;
                        break;
                    }
                } else if count > 0 {
                    hit = true;
                    break;
                }
            }
            *out = hit;
        }
    });
    TissueMask {
        width: w,
        height: h,
        bits,
    }
}

pub fn dilate(mask: &TissueMask, radius: usize, exec: Exec) -> TissueMask {
    morph_disk(mask, radius, false, exec)
}

pub fn erode(mask: &TissueMask, radius: usize, exec: Exec) -> TissueMask {
    morph_disk(mask, radius, true, exec)
}

pub fn closing(mask: &TissueMask, radius: usize, exec: Exec) -> TissueMask {
    if radius == 0 {
        return mask.clone();
    }
    erode(&dilate(mask, radius, exec), radius, exec)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Connectivity {
    Four,
    Eight,
}

fn label_components(
    bits: &[bool],
    w: usize,
    h: usize,
    value: bool,
    conn: Connectivity,
) -> Vec<Vec<usize>> {
    let mut seen = vec![false; bits.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..bits.len() {
        if seen[start] || bits[start] != value {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut comp = Vec::new();
        while let Some(p) = stack.pop() {
            comp.push(p);
            let (x, y) = ((p % w) as i64, (p / w) as i64);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if (dx == 0 && dy == 0) || (conn == Connectivity::Four && dx != 0 && dy != 0)
                    {
                        continue;
                    }
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if !seen[q] && bits[q] == value {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

pub fn remove_small_components(mask: &mut TissueMask, min_area: usize) {
    for comp in label_components(&mask.bits, mask.width, mask.height, true, Connectivity::Eight) {
        if comp.len() < min_area {
            for p in comp {
                mask.bits[p] = false;
            }
        }
    }
}

/// Fills background regions that do not touch the image border and are
/// smaller than `min_hole_area`.
pub fn fill_small_holes(mask: &mut TissueMask, min_hole_area: usize) {
    let (w, h) = (mask.width, mask.height);
    for comp in label_components(&mask.bits, w, h, false, Connectivity::Four) {
        let touches_border = comp.iter().any(|&p| {
            let (x, y) = (p % w, p / w);
            x == 0 || y == 0 || x == w - 1 || y == h - 1
        });
        if !touches_border && comp.len() < min_hole_area {
            for p in comp {
                mask.bits[p] = true;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridParams {
    pub thumb_mag: f64,
    pub target_mag: f64,
    pub patch_px: u32,
    pub min_tissue_frac: f64,
}

impl Default for GridParams {
    fn default() -> Self {
        GridParams {
            thumb_mag: 1.25,
            target_mag: 20.0,
            patch_px: 256,
            min_tissue_frac: 0.5,
        }
    }
}

impl GridParams {
    pub fn scale_factor(&self) -> f64 {
        self.target_mag / self.thumb_mag
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch_px: u32,
    pub target_mag: f64,
    /// Top-left corners in target-magnification pixels.
    pub coords: Vec<(u32, u32)>,
    pub tissue_frac: Vec<f64>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "x,y,tissue_frac")?;
        for (&(x, y), f) in self.coords.iter().zip(&self.tissue_frac) {
            writeln!(out, "{x},{y},{f}")?;
        }
        Ok(())
    }
}

/// Mask-pixel window `[x0, x1) x [y0, y1)` covering the patch whose corner
/// is `(x, y)` at target magnification.
pub fn patch_window(
    mask: &TissueMask,
    x: u32,
    y: u32,
    patch_px: u32,
    scale: f64,
) -> (usize, usize, usize, usize) {
    let side = (patch_px as f64 / scale).ceil() as usize;
    let x0 = (x as f64 / scale).floor() as usize;
    let y0 = (y as f64 / scale).floor() as usize;
    (
        x0.min(mask.width),
        y0.min(mask.height),
        (x0 + side).min(mask.width),
        (y0 + side).min(mask.height),
    )
}

pub fn tissue_fraction(mask: &TissueMask, x: u32, y: u32, patch_px: u32, scale: f64) -> f64 {
    let (x0, y0, x1, y1) = patch_window(mask, x, y, patch_px, scale);
    let area = (x1 - x0) * (y1 - y0);
    if area == 0 {
        return 0.0;
    }
    mask.count_in(x0, y0, x1, y1) as f64 / area as f64
}

pub fn extract_patch_grid(mask: &TissueMask, params: &GridParams) -> Result<PatchGrid> {
    let s = params.scale_factor();
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::invalid(format!(
            "magnification scale factor must be positive, got {s}"
        )));
    }
    if params.patch_px == 0 {
        return Err(Error::invalid("patch size must be positive"));
    }
    if !(0.0..=1.0).contains(&params.min_tissue_frac) {
        return Err(Error::invalid("min_tissue_frac must lie in [0, 1]"));
    }
    let p = params.patch_px as u64;
    let slide_w = (mask.width as f64 * s).floor() as u64;
    let slide_h = (mask.height as f64 * s).floor() as u64;
    let (nx, ny) = (slide_w / p, slide_h / p);
    let mut grid = PatchGrid {
        patch_px: params.patch_px,
        target_mag: params.target_mag,
        coords: Vec::new(),
        tissue_frac: Vec::new(),
    };
    if mask.is_empty() {
        return Ok(grid);
    }
    for j in 0..ny {
        for i in 0..nx {
            let (x, y) = ((i * p) as u32, (j * p) as u32);
            let frac = tissue_fraction(mask, x, y, params.patch_px, s);
            if frac > 0.0 && frac >= params.min_tissue_frac {
                grid.coords.push((x, y));
                grid.tissue_frac.push(frac);
            }
        }
    }
    Ok(grid)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    Fraction(f64),
    Count(usize),
}

/// Uniform subset without replacement; grid order is preserved.
pub fn sample_patch_subset(
    grid: &PatchGrid,
    strategy: SamplingStrategy,
    seed: u64,
) -> Result<PatchGrid> {
    let n = grid.len();
    let keep = match strategy {
        SamplingStrategy::Fraction(f) => {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::invalid(format!("sampling fraction {f} not in (0, 1]")));
            }
            ((f * n as f64).round() as usize).min(n)
        }
        SamplingStrategy::Count(c) => c.min(n),
    };
    let mut rng = rng::from_seed(seed);
    let mut picked = index::sample(&mut rng, n, keep).into_vec();
    picked.sort_unstable();
    Ok(PatchGrid {
        patch_px: grid.patch_px,
        target_mag: grid.target_mag,
        coords: picked.iter().map(|&i| grid.coords[i]).collect(),
        tissue_frac: picked.iter().map(|&i| grid.tissue_frac[i]).collect(),
    })
}

/// Resizes a patch to the backbone input size and normalizes it channel-wise
/// with the ImageNet statistics. Output is CHW.
pub fn backbone_input(patch: &RgbImage) -> Vec<f32> {
    let side = BACKBONE_INPUT_PX;
    let resized = image::imageops::resize(patch, side, side, FilterType::Triangle);
    let plane = (side * side) as usize;
    let mut out = vec![0f32; 3 * plane];
    for (i, px) in resized.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = (px[c] as f32 / 255.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
        }
    }
    out
}
