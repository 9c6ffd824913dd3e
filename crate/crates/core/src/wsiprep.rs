//! Tissue segmentation and tile extraction on single-resolution RGB rasters.
//!
//! Pipeline: HSV saturation → Otsu (or manual) threshold → 7×7 median →
//! 4×4 closing → fill small enclosed holes → drop small components → grid
//! tiles of 512 px kept by tissue coverage, downsampled to 224 px by area
//! averaging.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WsiPrepConfig {
    pub manual_threshold: Option<u8>,
    pub median_kernel: usize,
    pub close_kernel: usize,
    /// Enclosed background regions smaller than this (px) are filled.
    pub min_hole_area: usize,
    /// Tissue components smaller than this (px) are removed.
    pub min_component_area: usize,
    pub tile_size: u32,
    pub min_tissue_fraction: f64,
    pub resize_to: u32,
}

impl Default for WsiPrepConfig {
    fn default() -> Self {
        Self {
            manual_threshold: None,
            median_kernel: 7,
            close_kernel: 4,
            min_hole_area: 16 * 16,
            min_component_area: 64 * 64,
            tile_size: 512,
            min_tissue_fraction: 0.5,
            resize_to: 224,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TissueMask {
    pub width: u32,
    pub height: u32,
    /// Row-major.
    pub bits: Vec<bool>,
    pub threshold_used: u8,
}

impl TissueMask {
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[(y * self.width + x) as usize]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileSet {
    pub source: String,
    pub image_width: u32,
    pub image_height: u32,
    pub tile_size: u32,
    pub threshold_used: u8,
    /// Top-left (x, y) of each kept tile, row-major grid order.
    pub coords: Vec<[u32; 2]>,
    pub tissue_fraction: Vec<f64>,
}

/// HSV saturation scaled to 0..=255: `round(255·(max − min)/max)`, 0 for black.
pub fn saturation(img: &RgbImage) -> Vec<u8> {
    img.pixels()
        .map(|Rgb([r, g, b])| {
            let mx = *r.max(g).max(b) as u32;
            let mn = *r.min(g).min(b) as u32;
            if mx == 0 {
                0
            } else {
                ((255 * (mx - mn) + mx / 2) / mx) as u8
            }
        })
        .collect()
}

/// Otsu threshold: the `t` maximizing between-class variance of the split
/// `{v ≤ t}` / `{v > t}`; ties go to the smallest `t`. A single-valued
/// histogram returns 0, so a uniformly saturated image is all tissue.
pub fn otsu_threshold(values: &[u8]) -> u8 {
    let mut hist = [0u64; 256];
    for &v in values {
        hist[v as usize] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let mut best = (f64::NEG_INFINITY, 0u8);
    let (mut w0, mut sum0) = (0.0, 0.0);
    for t in 0..255usize {
        w0 += hist[t] as f64;
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best.0 {
            best = (between, t as u8);
        }
    }
    if best.0 == f64::NEG_INFINITY {
        return 0;
    }
    best.1
}

/// Binary median with replicated borders: on iff at least half the
/// window (rounded up) is on.
pub fn median_filter(bits: &[bool], w: usize, h: usize, k: usize) -> Vec<bool> {
    let r = k / 2;
    let (pw, ph) = (w + 2 * r, h + 2 * r);
    // Summed-area table over the replicate-padded mask.
    let mut sat = vec![0u32; (pw + 1) * (ph + 1)];
    for py in 0..ph {
        let y = py.saturating_sub(r).min(h - 1);
        let mut row = 0u32;
        for px in 0..pw {
            let x = px.saturating_sub(r).min(w - 1);
            row += bits[y * w + x] as u32;
            sat[(py + 1) * (pw + 1) + px + 1] = sat[py * (pw + 1) + px + 1] + row;
        }
    }
    let need = (k * k).div_ceil(2) as u32;
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let (x0, y0, x1, y1) = (x, y, x + k, y + k);
            let s = sat[y1 * (pw + 1) + x1] + sat[y0 * (pw + 1) + x0]
                - sat[y0 * (pw + 1) + x1]
                - sat[y1 * (pw + 1) + x0];
            out[y * w + x] = s >= need;
        }
    }
    out
}

/// Offsets of a k×k square with its anchor at (k/2, k/2).
fn square_offsets(k: usize) -> std::ops::RangeInclusive<isize> {
    let lo = -((k / 2) as isize);
    lo..=lo + k as isize - 1
}

/// Separable max (`dilate = true`) or min filter over the square; pixels
/// outside the image are ignored. Dilation reflects the element.
fn morph(bits: &[bool], w: usize, h: usize, k: usize, dilate: bool) -> Vec<bool> {
    let offs: Vec<isize> = square_offsets(k).map(|o| if dilate { -o } else { o }).collect();
    let pass = |src: &[bool], horizontal: bool| -> Vec<bool> {
        let mut out = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = !dilate;
                for &o in &offs {
                    let (nx, ny) = if horizontal { (x as isize + o, y as isize) } else { (x as isize, y as isize + o) };
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let v = src[ny as usize * w + nx as usize];
                    if dilate {
                        acc |= v;
                    } else {
                        acc &= v;
                    }
                }
                out[y * w + x] = acc;
            }
        }
        out
    };
    pass(&pass(bits, true), false)
}

/// Dilation followed by erosion with a k×k square.
pub fn closing(bits: &[bool], w: usize, h: usize, k: usize) -> Vec<bool> {
    let d = morph(bits, w, h, k, true);
    morph(&d, w, h, k, false)
}

/// Labels connected regions of pixels equal to `value`; returns per-region
/// pixel lists and whether each touches the border.
fn components(bits: &[bool], w: usize, h: usize, value: bool, eight: bool) -> Vec<(Vec<usize>, bool)> {
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let n4: &[(isize, isize)] = &[(1, 0), (-1, 0), (0, 1), (0, -1)];
    let n8: &[(isize, isize)] = &[(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)];
    let nbrs = if eight { n8 } else { n4 };
    for start in 0..w * h {
        if seen[start] || bits[start] != value {
            continue;
        }
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        let mut pixels = Vec::new();
        let mut border = false;
        while let Some(p) = queue.pop_front() {
            pixels.push(p);
            let (x, y) = ((p % w) as isize, (p / w) as isize);
            if x == 0 || y == 0 || x == w as isize - 1 || y == h as isize - 1 {
                border = true;
            }
            for (dx, dy) in nbrs {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let q = ny as usize * w + nx as usize;
                if !seen[q] && bits[q] == value {
                    seen[q] = true;
                    queue.push_back(q);
                }
            }
        }
        out.push((pixels, border));
    }
    out
}

/// Fills background regions (4-connected) that do not touch the border and
/// are smaller than `max_area`.
pub fn fill_small_holes(bits: &mut [bool], w: usize, h: usize, max_area: usize) {
    for (pixels, border) in components(bits, w, h, false, false) {
        if !border && pixels.len() < max_area {
            for p in pixels {
                bits[p] = true;
            }
        }
    }
}

/// Removes tissue components (8-connected) smaller than `min_area`.
pub fn remove_small_components(bits: &mut [bool], w: usize, h: usize, min_area: usize) {
    for (pixels, _) in components(bits, w, h, true, true) {
        if pixels.len() < min_area {
            for p in pixels {
                bits[p] = false;
            }
        }
    }
}

pub fn tissue_mask(img: &RgbImage, cfg: &WsiPrepConfig) -> Result<TissueMask> {
    let (width, height) = img.dimensions();
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("image has zero area".into()));
    }
    let (w, h) = (width as usize, height as usize);
    let sat = saturation(img);
    let threshold = cfg.manual_threshold.unwrap_or_else(|| otsu_threshold(&sat));
    let raw: Vec<bool> = sat.iter().map(|&s| s > threshold).collect();
    let smoothed = median_filter(&raw, w, h, cfg.median_kernel);
    let mut bits = closing(&smoothed, w, h, cfg.close_kernel);
    fill_small_holes(&mut bits, w, h, cfg.min_hole_area);
    remove_small_components(&mut bits, w, h, cfg.min_component_area);
    Ok(TissueMask {
        width,
        height,
        bits,
        threshold_used: threshold,
    })
}

/// Non-overlapping grid from (0, 0); partial edge tiles are discarded and a
/// tile is kept iff its mask coverage ≥ `min_fraction`.
pub fn extract_tiles(mask: &TissueMask, tile_size: u32, min_fraction: f64) -> (Vec<[u32; 2]>, Vec<f64>) {
    let (w, h) = (mask.width as usize, mask.height as usize);
    let t = tile_size as usize;
    let mut coords = Vec::new();
    let mut fracs = Vec::new();
    if t == 0 {
        return (coords, fracs);
    }
    for ty in 0..h / t {
        for tx in 0..w / t {
            let mut on = 0usize;
            for y in ty * t..(ty + 1) * t {
                on += mask.bits[y * w + tx * t..y * w + (tx + 1) * t].iter().filter(|&&b| b).count();
            }
            let f = on as f64 / (t * t) as f64;
            if f >= min_fraction {
                coords.push([(tx * t) as u32, (ty * t) as u32]);
                fracs.push(f);
            }
        }
    }
    (coords, fracs)
}

/// `out × input` matrix of area-overlap weights, rows summing to one.
fn area_weights(input: usize, out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = input as f64 / out as f64;
    (0..out)
        .map(|o| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            (lo.floor() as usize..(hi.ceil() as usize).min(input))
                .filter_map(|i| {
                    let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    (overlap > 0.0).then_some((i, overlap / scale))
                })
                .collect()
        })
        .collect()
}

/// Area-averaging resample to `out_w × out_h`.
pub fn resize_area(img: &RgbImage, out_w: u32, out_h: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    let wx = area_weights(w as usize, out_w as usize);
    let wy = area_weights(h as usize, out_h as usize);
    // Horizontal pass into f64 rows, then vertical.
    let mut tmp = vec![[0.0f64; 3]; out_w as usize * h as usize];
    for y in 0..h as usize {
        for (ox, ws) in wx.iter().enumerate() {
            let mut acc = [0.0; 3];
            for &(x, wt) in ws {
                let p = img.get_pixel(x as u32, y as u32).0;
                for c in 0..3 {
                    acc[c] += wt * p[c] as f64;
                }
            }
            tmp[y * out_w as usize + ox] = acc;
        }
    }
    RgbImage::from_fn(out_w, out_h, |ox, oy| {
        let mut acc = [0.0; 3];
        for &(y, wt) in &wy[oy as usize] {
            let p = tmp[y * out_w as usize + ox as usize];
            for c in 0..3 {
                acc[c] += wt * p[c];
            }
        }
        Rgb(acc.map(|v| v.round().clamp(0.0, 255.0) as u8))
    })
}

/// 512×512 → 224×224 area-averaged tile.
pub fn resize_tile(tile: &RgbImage) -> Result<RgbImage> {
    if tile.dimensions() != (512, 512) {
        return Err(Error::InvalidArgument(format!(
            "tile must be 512x512, got {:?}",
            tile.dimensions()
        )));
    }
    Ok(resize_area(tile, 224, 224))
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    Ok(reader.decode()?.to_rgb8())
}

/// Segments and tiles one image.
pub fn tile_image(img: &RgbImage, source: &str, cfg: &WsiPrepConfig) -> Result<TileSet> {
    let mask = tissue_mask(img, cfg)?;
    let (coords, tissue_fraction) = extract_tiles(&mask, cfg.tile_size, cfg.min_tissue_fraction);
    Ok(TileSet {
        source: source.to_string(),
        image_width: mask.width,
        image_height: mask.height,
        tile_size: cfg.tile_size,
        threshold_used: mask.threshold_used,
        coords,
        tissue_fraction,
    })
}

/// Writes each tile of `set`, resized to `cfg.resize_to`, as
/// `<stem>_<x>_<y>.png` under `dir`.
pub fn write_tiles(img: &RgbImage, set: &TileSet, stem: &str, dir: &Path, cfg: &WsiPrepConfig) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    set.coords
        .iter()
        .map(|&[x, y]| {
            let crop = image::imageops::crop_imm(img, x, y, set.tile_size, set.tile_size).to_image();
            let out = resize_area(&crop, cfg.resize_to, cfg.resize_to);
            let p = dir.join(format!("{stem}_{x}_{y}.png"));
            out.save(&p)?;
            Ok(p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const RED: Rgb<u8> = Rgb([255, 0, 0]);
    const WHITE: Rgb<u8> = Rgb([255, 255, 255]);

    /// Exhaustive Otsu: evaluates every threshold from the definition.
    fn otsu_oracle(values: &[u8]) -> u8 {
        let n = values.len() as f64;
        let mut best = (f64::NEG_INFINITY, 0u8);
        for t in 0..=254u8 {
            let (lo, hi): (Vec<f64>, Vec<f64>) = (
                values.iter().filter(|&&v| v <= t).map(|&v| v as f64).collect(),
                values.iter().filter(|&&v| v > t).map(|&v| v as f64).collect(),
            );
            if lo.is_empty() || hi.is_empty() {
                continue;
            }
            let m0 = lo.iter().sum::<f64>() / lo.len() as f64;
            let m1 = hi.iter().sum::<f64>() / hi.len() as f64;
            let var = (lo.len() as f64 / n) * (hi.len() as f64 / n) * (m0 - m1).powi(2);
            if var > best.0 * (1.0 + 1e-12) {
                best = (var, t);
            }
        }
        best.1
    }

    fn brute_closing(bits: &[bool], w: usize, h: usize, k: usize) -> Vec<bool> {
        let offs: Vec<isize> = square_offsets(k).collect();
        let at = |b: &[bool], x: isize, y: isize| -> Option<bool> {
            (x >= 0 && y >= 0 && x < w as isize && y < h as isize).then(|| b[y as usize * w + x as usize])
        };
        let mut d = vec![false; w * h];
        for y in 0..h as isize {
            for x in 0..w as isize {
                d[y as usize * w + x as usize] = offs
                    .iter()
                    .flat_map(|&dy| offs.iter().map(move |&dx| (dx, dy)))
                    .any(|(dx, dy)| at(bits, x - dx, y - dy) == Some(true));
            }
        }
        let mut e = vec![false; w * h];
        for y in 0..h as isize {
            for x in 0..w as isize {
                e[y as usize * w + x as usize] = offs
                    .iter()
                    .flat_map(|&dy| offs.iter().map(move |&dx| (dx, dy)))
                    .all(|(dx, dy)| at(&d, x + dx, y + dy) != Some(false));
            }
        }
        e
    }

    #[test]
    fn blank_image_has_empty_mask_and_no_tiles() {
        let img = RgbImage::from_pixel(600, 600, WHITE);
        let set = tile_image(&img, "blank", &WsiPrepConfig::default()).unwrap();
        assert!(set.coords.is_empty());
        assert_eq!(tissue_mask(&img, &WsiPrepConfig::default()).unwrap().count(), 0);
    }

    #[test]
    fn full_tissue_image_yields_four_tiles() {
        let img = RgbImage::from_pixel(1200, 1200, RED);
        let set = tile_image(&img, "full", &WsiPrepConfig::default()).unwrap();
        assert_eq!(set.coords, vec![[0, 0], [512, 0], [0, 512], [512, 512]]);
        assert!(set.tissue_fraction.iter().all(|&f| f == 1.0));
    }

    #[test]
    fn half_red_image_masks_red_half() {
        let (w, h) = (300u32, 200u32);
        let img = RgbImage::from_fn(w, h, |x, _| if x < w / 2 { RED } else { WHITE });
        let sat = saturation(&img);
        assert_eq!(otsu_threshold(&sat), otsu_oracle(&sat));
        let mask = tissue_mask(&img, &WsiPrepConfig::default()).unwrap();
        for y in 0..h {
            for x in 0..w {
                let d = (x as i64 - (w / 2) as i64).abs();
                if d > 7 {
                    assert_eq!(mask.get(x, y), x < w / 2, "({x}, {y})");
                }
            }
        }
    }

    #[test]
    fn closing_fills_one_pixel_hole() {
        let (w, h) = (12, 12);
        let mut bits = vec![false; w * h];
        for y in 2..10 {
            for x in 2..10 {
                bits[y * w + x] = true;
            }
        }
        bits[5 * w + 6] = false;
        let c = closing(&bits, w, h, 4);
        assert!(c[5 * w + 6]);
        assert_eq!(c, brute_closing(&bits, w, h, 4));
    }

    #[test]
    fn half_coverage_tile_is_kept() {
        let mut bits = vec![false; 512 * 512];
        for y in 0..256 {
            for x in 0..512 {
                bits[y * 512 + x] = true;
            }
        }
        let mask = TissueMask { width: 512, height: 512, bits, threshold_used: 0 };
        assert_eq!(extract_tiles(&mask, 512, 0.5).0, vec![[0, 0]]);
        assert!(extract_tiles(&mask, 512, 0.51).0.is_empty());
    }

    #[test]
    fn hole_and_component_size_rules() {
        let (w, h) = (200, 200);
        let mut bits = vec![false; w * h];
        for y in 20..180 {
            for x in 20..180 {
                bits[y * w + x] = true;
            }
        }
        // 10×10 hole (100 px) is filled, 20×20 hole (400 px) is kept.
        for y in 40..50 {
            for x in 40..50 {
                bits[y * w + x] = false;
            }
        }
        for y in 100..120 {
            for x in 100..120 {
                bits[y * w + x] = false;
            }
        }
        // A 30×30 speck is removed.
        let mut speck = bits.clone();
        for y in 185..195 {
            for x in 0..10 {
                speck[y * w + x] = true;
            }
        }
        fill_small_holes(&mut speck, w, h, 256);
        remove_small_components(&mut speck, w, h, 4096);
        assert!(speck[45 * w + 45]);
        assert!(!speck[110 * w + 110]);
        assert!(!speck[190 * w + 5]);
    }

    #[test]
    fn resize_constant_and_two_tone() {
        let c = RgbImage::from_pixel(512, 512, Rgb([10, 200, 77]));
        let r = resize_tile(&c).unwrap();
        assert!(r.pixels().all(|p| *p == Rgb([10, 200, 77])));
        assert!(resize_tile(&RgbImage::new(500, 512)).is_err());

        let bw = RgbImage::from_fn(512, 512, |x, _| if x < 256 { Rgb([0; 3]) } else { Rgb([255; 3]) });
        let r = resize_tile(&bw).unwrap();
        // The edge at 256 maps onto output column boundary 112 exactly.
        assert!((0..112).all(|x| r.get_pixel(x, 0).0[0] <= 8));
        assert!((112..224).all(|x| r.get_pixel(x, 0).0[0] >= 247));

        // An edge at 258 falls inside output column 112 (input 256..258.29).
        let off = RgbImage::from_fn(512, 512, |x, _| if x < 258 { Rgb([0; 3]) } else { Rgb([255; 3]) });
        let r = resize_tile(&off).unwrap();
        let scale = 512.0 / 224.0;
        let expect = ((113.0 * scale - 258.0) / scale * 255.0f64).round() as u8;
        let mid = r.get_pixel(112, 0).0[0];
        assert_eq!(mid, expect);
        assert!(mid > 8 && mid < 247);
    }

    #[test]
    fn resize_preserves_mean() {
        let img = RgbImage::from_fn(512, 512, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, ((x * y) % 251) as u8]));
        let r = resize_tile(&img).unwrap();
        for c in 0..3 {
            let mi = img.pixels().map(|p| p.0[c] as f64).sum::<f64>() / (512.0 * 512.0);
            let mo = r.pixels().map(|p| p.0[c] as f64).sum::<f64>() / (224.0 * 224.0);
            assert!((mi - mo).abs() <= 1.0, "channel {c}: {mi} vs {mo}");
        }
    }

    proptest! {
        #[test]
        fn otsu_matches_exhaustive_search(values in proptest::collection::vec(any::<u8>(), 2..200)) {
            let mut distinct = values.clone();
            distinct.sort();
            distinct.dedup();
            prop_assume!(distinct.len() > 1);
            prop_assert_eq!(otsu_threshold(&values), otsu_oracle(&values));
        }

        #[test]
        fn closing_matches_brute_force(bits in proptest::collection::vec(any::<bool>(), 100)) {
            prop_assert_eq!(closing(&bits, 10, 10, 4), brute_closing(&bits, 10, 10, 4));
        }

        #[test]
        fn tiles_are_unique_aligned_and_in_bounds(w in 1u32..1600, h in 1u32..1600, frac in 0.0f64..1.0) {
            let mask = TissueMask { width: w, height: h, bits: vec![true; (w * h) as usize], threshold_used: 0 };
            let (coords, fr) = extract_tiles(&mask, 512, frac);
            prop_assert_eq!(coords.len(), ((w / 512) * (h / 512)) as usize);
            let mut seen = std::collections::HashSet::new();
            for ([x, y], f) in coords.iter().zip(fr) {
                prop_assert!(x % 512 == 0 && y % 512 == 0 && x + 512 <= w && y + 512 <= h);
                prop_assert!(seen.insert((*x, *y)));
                prop_assert!((0.0..=1.0).contains(&f));
            }
        }

        #[test]
        fn mask_is_stable_on_reapplication(cuts in proptest::collection::vec(70u32..120, 1..4)) {
            // Vertical bands are fixed points of the median and closing steps.
            let mut edges = vec![0u32];
            for c in &cuts {
                edges.push(edges.last().unwrap() + c);
            }
            let w = *edges.last().unwrap();
            let h = 80;
            let img = RgbImage::from_fn(w, h, |x, _| {
                let band = edges.iter().filter(|&&e| e <= x).count();
                if band % 2 == 1 { RED } else { WHITE }
            });
            let cfg = WsiPrepConfig { manual_threshold: Some(127), ..Default::default() };
            let m1 = tissue_mask(&img, &cfg).unwrap();
            let rendered = RgbImage::from_fn(w, h, |x, y| if m1.get(x, y) { RED } else { WHITE });
            let m2 = tissue_mask(&rendered, &cfg).unwrap();
            prop_assert_eq!(m1, m2);
        }
    }
}
