//! Character-structure masks from synthetic images.
//!
//! Each box is cropped to the pixels its quad covers, those pixels are split
//! into two grayscale clusters with Lloyd's algorithm, and the cluster that
//! occupies less of the box's one-pixel boundary ring is taken as the glyph.
//! The per-box glyph pixels are OR-ed into an all-zero mask.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{quad_spans, QuadBox};
use crate::raster::{BinaryMask, Image, Raster};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlyphParams {
    pub kmeans_max_iters: usize,
    /// Stop once neither centroid moves by this many intensity levels.
    pub kmeans_tol: f64,
    /// Boxes whose intensity range is below this are skipped.
    pub min_intensity_range: u8,
    /// When the two clusters' boundary shares differ by no more than this,
    /// the smaller cluster is taken as the glyph instead.
    pub border_vote_margin: f64,
}

impl Default for GlyphParams {
    fn default() -> Self {
        Self {
            kmeans_max_iters: 20,
            kmeans_tol: 0.5,
            min_intensity_range: 8,
            border_vote_margin: 0.0,
        }
    }
}

impl GlyphParams {
    pub fn validate(&self) -> Result<()> {
        if self.kmeans_max_iters == 0 {
            return Err(Error::Config("kmeans_max_iters must be >= 1".into()));
        }
        if !(self.kmeans_tol >= 0.0) || !(self.border_vote_margin >= 0.0) {
            return Err(Error::Config("glyph tolerances must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoMeans {
    pub labels: Vec<u8>,
    pub centroids: [f64; 2],
    pub iterations: usize,
}

/// Two-cluster Lloyd's algorithm on 8-bit intensities.
///
/// Centroids start at the minimum and maximum observed values and are kept
/// as exact sum/count ratios, so inverting every intensity mirrors the whole
/// run. Each value is assigned to the nearer centroid. A value exactly midway
/// goes to the cluster with more strictly nearer values, or to centroid 0 when
/// those counts are equal too. Iteration stops when both centroids move less
/// than `kmeans_tol` or after `kmeans_max_iters` updates. `values` must be
/// non-empty.
pub fn kmeans2(values: &[u8], params: &GlyphParams) -> TwoMeans {
    assert!(!values.is_empty(), "kmeans2 needs at least one value");
    let mut hist = [0u64; 256];
    for &v in values {
        hist[v as usize] += 1;
    }
    let (lo, hi) = intensity_range(&hist).expect("non-empty histogram");
    let mut c = [Centroid::at(lo), Centroid::at(hi)];
    let mut iterations = 0;
    for _ in 0..params.kmeans_max_iters {
        iterations += 1;
        let assign = Assignment::new(&hist, c);
        let mut next = c;
        for (k, centroid) in next.iter_mut().enumerate() {
            let (sum, count) = hist
                .iter()
                .enumerate()
                .filter(|&(v, &n)| n > 0 && assign.of(v as u8) == k)
                .fold((0u64, 0u64), |(s, m), (v, &n)| (s + v as u64 * n, m + n));
            if count > 0 {
                *centroid = Centroid { sum, count };
            }
        }
        let shift = (next[0].value() - c[0].value()).abs().max((next[1].value() - c[1].value()).abs());
        c = next;
        if shift < params.kmeans_tol {
            break;
        }
    }
    let assign = Assignment::new(&hist, c);
    let labels = values.iter().map(|&v| assign.of(v) as u8).collect();
    TwoMeans {
        labels,
        centroids: [c[0].value(), c[1].value()],
        iterations,
    }
}

/// Centroid `sum / count` held exactly.
#[derive(Debug, Clone, Copy)]
struct Centroid {
    sum: u64,
    count: u64,
}

impl Centroid {
    fn at(v: u8) -> Self {
        Self { sum: u64::from(v), count: 1 }
    }

    fn value(self) -> f64 {
        self.sum as f64 / self.count as f64
    }

    /// `|v - centroid|` scaled by `count`.
    fn scaled_distance(self, v: u8) -> i128 {
        (i128::from(v) * i128::from(self.count) - i128::from(self.sum)).abs()
    }
}

/// Nearest-centroid assignment of every intensity with the midpoint rule.
struct Assignment {
    /// `Some(k)` for values strictly nearer centroid `k`, `None` at the midpoint.
    nearer: [Option<usize>; 256],
    midpoint_cluster: usize,
}

impl Assignment {
    fn new(hist: &[u64; 256], c: [Centroid; 2]) -> Self {
        let mut nearer = [None; 256];
        let mut strict = [0u64; 2];
        for (v, slot) in nearer.iter_mut().enumerate() {
            // Cross-multiplied so the comparison is exact.
            let d0 = c[0].scaled_distance(v as u8) * i128::from(c[1].count);
            let d1 = c[1].scaled_distance(v as u8) * i128::from(c[0].count);
            *slot = match d0.cmp(&d1) {
                std::cmp::Ordering::Less => Some(0),
                std::cmp::Ordering::Greater => Some(1),
                std::cmp::Ordering::Equal => None,
            };
            if let Some(k) = *slot {
                strict[k] += hist[v];
            }
        }
        Self {
            nearer,
            midpoint_cluster: usize::from(strict[1] > strict[0]),
        }
    }

    fn of(&self, v: u8) -> usize {
        self.nearer[v as usize].unwrap_or(self.midpoint_cluster)
    }
}

fn intensity_range(hist: &[u64; 256]) -> Option<(u8, u8)> {
    let lo = hist.iter().position(|&n| n > 0)?;
    let hi = hist.iter().rposition(|&n| n > 0)?;
    Some((lo as u8, hi as u8))
}

/// Outcome for a single box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxStatus {
    Clustered,
    /// The quad covers no pixel center.
    EmptyArea,
    /// Intensity range below `min_intensity_range`.
    FlatIntensity,
}

impl BoxStatus {
    pub fn is_skipped(self) -> bool {
        self != BoxStatus::Clustered
    }
}

/// Glyph pixels of one box as flat indices `y * width + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxGlyphs {
    pub status: BoxStatus,
    pub pixels: Vec<usize>,
}

/// Picks the glyph cluster from per-cluster counts on the boundary ring and overall.
fn glyph_cluster(ring: [usize; 2], total: [usize; 2], margin: f64) -> u8 {
    let ring_total = (ring[0] + ring[1]).max(1) as f64;
    let share = [ring[0] as f64 / ring_total, ring[1] as f64 / ring_total];
    if (share[0] - share[1]).abs() > margin {
        return u8::from(share[1] < share[0]);
    }
    // Text is usually the minority of a box.
    u8::from(total[1] < total[0])
}

/// Glyph pixels inside one quad of a grayscale image.
pub fn box_glyph_pixels(gray: &Image, quad: &QuadBox, params: &GlyphParams) -> BoxGlyphs {
    debug_assert_eq!(gray.channels(), 1);
    let (w, h) = gray.dims();
    let spans = quad_spans(quad, w, h);
    if spans.is_empty() {
        return BoxGlyphs {
            status: BoxStatus::EmptyArea,
            pixels: Vec::new(),
        };
    }

    // Local occupancy grid over the spans' bounding rectangle.
    let y0 = spans.first().map(|s| s.y).unwrap_or(0);
    let y1 = spans.last().map(|s| s.y).unwrap_or(0);
    let x0 = spans.iter().map(|s| s.x0).min().unwrap_or(0);
    let x1 = spans.iter().map(|s| s.x1).max().unwrap_or(0);
    let (lw, lh) = (x1 - x0 + 1, y1 - y0 + 1);
    let mut inside = vec![false; lw * lh];
    let mut indices = Vec::new();
    let mut values = Vec::new();
    let data = gray.data();
    for s in &spans {
        for x in s.x0..=s.x1 {
            inside[(s.y - y0) * lw + (x - x0)] = true;
            let idx = s.y * w + x;
            indices.push(idx);
            values.push(data[idx]);
        }
    }

    let lo = *values.iter().min().expect("non-empty");
    let hi = *values.iter().max().expect("non-empty");
    if hi - lo < params.min_intensity_range || hi == lo {
        return BoxGlyphs {
            status: BoxStatus::FlatIntensity,
            pixels: Vec::new(),
        };
    }

    let clusters = kmeans2(&values, params);
    let occupied = |lx: isize, ly: isize| -> bool {
        lx >= 0 && ly >= 0 && (lx as usize) < lw && (ly as usize) < lh && inside[ly as usize * lw + lx as usize]
    };
    let mut ring = [0usize; 2];
    let mut total = [0usize; 2];
    for (&idx, &label) in indices.iter().zip(&clusters.labels) {
        total[label as usize] += 1;
        let lx = (idx % w - x0) as isize;
        let ly = (idx / w - y0) as isize;
        let on_ring = !occupied(lx - 1, ly)
            || !occupied(lx + 1, ly)
            || !occupied(lx, ly - 1)
            || !occupied(lx, ly + 1);
        if on_ring {
            ring[label as usize] += 1;
        }
    }
    let glyph = glyph_cluster(ring, total, params.border_vote_margin);
    let pixels = indices
        .into_iter()
        .zip(clusters.labels)
        .filter_map(|(idx, l)| (l == glyph).then_some(idx))
        .collect();
    BoxGlyphs {
        status: BoxStatus::Clustered,
        pixels,
    }
}

/// Full-image fragment for one box; any number of channels accepted.
pub fn glyph_mask_for_box(img: &Image, quad: &QuadBox, params: &GlyphParams) -> (BinaryMask, BoxStatus) {
    let gray = img.to_grayscale();
    let glyphs = box_glyph_pixels(&gray, quad, params);
    let mut bits = vec![0u8; img.width() * img.height()];
    for idx in glyphs.pixels {
        bits[idx] = 1;
    }
    let mask = BinaryMask::from_bits(img.width(), img.height(), bits).expect("shape");
    (mask, glyphs.status)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlyphMaskReport {
    pub mask: BinaryMask,
    pub boxes_processed: usize,
    pub boxes_skipped_degenerate: usize,
    pub glyph_pixel_fraction: f64,
}

/// Counters of a [`GlyphMaskReport`], as written next to extracted masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlyphMaskCounters {
    pub boxes_processed: usize,
    pub boxes_skipped_degenerate: usize,
    pub glyph_pixel_fraction: f64,
}

impl GlyphMaskReport {
    pub fn counters(&self) -> GlyphMaskCounters {
        GlyphMaskCounters {
            boxes_processed: self.boxes_processed,
            boxes_skipped_degenerate: self.boxes_skipped_degenerate,
            glyph_pixel_fraction: self.glyph_pixel_fraction,
        }
    }
}

/// Union of per-box glyph fragments. Boxes are clustered in parallel.
pub fn build_glyph_mask(img: &Image, boxes: &[QuadBox], params: &GlyphParams) -> GlyphMaskReport {
    let gray = img.to_grayscale();
    let per_box: Vec<BoxGlyphs> = boxes
        .par_iter()
        .map(|q| box_glyph_pixels(&gray, q, params))
        .collect();
    merge_fragments(img.width(), img.height(), &per_box)
}

/// Sequential variant of [`build_glyph_mask`] for callers already running on a worker.
pub fn build_glyph_mask_serial(img: &Image, boxes: &[QuadBox], params: &GlyphParams) -> GlyphMaskReport {
    glyph_mask_from_gray(&img.to_grayscale(), boxes, params)
}

/// Sequential glyph mask of an already grayscale image.
pub fn glyph_mask_from_gray(gray: &Image, boxes: &[QuadBox], params: &GlyphParams) -> GlyphMaskReport {
    debug_assert_eq!(gray.channels(), 1);
    let per_box: Vec<BoxGlyphs> = boxes
        .iter()
        .map(|q| box_glyph_pixels(gray, q, params))
        .collect();
    merge_fragments(gray.width(), gray.height(), &per_box)
}

fn merge_fragments(width: usize, height: usize, per_box: &[BoxGlyphs]) -> GlyphMaskReport {
    let mut bits = vec![0u8; width * height];
    let mut processed = 0;
    let mut skipped = 0;
    for frag in per_box {
        if frag.status.is_skipped() {
            skipped += 1;
        } else {
            processed += 1;
        }
        for &idx in &frag.pixels {
            bits[idx] = 1;
        }
    }
    let mask = BinaryMask::from_bits(width, height, bits).expect("shape");
    let glyph_pixel_fraction = mask.fraction();
    GlyphMaskReport {
        mask,
        boxes_processed: processed,
        boxes_skipped_degenerate: skipped,
        glyph_pixel_fraction,
    }
}

/// Baseline: cluster every pixel of the image at once and vote with the image border.
pub fn whole_image_glyph_mask(img: &Image, params: &GlyphParams) -> BinaryMask {
    let (w, h) = img.dims();
    let full = QuadBox::rect(0.0, 0.0, (w - 1) as f64, (h - 1) as f64);
    if w < 2 || h < 2 {
        return BinaryMask::zeros(w, h);
    }
    glyph_mask_for_box(img, &full, params).0
}

/// Pixel accuracy of `mask` against `ground_truth`, counted over `region` only.
pub fn eval_glyph_mask(mask: &BinaryMask, ground_truth: &BinaryMask, region: &BinaryMask) -> Result<f64> {
    mask.ensure_same_dims(ground_truth.dims())?;
    mask.ensure_same_dims(region.dims())?;
    let mut matches = 0usize;
    let mut size = 0usize;
    for ((&m, &g), &r) in mask.bits().iter().zip(ground_truth.bits()).zip(region.bits()) {
        if r != 0 {
            size += 1;
            matches += usize::from(m == g);
        }
    }
    if size == 0 {
        return Err(Error::EmptyRegion);
    }
    Ok(matches as f64 / size as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::label_map;

    /// Optimal 2-partition of sorted values by exhaustive threshold search.
    fn best_threshold_split(values: &[u8]) -> Vec<u8> {
        let mut sorted = values.to_vec();
        sorted.sort_unstable();
        let sse = |s: &[u8]| {
            if s.is_empty() {
                return 0.0;
            }
            let m = s.iter().map(|&v| v as f64).sum::<f64>() / s.len() as f64;
            s.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>()
        };
        let mut best = (f64::INFINITY, 0u8);
        for cut in 1..sorted.len() {
            let cost = sse(&sorted[..cut]) + sse(&sorted[cut..]);
            if cost < best.0 {
                best = (cost, sorted[cut - 1]);
            }
        }
        values.iter().map(|&v| u8::from(v > best.1)).collect()
    }

    #[test]
    fn two_point_symmetry() {
        let r = kmeans2(&[0, 0, 255, 255], &GlyphParams::default());
        assert_eq!(r.labels, vec![0, 0, 1, 1]);
        assert_eq!(r.centroids, [0.0, 255.0]);
    }

    #[test]
    fn split_matches_exhaustive_partition() {
        let values = [10, 12, 200, 205, 210];
        let r = kmeans2(&values, &GlyphParams::default());
        assert_eq!(r.labels, vec![0, 0, 1, 1, 1]);
        assert_eq!(r.labels, best_threshold_split(&values));
        assert_eq!(r.centroids, [11.0, 205.0]);
    }

    #[test]
    fn single_iteration_cap_is_respected() {
        let params = GlyphParams {
            kmeans_max_iters: 1,
            ..Default::default()
        };
        let r = kmeans2(&[0, 10, 20, 30, 100, 240, 250], &params);
        assert_eq!(r.iterations, 1);
    }

    /// 12x12 image, white background, dark "T" glyph inside box (1,1)-(10,10).
    fn t_fixture() -> (Image, QuadBox, BinaryMask) {
        let (w, h) = (12, 12);
        let glyph = BinaryMask::from_fn(w, h, |x, y| {
            (y == 3 && (3..=8).contains(&x)) || (x == 5 && (3..=8).contains(&y)) || (x == 6 && (3..=8).contains(&y))
        });
        let data = (0..w * h)
            .map(|i| if glyph.bits()[i] == 1 { 30 } else { 225 })
            .collect();
        let img = Image::new(w, h, 1, data).unwrap();
        (img, QuadBox::rect(1.0, 1.0, 10.0, 10.0), glyph)
    }

    #[test]
    fn dark_text_on_light_background() {
        let (img, quad, glyph) = t_fixture();
        let (frag, status) = glyph_mask_for_box(&img, &quad, &GlyphParams::default());
        assert_eq!(status, BoxStatus::Clustered);
        assert_eq!(frag, glyph);
    }

    #[test]
    fn inverted_polarity_selects_same_pixels() {
        let (img, quad, glyph) = t_fixture();
        let (frag, _) = glyph_mask_for_box(&img.inverted(), &quad, &GlyphParams::default());
        assert_eq!(frag, glyph);
    }

    #[test]
    fn midpoint_goes_to_the_larger_cluster_in_either_polarity() {
        let values = [0, 0, 0, 10, 20];
        let inverted: Vec<u8> = values.iter().map(|v| 255 - v).collect();
        let params = GlyphParams::default();
        let a = kmeans2(&values, &params);
        let b = kmeans2(&inverted, &params);
        assert_eq!(a.labels, vec![0, 0, 0, 0, 1]);
        assert_eq!(b.labels, vec![1, 1, 1, 1, 0]);
        assert_eq!(a.centroids, [2.5, 20.0]);
    }

    #[test]
    fn uniform_box_is_skipped() {
        let img = Image::filled(8, 8, &[90]).unwrap();
        let report = build_glyph_mask(&img, &[QuadBox::rect(1.0, 1.0, 6.0, 6.0)], &GlyphParams::default());
        assert!(report.mask.is_empty());
        assert_eq!(report.boxes_skipped_degenerate, 1);
        assert_eq!(report.boxes_processed, 0);
    }

    #[test]
    fn low_range_box_is_skipped() {
        let data = (0..64).map(|i| 100 + (i % 7) as u8).collect();
        let img = Image::new(8, 8, 1, data).unwrap();
        let (frag, status) = glyph_mask_for_box(&img, &QuadBox::rect(0.0, 0.0, 7.0, 7.0), &GlyphParams::default());
        assert_eq!(status, BoxStatus::FlatIntensity);
        assert!(frag.is_empty());
    }

    #[test]
    fn empty_box_list_gives_zero_mask() {
        let (img, _, _) = t_fixture();
        let report = build_glyph_mask(&img, &[], &GlyphParams::default());
        assert!(report.mask.is_empty());
        assert_eq!(report.glyph_pixel_fraction, 0.0);
    }

    #[test]
    fn disjoint_boxes_union_of_fragments() {
        let (left, q, _) = t_fixture();
        // Place two T fixtures side by side.
        let mut data = Vec::new();
        for y in 0..12 {
            for x in 0..24 {
                let v = left.pixel(x % 12, y)[0];
                data.push(if x >= 12 { 255 - v } else { v });
            }
        }
        let img = Image::new(24, 12, 1, data).unwrap();
        let q2 = QuadBox::rect(13.0, 1.0, 22.0, 10.0);
        let params = GlyphParams::default();
        let report = build_glyph_mask(&img, &[q, q2], &params);
        let mut expected = glyph_mask_for_box(&img, &q, &params).0;
        expected.or_assign(&glyph_mask_for_box(&img, &q2, &params).0).unwrap();
        assert_eq!(report.mask, expected);
        assert_eq!(report.boxes_processed, 2);
        assert!(report.mask.is_subset_of(&label_map(&[q, q2], 24, 12)));
        assert_eq!(report.mask, build_glyph_mask_serial(&img, &[q2, q], &params).mask);
    }

    #[test]
    fn eval_accuracy_cases() {
        let gt = BinaryMask::from_fn(4, 4, |x, y| (x + y) % 2 == 0);
        let region = BinaryMask::from_fn(4, 4, |x, y| x < 2 && y < 2);
        assert_eq!(eval_glyph_mask(&gt, &gt, &region).unwrap(), 1.0);
        assert_eq!(eval_glyph_mask(&gt.not(), &gt, &region).unwrap(), 0.0);
        // 2x2 region, one mismatching pixel out of... flip two of four -> 0.5.
        let mut half = gt.clone();
        half.set(0, 0, !gt.get(0, 0));
        half.set(1, 0, !gt.get(1, 0));
        assert_eq!(eval_glyph_mask(&half, &gt, &region).unwrap(), 0.5);
        assert!(matches!(
            eval_glyph_mask(&gt, &gt, &BinaryMask::zeros(4, 4)),
            Err(Error::EmptyRegion)
        ));
        assert!(eval_glyph_mask(&gt, &BinaryMask::zeros(3, 4), &region).is_err());
    }

    #[test]
    fn ring_vote_tie_falls_back_to_minority() {
        assert_eq!(glyph_cluster([4, 4], [10, 30], 0.0), 0);
        assert_eq!(glyph_cluster([4, 4], [30, 10], 0.0), 1);
        assert_eq!(glyph_cluster([1, 9], [30, 10], 0.0), 0);
        // Within the margin the minority rule decides.
        assert_eq!(glyph_cluster([4, 6], [30, 10], 0.25), 1);
    }
}
