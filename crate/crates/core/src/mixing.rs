//! Masked compositing: glyph-level inter-domain mixing, text-balanced
//! intra-domain mixing, their composition, and the Mixup / CutMix / ClassMix
//! baselines.
//!
//! Every composite is `m * a + (1 - m) * b` with a binary `m`, so each output
//! sample is copied bit-exactly from one of the two sources.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, Image, Raster};
use crate::rng::Rng;

/// Where a mixed pixel came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Source {
    Real1 = 0,
    Real2 = 1,
    Synth = 2,
}

impl Source {
    /// Gray level used when a provenance map is written as PNG.
    pub fn gray_level(self) -> u8 {
        match self {
            Source::Real1 => 0,
            Source::Real2 => 128,
            Source::Synth => 255,
        }
    }

    pub fn from_gray_level(v: u8) -> Option<Source> {
        match v {
            0 => Some(Source::Real1),
            128 => Some(Source::Real2),
            255 => Some(Source::Synth),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ProvenanceMap {
    width: usize,
    height: usize,
    tags: Vec<Source>,
}

impl ProvenanceMap {
    pub fn uniform(width: usize, height: usize, source: Source) -> Self {
        Self {
            width,
            height,
            tags: vec![source; width * height],
        }
    }

    pub fn tags(&self) -> &[Source] {
        &self.tags
    }

    pub fn get(&self, x: usize, y: usize) -> Source {
        self.tags[y * self.width + x]
    }

    /// Mask of the pixels tagged `source`.
    pub fn mask_of(&self, source: Source) -> BinaryMask {
        let bits = self.tags.iter().map(|&t| u8::from(t == source)).collect();
        BinaryMask::from_bits(self.width, self.height, bits).expect("shape")
    }

    pub fn to_image(&self) -> Image {
        let data = self.tags.iter().map(|t| t.gray_level()).collect();
        Image::new(self.width, self.height, 1, data).expect("shape")
    }

    pub fn from_image(img: &Image) -> Result<Self> {
        if img.channels() != 1 {
            return Err(Error::ChannelMismatch {
                expected: 1,
                got: img.channels(),
            });
        }
        let tags = img
            .data()
            .iter()
            .map(|&v| {
                Source::from_gray_level(v)
                    .ok_or_else(|| Error::InvalidRaster(format!("provenance level {v}")))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            width: img.width(),
            height: img.height(),
            tags,
        })
    }
}

impl Raster for ProvenanceMap {
    type Sample = Source;

    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
    fn samples_per_pixel(&self) -> usize {
        1
    }
    fn samples(&self) -> &[Source] {
        &self.tags
    }
    fn with_samples(&self, samples: Vec<Source>) -> Self {
        ProvenanceMap {
            tags: samples,
            ..*self
        }
    }
}

/// `m * a + (1 - m) * b`, per pixel and for all channels of that pixel.
pub fn masked_compose<R: Raster>(a: &R, b: &R, m: &BinaryMask) -> Result<R> {
    a.ensure_same_dims(b.dims())?;
    a.ensure_same_dims(m.dims())?;
    let spp = a.samples_per_pixel();
    if spp != b.samples_per_pixel() {
        return Err(Error::ChannelMismatch {
            expected: spp,
            got: b.samples_per_pixel(),
        });
    }
    let (sa, sb) = (a.samples(), b.samples());
    let mut out = Vec::with_capacity(sa.len());
    for (i, &bit) in m.bits().iter().enumerate() {
        let src = if bit != 0 { sa } else { sb };
        out.extend_from_slice(&src[i * spp..(i + 1) * spp]);
    }
    Ok(a.with_samples(out))
}

/// A training sample after mixing: image, label, reliability and provenance
/// on the same grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MixPair {
    pub image: Image,
    pub label: BinaryMask,
    pub reliability: BinaryMask,
    pub provenance: ProvenanceMap,
}

impl MixPair {
    /// Unmixed real sample: pseudo-label `label`, reliability `reliability`.
    pub fn real(image: Image, label: BinaryMask, reliability: BinaryMask) -> Result<Self> {
        image.ensure_same_dims(label.dims())?;
        image.ensure_same_dims(reliability.dims())?;
        let (w, h) = image.dims();
        Ok(Self {
            image,
            label,
            reliability,
            provenance: ProvenanceMap::uniform(w, h, Source::Real1),
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.image.dims()
    }

    fn compose_with(&self, other: &MixPair, other_tags: &ProvenanceMap, m: &BinaryMask) -> Result<MixPair> {
        Ok(MixPair {
            image: masked_compose(&other.image, &self.image, m)?,
            label: masked_compose(&other.label, &self.label, m)?,
            reliability: masked_compose(&other.reliability, &self.reliability, m)?,
            provenance: masked_compose(other_tags, &self.provenance, m)?,
        })
    }
}

/// Labeled synthetic sample. Its reliability is implicitly all-one.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub image: Image,
    pub label: BinaryMask,
}

/// Inter-domain mixing: copies the synthetic glyph pixels onto the real sample.
pub fn gim(real: &MixPair, synth: &SynthSample, glyph_mask: &BinaryMask) -> Result<MixPair> {
    synth.image.ensure_same_dims(synth.label.dims())?;
    let (w, h) = synth.image.dims();
    let synth_pair = MixPair {
        image: synth.image.clone(),
        label: synth.label.clone(),
        reliability: BinaryMask::ones(w, h),
        provenance: ProvenanceMap::uniform(w, h, Source::Synth),
    };
    real.compose_with(&synth_pair, &synth_pair.provenance, glyph_mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimParams {
    pub num_candidates: usize,
    /// Candidate side lengths are drawn uniformly from this fraction range of
    /// the corresponding image side.
    pub side_fraction_min: f64,
    pub side_fraction_max: f64,
}

impl Default for TimParams {
    fn default() -> Self {
        Self {
            num_candidates: 3,
            side_fraction_min: 0.25,
            side_fraction_max: 0.5,
        }
    }
}

impl TimParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_candidates == 0 {
            return Err(Error::Config("tim.num_candidates must be >= 1".into()));
        }
        let ok = |f: f64| f > 0.0 && f <= 1.0;
        if !ok(self.side_fraction_min) || !ok(self.side_fraction_max) || self.side_fraction_min > self.side_fraction_max {
            return Err(Error::Config("tim side fractions must satisfy 0 < min <= max <= 1".into()));
        }
        Ok(())
    }
}

/// Axis-aligned pixel rectangle `[x, x + w) x [y, y + h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    pub fn to_mask(&self, width: usize, height: usize) -> BinaryMask {
        BinaryMask::from_fn(width, height, |x, y| self.contains(x, y))
    }

    /// Uniformly placed rectangle with sides drawn from the fraction range.
    pub fn random(width: usize, height: usize, frac_min: f64, frac_max: f64, rng: &mut Rng) -> Rect {
        let side = |n: usize, rng: &mut Rng| {
            let f = if frac_max > frac_min {
                rng.random_range(frac_min..=frac_max)
            } else {
                frac_min
            };
            ((f * n as f64).round() as usize).clamp(1, n)
        };
        let w = side(width, rng);
        let h = side(height, rng);
        let x = rng.random_range(0..=width - w);
        let y = rng.random_range(0..=height - h);
        Rect { x, y, w, h }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimSelection {
    pub mask: BinaryMask,
    pub chosen: usize,
    pub candidates: Vec<Rect>,
    pub text_sums: Vec<u64>,
}

/// Summed-area table with a zero row and column in front.
fn integral(mask: &BinaryMask) -> Vec<u64> {
    let (w, h) = mask.dims();
    let stride = w + 1;
    let mut table = vec![0u64; stride * (h + 1)];
    for y in 0..h {
        let mut row = 0u64;
        for x in 0..w {
            row += u64::from(mask.bits()[y * w + x]);
            table[(y + 1) * stride + x + 1] = table[y * stride + x + 1] + row;
        }
    }
    table
}

/// Draws the candidate rectangles and keeps the one holding the most text in
/// `second_label`; ties go to the lowest index.
pub fn tim_select_mask(second_label: &BinaryMask, params: &TimParams, rng: &mut Rng) -> TimSelection {
    let (w, h) = second_label.dims();
    let candidates: Vec<Rect> = (0..params.num_candidates.max(1))
        .map(|_| Rect::random(w, h, params.side_fraction_min, params.side_fraction_max, rng))
        .collect();
    let table = integral(second_label);
    let stride = w + 1;
    let at = |x: usize, y: usize| table[y * stride + x];
    let text_sums: Vec<u64> = candidates
        .iter()
        .map(|r| at(r.x + r.w, r.y + r.h) + at(r.x, r.y) - at(r.x + r.w, r.y) - at(r.x, r.y + r.h))
        .collect();
    let mut chosen = 0;
    for (i, &s) in text_sums.iter().enumerate() {
        if s > text_sums[chosen] {
            chosen = i;
        }
    }
    TimSelection {
        mask: candidates[chosen].to_mask(w, h),
        chosen,
        candidates,
        text_sums,
    }
}

/// Intra-domain composite: pixels under `m_t` come from `second`, the rest from `first`.
pub fn tim_compose(first: &MixPair, second: &MixPair, m_t: &BinaryMask) -> Result<MixPair> {
    let (w, h) = second.dims();
    let tags = ProvenanceMap::uniform(w, h, Source::Real2);
    first.compose_with(second, &tags, m_t)
}

/// Text-balanced intra-domain mixing of two real samples.
pub fn tim(first: &MixPair, second: &MixPair, params: &TimParams, rng: &mut Rng) -> Result<(MixPair, TimSelection)> {
    first.image.ensure_same_dims(second.dims())?;
    let selection = tim_select_mask(&second.label, params, rng);
    let mixed = tim_compose(first, second, &selection.mask)?;
    Ok((mixed, selection))
}

/// Full composition: intra-domain mixing of the two real samples (when a
/// second one is given), then glyph mixing of the synthetic sample on top.
pub fn glyphmix(
    first: &MixPair,
    second: Option<&MixPair>,
    synth: &SynthSample,
    glyph_mask: &BinaryMask,
    params: &TimParams,
    rng: &mut Rng,
) -> Result<MixPair> {
    let base = match second {
        Some(second) => tim(first, second, params, rng)?.0,
        None => first.clone(),
    };
    gim(&base, synth, glyph_mask)
}

/// Convex blend `(1 - lambda) * base + lambda * donor`, rounded.
pub fn mixup(base: &Image, donor: &Image, lambda: f64) -> Result<Image> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::OutOfRange(format!("mixup lambda {lambda}")));
    }
    base.ensure_same_dims(donor.dims())?;
    if base.channels() != donor.channels() {
        return Err(Error::ChannelMismatch {
            expected: base.channels(),
            got: donor.channels(),
        });
    }
    let data = base
        .data()
        .iter()
        .zip(donor.data())
        .map(|(&a, &b)| ((1.0 - lambda) * a as f64 + lambda * b as f64).round() as u8)
        .collect();
    Ok(base.with_samples(data))
}

/// Pastes `donor` into `base` inside `rect`.
pub fn cutmix(base: &Image, donor: &Image, rect: Rect) -> Result<Image> {
    let (w, h) = base.dims();
    masked_compose(donor, base, &rect.to_mask(w, h))
}

/// Pastes `donor` into `base` where `class_mask` is set.
pub fn classmix(base: &Image, donor: &Image, class_mask: &BinaryMask) -> Result<Image> {
    masked_compose(donor, base, class_mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(w: usize, h: usize, seed: u8) -> Image {
        let data = (0..w * h * 3).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
        Image::new(w, h, 3, data).unwrap()
    }

    fn real(w: usize, h: usize, seed: u8) -> MixPair {
        let label = BinaryMask::from_fn(w, h, |x, y| (x * 3 + y + seed as usize) % 4 == 0);
        let rel = BinaryMask::from_fn(w, h, |x, y| (x + 2 * y + seed as usize) % 3 != 0);
        MixPair::real(img(w, h, seed), label, rel).unwrap()
    }

    fn synth(w: usize, h: usize) -> SynthSample {
        SynthSample {
            image: img(w, h, 200),
            label: BinaryMask::from_fn(w, h, |x, _| x % 2 == 0),
        }
    }

    #[test]
    fn identity_masks_are_bit_exact() {
        let (a, b) = (img(5, 4, 1), img(5, 4, 2));
        assert_eq!(masked_compose(&a, &b, &BinaryMask::zeros(5, 4)).unwrap(), b);
        assert_eq!(masked_compose(&a, &b, &BinaryMask::ones(5, 4)).unwrap(), a);
    }

    #[test]
    fn checkerboard_picks_indicated_source() {
        let (a, b) = (img(6, 5, 1), img(6, 5, 9));
        let m = BinaryMask::from_fn(6, 5, |x, y| (x + y) % 2 == 0);
        let out = masked_compose(&a, &b, &m).unwrap();
        for y in 0..5 {
            for x in 0..6 {
                let src = if m.get(x, y) { &a } else { &b };
                assert_eq!(out.pixel(x, y), src.pixel(x, y));
            }
        }
    }

    #[test]
    fn compose_rejects_mismatch() {
        let m = BinaryMask::zeros(5, 4);
        assert!(matches!(
            masked_compose(&img(5, 4, 0), &img(4, 4, 0), &m),
            Err(Error::DimensionMismatch { .. })
        ));
        let gray = Image::filled(5, 4, &[0]).unwrap();
        assert!(matches!(
            masked_compose(&img(5, 4, 0), &gray, &m),
            Err(Error::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn gim_with_empty_glyph_mask_is_real() {
        let r = real(7, 6, 3);
        let out = gim(&r, &synth(7, 6), &BinaryMask::zeros(7, 6)).unwrap();
        assert_eq!(out, r);
    }

    #[test]
    fn gim_label_and_reliability_follow_glyphs() {
        let r = real(7, 6, 3);
        let s = synth(7, 6);
        let m_g = BinaryMask::from_fn(7, 6, |x, y| x > 2 && y < 4);
        let out = gim(&r, &s, &m_g).unwrap();
        for y in 0..6 {
            for x in 0..7 {
                if m_g.get(x, y) {
                    assert_eq!(out.label.get(x, y), s.label.get(x, y));
                    assert!(out.reliability.get(x, y));
                    assert_eq!(out.provenance.get(x, y), Source::Synth);
                } else {
                    assert_eq!(out.label.get(x, y), r.label.get(x, y));
                    assert_eq!(out.reliability.get(x, y), r.reliability.get(x, y));
                    assert_eq!(out.provenance.get(x, y), Source::Real1);
                }
            }
        }
        assert_eq!(out.provenance.mask_of(Source::Synth), m_g);
    }

    #[test]
    fn tim_all_zero_label_picks_first_candidate() {
        let mut rng = Rng::new(1);
        let sel = tim_select_mask(&BinaryMask::zeros(20, 16), &TimParams::default(), &mut rng);
        assert_eq!(sel.chosen, 0);
        assert_eq!(sel.candidates.len(), 3);
        assert_eq!(sel.mask, sel.candidates[0].to_mask(20, 16));
    }

    #[test]
    fn tim_prefers_covering_rectangle() {
        // Blob at (2..5, 2..5). Force two candidates by searching seeds for one
        // covering and one missing configuration, then check the choice.
        let blob = BinaryMask::from_fn(16, 16, |x, y| (2..5).contains(&x) && (2..5).contains(&y));
        let params = TimParams {
            num_candidates: 2,
            ..Default::default()
        };
        let mut checked = 0;
        for seed in 0..200 {
            let sel = tim_select_mask(&blob, &params, &mut Rng::new(seed));
            let sums: Vec<u64> = sel
                .candidates
                .iter()
                .map(|r| (0..16 * 16).filter(|&i| blob.bits()[i] == 1 && r.contains(i % 16, i / 16)).count() as u64)
                .collect();
            if sums[0] == 9 && sums[1] == 0 || sums[0] == 0 && sums[1] == 9 {
                let covering = if sums[0] == 9 { 0 } else { 1 };
                assert_eq!(sel.chosen, covering);
                checked += 1;
            }
        }
        assert!(checked > 0, "no seed produced a covering/missing candidate pair");
    }

    #[test]
    fn tim_identical_inputs_return_input() {
        let r = real(9, 8, 5);
        let (out, _) = tim(&r, &r, &TimParams::default(), &mut Rng::new(3)).unwrap();
        assert_eq!(out.image, r.image);
        assert_eq!(out.label, r.label);
        assert_eq!(out.reliability, r.reliability);
    }

    #[test]
    fn tim_with_empty_mask_is_first_triple() {
        let (a, b) = (real(9, 8, 5), real(9, 8, 6));
        let out = tim_compose(&a, &b, &BinaryMask::zeros(9, 8)).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn glyphmix_double_identity() {
        let (a, b) = (real(9, 8, 5), real(9, 8, 6));
        let out = tim_compose(&a, &b, &BinaryMask::zeros(9, 8))
            .and_then(|t| gim(&t, &synth(9, 8), &BinaryMask::zeros(9, 8)))
            .unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn baselines_identity_cases() {
        let (a, b) = (img(6, 5, 1), img(6, 5, 77));
        assert_eq!(mixup(&a, &b, 0.0).unwrap(), a);
        assert_eq!(mixup(&a, &b, 1.0).unwrap(), b);
        assert!(mixup(&a, &b, 1.5).is_err());
        let empty = Rect { x: 2, y: 2, w: 0, h: 0 };
        assert_eq!(cutmix(&a, &b, empty).unwrap(), a);
        let full = Rect { x: 0, y: 0, w: 6, h: 5 };
        assert_eq!(cutmix(&a, &b, full).unwrap(), b);
    }

    #[test]
    fn mixup_midpoint_rounds() {
        let a = Image::new(2, 1, 1, vec![0, 10]).unwrap();
        let b = Image::new(2, 1, 1, vec![255, 11]).unwrap();
        // 127.5 -> 128, 10.5 -> 11
        assert_eq!(mixup(&a, &b, 0.5).unwrap().data(), &[128, 11]);
    }

    #[test]
    fn provenance_png_levels_round_trip() {
        let p = ProvenanceMap {
            width: 3,
            height: 1,
            tags: vec![Source::Real1, Source::Real2, Source::Synth],
        };
        assert_eq!(ProvenanceMap::from_image(&p.to_image()).unwrap(), p);
    }
}
