//! Weak and strong views.
//!
//! The weak view is geometric only (horizontal flip and scale jitter about the
//! image center, output size unchanged). The strong view applies the same
//! geometry followed by photometric jitter, so a label computed on the weak view
//! lines up with the strong view pixel for pixel. Images are resampled
//! bilinearly with replicated borders; masks use nearest neighbour and read
//! zero outside the frame.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, QuadBox};
use crate::raster::{luma, BinaryMask, Image, Raster};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationSpec {
    pub flip_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Relative brightness jitter, `0.25` means factors in `[0.75, 1.25]`.
    pub brightness: f64,
    pub contrast: f64,
    pub blur_sigma_max: f64,
    pub grayscale_prob: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            scale_min: 0.9,
            scale_max: 1.1,
            brightness: 0.25,
            contrast: 0.25,
            blur_sigma_max: 1.5,
            grayscale_prob: 0.2,
        }
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.flip_prob) || !prob(self.grayscale_prob) {
            return Err(Error::Config("augmentation probabilities must be in [0, 1]".into()));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(Error::Config(format!(
                "scale range [{}, {}] is invalid",
                self.scale_min, self.scale_max
            )));
        }
        if !(0.0..1.0).contains(&self.brightness) || !(0.0..1.0).contains(&self.contrast) || self.blur_sigma_max < 0.0 {
            return Err(Error::Config("photometric jitter out of range".into()));
        }
        Ok(())
    }

    pub fn sample_geometric(&self, rng: &mut Rng) -> GeometricAug {
        let flip = rng.random_bool(self.flip_prob);
        let scale = if self.scale_max > self.scale_min {
            rng.random_range(self.scale_min..=self.scale_max)
        } else {
            self.scale_min
        };
        GeometricAug { flip, scale }
    }

    pub fn sample_photometric(&self, rng: &mut Rng) -> PhotometricAug {
        let jitter = |rng: &mut Rng, amount: f64| {
            if amount > 0.0 {
                rng.random_range(1.0 - amount..=1.0 + amount)
            } else {
                1.0
            }
        };
        let brightness = jitter(rng, self.brightness);
        let contrast = jitter(rng, self.contrast);
        let blur_sigma = if self.blur_sigma_max > 0.0 {
            rng.random_range(0.0..=self.blur_sigma_max)
        } else {
            0.0
        };
        let grayscale = rng.random_bool(self.grayscale_prob);
        PhotometricAug {
            brightness,
            contrast,
            blur_sigma,
            grayscale,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricAug {
    pub flip: bool,
    pub scale: f64,
}

impl GeometricAug {
    pub const IDENTITY: GeometricAug = GeometricAug {
        flip: false,
        scale: 1.0,
    };

    /// Source coordinate sampled by output pixel `(x, y)`.
    fn source(&self, x: usize, y: usize, w: usize, h: usize) -> (f64, f64) {
        let cx = (w as f64 - 1.0) / 2.0;
        let cy = (h as f64 - 1.0) / 2.0;
        let x = if self.flip { (w - 1 - x) as f64 } else { x as f64 };
        ((x - cx) / self.scale + cx, (y as f64 - cy) / self.scale + cy)
    }

    pub fn apply_image(&self, img: &Image) -> Image {
        if *self == Self::IDENTITY {
            return img.clone();
        }
        let (w, h) = img.dims();
        let c = img.channels();
        let mut out = vec![0u8; w * h * c];
        for y in 0..h {
            for x in 0..w {
                let (u, v) = self.source(x, y, w, h);
                let u = u.clamp(0.0, (w - 1) as f64);
                let v = v.clamp(0.0, (h - 1) as f64);
                let (x0, y0) = (u.floor() as usize, v.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (fx, fy) = (u - x0 as f64, v - y0 as f64);
                for k in 0..c {
                    let p = |xx: usize, yy: usize| img.data()[(yy * w + xx) * c + k] as f64;
                    let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
                    let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
                    let val = top * (1.0 - fy) + bottom * fy;
                    out[(y * w + x) * c + k] = val.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        Image::new(w, h, c, out).expect("shape")
    }

    pub fn apply_mask(&self, mask: &BinaryMask) -> BinaryMask {
        if *self == Self::IDENTITY {
            return mask.clone();
        }
        let (w, h) = mask.dims();
        BinaryMask::from_fn(w, h, |x, y| {
            let (u, v) = self.source(x, y, w, h);
            let (u, v) = ((u + 0.5).floor(), (v + 0.5).floor());
            u >= 0.0 && v >= 0.0 && u < w as f64 && v < h as f64 && mask.get(u as usize, v as usize)
        })
    }

    /// Maps a box into the augmented frame of a `width` x `height` image.
    pub fn apply_quad(&self, quad: &QuadBox, width: usize, height: usize) -> QuadBox {
        let cx = (width as f64 - 1.0) / 2.0;
        let cy = (height as f64 - 1.0) / 2.0;
        let s = |p: Point| Point::new((p.x - cx) * self.scale + cx, (p.y - cy) * self.scale + cy);
        let scaled = QuadBox::new(s(quad.lt), s(quad.lb), s(quad.rt), s(quad.rb));
        if self.flip {
            scaled.flipped_horizontally(width)
        } else {
            scaled
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhotometricAug {
    pub brightness: f64,
    pub contrast: f64,
    pub blur_sigma: f64,
    pub grayscale: bool,
}

impl PhotometricAug {
    pub const IDENTITY: PhotometricAug = PhotometricAug {
        brightness: 1.0,
        contrast: 1.0,
        blur_sigma: 0.0,
        grayscale: false,
    };

    pub fn apply(&self, img: &Image) -> Image {
        let mut img = if self.grayscale && img.channels() == 3 {
            let data = img
                .data()
                .chunks_exact(3)
                .flat_map(|p| {
                    let l = luma(p[0], p[1], p[2]);
                    [l, l, l]
                })
                .collect();
            Image::new(img.width(), img.height(), 3, data).expect("shape")
        } else {
            img.clone()
        };
        if self.brightness != 1.0 || self.contrast != 1.0 {
            let mean = img.data().iter().map(|&v| v as f64).sum::<f64>() / img.data().len().max(1) as f64;
            for v in img.data_mut() {
                let x = (*v as f64 - mean) * self.contrast + mean * self.brightness;
                *v = x.round().clamp(0.0, 255.0) as u8;
            }
        }
        if self.blur_sigma > 0.0 {
            img = gaussian_blur(&img, self.blur_sigma);
        }
        img
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as i64;
    let (w, h) = img.dims();
    let c = img.channels();
    let src: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    let mut tmp = vec![0.0f64; src.len()];
    for y in 0..h {
        for x in 0..w {
            for k in 0..c {
                let mut acc = 0.0;
                for (j, kv) in kernel.iter().enumerate() {
                    let xx = (x as i64 + j as i64 - r).clamp(0, w as i64 - 1) as usize;
                    acc += kv * src[(y * w + xx) * c + k];
                }
                tmp[(y * w + x) * c + k] = acc;
            }
        }
    }
    let mut out = vec![0u8; src.len()];
    for y in 0..h {
        for x in 0..w {
            for k in 0..c {
                let mut acc = 0.0;
                for (j, kv) in kernel.iter().enumerate() {
                    let yy = (y as i64 + j as i64 - r).clamp(0, h as i64 - 1) as usize;
                    acc += kv * tmp[(yy * w + x) * c + k];
                }
                out[(y * w + x) * c + k] = acc.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Image::new(w, h, c, out).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::label_map;
    use proptest::prelude::*;

    fn gradient(w: usize, h: usize) -> Image {
        let data = (0..w * h).flat_map(|i| {
            let v = ((i % w) * 255 / w.max(2)) as u8;
            [v, v / 2, 255 - v]
        });
        Image::new(w, h, 3, data.collect()).unwrap()
    }

    #[test]
    fn identity_views_are_exact() {
        let img = gradient(9, 7);
        assert_eq!(GeometricAug::IDENTITY.apply_image(&img), img);
        assert_eq!(PhotometricAug::IDENTITY.apply(&img), img);
        let scale_one = GeometricAug { flip: false, scale: 1.0 };
        let m = BinaryMask::from_fn(9, 7, |x, y| x * y % 3 == 0);
        assert_eq!(scale_one.apply_mask(&m), m);
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = gradient(10, 4);
        let f = GeometricAug { flip: true, scale: 1.0 };
        assert_ne!(f.apply_image(&img), img);
        assert_eq!(f.apply_image(&f.apply_image(&img)), img);
        assert_eq!(f.apply_image(&img).pixel(0, 2), img.pixel(9, 2));
    }

    #[test]
    fn blur_preserves_flat_images_and_mean() {
        let flat = Image::filled(6, 6, &[77, 10, 200]).unwrap();
        assert_eq!(gaussian_blur(&flat, 1.2), flat);
        let kernel = gaussian_kernel(0.8);
        assert!((kernel.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(kernel.len(), 7);
    }

    #[test]
    fn grayscale_view_has_equal_channels() {
        let aug = PhotometricAug {
            grayscale: true,
            ..PhotometricAug::IDENTITY
        };
        let out = aug.apply(&gradient(5, 5));
        assert!(out.data().chunks(3).all(|p| p[0] == p[1] && p[1] == p[2]));
    }

    #[test]
    fn sampled_params_stay_in_range() {
        let spec = AugmentationSpec::default();
        let mut rng = crate::rng::Rng::new(3);
        for _ in 0..200 {
            let g = spec.sample_geometric(&mut rng);
            assert!((0.9..=1.1).contains(&g.scale));
            let p = spec.sample_photometric(&mut rng);
            assert!((0.75..=1.25).contains(&p.brightness));
            assert!((0.0..=1.5).contains(&p.blur_sigma));
        }
        assert!(AugmentationSpec { scale_min: 0.0, ..spec }.validate().is_err());
    }

    proptest! {
        #[test]
        fn flip_commutes_with_rasterization(
            rects in proptest::collection::vec((0.0f64..30.0, 0.0f64..20.0, 1.0f64..12.0, 1.0f64..8.0), 1..5),
        ) {
            let (w, h) = (32, 24);
            let boxes: Vec<QuadBox> = rects.iter().map(|&(x, y, bw, bh)| QuadBox::rect(x, y, x + bw, y + bh)).collect();
            let aug = GeometricAug { flip: true, scale: 1.0 };
            let moved: Vec<QuadBox> = boxes.iter().map(|q| aug.apply_quad(q, w, h)).collect();
            prop_assert_eq!(label_map(&moved, w, h), aug.apply_mask(&label_map(&boxes, w, h)));
        }

        #[test]
        fn scaled_rasterization_differs_only_at_box_edges(
            (x, y, bw, bh) in (0.0f64..30.0, 0.0f64..20.0, 1.0f64..12.0, 1.0f64..8.0),
            scale in 0.9f64..1.1, flip in any::<bool>(),
        ) {
            let (w, h) = (32, 24);
            let quad = QuadBox::rect(x, y, x + bw, y + bh);
            let aug = GeometricAug { flip, scale };
            let original = label_map(&[quad], w, h);
            let direct = label_map(&[aug.apply_quad(&quad, w, h)], w, h);
            let warped = aug.apply_mask(&original);
            for py in 0..h {
                for px in 0..w {
                    if direct.get(px, py) == warped.get(px, py) {
                        continue;
                    }
                    // The exact source point and its nearest pixel straddle the
                    // box edge, so the box membership changes within one pixel
                    // of that nearest pixel. Content scaled in from beyond the
                    // frame is unknown to the warped mask.
                    let (u, v) = aug.source(px, py, w, h);
                    let (cx, cy) = ((u + 0.5).floor() as i64, (v + 0.5).floor() as i64);
                    let inside = |xx: i64, yy: i64| {
                        xx >= 0 && yy >= 0 && xx < w as i64 && yy < h as i64 && original.get(xx as usize, yy as usize)
                    };
                    let here = inside(cx, cy);
                    let framed = |xx: i64, yy: i64| xx >= 0 && yy >= 0 && xx < w as i64 && yy < h as i64;
                    let edge = (-1i64..=1).any(|dy| (-1i64..=1).any(|dx| {
                        !framed(cx + dx, cy + dy) || inside(cx + dx, cy + dy) != here
                    }));
                    prop_assert!(edge, "pixel ({}, {}) differs away from the box edge", px, py);
                }
            }
        }
    }
}
