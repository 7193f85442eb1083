//! Raster value types: 8-bit images, binary masks and probability maps.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};

/// Clamp applied to every probability map so `-y ln y` stays finite.
pub const LOGIT_EPS: f64 = 1e-6;

/// Anything made of per-pixel samples on a fixed grid.
pub trait Raster: Sized {
    type Sample: Copy + PartialEq;

    fn width(&self) -> usize;
    fn height(&self) -> usize;
    fn samples_per_pixel(&self) -> usize;
    fn samples(&self) -> &[Self::Sample];
    /// New raster of the same shape with the given samples.
    fn with_samples(&self, samples: Vec<Self::Sample>) -> Self;

    fn dims(&self) -> (usize, usize) {
        (self.width(), self.height())
    }

    fn ensure_same_dims(&self, other_dims: (usize, usize)) -> Result<()> {
        if self.dims() != other_dims {
            return Err(Error::dims(self.dims(), other_dims));
        }
        Ok(())
    }
}

/// Row-major 8-bit raster with 1 (gray) or 3 (RGB) channels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidRaster(format!(
                "image must be at least 1x1, got {width}x{height}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidRaster(format!(
                "unsupported channel count {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidRaster(format!(
                "data length {} != {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Image with every pixel set to `pixel` (whose length fixes the channel count).
    pub fn filled(width: usize, height: usize, pixel: &[u8]) -> Result<Self> {
        let data = pixel
            .iter()
            .copied()
            .cycle()
            .take(width * height * pixel.len())
            .collect();
        Self::new(width, height, pixel.len(), data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [u8] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Luma conversion (0.299, 0.587, 0.114), rounded half-up. Gray input is returned as is.
    pub fn to_grayscale(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| luma(p[0], p[1], p[2]))
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Gray image expanded to three identical channels; RGB is returned as is.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }

    /// Inverts every sample (`255 - v`).
    pub fn inverted(&self) -> Image {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = 255 - *v);
        out
    }

    /// Decodes PNG or JPEG. Alpha is dropped; 16-bit input is reduced to 8 bits.
    pub fn load(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let dynamic = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_dynamic(dynamic))
    }

    pub fn from_dynamic(dynamic: DynamicImage) -> Image {
        match dynamic {
            DynamicImage::ImageLuma8(buf) => {
                let (w, h) = buf.dimensions();
                Image {
                    width: w as usize,
                    height: h as usize,
                    channels: 1,
                    data: buf.into_raw(),
                }
            }
            other => {
                let buf = other.into_rgb8();
                let (w, h) = buf.dimensions();
                Image {
                    width: w as usize,
                    height: h as usize,
                    channels: 3,
                    data: buf.into_raw(),
                }
            }
        }
    }

    pub fn to_dynamic(&self) -> DynamicImage {
        let (w, h) = (self.width as u32, self.height as u32);
        if self.channels == 1 {
            let buf: GrayImage =
                ImageBuffer::<Luma<u8>, _>::from_raw(w, h, self.data.clone()).expect("shape");
            DynamicImage::ImageLuma8(buf)
        } else {
            let buf: RgbImage =
                ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, self.data.clone()).expect("shape");
            DynamicImage::ImageRgb8(buf)
        }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_dynamic()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    /// Bilinear resize to `width` x `height`.
    pub fn resized(&self, width: usize, height: usize) -> Image {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        let out = self.to_dynamic().resize_exact(
            width as u32,
            height as u32,
            image::imageops::FilterType::Triangle,
        );
        Self::from_dynamic(out)
    }
}

impl Raster for Image {
    type Sample = u8;

    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
    fn samples_per_pixel(&self) -> usize {
        self.channels
    }
    fn samples(&self) -> &[u8] {
        &self.data
    }
    fn with_samples(&self, samples: Vec<u8>) -> Self {
        debug_assert_eq!(samples.len(), self.data.len());
        Image {
            data: samples,
            ..*self
        }
    }
}

#[inline]
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    // Integer form of 0.299/0.587/0.114 keeps the half-up rounding exact.
    ((299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000) as u8
}

/// H x W map of {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![0; width * height],
        }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![1; width * height],
        }
    }

    /// Builds a mask from arbitrary bytes; any nonzero value becomes 1.
    pub fn from_bits(width: usize, height: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::InvalidRaster(format!(
                "mask length {} != {width}x{height}",
                bits.len()
            )));
        }
        let bits = bits.into_iter().map(|b| u8::from(b != 0)).collect();
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(u8::from(f(x, y)));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = u8::from(value);
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    pub fn fraction(&self) -> f64 {
        self.count_ones() as f64 / self.bits.len() as f64
    }

    pub fn or_assign(&mut self, other: &BinaryMask) -> Result<()> {
        self.ensure_same_dims(other.dims())?;
        self.bits
            .iter_mut()
            .zip(&other.bits)
            .for_each(|(a, b)| *a |= *b);
        Ok(())
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.ensure_same_dims(other.dims())?;
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| a & b).collect();
        Ok(self.with_samples(bits))
    }

    pub fn not(&self) -> BinaryMask {
        self.with_samples(self.bits.iter().map(|b| 1 - b).collect())
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims()
            && self
                .bits
                .iter()
                .zip(&other.bits)
                .all(|(&a, &b)| a == 0 || b != 0)
    }

    /// 8-bit view with values 0 and 255.
    pub fn to_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.bits.iter().map(|&b| b * 255).collect(),
        }
    }

    /// Pixels >= 128 become 1.
    pub fn from_image(img: &Image) -> BinaryMask {
        let gray = img.to_grayscale();
        BinaryMask {
            width: gray.width,
            height: gray.height,
            bits: gray.data.iter().map(|&v| u8::from(v >= 128)).collect(),
        }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_image().save_png(path)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<BinaryMask> {
        Ok(Self::from_image(&Image::load(path)?))
    }
}

impl Raster for BinaryMask {
    type Sample = u8;

    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
    fn samples_per_pixel(&self) -> usize {
        1
    }
    fn samples(&self) -> &[u8] {
        &self.bits
    }
    fn with_samples(&self, samples: Vec<u8>) -> Self {
        debug_assert_eq!(samples.len(), self.bits.len());
        BinaryMask {
            bits: samples,
            ..*self
        }
    }
}

/// Per-pixel probabilities clamped to `[LOGIT_EPS, 1 - LOGIT_EPS]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl LogitMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::InvalidRaster(format!(
                "logit map length {} != {width}x{height}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| v.is_nan()) {
            return Err(Error::InvalidRaster(format!("logit value {v}")));
        }
        let values = values.into_iter().map(clamp_probability).collect();
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn uniform(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            values: vec![clamp_probability(value); width * height],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// `1` where the probability is at least `threshold`.
    pub fn binarize(&self, threshold: f64) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.values.iter().map(|&v| u8::from(v >= threshold)).collect(),
        }
    }
}

impl Raster for LogitMap {
    type Sample = f64;

    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
    fn samples_per_pixel(&self) -> usize {
        1
    }
    fn samples(&self) -> &[f64] {
        &self.values
    }
    fn with_samples(&self, samples: Vec<f64>) -> Self {
        debug_assert_eq!(samples.len(), self.values.len());
        LogitMap {
            values: samples,
            ..*self
        }
    }
}

#[inline]
pub fn clamp_probability(p: f64) -> f64 {
    p.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_input_is_unchanged() {
        let img = Image::new(2, 1, 1, vec![3, 250]).unwrap();
        assert_eq!(img.to_grayscale(), img);
    }

    #[test]
    fn uniform_rgb_maps_to_same_gray() {
        let img = Image::filled(3, 2, &[200, 200, 200]).unwrap();
        assert!(img.to_grayscale().data().iter().all(|&v| v == 200));
    }

    #[test]
    fn luma_reference_table() {
        // Hand-computed: 0.299*255 = 76.245, 0.587*255 = 149.685, 0.114*255 = 29.07.
        let table = [
            ([255, 0, 0], 76),
            ([0, 255, 0], 150),
            ([0, 0, 255], 29),
            ([255, 255, 255], 255),
            ([0, 0, 0], 0),
            // 0.299*10 + 0.587*20 + 0.114*30 = 2.99 + 11.74 + 3.42 = 18.15
            ([10, 20, 30], 18),
            // 0.299*1 + 0.587*1 + 0.114*0 = 0.886 -> 1
            ([1, 1, 0], 1),
            // 0.114*5 = 0.57 -> 1 and 0.114*4 = 0.456 -> 0
            ([0, 0, 5], 1),
            ([0, 0, 4], 0),
            // 0.587*12 + 0.114*4 = 7.5 exactly, rounded half up
            ([0, 12, 4], 8),
        ];
        for (rgb, expected) in table {
            assert_eq!(luma(rgb[0], rgb[1], rgb[2]), expected, "{rgb:?}");
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Image::new(0, 3, 1, vec![]).is_err());
        assert!(Image::new(2, 2, 2, vec![0; 8]).is_err());
        assert!(Image::new(2, 2, 3, vec![0; 11]).is_err());
        assert!(BinaryMask::from_bits(2, 2, vec![0; 3]).is_err());
    }

    #[test]
    fn logit_map_clamps() {
        let m = LogitMap::new(3, 1, vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(m.values(), &[LOGIT_EPS, 0.5, 1.0 - LOGIT_EPS]);
        assert!(LogitMap::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let m = BinaryMask::from_fn(5, 4, |x, y| (x + y) % 3 == 0);
        m.save_png(&path).unwrap();
        assert_eq!(BinaryMask::load_png(&path).unwrap(), m);
        let raw = Image::load(&path).unwrap();
        assert!(raw.data().iter().all(|&v| v == 0 || v == 255));
    }
}
