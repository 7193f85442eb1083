//! Linear per-pixel text scorer used by the toy student-teacher loop.
//!
//! Each pixel is described by nine local statistics of the grayscale image
//! (window mean, window standard deviation and central-difference gradient
//! magnitude at radii 1, 2 and 4), scaled to `[0, 1]` intensity units. The
//! score is `sigmoid(w . f + b)`, clamped like every [`LogitMap`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, Image, LogitMap, Raster, LOGIT_EPS};

pub const RADII: [usize; 3] = [1, 2, 4];
pub const NUM_FEATURES: usize = 9;
/// Feature weights followed by the bias.
pub const NUM_PARAMS: usize = NUM_FEATURES + 1;

/// Per-pixel feature vectors, row-major, `NUM_FEATURES` values per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl FeatureBank {
    pub fn compute(img: &Image) -> FeatureBank {
        let gray = img.to_grayscale();
        let (w, h) = gray.dims();
        let px: Vec<f64> = gray.data().iter().map(|&v| v as f64 / 255.0).collect();

        // Summed-area tables of values and squares, with a leading zero row/column.
        let stride = w + 1;
        let mut sum = vec![0.0f64; stride * (h + 1)];
        let mut sq = vec![0.0f64; stride * (h + 1)];
        for y in 0..h {
            let (mut rs, mut rq) = (0.0, 0.0);
            for x in 0..w {
                let v = px[y * w + x];
                rs += v;
                rq += v * v;
                sum[(y + 1) * stride + x + 1] = sum[y * stride + x + 1] + rs;
                sq[(y + 1) * stride + x + 1] = sq[y * stride + x + 1] + rq;
            }
        }
        let rect = |t: &[f64], x0: usize, y0: usize, x1: usize, y1: usize| {
            t[y1 * stride + x1] - t[y0 * stride + x1] - t[y1 * stride + x0] + t[y0 * stride + x0]
        };

        let mut values = vec![0.0f64; w * h * NUM_FEATURES];
        for y in 0..h {
            for x in 0..w {
                let f = &mut values[(y * w + x) * NUM_FEATURES..(y * w + x + 1) * NUM_FEATURES];
                for (k, &r) in RADII.iter().enumerate() {
                    let x0 = x.saturating_sub(r);
                    let y0 = y.saturating_sub(r);
                    let x1 = (x + r + 1).min(w);
                    let y1 = (y + r + 1).min(h);
                    let n = ((x1 - x0) * (y1 - y0)) as f64;
                    let mean = rect(&sum, x0, y0, x1, y1) / n;
                    let var = (rect(&sq, x0, y0, x1, y1) / n - mean * mean).max(0.0);

                    let xl = x.saturating_sub(r);
                    let xr = (x + r).min(w - 1);
                    let yu = y.saturating_sub(r);
                    let yd = (y + r).min(h - 1);
                    let gx = (px[y * w + xr] - px[y * w + xl]) / (2 * r) as f64;
                    let gy = (px[yd * w + x] - px[yu * w + x]) / (2 * r) as f64;

                    f[3 * k] = mean;
                    f[3 * k + 1] = var.sqrt();
                    f[3 * k + 2] = (gx * gx + gy * gy).sqrt();
                }
            }
        }
        FeatureBank {
            width: w,
            height: h,
            values,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.values[i * NUM_FEATURES..(i + 1) * NUM_FEATURES]
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelScorer {
    weights: Vec<f64>,
}

impl Default for PixelScorer {
    fn default() -> Self {
        Self::zeros()
    }
}

impl PixelScorer {
    pub fn zeros() -> Self {
        Self {
            weights: vec![0.0; NUM_PARAMS],
        }
    }

    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.len() != NUM_PARAMS {
            return Err(Error::InvalidRaster(format!(
                "scorer needs {NUM_PARAMS} parameters, got {}",
                weights.len()
            )));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    #[inline]
    fn logit(&self, f: &[f64]) -> f64 {
        let mut z = self.weights[NUM_FEATURES];
        for (w, v) in self.weights[..NUM_FEATURES].iter().zip(f) {
            z += w * v;
        }
        z
    }

    pub fn score_features(&self, features: &FeatureBank) -> LogitMap {
        let (w, h) = features.dims();
        let values = (0..features.len())
            .map(|i| sigmoid(self.logit(features.pixel(i))))
            .collect();
        LogitMap::new(w, h, values).expect("shape")
    }

    /// Probability map for `img`.
    pub fn score(&self, img: &Image) -> LogitMap {
        self.score_features(&FeatureBank::compute(img))
    }

    /// Chains per-pixel logit gradients into the weight space.
    pub fn backprop(&self, features: &FeatureBank, logit_grad: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; NUM_PARAMS];
        for (i, &g) in logit_grad.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (acc, v) in grad.iter_mut().zip(features.pixel(i)) {
                *acc += g * v;
            }
            grad[NUM_FEATURES] += g;
        }
        grad
    }

    /// Stable digest of the weights' bit patterns.
    pub fn fingerprint(&self) -> u64 {
        self.weights.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, w| {
            w.to_bits()
                .to_le_bytes()
                .iter()
                .fold(h, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
        })
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Teacher pseudo-label: the probability map and its binarization at `threshold` (`>=` is positive).
pub fn pseudo_label(teacher: &PixelScorer, img: &Image, threshold: f64) -> Result<(LogitMap, BinaryMask)> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::OutOfRange(format!("binarize threshold {threshold}")));
    }
    let logits = teacher.score(img);
    let mask = logits.binarize(threshold);
    Ok((logits, mask))
}

/// Loss value with its gradient w.r.t. each pixel's pre-sigmoid logit.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelLossOutput {
    pub loss: f64,
    pub logit_grad: Vec<f64>,
    pub supervised_pixels: usize,
}

/// Supervision loss slot; swap in a detector loss by implementing this.
pub trait PixelLoss: Send + Sync {
    fn evaluate(&self, pred: &LogitMap, target: &BinaryMask, reliability: &BinaryMask) -> Result<PixelLossOutput>;
}

/// Binary cross-entropy averaged over pixels where the reliability mask is set.
#[derive(Debug, Clone, Copy, Default)]
pub struct MaskedBce;

impl PixelLoss for MaskedBce {
    fn evaluate(&self, pred: &LogitMap, target: &BinaryMask, reliability: &BinaryMask) -> Result<PixelLossOutput> {
        masked_bce(pred, target, reliability)
    }
}

pub fn masked_bce(pred: &LogitMap, target: &BinaryMask, reliability: &BinaryMask) -> Result<PixelLossOutput> {
    pred.ensure_same_dims(target.dims())?;
    pred.ensure_same_dims(reliability.dims())?;
    let n = reliability.count_ones();
    if n == 0 {
        return Err(Error::NoSupervisedPixels);
    }
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut logit_grad = vec![0.0; pred.values().len()];
    for (i, ((&p, &t), &e)) in pred
        .values()
        .iter()
        .zip(target.bits())
        .zip(reliability.bits())
        .enumerate()
    {
        if e == 0 {
            continue;
        }
        let t = t as f64;
        loss -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        // Clamped probabilities are flat in the logit.
        let clamped = p <= LOGIT_EPS || p >= 1.0 - LOGIT_EPS;
        if !clamped {
            logit_grad[i] = (p - t) * inv;
        }
    }
    Ok(PixelLossOutput {
        loss: loss * inv,
        logit_grad,
        supervised_pixels: n,
    })
}

/// Loss and weight-space gradient of `model` on precomputed features.
pub fn loss_and_grad(
    model: &PixelScorer,
    features: &FeatureBank,
    target: &BinaryMask,
    reliability: &BinaryMask,
    loss_fn: &dyn PixelLoss,
) -> Result<(f64, Vec<f64>)> {
    let pred = model.score_features(features);
    let out = loss_fn.evaluate(&pred, target, reliability)?;
    Ok((out.loss, model.backprop(features, &out.logit_grad)))
}

/// `alpha * teacher + (1 - alpha) * student`.
pub fn ema_update(teacher: &PixelScorer, student: &PixelScorer, alpha: f64) -> Result<PixelScorer> {
    let mut next = teacher.clone();
    ema_update_inplace(&mut next.weights, &student.weights, alpha)?;
    Ok(next)
}

/// In-place EMA over raw parameter slices.
pub fn ema_update_inplace(teacher: &mut [f64], student: &[f64], alpha: f64) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::InvalidRaster(format!(
            "parameter length mismatch: {} vs {}",
            teacher.len(),
            student.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::OutOfRange(format!("ema alpha {alpha}")));
    }
    for (t, s) in teacher.iter_mut().zip(student) {
        *t = alpha * *t + (1.0 - alpha) * s;
    }
    Ok(())
}
