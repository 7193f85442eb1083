//! Domain classification accuracy: how often a synthetic-vs-real classifier
//! calls a mixed image real.
//!
//! The reference classifier describes an image region with 80 numbers: a
//! 32-bin intensity histogram, a 32-bin gradient-magnitude histogram and a
//! 4x4 grid of edge densities. A logistic head scores each cell of a
//! `grid x grid` partition of the image and the image counts as real only
//! when its least real-looking cell does (min pooling). With `grid = 1` this
//! is a single global descriptor. Anything implementing [`DomainScorer`] can
//! replace it.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generate::{mix_sample, real_pair, Corpus, MixConfig, StageTimes, SynthItem};
use crate::raster::{Image, Raster};
use crate::rng::Rng;

pub const INTENSITY_BINS: usize = 32;
pub const GRADIENT_BINS: usize = 32;
pub const EDGE_GRID: usize = 4;
pub const NUM_DOMAIN_FEATURES: usize = INTENSITY_BINS + GRADIENT_BINS + EDGE_GRID * EDGE_GRID;
/// Gradient magnitudes at or above this land in the last histogram bin.
const GRADIENT_RANGE: f64 = 128.0;
/// Gradient magnitude above which a pixel counts as an edge.
const EDGE_THRESHOLD: f64 = 16.0;
/// Minimum holdout accuracy for a classifier to be usable.
pub const REQUIRED_HOLDOUT_ACCURACY: f64 = 0.9;

/// Descriptor of the region `[x0, x1) x [y0, y1)` of a grayscale image.
/// Histograms sum to one and edge densities lie in [0, 1]. Gradients use
/// neighbors outside the region where the image has them.
fn region_features(gray: &Image, x0: usize, x1: usize, y0: usize, y1: usize) -> Vec<f64> {
    let (w, h) = gray.dims();
    let data = gray.data();
    let (rw, rh) = (x1 - x0, y1 - y0);
    let n = (rw * rh).max(1) as f64;
    let mut feats = vec![0.0; NUM_DOMAIN_FEATURES];
    let (intensity, rest) = feats.split_at_mut(INTENSITY_BINS);
    let (gradient, edges) = rest.split_at_mut(GRADIENT_BINS);
    let mut cell_sizes = [0usize; EDGE_GRID * EDGE_GRID];
    let at = |x: usize, y: usize| f64::from(data[y * w + x]);
    for y in y0..y1 {
        for x in x0..x1 {
            intensity[usize::from(data[y * w + x]) * INTENSITY_BINS / 256] += 1.0;
            let gx = (at((x + 1).min(w - 1), y) - at(x.saturating_sub(1), y)) / 2.0;
            let gy = (at(x, (y + 1).min(h - 1)) - at(x, y.saturating_sub(1))) / 2.0;
            let mag = gx.hypot(gy);
            let bin = ((mag / GRADIENT_RANGE * GRADIENT_BINS as f64) as usize).min(GRADIENT_BINS - 1);
            gradient[bin] += 1.0;
            let cell = ((y - y0) * EDGE_GRID / rh) * EDGE_GRID + (x - x0) * EDGE_GRID / rw;
            cell_sizes[cell] += 1;
            if mag > EDGE_THRESHOLD {
                edges[cell] += 1.0;
            }
        }
    }
    intensity.iter_mut().chain(gradient.iter_mut()).for_each(|v| *v /= n);
    for (e, &size) in edges.iter_mut().zip(&cell_sizes) {
        *e /= size.max(1) as f64;
    }
    feats
}

/// Descriptor of the whole image.
pub fn domain_features(img: &Image) -> Vec<f64> {
    let gray = img.to_grayscale();
    let (w, h) = gray.dims();
    region_features(&gray, 0, w, 0, h)
}

/// Descriptors of the cells of a `grid x grid` partition, row by row. The
/// grid shrinks on images smaller than it.
pub fn cell_features(img: &Image, grid: usize) -> Vec<Vec<f64>> {
    let gray = img.to_grayscale();
    let (w, h) = gray.dims();
    let (gx, gy) = (grid.clamp(1, w), grid.clamp(1, h));
    (0..gy)
        .flat_map(|j| (0..gx).map(move |i| (i, j)))
        .map(|(i, j)| region_features(&gray, i * w / gx, (i + 1) * w / gx, j * h / gy, (j + 1) * h / gy))
        .collect()
}

/// Scores whole images; 1 means real.
pub trait DomainScorer: Sync {
    fn prob_real(&self, img: &Image) -> f64;
    /// Accuracy on images held out from training, half of them real.
    fn holdout_accuracy(&self) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainClassifier {
    grid: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// Feature weights followed by the bias.
    weights: Vec<f64>,
    holdout_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierParams {
    /// Cells per image side.
    pub grid: usize,
    pub holdout_fraction: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ClassifierParams {
    fn default() -> Self {
        Self {
            grid: 4,
            holdout_fraction: 0.2,
            iterations: 500,
            learning_rate: 0.5,
            l2: 1e-3,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl DomainClassifier {
    /// Probability that a single cell descriptor is real.
    pub fn prob_features(&self, feats: &[f64]) -> f64 {
        let bias = self.weights[NUM_DOMAIN_FEATURES];
        let z = feats
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .zip(&self.weights)
            .map(|(((f, m), s), w)| w * (f - m) / s)
            .sum::<f64>();
        sigmoid(z + bias)
    }

    fn prob_cells(&self, cells: &[Vec<f64>]) -> f64 {
        cells.iter().map(|c| self.prob_features(c)).fold(1.0, f64::min)
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

impl DomainScorer for DomainClassifier {
    fn prob_real(&self, img: &Image) -> f64 {
        self.prob_cells(&cell_features(img, self.grid))
    }

    fn holdout_accuracy(&self) -> f64 {
        self.holdout_accuracy
    }
}

/// Fits a classifier on a balanced split of the two sets, every cell taking
/// its image's label, and checks it on the held-out images. Fails with
/// [`Error::NotSeparable`] below the required holdout accuracy.
pub fn train_domain_classifier(
    synth: &[Image],
    real: &[Image],
    params: &ClassifierParams,
    seed: u64,
) -> Result<DomainClassifier> {
    let n = synth.len().min(real.len());
    if n < 2 {
        return Err(Error::EmptySource("the domain classifier needs at least two images per domain".into()));
    }
    if !(params.holdout_fraction > 0.0 && params.holdout_fraction < 1.0) || params.grid == 0 {
        return Err(Error::Config("classifier needs grid >= 1 and holdout_fraction in (0, 1)".into()));
    }
    let mut rng = Rng::new(seed);
    let mut pick = |len: usize| {
        let mut idx: Vec<usize> = (0..len).collect();
        idx.shuffle(&mut rng);
        idx.truncate(n);
        idx
    };
    let (s_idx, r_idx) = (pick(synth.len()), pick(real.len()));
    let held = ((n as f64 * params.holdout_fraction).round() as usize).clamp(1, n - 1);

    let feats = |imgs: &[Image], idx: &[usize]| -> Vec<Vec<Vec<f64>>> {
        idx.par_iter().map(|&i| cell_features(&imgs[i], params.grid)).collect()
    };
    let (s_feats, r_feats) = (feats(synth, &s_idx), feats(real, &r_idx));
    let mut train: Vec<(&[f64], f64)> = Vec::new();
    let mut test: Vec<(&[Vec<f64>], bool)> = Vec::with_capacity(2 * held);
    for (k, (s, r)) in s_feats.iter().zip(&r_feats).enumerate() {
        if k < held {
            test.push((s, false));
            test.push((r, true));
        } else {
            train.extend(s.iter().map(|c| (c.as_slice(), 0.0)));
            train.extend(r.iter().map(|c| (c.as_slice(), 1.0)));
        }
    }

    let m = train.len() as f64;
    let mut mean = vec![0.0; NUM_DOMAIN_FEATURES];
    for (f, _) in &train {
        mean.iter_mut().zip(*f).for_each(|(a, v)| *a += v / m);
    }
    let mut scale = vec![0.0; NUM_DOMAIN_FEATURES];
    for (f, _) in &train {
        scale.iter_mut().zip(*f).zip(&mean).for_each(|((a, v), mu)| *a += (v - mu).powi(2) / m);
    }
    scale.iter_mut().for_each(|s| *s = s.sqrt().max(1e-6));

    let mut clf = DomainClassifier {
        grid: params.grid,
        mean,
        scale,
        weights: vec![0.0; NUM_DOMAIN_FEATURES + 1],
        holdout_accuracy: 0.0,
    };
    let standardized: Vec<(Vec<f64>, f64)> = train
        .iter()
        .map(|(f, y)| {
            let z = f.iter().zip(&clf.mean).zip(&clf.scale).map(|((v, mu), s)| (v - mu) / s).collect();
            (z, *y)
        })
        .collect();
    // Full-batch gradient descent on the L2-regularized logistic loss; the
    // bias is not decayed.
    for _ in 0..params.iterations {
        let mut grad = vec![0.0; NUM_DOMAIN_FEATURES + 1];
        for (z, y) in &standardized {
            let logit = z.iter().zip(&clf.weights).map(|(a, b)| a * b).sum::<f64>() + clf.weights[NUM_DOMAIN_FEATURES];
            let err = (sigmoid(logit) - y) / m;
            grad.iter_mut().zip(z).for_each(|(g, v)| *g += err * v);
            grad[NUM_DOMAIN_FEATURES] += err;
        }
        for (k, (w, g)) in clf.weights.iter_mut().zip(&grad).enumerate() {
            let decay = if k < NUM_DOMAIN_FEATURES { params.l2 * *w } else { 0.0 };
            *w -= params.learning_rate * (g + decay);
        }
    }

    let correct = test
        .iter()
        .filter(|(cells, is_real)| (clf.prob_cells(cells) >= 0.5) == *is_real)
        .count();
    clf.holdout_accuracy = correct as f64 / test.len() as f64;
    if clf.holdout_accuracy < REQUIRED_HOLDOUT_ACCURACY {
        return Err(Error::NotSeparable {
            accuracy: clf.holdout_accuracy,
            required: REQUIRED_HOLDOUT_ACCURACY,
        });
    }
    Ok(clf)
}

/// A way of combining a synthetic sample with a real image.
pub trait Mixer: Sync {
    fn name(&self) -> String;
    /// `partner` is a second real image for mixers that use one.
    fn mix(&self, synth: &SynthItem, real: &Image, partner: &Image, rng: &mut Rng) -> Result<Image>;
}

/// One of the engine's mix modes, without a teacher.
pub struct ModeMixer(pub MixConfig);

impl Mixer for ModeMixer {
    fn name(&self) -> String {
        self.0.mode.to_string()
    }

    fn mix(&self, synth: &SynthItem, real: &Image, partner: &Image, rng: &mut Rng) -> Result<Image> {
        let first = real_pair(real, None, &self.0)?;
        let second = real_pair(partner, None, &self.0)?;
        let mut times = StageTimes::default();
        Ok(mix_sample(&self.0, synth, &first, Some(&second), rng, &mut times)?.image)
    }
}

/// Ignores the synthetic sample: the upper bound of any mixer.
pub struct RealPassthrough;

impl Mixer for RealPassthrough {
    fn name(&self) -> String {
        "real".into()
    }

    fn mix(&self, _: &SynthItem, real: &Image, _: &Image, _: &mut Rng) -> Result<Image> {
        Ok(real.clone())
    }
}

/// Ignores the real image: the lower bound.
pub struct SynthPassthrough;

impl Mixer for SynthPassthrough {
    fn name(&self) -> String {
        "synthetic".into()
    }

    fn mix(&self, synth: &SynthItem, _: &Image, _: &Image, _: &mut Rng) -> Result<Image> {
        Ok(synth.image.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DcaSampling {
    /// `budget` uniformly drawn (synthetic, real) pairs.
    MonteCarlo { budget: usize },
    /// Every (synthetic, real) pair once.
    Exhaustive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcaReport {
    pub mixer: String,
    /// Pairs mixed and scored.
    pub pairs: usize,
    /// Pairs whose mixing failed.
    pub skipped: usize,
    pub dca: f64,
    pub holdout_accuracy: f64,
    /// Probabilities averaged instead of hard 0.5 decisions.
    pub soft: bool,
}

const STREAM_DCA: u64 = 31;

/// Share of mixed images the scorer calls real. With `soft`, the mean
/// probability of real instead.
pub fn dca(
    scorer: &dyn DomainScorer,
    mixer: &dyn Mixer,
    corpus: &Corpus,
    sampling: DcaSampling,
    seed: u64,
    soft: bool,
) -> Result<DcaReport> {
    let (ns, nr) = (corpus.synth().len(), corpus.real().len());
    let draws: Vec<(usize, usize, usize, Rng)> = match sampling {
        DcaSampling::MonteCarlo { budget } => {
            if budget == 0 {
                return Err(Error::Config("DCA budget must be >= 1".into()));
            }
            (0..budget)
                .map(|p| {
                    let mut rng = Rng::derive(seed, &[STREAM_DCA, p as u64]);
                    let s = rng.random_range(0..ns);
                    let r = rng.random_range(0..nr);
                    let partner = rng.random_range(0..nr);
                    (s, r, partner, rng)
                })
                .collect()
        }
        DcaSampling::Exhaustive => (0..ns)
            .flat_map(|s| (0..nr).map(move |r| (s, r)))
            .map(|(s, r)| (s, r, (r + 1) % nr, Rng::derive(seed, &[STREAM_DCA, s as u64, r as u64])))
            .collect(),
    };
    let scores: Vec<Option<f64>> = draws
        .into_par_iter()
        .map(|(s, r, partner, mut rng)| {
            match mixer.mix(&corpus.synth()[s], &corpus.real()[r], &corpus.real()[partner], &mut rng) {
                Ok(img) => {
                    let p = scorer.prob_real(&img);
                    Some(if soft { p } else { f64::from(u8::from(p >= 0.5)) })
                }
                Err(e) => {
                    log::warn!("{}: pair ({s}, {r}) skipped: {e}", mixer.name());
                    None
                }
            }
        })
        .collect();
    let kept: Vec<f64> = scores.iter().flatten().copied().collect();
    let skipped = scores.len() - kept.len();
    let dca = if kept.is_empty() {
        0.0
    } else {
        kept.iter().sum::<f64>() / kept.len() as f64
    };
    Ok(DcaReport {
        mixer: mixer.name(),
        pairs: kept.len(),
        skipped,
        dca,
        holdout_accuracy: scorer.holdout_accuracy(),
        soft,
    })
}
