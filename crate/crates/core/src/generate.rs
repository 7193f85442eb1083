//! Online generation of mixed training pairs from a synthetic and a real
//! corpus, shared by the `mix` command, the batch array interface, the domain
//! evaluation and the throughput benchmark.
//!
//! Pair `i` depends only on the seed and `i`: its sources come from
//! epoch-shuffled index streams and its randomness from a stream derived from
//! `(seed, i)`, so any subset of pairs can be produced in any order on any
//! number of workers with identical results.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotation::{label_map, parse_annotations, Granularity};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::geometry::{Point, QuadBox};
use crate::glyph::{glyph_mask_from_gray, GlyphParams};
use crate::mixing::{gim, mixup, tim, MixPair, ProvenanceMap, Source, SynthSample, TimParams};
use crate::model::PixelScorer;
use crate::raster::{BinaryMask, Image, Raster};
use crate::reliability::{reliability_mask, EntropyForm};
use crate::rng::{epoch_permutation, Rng};

/// Synthetic image, its label map and the boxes glyph masks are extracted from.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthItem {
    pub image: Image,
    pub label: BinaryMask,
    pub boxes: Vec<QuadBox>,
}

impl SynthItem {
    /// Label map rasterized from the boxes themselves.
    pub fn from_boxes(image: Image, boxes: Vec<QuadBox>) -> Self {
        let label = label_map(&boxes, image.width(), image.height());
        Self { image, label, boxes }
    }

    /// Resampled to `width` x `height` with the boxes mapped along.
    pub fn resized(&self, width: usize, height: usize) -> SynthItem {
        let (w, h) = self.image.dims();
        let sx = width as f64 / w as f64;
        let sy = height as f64 / h as f64;
        // Pixel centers sit at integer coordinates, so scale about -0.5.
        let map = |p: Point| Point::new((p.x + 0.5) * sx - 0.5, (p.y + 0.5) * sy - 0.5);
        let boxes = self
            .boxes
            .iter()
            .map(|q| QuadBox::new(map(q.lt), map(q.lb), map(q.rt), map(q.rb)))
            .collect();
        SynthItem::from_boxes(self.image.resized(width, height), boxes)
    }
}

/// Synthetic and real sources on one RGB grid.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub(crate) synth: Vec<SynthItem>,
    pub(crate) real: Vec<Image>,
}

impl Corpus {
    /// All synthetic images must share one size; real images are resized to it.
    pub fn new(synth: Vec<SynthItem>, real: Vec<Image>) -> Result<Self> {
        let first = synth
            .first()
            .ok_or_else(|| Error::EmptySource("synthetic set is empty".into()))?;
        if real.is_empty() {
            return Err(Error::EmptySource("real set is empty".into()));
        }
        let (w, h) = first.image.dims();
        for item in &synth {
            item.image.ensure_same_dims((w, h))?;
            item.label.ensure_same_dims((w, h))?;
        }
        let real = real.into_iter().map(|img| fit_rgb(img, w, h)).collect();
        let synth = synth
            .into_iter()
            .map(|s| SynthItem {
                image: s.image.to_rgb(),
                ..s
            })
            .collect();
        Ok(Self { synth, real })
    }

    /// Every source resampled to `width` x `height`.
    pub fn resized(&self, width: usize, height: usize) -> Result<Corpus> {
        let synth = self.synth.par_iter().map(|s| s.resized(width, height)).collect();
        Corpus::new(synth, self.real.clone())
    }

    pub fn dims(&self) -> (usize, usize) {
        self.synth[0].image.dims()
    }

    pub fn synth(&self) -> &[SynthItem] {
        &self.synth
    }

    pub fn real(&self) -> &[Image] {
        &self.real
    }
}

fn fit_rgb(img: Image, w: usize, h: usize) -> Image {
    let img = img.to_rgb();
    if img.dims() == (w, h) {
        img
    } else {
        img.resized(w, h)
    }
}

/// Loads the images of an annotation file, resolving relative paths against
/// the file's directory. Records without boxes of `granularity` are skipped.
pub fn load_synthetic(path: impl AsRef<Path>, granularity: Granularity) -> Result<Vec<SynthItem>> {
    Ok(load_synthetic_with_paths(path, granularity)?.1)
}

/// [`load_synthetic`] plus the resolved path of every loaded image.
pub fn load_synthetic_with_paths(
    path: impl AsRef<Path>,
    granularity: Granularity,
) -> Result<(Vec<PathBuf>, Vec<SynthItem>)> {
    let path = path.as_ref();
    let parsed = parse_annotations(path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    let usable: Vec<_> = parsed
        .records
        .iter()
        .filter_map(|r| r.select_boxes(granularity).ok().map(|b| (root.join(&r.image_path), b.to_vec())))
        .collect();
    let skipped = parsed.records.len() - usable.len();
    if skipped > 0 {
        log::warn!("{}: {skipped} records have no {granularity} boxes", path.display());
    }
    let items = usable
        .par_iter()
        .map(|(image_path, boxes)| Ok(SynthItem::from_boxes(Image::load(image_path)?, boxes.clone())))
        .collect::<Result<_>>()?;
    Ok((usable.into_iter().map(|u| u.0).collect(), items))
}

/// PNG and JPEG files of a directory, sorted by file name.
pub fn real_image_paths(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(format!("reading directory {}", dir.display()), e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptySource(format!("no PNG or JPEG images in {}", dir.display())));
    }
    Ok(paths)
}

/// Loads every image listed by [`real_image_paths`].
pub fn load_real_dir(dir: impl AsRef<Path>) -> Result<Vec<Image>> {
    real_image_paths(dir)?.par_iter().map(Image::load).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixMode {
    GlyphMix,
    Mixup,
    CutMix,
    ClassMix,
}

impl MixMode {
    pub const ALL: [MixMode; 4] = [MixMode::GlyphMix, MixMode::Mixup, MixMode::CutMix, MixMode::ClassMix];

    /// Baselines carry no reliability masks of their own.
    pub fn has_reliability(self) -> bool {
        self == MixMode::GlyphMix
    }
}

impl fmt::Display for MixMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MixMode::GlyphMix => "glyphmix",
            MixMode::Mixup => "mixup",
            MixMode::CutMix => "cutmix",
            MixMode::ClassMix => "classmix",
        })
    }
}

impl FromStr for MixMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MixMode::ALL
            .into_iter()
            .find(|m| m.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown mix mode {s:?} (glyphmix|mixup|cutmix|classmix)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixConfig {
    pub mode: MixMode,
    /// Mix two real images before pasting glyphs.
    pub tim: bool,
    /// Excluded entropy percentile for teacher pseudo-labels.
    pub gamma: f64,
    pub entropy_form: EntropyForm,
    pub binarize_threshold: f64,
    pub glyph: GlyphParams,
    pub tim_params: TimParams,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            mode: MixMode::GlyphMix,
            tim: true,
            gamma: 20.0,
            entropy_form: EntropyForm::default(),
            binarize_threshold: 0.5,
            glyph: GlyphParams::default(),
            tim_params: TimParams::default(),
        }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 100]", self.gamma)));
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(Error::Config("binarize_threshold must lie in (0, 1)".into()));
        }
        self.glyph.validate()?;
        self.tim_params.validate()
    }
}

/// Time spent per stage while generating one pair.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimes {
    pub grayscale: Duration,
    /// Per-box clustering, including the box spans it clusters over.
    pub kmeans: Duration,
    /// Synthetic label map.
    pub rasterize: Duration,
    /// Intra-domain mixing and pasting.
    pub compose: Duration,
}

impl StageTimes {
    pub fn total(&self) -> Duration {
        self.grayscale + self.kmeans + self.rasterize + self.compose
    }
}

fn timed<T>(slot: &mut Duration, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    *slot += start.elapsed();
    out
}

/// Real sample with teacher pseudo-labels gated by entropy, or with an
/// all-zero label and all-one reliability when there is no teacher.
pub fn real_pair(image: &Image, teacher: Option<&PixelScorer>, config: &MixConfig) -> Result<MixPair> {
    let (w, h) = image.dims();
    match teacher {
        Some(t) => {
            let probs = t.score(image);
            let label = probs.binarize(config.binarize_threshold);
            let reliability = reliability_mask(&probs, config.gamma, config.entropy_form)?;
            MixPair::real(image.clone(), label, reliability)
        }
        None => MixPair::real(image.clone(), BinaryMask::zeros(w, h), BinaryMask::ones(w, h)),
    }
}

/// Mixes one synthetic sample into `first` (and `second`, for intra-domain
/// mixing) under `config.mode`.
///
/// Baselines paste the synthetic sample as the donor: CutMix inside a
/// rectangle whose area fraction is uniform on [0, 1), ClassMix inside the
/// synthetic label map, Mixup blends with a uniform weight and takes labels
/// from whichever source dominates.
pub fn mix_sample(
    config: &MixConfig,
    synth: &SynthItem,
    first: &MixPair,
    second: Option<&MixPair>,
    rng: &mut Rng,
    times: &mut StageTimes,
) -> Result<MixPair> {
    let (w, h) = synth.image.dims();
    let label = timed(&mut times.rasterize, || label_map(&synth.boxes, w, h));
    let sample = SynthSample {
        image: synth.image.clone(),
        label,
    };
    match config.mode {
        MixMode::GlyphMix => {
            let gray = timed(&mut times.grayscale, || synth.image.to_grayscale());
            let glyph = timed(&mut times.kmeans, || glyph_mask_from_gray(&gray, &synth.boxes, &config.glyph).mask);
            timed(&mut times.compose, || {
                let base = match second.filter(|_| config.tim) {
                    Some(second) => tim(first, second, &config.tim_params, rng)?.0,
                    None => first.clone(),
                };
                gim(&base, &sample, &glyph)
            })
        }
        MixMode::CutMix => {
            let side = rng.random::<f64>().sqrt();
            let rw = ((side * w as f64).round() as usize).min(w);
            let rh = ((side * h as f64).round() as usize).min(h);
            let x = rng.random_range(0..=w - rw);
            let y = rng.random_range(0..=h - rh);
            timed(&mut times.compose, || {
                let rect = BinaryMask::from_fn(w, h, |px, py| px >= x && px < x + rw && py >= y && py < y + rh);
                gim(first, &sample, &rect)
            })
        }
        MixMode::ClassMix => timed(&mut times.compose, || gim(first, &sample, &sample.label)),
        MixMode::Mixup => {
            let lambda: f64 = rng.random();
            timed(&mut times.compose, || {
                let image = mixup(&first.image, &sample.image, lambda)?;
                if lambda >= 0.5 {
                    Ok(MixPair {
                        image,
                        label: sample.label.clone(),
                        reliability: BinaryMask::ones(w, h),
                        provenance: ProvenanceMap::uniform(w, h, Source::Synth),
                    })
                } else {
                    Ok(MixPair { image, ..first.clone() })
                }
            })
        }
    }
}

/// One generated pair and where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedPair {
    pub index: usize,
    pub synth_index: usize,
    pub real_index: usize,
    /// Donor of the intra-domain mix, when one was used.
    pub second_index: Option<usize>,
    pub pair: MixPair,
    pub times: StageTimes,
}

const STREAM_SYNTH_PICK: u64 = 21;
const STREAM_REAL_PICK: u64 = 22;
const STREAM_SECOND_PICK: u64 = 23;
const STREAM_PAIR: u64 = 24;

fn pick(seed: u64, stream: u64, n: usize, k: usize) -> usize {
    epoch_permutation(seed, stream, (k / n) as u64, n)[k % n]
}

/// Runs `f` on a dedicated pool of `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(f))
}

pub struct PairGenerator<'a> {
    corpus: &'a Corpus,
    teacher: Option<&'a PixelScorer>,
    config: MixConfig,
    seed: u64,
}

impl<'a> PairGenerator<'a> {
    pub fn new(corpus: &'a Corpus, config: MixConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            corpus,
            teacher: None,
            config,
            seed,
        })
    }

    /// Pseudo-labels and reliability masks come from `teacher`.
    pub fn with_teacher(mut self, teacher: &'a PixelScorer) -> Self {
        self.teacher = Some(teacher);
        self
    }

    pub fn config(&self) -> &MixConfig {
        &self.config
    }

    /// Source indices of pair `index`: synthetic, real and intra-domain donor.
    pub fn sources(&self, index: usize) -> (usize, usize, Option<usize>) {
        let (ns, nr) = (self.corpus.synth.len(), self.corpus.real.len());
        let s = pick(self.seed, STREAM_SYNTH_PICK, ns, index);
        let r = pick(self.seed, STREAM_REAL_PICK, nr, index);
        let uses_second = self.config.mode == MixMode::GlyphMix && self.config.tim;
        let second = uses_second.then(|| pick(self.seed, STREAM_SECOND_PICK, nr, index));
        (s, r, second)
    }

    pub fn generate_pair(&self, index: usize) -> Result<GeneratedPair> {
        let (s, r, second_index) = self.sources(index);
        let mut rng = Rng::derive(self.seed, &[STREAM_PAIR, index as u64]);
        let mut times = StageTimes::default();
        let first = real_pair(&self.corpus.real[r], self.teacher, &self.config)?;
        let second = second_index
            .map(|j| real_pair(&self.corpus.real[j], self.teacher, &self.config))
            .transpose()?;
        let pair = mix_sample(
            &self.config,
            &self.corpus.synth[s],
            &first,
            second.as_ref(),
            &mut rng,
            &mut times,
        )?;
        Ok(GeneratedPair {
            index,
            synth_index: s,
            real_index: r,
            second_index,
            pair,
            times,
        })
    }

    /// Pairs `indices` in order, spread over `workers` threads.
    pub fn generate(&self, indices: &[usize], workers: usize) -> Result<Vec<GeneratedPair>> {
        with_workers(workers, || indices.par_iter().map(|&i| self.generate_pair(i)).collect())?
    }

    /// Pairs `0..count` packed as arrays.
    pub fn batch(&self, count: usize, workers: usize) -> Result<BatchArrays> {
        let indices: Vec<usize> = (0..count).collect();
        let pairs = self.generate(&indices, workers)?;
        BatchArrays::from_pairs(pairs.iter().map(|g| &g.pair))
    }
}

/// Row-major batch of mixed pairs with 8-bit samples. Masks hold 0 or 255 and
/// provenance holds the gray levels of [`Source`], exactly as the PNG outputs
/// of the `mix` command encode them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchArrays {
    pub batch: usize,
    pub width: usize,
    pub height: usize,
    /// `batch x height x width x 3`.
    pub images: Vec<u8>,
    /// `batch x height x width` each.
    pub labels: Vec<u8>,
    pub reliability: Vec<u8>,
    pub provenance: Vec<u8>,
}

impl BatchArrays {
    pub fn from_pairs<'p>(pairs: impl IntoIterator<Item = &'p MixPair>) -> Result<BatchArrays> {
        let mut out: Option<BatchArrays> = None;
        for pair in pairs {
            let (w, h) = pair.dims();
            let arrays = out.get_or_insert_with(|| BatchArrays {
                batch: 0,
                width: w,
                height: h,
                images: Vec::new(),
                labels: Vec::new(),
                reliability: Vec::new(),
                provenance: Vec::new(),
            });
            pair.image.ensure_same_dims((arrays.width, arrays.height))?;
            arrays.images.extend_from_slice(pair.image.to_rgb().data());
            arrays.labels.extend_from_slice(pair.label.to_image().data());
            arrays.reliability.extend_from_slice(pair.reliability.to_image().data());
            arrays.provenance.extend_from_slice(pair.provenance.to_image().data());
            arrays.batch += 1;
        }
        out.ok_or_else(|| Error::EmptySource("empty batch".into()))
    }
}

/// Inputs of [`generate_batch`], the in-memory counterpart of the `mix` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRequest {
    pub synthetic: PathBuf,
    pub real_dir: PathBuf,
    pub batch_size: usize,
    pub tim: bool,
    pub granularity: Granularity,
    pub entropy_form: EntropyForm,
    pub gamma: f64,
    pub seed: u64,
    /// Checkpoint whose teacher labels the real images.
    pub teacher: Option<PathBuf>,
    pub workers: usize,
}

impl BatchRequest {
    pub fn new(synthetic: impl Into<PathBuf>, real_dir: impl Into<PathBuf>) -> Self {
        let mix = MixConfig::default();
        Self {
            synthetic: synthetic.into(),
            real_dir: real_dir.into(),
            batch_size: 1,
            tim: mix.tim,
            granularity: Granularity::Char,
            entropy_form: mix.entropy_form,
            gamma: mix.gamma,
            seed: 0,
            teacher: None,
            workers: 1,
        }
    }

    pub fn mix_config(&self) -> MixConfig {
        MixConfig {
            tim: self.tim,
            gamma: self.gamma,
            entropy_form: self.entropy_form,
            ..MixConfig::default()
        }
    }
}

/// Glyph-mixed pairs `0..batch_size` for the request. Nothing is returned
/// unless every source loads.
pub fn generate_batch(req: &BatchRequest) -> Result<BatchArrays> {
    if req.batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let corpus = Corpus::new(load_synthetic(&req.synthetic, req.granularity)?, load_real_dir(&req.real_dir)?)?;
    let teacher = req.teacher.as_ref().map(Checkpoint::load).transpose()?.map(|c| c.teacher);
    let mut generator = PairGenerator::new(&corpus, req.mix_config(), req.seed)?;
    if let Some(t) = &teacher {
        generator = generator.with_teacher(t);
    }
    generator.batch(req.batch_size, req.workers)
}
