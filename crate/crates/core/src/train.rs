//! Student-teacher pretraining on mixed synthetic and unlabeled real data.
//!
//! Every step draws half a batch of synthetic samples and half a batch of real
//! images. The student is supervised on the synthetic samples directly and,
//! when glyph mixing is on, on composites built from the real strong views
//! (labelled by the teacher on the weak views and gated by entropy) with
//! synthetic glyphs pasted on top. The teacher is only ever written by the
//! exponential moving average of the student.
//!
//! Work that does not depend on the models (sampling, augmentation, glyph
//! masks, features) runs one step ahead on a producer thread behind a bounded
//! queue. Per-sample results are reduced in index order, so runs are
//! bit-reproducible for a fixed seed and any worker count.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::mpsc::sync_channel;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentationSpec;
use crate::checkpoint::{Checkpoint, CheckpointHeader};
use crate::generate::Corpus;
use crate::error::{Error, Result};
use crate::glyph::{build_glyph_mask_serial, GlyphParams};
use crate::mixing::{glyphmix, MixPair, SynthSample, TimParams};
use crate::model::{ema_update_inplace, loss_and_grad, FeatureBank, MaskedBce, PixelLoss, PixelScorer, NUM_FEATURES, NUM_PARAMS};
use crate::raster::{BinaryMask, Image, Raster};
use crate::reliability::{reliability_mask, EntropyForm, GammaSchedule};
use crate::rng::{epoch_permutation, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: usize,
    /// Samples per step, split evenly between synthetic and real.
    pub batch_size: usize,
    pub seed: u64,
    pub workers: usize,
    /// Steps prepared ahead of the optimizer.
    pub prefetch: usize,
    pub ema_alpha: f64,
    /// Base learning rate is `lr_coefficient * batch_size / lr_reference_batch`.
    pub lr_coefficient: f64,
    pub lr_reference_batch: usize,
    pub warmup_fraction: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub gamma_start: f64,
    pub gamma_end: f64,
    pub entropy_form: EntropyForm,
    pub binarize_threshold: f64,
    /// Train on glyph-mixed composites; off gives the synthetic-only ablation.
    pub glyphmix: bool,
    /// Mix two real images before pasting glyphs.
    pub tim: bool,
    /// Recompute glyph masks every time instead of caching them per image.
    pub recompute_glyph_masks: bool,
    pub augmentation: AugmentationSpec,
    pub glyph: GlyphParams,
    pub tim_params: TimParams,
    /// Initial text probability everywhere; sets the starting bias.
    pub init_text_prior: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            batch_size: 24,
            seed: 0,
            workers: 1,
            prefetch: 2,
            ema_alpha: 0.996,
            lr_coefficient: 0.003,
            lr_reference_batch: 256,
            warmup_fraction: 0.1,
            min_lr: 0.0,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            gamma_start: 80.0,
            gamma_end: 20.0,
            entropy_form: EntropyForm::OneSided,
            binarize_threshold: 0.5,
            glyphmix: true,
            tim: true,
            recompute_glyph_masks: false,
            augmentation: AugmentationSpec::default(),
            glyph: GlyphParams::default(),
            tim_params: TimParams::default(),
            init_text_prior: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "batch_size must be even and >= 2, got {}",
                self.batch_size
            )));
        }
        if self.workers == 0 || self.prefetch == 0 {
            return Err(Error::Config("workers and prefetch must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return Err(Error::Config(format!("ema_alpha {} not in [0, 1]", self.ema_alpha)));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) || self.lr_reference_batch == 0 {
            return Err(Error::Config("invalid learning-rate schedule".into()));
        }
        if !(self.init_text_prior > 0.0 && self.init_text_prior < 1.0) {
            return Err(Error::Config("init_text_prior must be in (0, 1)".into()));
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(Error::Config("binarize_threshold must be in (0, 1)".into()));
        }
        GammaSchedule::new(self.gamma_start, self.gamma_end, self.total_steps.max(1))
            .map_err(|e| Error::Config(e.to_string()))?;
        self.augmentation.validate()?;
        self.glyph.validate()?;
        self.tim_params.validate()
    }

    /// Zero feature weights and the bias of `init_text_prior`.
    pub fn initial_model(&self) -> PixelScorer {
        let mut w = vec![0.0; NUM_PARAMS];
        let p = self.init_text_prior;
        w[NUM_FEATURES] = (p / (1.0 - p)).ln();
        PixelScorer::from_weights(w).expect("parameter count")
    }

    pub fn base_lr(&self) -> f64 {
        self.lr_coefficient * self.batch_size as f64 / self.lr_reference_batch as f64
    }

    pub fn warmup_steps(&self) -> usize {
        ((self.total_steps as f64 * self.warmup_fraction).round() as usize).max(1)
    }

    /// Linear warm-up to the base rate at step `warmup - 1`, then cosine decay
    /// reaching `min_lr` at the last step.
    pub fn lr_at(&self, step: usize) -> f64 {
        let base = self.base_lr();
        let warm = self.warmup_steps();
        if step + 1 < warm {
            return base * (step + 1) as f64 / warm as f64;
        }
        let last = self.total_steps.saturating_sub(1);
        if last + 1 <= warm {
            return base;
        }
        let progress = (step + 1 - warm) as f64 / (last + 1 - warm) as f64;
        self.min_lr + (base - self.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
    }
}

/// AdamW with decoupled weight decay; the bias is not decayed.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            m: vec![0.0; NUM_PARAMS],
            v: vec![0.0; NUM_PARAMS],
            t: 0,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
            weight_decay: config.weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, &g)) in params.iter_mut().zip(grad).enumerate() {
            if i < NUM_FEATURES {
                *p -= lr * self.weight_decay * *p;
            }
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub gamma: f64,
    /// Mean reliable share of the real samples; absent when the real branch is off.
    pub kept_fraction: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub student: PixelScorer,
    pub teacher: PixelScorer,
    pub optimizer: AdamW,
    pub metrics: Vec<StepMetrics>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, config: &TrainConfig) -> Result<Checkpoint> {
        Ok(Checkpoint {
            header: CheckpointHeader {
                step: self.metrics.len(),
                seed: config.seed,
                num_params: NUM_PARAMS,
                adam_t: self.optimizer.t,
                config: serde_json::to_value(config)?,
            },
            student: self.student.clone(),
            teacher: self.teacher.clone(),
            adam_m: self.optimizer.m.clone(),
            adam_v: self.optimizer.v.clone(),
        })
    }
}

const STREAM_SYNTH_ORDER: u64 = 11;
const STREAM_REAL_ORDER: u64 = 12;
const STREAM_SYNTH_AUG: u64 = 13;
const STREAM_REAL_AUG: u64 = 14;
const STREAM_MIX: u64 = 15;

/// Epoch-wise shuffled index stream: item `k` is position `k % n` of the
/// permutation for epoch `k / n`.
struct EpochOrder {
    seed: u64,
    stream: u64,
    n: usize,
    cache: HashMap<usize, Vec<usize>>,
}

impl EpochOrder {
    fn new(seed: u64, stream: u64, n: usize) -> Self {
        Self {
            seed,
            stream,
            n,
            cache: HashMap::new(),
        }
    }

    fn get(&mut self, k: usize) -> usize {
        let epoch = k / self.n;
        let (seed, stream, n) = (self.seed, self.stream, self.n);
        let perm = self
            .cache
            .entry(epoch)
            .or_insert_with(|| epoch_permutation(seed, stream, epoch as u64, n));
        let idx = perm[k % n];
        // Older epochs are never revisited.
        if k % n == n - 1 {
            self.cache.remove(&epoch);
        }
        idx
    }
}

struct PreparedSynth {
    image: Image,
    label: BinaryMask,
    glyph: BinaryMask,
    features: FeatureBank,
}

struct PreparedReal {
    strong: Image,
    weak_features: FeatureBank,
}

struct PreparedStep {
    step: usize,
    synth: Vec<PreparedSynth>,
    real: Vec<PreparedReal>,
}

struct Producer<'a> {
    config: &'a TrainConfig,
    data: &'a Corpus,
    synth_order: EpochOrder,
    real_order: EpochOrder,
    glyph_cache: HashMap<usize, BinaryMask>,
}

impl<'a> Producer<'a> {
    fn new(config: &'a TrainConfig, data: &'a Corpus) -> Self {
        Self {
            config,
            data,
            synth_order: EpochOrder::new(config.seed, STREAM_SYNTH_ORDER, data.synth.len()),
            real_order: EpochOrder::new(config.seed, STREAM_REAL_ORDER, data.real.len()),
            glyph_cache: HashMap::new(),
        }
    }

    fn glyph_mask(&mut self, idx: usize) -> BinaryMask {
        let item = &self.data.synth[idx];
        let compute = || build_glyph_mask_serial(&item.image, &item.boxes, &self.config.glyph).mask;
        if self.config.recompute_glyph_masks {
            return compute();
        }
        if let Some(mask) = self.glyph_cache.get(&idx) {
            return mask.clone();
        }
        let mask = compute();
        self.glyph_cache.insert(idx, mask.clone());
        mask
    }

    fn prepare(&mut self, step: usize) -> PreparedStep {
        let half = self.config.batch_size / 2;
        let synth_idx: Vec<usize> = (0..half).map(|i| self.synth_order.get(step * half + i)).collect();
        let glyphs: Vec<BinaryMask> = synth_idx.iter().map(|&i| self.glyph_mask(i)).collect();
        let (config, data) = (self.config, self.data);
        let synth = synth_idx
            .par_iter()
            .zip(glyphs)
            .enumerate()
            .map(|(i, (&idx, glyph))| {
                let item = &data.synth[idx];
                let mut rng = Rng::derive(config.seed, &[STREAM_SYNTH_AUG, step as u64, i as u64]);
                let geo = config.augmentation.sample_geometric(&mut rng);
                let image = geo.apply_image(&item.image);
                let label = geo.apply_mask(&item.label);
                let glyph = geo.apply_mask(&glyph);
                let features = FeatureBank::compute(&image);
                PreparedSynth {
                    image,
                    label,
                    glyph,
                    features,
                }
            })
            .collect();
        let real = if config.glyphmix {
            let real_idx: Vec<usize> = (0..half).map(|i| self.real_order.get(step * half + i)).collect();
            real_idx
                .par_iter()
                .enumerate()
                .map(|(j, &idx)| {
                    let mut rng = Rng::derive(config.seed, &[STREAM_REAL_AUG, step as u64, j as u64]);
                    let geo = config.augmentation.sample_geometric(&mut rng);
                    let photo = config.augmentation.sample_photometric(&mut rng);
                    let weak = geo.apply_image(&data.real[idx]);
                    let strong = photo.apply(&weak);
                    PreparedReal {
                        weak_features: FeatureBank::compute(&weak),
                        strong,
                    }
                })
                .collect()
        } else {
            Vec::new()
        };
        PreparedStep { step, synth, real }
    }
}

struct SampleResult {
    loss: f64,
    grad: Vec<f64>,
}

/// Runs the full loop. With `out_dir`, streams `metrics.jsonl` and writes
/// `checkpoint.gfck` at the end.
pub fn run_pretraining(config: &TrainConfig, data: &Corpus, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    run_pretraining_with_loss(config, data, out_dir, &MaskedBce)
}

pub fn run_pretraining_with_loss(
    config: &TrainConfig,
    data: &Corpus,
    out_dir: Option<&Path>,
    loss_fn: &dyn PixelLoss,
) -> Result<TrainOutcome> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let mut metrics_out = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
            let path = dir.join("metrics.jsonl");
            let file = fs::File::create(&path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
            Some(BufWriter::new(file))
        }
        None => None,
    };

    let mut student = config.initial_model();
    let mut teacher = student.clone();
    let mut optimizer = AdamW::new(config);
    let mut metrics = Vec::with_capacity(config.total_steps);
    let schedule = GammaSchedule::new(config.gamma_start, config.gamma_end, config.total_steps.max(1))?;

    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel::<PreparedStep>(config.prefetch);
        let pool_ref = &pool;
        scope.spawn(move || {
            let mut producer = Producer::new(config, data);
            for step in 0..config.total_steps {
                let prepared = pool_ref.install(|| producer.prepare(step));
                if tx.send(prepared).is_err() {
                    break;
                }
            }
        });

        for prepared in rx.iter() {
            let step = prepared.step;
            let gamma = schedule.gamma_at(step)?;
            let lr = config.lr_at(step);
            let (results, kept) =
                pool.install(|| step_samples(config, &student, &teacher, &prepared, gamma, loss_fn))?;

            let n = results.len() as f64;
            let mut loss = 0.0;
            let mut grad = vec![0.0; NUM_PARAMS];
            for r in &results {
                loss += r.loss;
                for (g, v) in grad.iter_mut().zip(&r.grad) {
                    *g += v;
                }
            }
            loss /= n;
            grad.iter_mut().for_each(|g| *g /= n);

            optimizer.step(student.weights_mut(), &grad, lr);
            ema_update_inplace(teacher.weights_mut(), student.weights(), config.ema_alpha)?;

            let m = StepMetrics {
                step,
                loss,
                gamma,
                kept_fraction: kept,
                lr,
            };
            if let Some(w) = metrics_out.as_mut() {
                serde_json::to_writer(&mut *w, &m)?;
                w.write_all(b"\n").map_err(|e| Error::io("writing metrics", e))?;
            }
            if step % 100 == 0 {
                log::debug!("step {step}: loss {loss:.5} gamma {gamma:.2} lr {lr:.3e}");
            }
            metrics.push(m);
        }
        Ok(())
    })?;

    if let Some(mut w) = metrics_out {
        w.flush().map_err(|e| Error::io("writing metrics", e))?;
    }
    let outcome = TrainOutcome {
        student,
        teacher,
        optimizer,
        metrics,
    };
    if let Some(dir) = out_dir {
        outcome.checkpoint(config)?.save(dir.join("checkpoint.gfck"))?;
    }
    Ok(outcome)
}

/// Per-sample losses and gradients of one step, in sample order, plus the
/// mean reliable share of the real samples.
fn step_samples(
    config: &TrainConfig,
    student: &PixelScorer,
    teacher: &PixelScorer,
    prepared: &PreparedStep,
    gamma: f64,
    loss_fn: &dyn PixelLoss,
) -> Result<(Vec<SampleResult>, Option<f64>)> {
    let mut results: Vec<SampleResult> = prepared
        .synth
        .par_iter()
        .map(|s| {
            let ones = BinaryMask::ones(s.label.width(), s.label.height());
            let (loss, grad) = loss_and_grad(student, &s.features, &s.label, &ones, loss_fn)?;
            Ok(SampleResult { loss, grad })
        })
        .collect::<Result<_>>()?;
    if prepared.real.is_empty() {
        return Ok((results, None));
    }

    let reals: Vec<MixPair> = prepared
        .real
        .par_iter()
        .map(|r| {
            let probs = teacher.score_features(&r.weak_features);
            let label = probs.binarize(config.binarize_threshold);
            let reliability = reliability_mask(&probs, gamma, config.entropy_form)?;
            MixPair::real(r.strong.clone(), label, reliability)
        })
        .collect::<Result<_>>()?;
    let kept = reals.iter().map(|p| p.reliability.fraction()).sum::<f64>() / reals.len() as f64;

    let mixed: Vec<SampleResult> = prepared
        .synth
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = Rng::derive(config.seed, &[STREAM_MIX, prepared.step as u64, i as u64]);
            let first = &reals[i % reals.len()];
            let second = (config.tim && reals.len() > 1).then(|| &reals[(i + 1) % reals.len()]);
            let synth = SynthSample {
                image: s.image.clone(),
                label: s.label.clone(),
            };
            let pair = glyphmix(first, second, &synth, &s.glyph, &config.tim_params, &mut rng)?;
            let features = FeatureBank::compute(&pair.image);
            let (loss, grad) = loss_and_grad(student, &features, &pair.label, &pair.reliability, loss_fn)?;
            Ok(SampleResult { loss, grad })
        })
        .collect::<Result<_>>()?;
    results.extend(mixed);
    Ok((results, Some(kept)))
}

/// Pooled pixel precision, recall and F-measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelScores {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

impl PixelScores {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f_measure = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f_measure,
        }
    }
}

/// Scores `model` on `(image, truth)` pairs, counting every pixel of every image.
pub fn evaluate_pixels(model: &PixelScorer, samples: &[(Image, BinaryMask)], threshold: f64) -> Result<PixelScores> {
    let counts: Vec<(usize, usize, usize)> = samples
        .par_iter()
        .map(|(img, truth)| {
            img.ensure_same_dims(truth.dims())?;
            let pred = model.score(img).binarize(threshold);
            let mut c = (0, 0, 0);
            for (&p, &t) in pred.bits().iter().zip(truth.bits()) {
                match (p, t) {
                    (1, 1) => c.0 += 1,
                    (1, 0) => c.1 += 1,
                    (0, 1) => c.2 += 1,
                    _ => {}
                }
            }
            Ok(c)
        })
        .collect::<Result<_>>()?;
    let (tp, fp, fn_) = counts
        .iter()
        .fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
    Ok(PixelScores::from_counts(tp, fp, fn_))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::SynthItem;
    use crate::toy::{toy_corpus, ToyDomain};

    fn small_data(n: usize) -> Corpus {
        let synth = toy_corpus(ToyDomain::Synthetic, n, 24, 24, 3)
            .into_iter()
            .map(|s| SynthItem::from_boxes(s.image, s.char_boxes))
            .collect();
        let real = toy_corpus(ToyDomain::Real, n, 24, 24, 3)
            .into_iter()
            .map(|s| s.image)
            .collect();
        Corpus::new(synth, real).unwrap()
    }

    fn small_config(steps: usize) -> TrainConfig {
        TrainConfig {
            total_steps: steps,
            batch_size: 4,
            lr_coefficient: 1.0,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_endpoints() {
        let c = TrainConfig {
            total_steps: 100,
            min_lr: 1e-5,
            ..TrainConfig::default()
        };
        let base = c.base_lr();
        assert!((base - 0.003 * 24.0 / 256.0).abs() < 1e-18);
        assert_eq!(c.warmup_steps(), 10);
        assert!((c.lr_at(0) - base / 10.0).abs() < 1e-18);
        assert_eq!(c.lr_at(9), base);
        assert!((c.lr_at(99) - 1e-5).abs() < 1e-15);
        for s in 9..99 {
            assert!(c.lr_at(s + 1) <= c.lr_at(s));
        }
    }

    #[test]
    fn epoch_order_visits_each_item_once_per_epoch() {
        let mut order = EpochOrder::new(1, 2, 7);
        for epoch in 0..3 {
            let mut seen: Vec<usize> = (0..7).map(|i| order.get(epoch * 7 + i)).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..7).collect::<Vec<_>>());
        }
    }

    #[test]
    fn zero_steps_leave_initialization() {
        let cfg = small_config(0);
        let out = run_pretraining(&cfg, &small_data(3), None).unwrap();
        assert_eq!(out.student, cfg.initial_model());
        assert_eq!(out.teacher, cfg.initial_model());
        assert!(out.metrics.is_empty());
        // Bias of a 1% prior: ln(0.01 / 0.99).
        assert!((cfg.initial_model().weights()[NUM_FEATURES] + 4.595_119_850_134_59).abs() < 1e-12);
    }

    #[test]
    fn teacher_is_only_the_average_of_the_student() {
        let cfg = TrainConfig {
            ema_alpha: 0.9,
            ..small_config(1)
        };
        let init = cfg.initial_model();
        let out = run_pretraining(&cfg, &small_data(3), None).unwrap();
        assert_ne!(out.student, init);
        for ((t, s), t0) in out.teacher.weights().iter().zip(out.student.weights()).zip(init.weights()) {
            assert_eq!(*t, 0.9 * t0 + (1.0 - 0.9) * s);
        }
    }

    #[test]
    fn runs_are_reproducible_across_worker_counts() {
        let data = small_data(4);
        let a = run_pretraining(&small_config(6), &data, None).unwrap();
        let b = run_pretraining(&TrainConfig { workers: 3, prefetch: 1, ..small_config(6) }, &data, None).unwrap();
        assert_eq!(a.student, b.student);
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn glyph_cache_does_not_change_results() {
        let data = small_data(3);
        let a = run_pretraining(&small_config(4), &data, None).unwrap();
        let cfg = TrainConfig {
            recompute_glyph_masks: true,
            ..small_config(4)
        };
        assert_eq!(a.student, run_pretraining(&cfg, &data, None).unwrap().student);
    }

    #[test]
    fn ablation_has_no_real_branch() {
        let cfg = TrainConfig {
            glyphmix: false,
            ..small_config(2)
        };
        let out = run_pretraining(&cfg, &small_data(3), None).unwrap();
        assert!(out.metrics.iter().all(|m| m.kept_fraction.is_none()));
    }

    #[test]
    fn writes_metrics_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(3);
        let out = run_pretraining(&cfg, &small_data(3), Some(dir.path())).unwrap();
        let lines = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 3);
        let first: StepMetrics = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
        assert_eq!(first, out.metrics[0]);
        let ck = Checkpoint::load(dir.path().join("checkpoint.gfck")).unwrap();
        assert_eq!(ck.student, out.student);
        assert_eq!(ck.header.step, 3);
    }

    #[test]
    fn scores_from_counts() {
        let s = PixelScores::from_counts(6, 2, 4);
        assert_eq!(s.precision, 0.75);
        assert_eq!(s.recall, 0.6);
        assert!((s.f_measure - 2.0 * 0.75 * 0.6 / 1.35).abs() < 1e-15);
        assert_eq!(PixelScores::from_counts(0, 0, 0).f_measure, 0.0);
    }

    #[test]
    fn rejects_odd_batches() {
        let cfg = TrainConfig {
            batch_size: 5,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
