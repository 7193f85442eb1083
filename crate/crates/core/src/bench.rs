//! Throughput of online pair generation.
//!
//! Pairs are generated exactly as [`PairGenerator`] generates them and then
//! reduced to a digest, so no output is written and the digest proves the
//! measured work matches ordinary generation.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generate::{with_workers, Corpus, MixConfig, PairGenerator, StageTimes};
use crate::mixing::MixPair;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub p50_ms: f64,
    pub p95_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageBreakdown {
    pub grayscale: StageStats,
    pub kmeans: StageStats,
    pub rasterize: StageStats,
    pub compose: StageStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub count: usize,
    pub wall_seconds: f64,
    pub images_per_sec: f64,
    pub workers: usize,
    pub width: usize,
    pub height: usize,
    pub stages: StageBreakdown,
    /// Summed stage time over all pairs and workers.
    pub stage_seconds: f64,
    /// Summed per-pair generation time over all pairs and workers.
    pub pair_seconds: f64,
    /// Order-sensitive digest of every generated pair.
    pub digest: u64,
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        let row = |name: &str, s: &StageStats| format!("  {name:<10} p50 {:>9.3} ms  p95 {:>9.3} ms\n", s.p50_ms, s.p95_ms);
        let mut out = format!(
            "{} pairs at {}x{} on {} workers: {:.3} s, {:.2} images/sec\n",
            self.count, self.width, self.height, self.workers, self.wall_seconds, self.images_per_sec
        );
        out += &row("grayscale", &self.stages.grayscale);
        out += &row("kmeans", &self.stages.kmeans);
        out += &row("rasterize", &self.stages.rasterize);
        out += &row("compose", &self.stages.compose);
        out
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv(mut hash: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// FNV-1a digest of a pair's image, label, reliability and provenance.
pub fn pair_digest(pair: &MixPair) -> u64 {
    let mut h = fnv(FNV_OFFSET, pair.image.data());
    h = fnv(h, pair.label.bits());
    h = fnv(h, pair.reliability.bits());
    fnv(h, pair.provenance.to_image().data())
}

/// Combines per-pair digests in index order.
pub fn combine_digests(digests: impl IntoIterator<Item = u64>) -> u64 {
    digests.into_iter().fold(FNV_OFFSET, |h, d| fnv(h, &d.to_le_bytes()))
}

/// Nearest-rank percentile in milliseconds.
fn percentile_ms(sorted: &[Duration], q: f64) -> f64 {
    let rank = ((q / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1].as_secs_f64() * 1e3
}

fn stats(times: &[StageTimes], pick: impl Fn(&StageTimes) -> Duration) -> StageStats {
    let mut v: Vec<Duration> = times.iter().map(pick).collect();
    v.sort();
    StageStats {
        p50_ms: percentile_ms(&v, 50.0),
        p95_ms: percentile_ms(&v, 95.0),
    }
}

/// Generates glyph-mixed pairs `0..count` at `size` x `size` on `workers`
/// threads and reports timings. Sources are resampled to `size` first, which
/// is not timed; a corpus smaller than `count` is cycled with a fresh
/// shuffle per pass.
pub fn bench_generate(corpus: &Corpus, config: &MixConfig, count: usize, size: usize, workers: usize, seed: u64) -> Result<BenchReport> {
    if count == 0 || size == 0 || workers == 0 {
        return Err(Error::Config("bench needs count, size and workers >= 1".into()));
    }
    let resized;
    let corpus = if corpus.dims() == (size, size) {
        corpus
    } else {
        resized = corpus.resized(size, size)?;
        &resized
    };
    let generator = PairGenerator::new(corpus, *config, seed)?;

    let start = Instant::now();
    let results: Vec<(u64, StageTimes, Duration)> = with_workers(workers, || {
        (0..count)
            .into_par_iter()
            .map(|i| {
                let t = Instant::now();
                let out = generator.generate_pair(i)?;
                let digest = pair_digest(&out.pair);
                Ok((digest, out.times, t.elapsed()))
            })
            .collect::<Result<_>>()
    })??;
    let wall = start.elapsed().as_secs_f64();

    let times: Vec<StageTimes> = results.iter().map(|r| r.1).collect();
    Ok(BenchReport {
        count,
        wall_seconds: wall,
        images_per_sec: count as f64 / wall,
        workers,
        width: size,
        height: size,
        stages: StageBreakdown {
            grayscale: stats(&times, |t| t.grayscale),
            kmeans: stats(&times, |t| t.kmeans),
            rasterize: stats(&times, |t| t.rasterize),
            compose: stats(&times, |t| t.compose),
        },
        stage_seconds: times.iter().map(|t| t.total().as_secs_f64()).sum(),
        pair_seconds: results.iter().map(|r| r.2.as_secs_f64()).sum(),
        digest: combine_digests(results.iter().map(|r| r.0)),
    })
}
