//! Entropy gating of pseudo-labels and the linear gamma schedule.
//!
//! The gate keeps pixels whose entropy is at or below the `(100 - gamma)`-th
//! percentile of the entropy map, so with `gamma` annealed from 80 to 20 the
//! supervised share of each real image grows from 20% to 80%.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, LogitMap, Raster};

/// Entropy used for gating.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyForm {
    /// `-y ln y`.
    #[default]
    OneSided,
    /// `-y ln y - (1 - y) ln (1 - y)`.
    Binary,
}

impl std::str::FromStr for EntropyForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one_sided" => Ok(EntropyForm::OneSided),
            "binary" => Ok(EntropyForm::Binary),
            other => Err(Error::Config(format!(
                "entropy.form must be one_sided or binary, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl EntropyMap {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

pub fn entropy_map(logits: &LogitMap, form: EntropyForm) -> EntropyMap {
    let h = |y: f64| -y * y.ln();
    let values = logits
        .values()
        .iter()
        .map(|&y| match form {
            EntropyForm::OneSided => h(y),
            EntropyForm::Binary => h(y) + h(1.0 - y),
        })
        .collect();
    EntropyMap {
        width: logits.width(),
        height: logits.height(),
        values,
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=100.0).contains(&gamma) {
        return Err(Error::OutOfRange(format!("gamma {gamma} not in [0, 100]")));
    }
    Ok(())
}

/// Nearest-rank `(100 - gamma)`-th percentile of the entropy values.
pub fn threshold_for_gamma(entropy: &EntropyMap, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    let mut sorted = entropy.values.clone();
    if sorted.is_empty() {
        return Err(Error::InvalidRaster("empty entropy map".into()));
    }
    let n = sorted.len();
    let percentile = 100.0 - gamma;
    let rank = ((percentile * n as f64) / 100.0).ceil() as usize;
    let rank = rank.clamp(1, n);
    let (_, nth, _) = sorted.select_nth_unstable_by(rank - 1, |a, b| a.total_cmp(b));
    Ok(*nth)
}

/// `1` where the pixel's entropy is at most the gamma threshold.
pub fn reliability_mask(logits: &LogitMap, gamma: f64, form: EntropyForm) -> Result<BinaryMask> {
    let entropy = entropy_map(logits, form);
    let zeta = threshold_for_gamma(&entropy, gamma)?;
    let bits = entropy.values.iter().map(|&h| u8::from(h <= zeta)).collect();
    BinaryMask::from_bits(logits.width(), logits.height(), bits)
}

/// Linear anneal of gamma over `total_steps` iterations, endpoints inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaSchedule {
    pub start: f64,
    pub end: f64,
    pub total_steps: usize,
}

impl GammaSchedule {
    pub fn new(start: f64, end: f64, total_steps: usize) -> Result<Self> {
        check_gamma(start)?;
        check_gamma(end)?;
        Ok(Self {
            start,
            end,
            total_steps,
        })
    }

    pub fn gamma_at(&self, step: usize) -> Result<f64> {
        if step >= self.total_steps {
            return Err(Error::OutOfRange(format!(
                "step {step} outside schedule of {} steps",
                self.total_steps
            )));
        }
        if self.total_steps == 1 {
            return Ok(self.start);
        }
        let t = step as f64 / (self.total_steps - 1) as f64;
        Ok(self.start + (self.end - self.start) * t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::LOGIT_EPS;
    use proptest::prelude::*;

    fn map(values: Vec<f64>) -> EntropyMap {
        EntropyMap {
            width: values.len(),
            height: 1,
            values,
        }
    }

    #[test]
    fn entropy_limits() {
        let logits = LogitMap::new(3, 1, vec![1.0, 0.0, (-1.0f64).exp()]).unwrap();
        let h = entropy_map(&logits, EntropyForm::OneSided);
        assert!(h.values()[0] < 1.1e-6);
        // -1e-6 * ln(1e-6) = 1e-6 * 13.8155... = 1.38155e-5
        assert!((h.values()[1] - 1.381_551_055_796_427e-5).abs() < 1e-12);
        assert!((h.values()[2] - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn one_sided_peak_is_at_inverse_e() {
        // Grid search for the maximizer of -y ln y.
        let best = (1..100_000)
            .map(|i| i as f64 / 100_000.0)
            .max_by(|a, b| (-a * a.ln()).total_cmp(&(-b * b.ln())))
            .unwrap();
        assert!((best - (-1.0f64).exp()).abs() < 1e-4);
    }

    #[test]
    fn binary_form_is_symmetric() {
        let logits = LogitMap::new(2, 1, vec![0.2, 0.8]).unwrap();
        let h = entropy_map(&logits, EntropyForm::Binary);
        assert!((h.values()[0] - h.values()[1]).abs() < 1e-15);
        let at_half = entropy_map(&LogitMap::uniform(1, 1, 0.5), EntropyForm::Binary);
        assert!((at_half.values()[0] - 2f64.ln()).abs() < 1e-15);
        assert!(LOGIT_EPS > 0.0);
    }

    #[test]
    fn threshold_endpoints_and_hand_case() {
        let h = map(vec![0.3, 0.1, 0.4, 0.2]);
        assert_eq!(threshold_for_gamma(&h, 0.0).unwrap(), 0.4);
        assert_eq!(threshold_for_gamma(&h, 100.0).unwrap(), 0.1);
        assert_eq!(threshold_for_gamma(&h, 50.0).unwrap(), 0.2);
        assert!(threshold_for_gamma(&h, 101.0).is_err());
        assert!(threshold_for_gamma(&h, -1.0).is_err());
    }

    #[test]
    fn gate_keeps_low_entropy_pixels() {
        // Logits chosen so one-sided entropies are ordered like 0.1 < 0.2 < 0.3 < 0.4:
        // -y ln y increases on (0, 1/e), so increasing y there orders entropy.
        let logits = LogitMap::new(4, 1, vec![0.02, 0.05, 0.1, 0.2]).unwrap();
        let m = reliability_mask(&logits, 50.0, EntropyForm::OneSided).unwrap();
        assert_eq!(m.bits(), &[1, 1, 0, 0]);
    }

    #[test]
    fn all_equal_logits_keep_everything() {
        let m = reliability_mask(&LogitMap::uniform(5, 4, 0.5), 80.0, EntropyForm::OneSided).unwrap();
        assert_eq!(m.count_ones(), 20);
    }

    #[test]
    fn gamma_schedule_points() {
        let s = GammaSchedule::new(80.0, 20.0, 7).unwrap();
        assert_eq!(s.gamma_at(0).unwrap(), 80.0);
        assert_eq!(s.gamma_at(6).unwrap(), 20.0);
        assert_eq!(s.gamma_at(3).unwrap(), 50.0);
        assert!(s.gamma_at(7).is_err());
        let one = GammaSchedule::new(80.0, 20.0, 1).unwrap();
        assert_eq!(one.gamma_at(0).unwrap(), 80.0);
        assert!(GammaSchedule::new(120.0, 20.0, 3).is_err());
    }

    proptest! {
        #[test]
        fn kept_fraction_within_one_pixel(
            values in proptest::collection::hash_set(3u32..1_000_000, 1..300),
            gamma in 0.0f64..=100.0,
        ) {
            // Distinct probabilities below 1/e give distinct entropies.
            let probs: Vec<f64> = values.iter().map(|&v| v as f64 / 1_000_000.0 * 0.36).collect();
            let n = probs.len();
            let logits = LogitMap::new(n, 1, probs).unwrap();
            let kept = reliability_mask(&logits, gamma, EntropyForm::OneSided).unwrap().count_ones() as f64;
            let target = (100.0 - gamma) / 100.0 * n as f64;
            prop_assert!((kept - target).abs() <= 1.0, "kept {} target {}", kept, target);
        }

        #[test]
        fn mask_is_anti_monotone_in_gamma(
            probs in proptest::collection::vec(0.0f64..1.0, 1..200),
            g1 in 0.0f64..=100.0, g2 in 0.0f64..=100.0,
        ) {
            let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
            let n = probs.len();
            let logits = LogitMap::new(n, 1, probs).unwrap();
            for form in [EntropyForm::OneSided, EntropyForm::Binary] {
                let wide = reliability_mask(&logits, lo, form).unwrap();
                let narrow = reliability_mask(&logits, hi, form).unwrap();
                prop_assert!(narrow.is_subset_of(&wide));
            }
        }

        #[test]
        fn gamma_is_affine(total in 2usize..500) {
            let s = GammaSchedule::new(80.0, 20.0, total).unwrap();
            let d0 = s.gamma_at(1).unwrap() - s.gamma_at(0).unwrap();
            for step in 1..total - 1 {
                let d = s.gamma_at(step + 1).unwrap() - s.gamma_at(step).unwrap();
                prop_assert!((d - d0).abs() < 1e-9);
            }
        }
    }
}
