//! Run configuration: one TOML file with dotted keys, plus `key=value`
//! overrides that win over the file. Unknown keys are errors.
//!
//! ```toml
//! seed = 7
//! workers = 4
//! gamma.start = 80
//! gamma.end = 20
//! entropy.form = "one_sided"
//! train.total_steps = 2000
//! tim.num_candidates = 3
//! ```
//!
//! Settings shared by several commands live at the top level or in their own
//! section (`seed`, `workers`, `gamma`, `entropy`, `glyph`, `tim`, `augment`)
//! and are copied into the per-command configurations.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::annotation::Granularity;
use crate::augment::AugmentationSpec;
use crate::domain::ClassifierParams;
use crate::error::{Error, Result};
use crate::generate::{MixConfig, MixMode};
use crate::glyph::GlyphParams;
use crate::mixing::TimParams;
use crate::reliability::EntropyForm;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GammaKeys {
    pub start: f64,
    pub end: f64,
}

impl Default for GammaKeys {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            start: t.gamma_start,
            end: t.gamma_end,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntropyKeys {
    pub form: EntropyForm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixKeys {
    pub mode: MixMode,
    pub tim: bool,
    /// Excluded entropy percentile when a teacher labels the real images.
    pub gamma: f64,
    pub binarize_threshold: f64,
    pub granularity: Granularity,
}

impl Default for MixKeys {
    fn default() -> Self {
        let m = MixConfig::default();
        Self {
            mode: m.mode,
            tim: m.tim,
            gamma: m.gamma,
            binarize_threshold: m.binarize_threshold,
            granularity: Granularity::Char,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DcaKeys {
    pub budget: usize,
    pub soft: bool,
    pub classifier: ClassifierParams,
}

impl Default for DcaKeys {
    fn default() -> Self {
        Self {
            budget: 1000,
            soft: false,
            classifier: ClassifierParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchKeys {
    pub count: usize,
    pub size: usize,
}

impl Default for BenchKeys {
    fn default() -> Self {
        Self { count: 1000, size: 640 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalConfig {
    pub seed: u64,
    pub workers: usize,
    pub log_level: String,
    pub out_dir: Option<PathBuf>,
    pub gamma: GammaKeys,
    pub entropy: EntropyKeys,
    pub glyph: GlyphParams,
    pub tim: TimParams,
    pub augment: AugmentationSpec,
    pub train: TrainConfig,
    pub mix: MixKeys,
    pub dca: DcaKeys,
    pub bench: BenchKeys,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            log_level: "info".into(),
            out_dir: None,
            gamma: GammaKeys::default(),
            entropy: EntropyKeys::default(),
            glyph: GlyphParams::default(),
            tim: TimParams::default(),
            augment: AugmentationSpec::default(),
            train: TrainConfig::default(),
            mix: MixKeys::default(),
            dca: DcaKeys::default(),
            bench: BenchKeys::default(),
        }
    }
}

/// `train.*` keys that duplicate a shared setting, with the key to use instead.
const SHARED_TRAIN_KEYS: [(&str, &str); 8] = [
    ("seed", "seed"),
    ("workers", "workers"),
    ("gamma_start", "gamma.start"),
    ("gamma_end", "gamma.end"),
    ("entropy_form", "entropy.form"),
    ("glyph", "glyph.*"),
    ("tim_params", "tim.*"),
    ("augmentation", "augment.*"),
];

/// Parses an override value as a TOML value, falling back to a bare string.
fn parse_value(text: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(text.to_string()))
}

fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if part.is_empty() {
            return Err(Error::Config(format!("malformed key {key:?}")));
        }
        if parts.peek().is_none() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        let next = cur
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = next
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key:?}: {part:?} is not a section")))?;
    }
    Ok(())
}

impl GlobalConfig {
    /// Parses `text` and applies `overrides` (`key=value`, dotted keys) on top.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<GlobalConfig> {
        let mut table: Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for item in overrides {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            set_dotted(&mut table, key.trim(), parse_value(value.trim()))?;
        }
        if let Some(train) = table.get("train").and_then(Value::as_table) {
            for (dup, instead) in SHARED_TRAIN_KEYS {
                if train.contains_key(dup) {
                    return Err(Error::Config(format!("train.{dup} is shared; set {instead} instead")));
                }
            }
        }
        let config: GlobalConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file; `None` starts from the defaults.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<GlobalConfig> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(format!("reading config {}", p.display()), e))?,
            None => String::new(),
        };
        GlobalConfig::from_toml_str(&text, overrides).map_err(|e| match (path, e) {
            (Some(p), Error::Config(m)) => Error::Config(format!("{}: {m}", p.display())),
            (_, e) => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        self.train_config().validate()?;
        self.mix_config().validate()
    }

    /// Training configuration with the shared settings filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            workers: self.workers,
            gamma_start: self.gamma.start,
            gamma_end: self.gamma.end,
            entropy_form: self.entropy.form,
            glyph: self.glyph,
            tim_params: self.tim,
            augmentation: self.augment,
            ..self.train.clone()
        }
    }

    pub fn mix_config(&self) -> MixConfig {
        MixConfig {
            mode: self.mix.mode,
            tim: self.mix.tim,
            gamma: self.mix.gamma,
            entropy_form: self.entropy.form,
            binarize_threshold: self.mix.binarize_threshold,
            glyph: self.glyph,
            tim_params: self.tim,
        }
    }

    /// The resolved configuration as TOML, for run records.
    pub fn to_toml(&self) -> Result<String> {
        let mut table = Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(train) = table.get_mut("train").and_then(Value::as_table_mut) {
            for (dup, _) in SHARED_TRAIN_KEYS {
                train.remove(dup);
            }
        }
        toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(GlobalConfig::from_toml_str("", &[]).unwrap(), GlobalConfig::default());
    }

    #[test]
    fn dotted_keys_reach_every_block() {
        let text = r#"
seed = 9
workers = 3
gamma.start = 70
gamma.end = 10
entropy.form = "binary"
train.total_steps = 40
train.lr_coefficient = 0.3
tim.num_candidates = 5
glyph.kmeans_max_iters = 7
augment.flip_prob = 0.0
mix.granularity = "word"
"#;
        let c = GlobalConfig::from_toml_str(text, &[]).unwrap();
        let t = c.train_config();
        assert_eq!((t.seed, t.workers, t.total_steps), (9, 3, 40));
        assert_eq!((t.gamma_start, t.gamma_end), (70.0, 10.0));
        assert_eq!(t.entropy_form, EntropyForm::Binary);
        assert_eq!(t.tim_params.num_candidates, 5);
        assert_eq!(t.glyph.kmeans_max_iters, 7);
        assert_eq!(t.augmentation.flip_prob, 0.0);
        assert_eq!(t.lr_coefficient, 0.3);
        let m = c.mix_config();
        assert_eq!((m.entropy_form, m.tim_params.num_candidates), (EntropyForm::Binary, 5));
        assert_eq!(c.mix.granularity, Granularity::Word);
    }

    #[test]
    fn unknown_and_duplicated_keys_are_rejected() {
        for text in ["sed = 1", "gamma.begin = 3", "train.total_step = 4", "[glyph]\nkmeans = 2"] {
            let err = GlobalConfig::from_toml_str(text, &[]).unwrap_err().to_string();
            assert!(err.contains("unknown field"), "{text}: {err}");
        }
        let err = GlobalConfig::from_toml_str("train.gamma_start = 50", &[]).unwrap_err().to_string();
        assert!(err.contains("gamma.start"), "{err}");
    }

    #[test]
    fn overrides_win_over_the_file() {
        let overrides = vec!["seed=4".to_string(), "entropy.form=binary".into(), "train.glyphmix = false".into()];
        let c = GlobalConfig::from_toml_str("seed = 1\nentropy.form = \"one_sided\"", &overrides).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.entropy.form, EntropyForm::Binary);
        assert!(!c.train.glyphmix);
        assert!(GlobalConfig::from_toml_str("", &["seed".into()]).is_err());
        assert!(GlobalConfig::from_toml_str("", &["seed.x=1".into()]).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(GlobalConfig::from_toml_str("workers = 0", &[]).is_err());
        assert!(GlobalConfig::from_toml_str("gamma.start = 120", &[]).is_err());
        assert!(GlobalConfig::from_toml_str("train.batch_size = 3", &[]).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = GlobalConfig::from_toml_str("seed = 5\nout_dir = \"run\"", &[]).unwrap();
        assert_eq!(GlobalConfig::from_toml_str(&c.to_toml().unwrap(), &[]).unwrap(), c);
    }
}
