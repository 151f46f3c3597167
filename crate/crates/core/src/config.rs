//! Run configuration read from TOML.
//!
//! Every section and key is optional; missing values take the desk-scale
//! defaults. Unknown keys are errors, and all of them are reported at once.
//!
//! ```toml
//! seed = 7
//!
//! [data]
//! glyphs = 10
//! train_size = 200
//!
//! [preprocess]
//! scale = 0.5
//!
//! [model]
//! encoder = "desk"
//! nsl = 2
//! ablate = "none"
//!
//! [train]
//! learning_rate = 1e-3
//! epochs = 60
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{AugmentConfig, PreprocessConfig, SynthConfig};
use crate::error::{Error, Result};
use crate::layers::EncoderConfig;
use crate::model::ModelConfig;
use crate::real::DType;
use crate::rvafm::{Ablation, DualLayers, Mode, RvafmConfig};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    #[serde(flatten)]
    pub synth: SynthConfig,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { synth: SynthConfig::default(), train_size: 200, val_size: 50, test_size: 50 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderPreset {
    /// Downsampling 8×4.
    Desk,
    /// Downsampling 32×8.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub encoder: EncoderPreset,
    pub c_f: usize,
    pub c_u: usize,
    pub c_h: usize,
    pub c_j: usize,
    pub kernel_size: usize,
    pub collapse_width: usize,
    pub nsl: usize,
    pub max_steps: usize,
    pub ablate: Ablation,
}

impl Default for ModelSection {
    fn default() -> Self {
        let r = RvafmConfig::desk();
        ModelSection {
            encoder: EncoderPreset::Desk,
            c_f: r.c_f,
            c_u: r.c_u,
            c_h: r.c_h,
            c_j: r.c_j,
            kernel_size: r.kernel_size,
            collapse_width: r.collapse_width,
            nsl: r.nsl,
            max_steps: r.max_steps,
            ablate: Ablation::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub dtype: DType,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub halt_loss_weight: f64,
    pub clip_norm: f64,
    pub augment_brightness: bool,
    pub augment_contrast: bool,
    pub augment_morphology: bool,
    pub augment_probability: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            dtype: DType::Float32,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            halt_loss_weight: t.halt_loss_weight,
            clip_norm: t.clip_norm,
            augment_brightness: t.augment.brightness,
            augment_contrast: t.augment.contrast,
            augment_morphology: t.augment.morphology,
            augment_probability: t.augment.probability,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct RunConfig {
    /// Seeds initialization, shuffling and augmentation. The corpus has its
    /// own `data.seed`.
    pub seed: u64,
    pub data: DataSection,
    pub preprocess: PreprocessConfig,
    pub model: ModelSection,
    pub train: TrainSection,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub nsl: Option<usize>,
    pub c_u: Option<usize>,
    pub ablate: Option<Ablation>,
}

fn unknown_keys(value: &toml::Value, schema: &toml::Value, path: &str, out: &mut Vec<String>) {
    let (Some(table), Some(known)) = (value.as_table(), schema.as_table()) else {
        return;
    };
    for (key, v) in table {
        let full = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
        match known.get(key) {
            Some(s) => unknown_keys(v, s, &full, out),
            None => out.push(format!("unknown key `{full}`")),
        }
    }
}

impl RunConfig {
    /// Parses TOML text, reporting every unknown key and invalid value.
    pub fn from_toml(text: &str) -> Result<Self> {
        let value: toml::Value =
            text.parse::<toml::Table>().map(toml::Value::Table).map_err(|e| Error::Config(vec![e.to_string()]))?;
        let schema = toml::Value::try_from(RunConfig::default()).expect("default config serializes");
        let mut errors = Vec::new();
        unknown_keys(&value, &schema, "", &mut errors);
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        let cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(n) = o.nsl {
            self.model.nsl = n;
        }
        if let Some(c) = o.c_u {
            self.model.c_u = c;
        }
        if let Some(a) = o.ablate {
            self.model.ablate = a;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        let mut note = |r: Result<()>| {
            if let Err(e) = r {
                errors.push(e.to_string());
            }
        };
        note(self.data.synth.validate());
        note(self.model_config().and_then(|m| m.validate()));
        note(self.train_config().validate());
        if self.data.train_size == 0 || self.data.val_size == 0 || self.data.test_size == 0 {
            errors.push("split sizes must be positive".into());
        }
        if self.preprocess.scale <= 0.0 {
            errors.push(format!("preprocess.scale must be positive, got {}", self.preprocess.scale));
        }
        if !(0.0..=1.0).contains(&self.train.augment_probability) {
            errors.push("train.augment_probability must lie in [0, 1]".into());
        }
        if self.train.epochs == 0 {
            errors.push("train.epochs must be at least 1".into());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn rvafm_config(&self) -> RvafmConfig {
        let m = &self.model;
        RvafmConfig {
            c_f: m.c_f,
            c_j: m.c_j,
            kernel_size: m.kernel_size,
            collapse_width: m.collapse_width,
            c_u: m.c_u,
            c_h: m.c_h,
            nsl: m.nsl,
            max_steps: m.max_steps,
            dual: DualLayers::from_ablation(m.ablate),
            mode: Mode::TrainMultibranch,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let rvafm = self.rvafm_config();
        let encoder = match self.model.encoder {
            EncoderPreset::Desk => EncoderConfig::desk(rvafm.c_f),
            EncoderPreset::Full => EncoderConfig::full(rvafm.c_f),
        };
        Ok(ModelConfig { encoder, rvafm, alphabet: self.data.synth.alphabet() })
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            halt_loss_weight: t.halt_loss_weight,
            clip_norm: t.clip_norm,
            augment: AugmentConfig {
                brightness: t.augment_brightness,
                contrast: t.augment_contrast,
                morphology: t.augment_morphology,
                probability: t.augment_probability,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let c = RunConfig::from_toml("[data]\nglyphs = 6\ntrain_size = 20\n[preprocess]\nscale = 1.0\n").unwrap();
        assert_eq!((c.data.synth.glyphs, c.data.train_size, c.data.val_size), (6, 20, 50));
        assert_eq!(c.data.synth.width, SynthConfig::default().width);
        assert_eq!((c.preprocess.scale, c.preprocess.min_height), (1.0, 64));
    }

    #[test]
    fn round_trip() {
        let mut c = RunConfig { seed: 9, ..RunConfig::default() };
        c.model.ablate = Ablation::AllDense;
        c.data.synth.glyphs = 6;
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn every_unknown_key_is_reported() {
        let err =
            RunConfig::from_toml("sed = 1\n[train]\nlr = 0.1\n[model]\nnsl = 2\ncu = 3\n[extra]\nx = 1\n").unwrap_err();
        let Error::Config(list) = err else { panic!("{err}") };
        assert_eq!(list.len(), 4, "{list:?}");
        for key in ["`sed`", "`train.lr`", "`model.cu`", "`extra`"] {
            assert!(list.iter().any(|m| m.contains(key)), "{key} missing from {list:?}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(matches!(RunConfig::from_toml("[model]\nnsl = 0\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[model]\nablate = \"zz\"\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[train]\nepochs = \"many\"\n"), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_take_precedence() {
        let mut c = RunConfig::from_toml("seed = 1\n[model]\nnsl = 3\n").unwrap();
        c.apply(&Overrides { seed: Some(5), nsl: Some(1), c_u: Some(16), ablate: Some(Ablation::Dj) }).unwrap();
        assert_eq!((c.seed, c.model.nsl, c.model.c_u, c.model.ablate), (5, 1, 16, Ablation::Dj));
        assert!(c.apply(&Overrides { nsl: Some(0), ..Overrides::default() }).is_err());
    }
}
