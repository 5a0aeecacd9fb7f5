//! TOML file formats read by the commands. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tacoxfer::adapt::{NewSpeaker, TrainHyper};
use tacoxfer::data::{SpecRecipe, VoiceRecipe};
use tacoxfer::inventory::DEFAULT_PHONEME_CAPACITY;
use tacoxfer::model::ModelConfig;
use tacoxfer::{Error, Result};

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| {
        let msg = e.message().trim().replace('\n', " ");
        Error::Config(format!("{}: {msg}", path.display()))
    })
}

/// `pretrain --config`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    /// Stage label used in scenario names; defaults to the corpus languages.
    pub label: Option<String>,
    pub corpus: Option<PathBuf>,
    pub steps: Option<u64>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainHyper,
}

/// `adapt --config`; every field is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    pub label: Option<String>,
    pub steps: Option<u64>,
    pub seed: Option<u64>,
    /// Overrides on top of the adaptation defaults, not the pretraining ones.
    #[serde(default)]
    pub train: toml::Table,
}

impl AdaptConfig {
    pub fn hyper(&self) -> Result<TrainHyper> {
        let mut base = toml::Table::try_from(TrainHyper::adaptation_default())
            .map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, &self.train);
        let h: TrainHyper = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("[train]: {}", e.message().trim())))?;
        h.validate()?;
        Ok(h)
    }
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// `adapt --new-speakers`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewSpeakersFile {
    pub speakers: Vec<NewSpeaker>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageSpec {
    pub id: String,
    pub symbols: Vec<String>,
}

/// `gen-corpus --spec`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpecFile {
    pub symbols: Vec<String>,
    #[serde(default = "default_capacity")]
    pub capacity: usize,
    pub languages: Vec<LanguageSpec>,
    /// Every speaker of the synthetic world; the oracle spec covers all.
    pub speakers: Vec<VoiceRecipe>,
    /// Speakers rendered into this corpus; all when absent.
    pub corpus_speakers: Option<Vec<usize>>,
    pub utterances_per_speaker: usize,
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default)]
    pub recipe: SpecRecipe,
}

fn default_capacity() -> usize {
    DEFAULT_PHONEME_CAPACITY
}

fn default_min_len() -> usize {
    8
}

fn default_max_len() -> usize {
    16
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<PretrainConfig>("label = \"X\"\nfreeze_encodr = true\n").unwrap_err();
        assert!(err.message().contains("unknown field"));
        let err = toml::from_str::<PretrainConfig>("[model]\nphoneme_dims = 8\n").unwrap_err();
        assert!(err.message().contains("phoneme_dims"));
        let a = toml::from_str::<AdaptConfig>("[train.adam]\nlr = 1e-4\nbeta = 0.9\n").unwrap();
        assert!(a.hyper().unwrap_err().to_string().contains("beta"));
    }

    #[test]
    fn defaults_fill_missing_sections() {
        let c: PretrainConfig = toml::from_str("steps = 10\n").unwrap();
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(c.train, TrainHyper::default());
        assert_eq!(c.label, None);
        let a: AdaptConfig = toml::from_str("").unwrap();
        assert_eq!(a.hyper().unwrap(), TrainHyper::adaptation_default());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c: PretrainConfig = toml::from_str("[model]\nreduction = 3\n[train]\nbatch_size = 4\n").unwrap();
        assert_eq!(c.model.reduction, 3);
        assert_eq!(c.model.mel_channels, ModelConfig::default().mel_channels);
        assert_eq!(c.train.batch_size, 4);
        let a: AdaptConfig = toml::from_str("[train]\nbatch_size = 4\n[train.adam]\nbeta2 = 0.99\n").unwrap();
        let h = a.hyper().unwrap();
        assert_eq!(h.batch_size, 4);
        assert_eq!(h.adam.beta2, 0.99);
        assert_eq!(h.adam.lr, TrainHyper::adaptation_default().adam.lr);
    }
}
