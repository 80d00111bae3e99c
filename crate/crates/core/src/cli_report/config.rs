use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{read_json, Error, Result};
use crate::lexicon::{
    default_adjectives, default_prompts, load_adjectives, load_prompts, AlperClasses, Lexicon, PromptTemplate, WordType,
};
use crate::model_adapter::{ModelKind, WeightSource};
use crate::shapes::{GenerationParams, DEFAULT_RESOLUTION};
use crate::util::{sha256_hex, write_json};

pub const CONFIG_FILE: &str = "config.json";

/// Everything a run depends on. Randomness derives from `seed_base`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub models: Vec<ModelKind>,
    pub word_types: Vec<WordType>,
    /// Prompt table; the bundled one when absent.
    pub prompt_file: Option<PathBuf>,
    pub stimulus_dir: PathBuf,
    pub seed_base: u64,
    pub out_dir: PathBuf,
    pub offline: bool,
    pub human_baseline: Option<f64>,
    pub pairs: usize,
    pub resolution: u32,
    pub legacy_manifest: Option<PathBuf>,
    pub adjectives_file: Option<PathBuf>,
    pub alper_classes_file: Option<PathBuf>,
    /// Checkpoint cache; `BKPROBE_WEIGHTS_DIR` or `~/.cache/bkprobe` when absent.
    pub weights_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            models: ModelKind::PRETRAINED.to_vec(),
            word_types: WordType::ALL.to_vec(),
            prompt_file: None,
            stimulus_dir: PathBuf::from("stimuli"),
            seed_base: 0,
            out_dir: PathBuf::from("out"),
            offline: false,
            human_baseline: None,
            pairs: GenerationParams::default().pairs,
            resolution: DEFAULT_RESOLUTION,
            legacy_manifest: None,
            adjectives_file: None,
            alper_classes_file: None,
            weights_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::Config("no models selected".into()));
        }
        if self.word_types.is_empty() {
            return Err(Error::Config("no word types selected".into()));
        }
        if let Some(b) = self.human_baseline {
            if !(0.0..=1.0).contains(&b) {
                return Err(Error::Config(format!("human baseline {b} is not a proportion")));
            }
        }
        if self.resolution < 8 {
            return Err(Error::Config(format!("resolution {} is too small", self.resolution)));
        }
        Ok(())
    }

    /// Hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("serializable config").as_bytes())
    }

    pub fn results_dir(&self) -> PathBuf {
        self.out_dir.join("results")
    }

    pub fn analysis_dir(&self) -> PathBuf {
        self.out_dir.join("analysis")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.out_dir.join("report")
    }

    pub fn maps_dir(&self) -> PathBuf {
        self.out_dir.join("saliency")
    }

    pub fn generation(&self) -> GenerationParams {
        GenerationParams { seed_base: self.seed_base, pairs: self.pairs, resolution: self.resolution, ..Default::default() }
    }

    pub fn weight_source(&self) -> WeightSource {
        let env = WeightSource::from_env();
        WeightSource { cache_dir: self.weights_dir.clone().unwrap_or(env.cache_dir), offline: self.offline || env.offline }
    }

    pub fn prompts(&self) -> Result<Vec<PromptTemplate>> {
        match &self.prompt_file {
            Some(p) => load_prompts(p),
            None => Ok(default_prompts()),
        }
    }

    pub fn lexicon(&self) -> Result<Lexicon> {
        let adjectives = match &self.adjectives_file {
            Some(p) => load_adjectives(p)?,
            None => default_adjectives(),
        };
        let alper = match &self.alper_classes_file {
            Some(p) => AlperClasses::load(p)?,
            None => AlperClasses::default(),
        };
        Lexicon::new(adjectives, &alper)
    }

    /// Writes the config next to the results. An output directory keeps
    /// the seed it was started with.
    pub fn persist(&self) -> Result<()> {
        let path = self.out_dir.join(CONFIG_FILE);
        if path.exists() {
            let previous: RunConfig = read_json(&path)?;
            if previous.seed_base != self.seed_base {
                return Err(Error::Config(format!(
                    "{} was produced with seed_base {}, not {}",
                    self.out_dir.display(),
                    previous.seed_base,
                    self.seed_base
                )));
            }
        }
        write_json(&path, self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_files_fill_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"models": ["toy"], "seed_base": 4}"#).unwrap();
        assert_eq!(cfg.models, vec![ModelKind::Toy]);
        assert_eq!(cfg.word_types, WordType::ALL.to_vec());
        assert_eq!(cfg.seed_base, 4);
        cfg.validate().unwrap();
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = RunConfig { seed_base: 1, ..RunConfig::default() };
        assert_eq!(a.hash(), RunConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn seed_is_fixed_per_output_directory() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig { out_dir: dir.path().into(), ..RunConfig::default() };
        cfg.persist().unwrap();
        cfg.persist().unwrap();
        let other = RunConfig { seed_base: 9, ..cfg };
        assert!(matches!(other.persist(), Err(Error::Config(_))));
    }

    #[test]
    fn bad_baseline_rejected() {
        let cfg = RunConfig { human_baseline: Some(1.5), ..RunConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
