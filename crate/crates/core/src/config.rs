//! Run configuration, loadable from TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backends::{HttpConfig, Mode};
use crate::dataset::DatasetFormat;
use crate::error::{Error, Result};
use crate::estimators::Method;
use crate::hsc::HscConfig;
use crate::reformulator::ReformulationConfig;
use crate::sampler::{FewShot, SamplerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub path: Option<PathBuf>,
    pub format: DatasetFormat,
    pub use_context: bool,
    /// `None` keeps every question.
    pub sample_size: Option<usize>,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            path: None,
            format: DatasetFormat::Generic,
            use_context: true,
            sample_size: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// OpenAI-style chat and embedding endpoints plus an NLI endpoint.
    #[default]
    Http,
    /// The offline simulator driven by a world file.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub chat_model: String,
    /// Embeds questions and reformulations for the faithfulness filter.
    pub embed_model: String,
    /// Embeds answers for clustering and embedding variance; defaults to
    /// `embed_model`.
    pub answer_embed_model: Option<String>,
    /// World file for the synthetic backend.
    pub world: Option<PathBuf>,
    pub http: HttpConfig,
    pub mode: Mode,
    /// Fixture store for record and replay modes.
    pub fixtures: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Http,
            chat_model: "default".into(),
            embed_model: "default".into(),
            answer_embed_model: None,
            world: None,
            http: HttpConfig::default(),
            mode: Mode::Live,
            fixtures: None,
        }
    }
}

impl BackendConfig {
    pub fn answer_embed_model(&self) -> &str {
        self.answer_embed_model.as_deref().unwrap_or(&self.embed_model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub reformulation: ReformulationConfig,
    pub sampler: SamplerConfig,
    pub hsc: HscConfig,
    pub methods: Vec<Method>,
    pub backend: BackendConfig,
    pub output_dir: PathBuf,
    /// Questions processed concurrently.
    pub workers: usize,
    /// Share of failed questions above which a run reports failure.
    pub max_failure_rate: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            reformulation: ReformulationConfig::default(),
            sampler: SamplerConfig::default(),
            hsc: HscConfig::default(),
            methods: Method::ALL.to_vec(),
            backend: BackendConfig::default(),
            output_dir: PathBuf::from("runs/latest"),
            workers: 4,
            max_failure_rate: 0.1,
        }
    }
}

/// Config file form: a [`RunConfig`] plus optional prompt asset files that
/// replace the built-in prompts.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default)]
struct ConfigFile {
    #[serde(flatten)]
    run: RunConfig,
    reformulation_prompt_file: Option<PathBuf>,
    fewshot_file: Option<PathBuf>,
}

impl RunConfig {
    /// Parses a TOML config. Relative input paths (dataset, world, fixtures,
    /// prompt files) resolve against the file's directory; the output
    /// directory stays relative to the working directory.
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ConfigFile = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = file.run;
        for p in [&mut cfg.dataset.path, &mut cfg.backend.world, &mut cfg.backend.fixtures] {
            if let Some(rel) = p.as_mut().filter(|p| p.is_relative()) {
                *rel = base.join(&*rel);
            }
        }
        if let Some(p) = file.reformulation_prompt_file {
            cfg.load_reformulation_prompt(&base.join(p))?;
        }
        if let Some(p) = file.fewshot_file {
            cfg.load_fewshot(&base.join(p))?;
        }
        Ok(cfg)
    }

    pub fn load_reformulation_prompt(&mut self, path: &Path) -> Result<()> {
        self.reformulation.prompt_template = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Reads few-shot examples from a JSON array of `{question, answer}`.
    pub fn load_fewshot(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.sampler.fewshot = serde_json::from_str::<Vec<FewShot>>(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.reformulation.validate()?;
        self.sampler.validate()?;
        self.hsc.validate()?;
        if self.methods.is_empty() {
            return Err(Error::Config("no methods configured".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.max_failure_rate) {
            return Err(Error::Config("max_failure_rate must lie in [0,1]".into()));
        }
        let b = &self.backend;
        if matches!(b.mode, Mode::Record | Mode::Replay) && b.fixtures.is_none() {
            return Err(Error::Config(format!("{:?} mode needs a fixture store path", b.mode)));
        }
        if b.mode != Mode::Replay && b.kind == BackendKind::Synthetic && b.world.is_none() {
            return Err(Error::Config("the synthetic backend needs a world file".into()));
        }
        Ok(())
    }

    /// Sorted, de-duplicated method list.
    pub fn method_set(&self) -> Vec<Method> {
        let mut m = self.methods.clone();
        m.sort();
        m.dedup();
        m
    }
}
