//! Pipeline configuration file and flag overrides.

use std::fs;
use std::path::{Path, PathBuf};

use eviscreen::benchmark::ExperimentConfig;
use eviscreen::contrastive::{ContrastiveConfig, Pooling};
use eviscreen::metrics::DEFAULT_RECALL_LEVELS;
use eviscreen::reasoning::{ReasoningConfig, TrainConfig};
use eviscreen::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Labeled dataset manifest used by build-bank, train and study.
    pub manifest: Option<PathBuf>,
    pub normal_bank: Option<PathBuf>,
    pub pathological_bank: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BankSettings {
    pub ratio: f64,
    pub seed: u64,
    pub normalize: bool,
    /// Outlier fraction removed from the pathological set before subsampling.
    pub denoise_q: Option<f64>,
    pub denoise_k: usize,
    /// Local aggregation window applied to every feature map.
    pub window: usize,
}

impl Default for BankSettings {
    fn default() -> Self {
        Self {
            ratio: 0.25,
            seed: 0,
            normalize: false,
            denoise_q: None,
            denoise_k: 3,
            window: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudySettings {
    pub bank_sizes: Vec<usize>,
    pub contamination: f64,
    /// Also run the contaminated bank with this denoising fraction.
    pub denoise_q: Option<f64>,
}

impl Default for StudySettings {
    fn default() -> Self {
        Self {
            bank_sizes: vec![50, 200, 1000],
            contamination: 0.2,
            denoise_q: Some(0.2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub bank: BankSettings,
    /// Neighbours per patch for contrastive screening and evidence retrieval.
    pub k: usize,
    pub pooling: Pooling,
    /// Its `k` is replaced by the top-level `k`.
    pub reasoning: ReasoningConfig,
    pub train: TrainConfig,
    pub spe_at: Vec<f64>,
    /// Synthetic data and experiment settings for `synth` and `study`.
    pub experiment: ExperimentConfig,
    pub study: StudySettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            bank: BankSettings::default(),
            k: 3,
            pooling: Pooling::Max,
            reasoning: ReasoningConfig::default(),
            train: TrainConfig::default(),
            spe_at: DEFAULT_RECALL_LEVELS.to_vec(),
            experiment: ExperimentConfig::default(),
            study: StudySettings::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub k: Option<usize>,
    pub ratio: Option<f64>,
    pub pool: Option<Pooling>,
    pub out: Option<PathBuf>,
    pub spe_at: Option<Vec<f64>>,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: format!("cannot read config: {e}"),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// `--seed` replaces every seed: bank, training, initialization, data and splits.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.bank.seed = seed;
            self.train.seed = seed;
            self.reasoning.seed = seed;
            self.experiment.synth.seed = seed;
            self.experiment.split_seed = seed;
            self.experiment.bank_seed = seed;
            self.experiment.train.seed = seed;
            self.experiment.reasoning.seed = seed;
        }
        if let Some(k) = o.k {
            self.k = k;
            self.experiment.contrastive.k = k;
            self.experiment.reasoning.k = k;
        }
        if let Some(r) = o.ratio {
            self.bank.ratio = r;
            self.experiment.subsample_ratio = r;
        }
        if let Some(p) = o.pool {
            self.pooling = p;
            self.experiment.contrastive.pooling = p;
        }
        if let Some(out) = &o.out {
            self.paths.out_dir = Some(out.clone());
        }
        if let Some(x) = &o.spe_at {
            self.spe_at = x.clone();
            self.experiment.recall_levels = x.clone();
        }
        if let Some(m) = &o.manifest {
            self.paths.manifest = Some(m.clone());
        }
        if let Some(c) = &o.checkpoint {
            self.paths.checkpoint = Some(c.clone());
        }
        self.reasoning.k = self.k;
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.bank;
        if !(b.ratio > 0.0 && b.ratio <= 1.0) {
            return Err(Error::Config(format!("bank.ratio must lie in (0, 1], got {}", b.ratio)));
        }
        if let Some(q) = b.denoise_q {
            if !(0.0..1.0).contains(&q) {
                return Err(Error::Config(format!("bank.denoise_q must lie in [0, 1), got {q}")));
            }
        }
        if b.denoise_k == 0 {
            return Err(Error::Config("bank.denoise_k must be positive".into()));
        }
        if b.window == 0 || b.window % 2 == 0 {
            return Err(Error::Config(format!("bank.window must be odd and positive, got {}", b.window)));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        if self.spe_at.is_empty() {
            return Err(Error::Config("spe_at needs at least one recall level".into()));
        }
        for &x in &self.spe_at {
            if !(x > 0.0 && x <= 100.0) {
                return Err(Error::Config(format!("recall level {x} outside (0, 100]")));
            }
        }
        self.reasoning.validate()?;
        self.train.validate()?;
        self.experiment.validate()?;
        let s = &self.study;
        if s.bank_sizes.is_empty() || s.bank_sizes.contains(&0) || s.bank_sizes.windows(2).any(|p| p[0] > p[1]) {
            return Err(Error::Config(format!(
                "study.bank_sizes must be positive and ascending, got {:?}",
                s.bank_sizes
            )));
        }
        if !(0.0..1.0).contains(&s.contamination) {
            return Err(Error::Config(format!(
                "study.contamination must lie in [0, 1), got {}",
                s.contamination
            )));
        }
        if let Some(q) = s.denoise_q {
            if !(0.0..1.0).contains(&q) {
                return Err(Error::Config(format!("study.denoise_q must lie in [0, 1), got {q}")));
            }
        }
        Ok(())
    }

    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            k: self.k,
            pooling: self.pooling,
        }
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.paths
            .out_dir
            .as_deref()
            .ok_or_else(|| Error::Config("an output directory is required (--out or paths.out_dir)".into()))
    }

    pub fn manifest(&self) -> Result<&Path> {
        self.paths
            .manifest
            .as_deref()
            .ok_or_else(|| Error::Config("a dataset manifest is required (--manifest or paths.manifest)".into()))
    }

    /// Bank files from the config, falling back to the output directory.
    pub fn bank_paths(&self) -> Result<(PathBuf, PathBuf)> {
        let fallback = |name: &str| self.out_dir().map(|d| d.join(name));
        let normal = match &self.paths.normal_bank {
            Some(p) => p.clone(),
            None => fallback("normal.evkb")?,
        };
        let path = match &self.paths.pathological_bank {
            Some(p) => p.clone(),
            None => fallback("pathological.evkb")?,
        };
        Ok((normal, path))
    }
}
