//! Experiment configuration: a TOML document with one table per stage.
//! Every key has a default, so an empty file is a valid configuration for
//! the toy corpus.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use diffsynth_core::classifier::{ClassifierConfig, Depth, Family};
use diffsynth_core::ddpm::{DmTrainConfig, SamplerConfig};
use diffsynth_core::denoiser::DenoiserConfig;
use diffsynth_core::lime::LimeConfig;
use diffsynth_core::numeric::AdamWConfig;
use diffsynth_core::schedule::NoiseSchedule;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Output root; relative paths resolve against the working directory.
    pub out: PathBuf,
    pub data: DataConfig,
    /// Present when the corpus is the procedurally rendered toy set.
    pub toy: Option<ToyConfig>,
    pub dm: DmConfig,
    pub generate: GenerateConfig,
    pub classifier: ClassifierSection,
    pub lime: LimeSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            data: DataConfig::default(),
            toy: None,
            dm: DmConfig::default(),
            generate: GenerateConfig::default(),
            classifier: ClassifierSection::default(),
            lime: LimeSection::default(),
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Class-foldered image tree. A relative path resolves against the
    /// output root.
    pub root: PathBuf,
    pub name: String,
    pub fraction: f64,
    pub image_size: usize,
    pub channels: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("toy"),
            name: "toy".into(),
            fraction: 0.2,
            image_size: 32,
            channels: 1,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub classes: Vec<String>,
    pub per_class: usize,
    pub size: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            classes: vec!["disk".into(), "square".into(), "cross".into()],
            per_class: 200,
            size: 32,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DmConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// One class-conditional model instead of one model per class.
    pub conditional: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub checkpoint_every: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub res_blocks: usize,
    pub time_embed_dim: usize,
    pub norm_groups: usize,
    pub clip_denoised: bool,
    /// Decay of the weight moving average kept during training; 0 keeps
    /// the raw weights.
    pub ema_decay: f64,
}

impl Default for DmConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            beta_start: 5e-4,
            beta_end: 0.1,
            conditional: false,
            epochs: 400,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.01,
            checkpoint_every: 0,
            base_channels: 8,
            channel_mults: vec![1, 1, 2],
            res_blocks: 1,
            time_embed_dim: 32,
            norm_groups: 4,
            clip_denoised: true,
            ema_decay: 0.995,
        }
    }
}

impl DmConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)?)
    }

    pub fn sampler(&self) -> Result<SamplerConfig> {
        let mut s = SamplerConfig::new(self.schedule()?);
        s.clip_denoised = self.clip_denoised;
        Ok(s)
    }

    pub fn denoiser(&self, data: &DataConfig, num_classes: usize) -> DenoiserConfig {
        DenoiserConfig {
            image_size: data.image_size,
            in_channels: data.channels,
            base_channels: self.base_channels,
            channel_mults: self.channel_mults.clone(),
            res_blocks: self.res_blocks,
            time_embed_dim: self.time_embed_dim,
            num_classes: if self.conditional { num_classes } else { 0 },
            norm_groups: self.norm_groups,
        }
    }

    pub fn training(&self, seed: u64) -> DmTrainConfig {
        DmTrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: AdamWConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
                ..AdamWConfig::default()
            },
            seed,
            checkpoint_every: self.checkpoint_every,
            ema_decay: self.ema_decay,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    /// Images per class unless `counts` names the class.
    pub per_class: usize,
    pub counts: std::collections::BTreeMap<String, usize>,
    pub batch_size: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            per_class: 300,
            counts: Default::default(),
            batch_size: 32,
        }
    }
}

impl GenerateConfig {
    pub fn counts_for(&self, classes: &[String]) -> Result<Vec<usize>> {
        for name in self.counts.keys() {
            if !classes.contains(name) {
                bail!("generate.counts names unknown class `{name}`");
            }
        }
        Ok(classes
            .iter()
            .map(|c| self.counts.get(c).copied().unwrap_or(self.per_class))
            .collect())
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub families: Vec<String>,
    pub depth: String,
    pub folds: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        Self {
            families: vec!["residual".into()],
            depth: "tiny".into(),
            folds: 5,
            max_epochs: 50,
            patience: 5,
            lr: 1e-3,
            batch_size: 32,
            weight_decay: 1e-4,
        }
    }
}

impl ClassifierSection {
    pub fn families(&self) -> Result<Vec<Family>> {
        if self.families.is_empty() {
            bail!("classifier.families is empty");
        }
        self.families
            .iter()
            .map(|f| f.parse::<Family>().map_err(Into::into))
            .collect()
    }

    pub fn config(&self, family: Family, data: &DataConfig, num_classes: usize) -> Result<ClassifierConfig> {
        let cfg = ClassifierConfig {
            family,
            depth: self.depth.parse::<Depth>()?,
            image_size: data.image_size,
            in_channels: data.channels,
            num_classes,
            lr: self.lr,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            max_epochs: self.max_epochs,
            patience: self.patience,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LimeSection {
    /// Hold-out images explained per class.
    pub per_class: usize,
    pub cell: Option<usize>,
    pub samples: usize,
    pub kernel_width: Option<f64>,
    pub ridge: f64,
    pub top_k: usize,
}

impl Default for LimeSection {
    fn default() -> Self {
        Self {
            per_class: 1,
            cell: None,
            samples: 1000,
            kernel_width: None,
            ridge: 1e-3,
            top_k: 6,
        }
    }
}

impl LimeSection {
    pub fn config(&self, seed: u64) -> LimeConfig {
        LimeConfig {
            cell: self.cell,
            samples: self.samples,
            kernel_width: self.kernel_width,
            ridge: self.ridge,
            seed,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: Self = toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.data.fraction;
        if !(f > 0.0 && f < 1.0) {
            bail!("data.fraction {f} must lie strictly between 0 and 1");
        }
        if self.data.channels != 1 && self.data.channels != 3 {
            bail!("data.channels must be 1 or 3");
        }
        if self.data.name.is_empty() || self.data.name.contains(',') {
            bail!("data.name must be non-empty and free of commas");
        }
        self.dm.schedule()?;
        self.dm.denoiser(&self.data, 2).validate()?;
        self.dm.training(self.seed).validate()?;
        if self.generate.batch_size == 0 {
            bail!("generate.batch_size must be positive");
        }
        if self.classifier.folds < 2 {
            bail!("classifier.folds must be at least 2");
        }
        for family in self.classifier.families()? {
            self.classifier.config(family, &self.data, 2)?;
        }
        if self.lime.top_k == 0 {
            bail!("lime.top_k must be positive");
        }
        Ok(())
    }

    pub fn data_root(&self) -> PathBuf {
        if self.data.root.is_absolute() {
            self.data.root.clone()
        } else {
            self.out.join(&self.data.root)
        }
    }

    /// Digest of the canonical serialization. Every setting except the
    /// output root contributes, so identical runs in different directories
    /// share it.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        let canonical = toml::to_string(&c).expect("configuration serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
