//! Run configuration: a TOML file with strict schema, flag overrides, and the
//! `SMOOTHCORR_CACHE` environment override.
//!
//! Precedence, highest first: command-line flags, `SMOOTHCORR_CACHE` (cache
//! directory only), the config file, built-in defaults. Relative paths in a
//! config file resolve against the file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Architecture;
use crate::fsutil;
use crate::kp2d::{BenchmarkConfig, TrainConfig2d, DEFAULT_LAMBDA_2D};
use crate::losses::{LossConfig, Regularizer};
use crate::optim::DEFAULT_LEARNING_RATE;
use crate::synth::TemplateKind;

pub const CACHE_ENV: &str = "SMOOTHCORR_CACHE";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    /// Root seed for initialization, sampling and pair order.
    pub seed: u64,
    pub loss: LossSection,
    pub model: ModelSection,
    pub optim: OptimSection,
    pub paths: PathsSection,
    pub synth: SynthSection,
    pub sweep: SweepSection,
    pub kp2d: Kp2dSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub tau: f64,
    pub lambda: f64,
    pub regularizer: Regularizer,
    /// Sampled correspondences per pair and step.
    pub sample_count: usize,
    /// Basis size for the spectral loss and the diffusion blocks.
    pub k: usize,
}

impl Default for LossSection {
    fn default() -> Self {
        let d = LossConfig::default();
        Self {
            tau: d.tau,
            lambda: d.lambda,
            regularizer: d.regularizer,
            sample_count: d.sample_count,
            k: d.k,
        }
    }
}

impl LossSection {
    pub fn to_loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            lambda: self.lambda,
            regularizer: self.regularizer,
            sample_count: self.sample_count,
            k: self.k,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden_dims: Vec<usize>,
    pub out_dim: usize,
    pub n_blocks: usize,
    pub diffusion: bool,
    pub hks_times: Vec<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden_dims: vec![32],
            out_dim: 16,
            n_blocks: 2,
            diffusion: true,
            hks_times: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub lr: f64,
    pub epochs: usize,
    /// Pairs per optimizer step.
    pub batch_size: usize,
}

impl Default for OptimSection {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LEARNING_RATE,
            epochs: 30,
            batch_size: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub manifest: PathBuf,
    pub kp2d_manifest: PathBuf,
    pub cache_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            manifest: "data/manifest.json".into(),
            kp2d_manifest: "data/kp2d/manifest.json".into(),
            cache_dir: "cache".into(),
            out_dir: "runs".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    /// Dataset seed; the root seed when absent.
    pub seed: Option<u64>,
    /// Templates used round-robin over the pairs.
    pub templates: Vec<TemplateKind>,
    pub n_train: usize,
    pub n_test: usize,
    pub magnitude: f64,
    /// Fraction of target vertices kept by decimation.
    pub decimate: Option<f64>,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            seed: None,
            templates: vec![
                TemplateKind::Icosphere { subdivisions: 3 },
                TemplateKind::Cylinder {
                    rings: 12,
                    segments: 24,
                },
            ],
            n_train: 20,
            n_test: 10,
            magnitude: 0.05,
            decimate: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub lambdas: Vec<f64>,
    pub regularizer: Regularizer,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            lambdas: vec![0.1, 1.0, 10.0, 100.0],
            regularizer: Regularizer::Dirichlet,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Kp2dSection {
    pub n_train: usize,
    pub n_test: usize,
    pub lambda: f64,
    pub regularizer: Regularizer,
    pub hidden_dims: Vec<usize>,
    pub out_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub benchmark: BenchmarkConfig,
}

impl Default for Kp2dSection {
    fn default() -> Self {
        let t = TrainConfig2d::default();
        Self {
            n_train: 100,
            n_test: 50,
            lambda: DEFAULT_LAMBDA_2D,
            regularizer: Regularizer::Dirichlet,
            hidden_dims: t.hidden_dims,
            out_dim: t.out_dim,
            epochs: t.epochs,
            lr: t.lr,
            benchmark: BenchmarkConfig::default(),
        }
    }
}

/// Values given on the command line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub lambda: Option<f64>,
    pub regularizer: Option<Regularizer>,
    pub k: Option<usize>,
    pub tau: Option<f64>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().trim().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Parses `path` and resolves its relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fsutil::read_string(path)?;
        let mut cfg: Self = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message().trim())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.paths.resolve_against(base);
        Ok(cfg)
    }

    /// Config file (or defaults), then `SMOOTHCORR_CACHE`, then flags; validated.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(dir) = std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()) {
            cfg.paths.cache_dir = PathBuf::from(dir);
        }
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.paths.out_dir = out.clone();
        }
        if let Some(l) = o.lambda {
            self.loss.lambda = l;
        }
        if let Some(r) = o.regularizer {
            self.loss.regularizer = r;
        }
        if let Some(k) = o.k {
            self.loss.k = k;
        }
        if let Some(t) = o.tau {
            self.loss.tau = t;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if let Err(Error::InvalidArgument(msg)) = self.loss_config().validate() {
            return bad(format!("loss: {msg}"));
        }
        if !(self.optim.lr > 0.0) || !self.optim.lr.is_finite() {
            return bad(format!("optim.lr = {} must be > 0", self.optim.lr));
        }
        if self.optim.epochs == 0 {
            return bad("optim.epochs must be >= 1".into());
        }
        if self.optim.batch_size == 0 {
            return bad("optim.batch_size must be >= 1".into());
        }
        if self.model.out_dim == 0
            || self.model.n_blocks == 0
            || self.model.hidden_dims.contains(&0)
        {
            return bad("model widths and block count must be >= 1".into());
        }
        if self.model.hks_times.iter().any(|t| !(*t > 0.0)) {
            return bad("model.hks_times must be positive".into());
        }
        if !(self.synth.magnitude >= 0.0) {
            return bad(format!(
                "synth.magnitude = {} must be >= 0",
                self.synth.magnitude
            ));
        }
        if let Some(f) = self.synth.decimate {
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("synth.decimate = {f} must be in (0, 1]"));
            }
        }
        if self.synth.templates.is_empty() && self.synth.n_train + self.synth.n_test > 0 {
            return bad("synth.templates is empty".into());
        }
        if self.sweep.lambdas.iter().any(|l| !(*l >= 0.0)) {
            return bad("sweep.lambdas must be >= 0".into());
        }
        let k2 = &self.kp2d;
        if !(k2.lambda >= 0.0) || !(k2.lr > 0.0) || k2.epochs == 0 || k2.out_dim == 0 {
            return bad("kp2d: lambda >= 0, lr > 0, epochs >= 1 and out_dim >= 1 required".into());
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        self.loss.to_loss_config()
    }

    /// Dataset seed: `synth.seed`, else the root seed.
    pub fn dataset_seed(&self) -> u64 {
        self.synth.seed.unwrap_or(self.seed)
    }

    /// Feature head for meshes; inputs are xyz plus the HKS channels.
    pub fn architecture(&self) -> Architecture {
        Architecture {
            in_dim: 3 + self.model.hks_times.len(),
            hidden_dims: self.model.hidden_dims.clone(),
            out_dim: self.model.out_dim,
            n_blocks: self.model.n_blocks,
            diffusion: self.model.diffusion,
            k: self.loss.k,
            hks_times: self.model.hks_times.clone(),
        }
    }

    /// Whether mesh inputs need a spectral basis at inference time.
    pub fn needs_basis_for_inference(&self) -> bool {
        self.model.diffusion || !self.model.hks_times.is_empty()
    }

    pub fn kp2d_train_config(&self) -> TrainConfig2d {
        let k2 = &self.kp2d;
        TrainConfig2d {
            loss: LossConfig {
                lambda: k2.lambda,
                regularizer: k2.regularizer,
                ..self.loss_config()
            },
            hidden_dims: k2.hidden_dims.clone(),
            out_dim: k2.out_dim,
            epochs: k2.epochs,
            lr: k2.lr,
            seed: self.seed,
        }
    }
}

impl PathsSection {
    fn resolve_against(&mut self, base: &Path) {
        for p in [
            &mut self.manifest,
            &mut self.kp2d_manifest,
            &mut self.cache_dir,
            &mut self.out_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}
