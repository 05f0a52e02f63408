//! Flat run configuration, file loading and `key=value` overrides.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::adam::AdamConfig;
use crate::embed::EncoderConfig;
use crate::error::{Error, Result};
use crate::got::GotConfig;
use crate::heads::LossWeights;
use crate::stride::{SelectMode, StrideConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Erm,
    Got,
    Stridenet,
}

pub const MODES: [&str; 3] = ["erm", "got", "stridenet"];

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Erm => "erm",
            Mode::Got => "got",
            Mode::Stridenet => "stridenet",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "erm" => Ok(Mode::Erm),
            "got" => Ok(Mode::Got),
            "stridenet" => Ok(Mode::Stridenet),
            other => Err(Error::Usage(format!("unknown mode {other:?}; valid modes: {}", MODES.join(", ")))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    /// Defaults to `<out_dir>/checkpoints`.
    pub checkpoint_dir: Option<PathBuf>,
    pub run_id: Option<String>,
    pub mode: Mode,
    pub seed: u64,

    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Evaluate on the test split every this many steps; 0 = only at the end.
    pub eval_every: usize,
    /// Save a checkpoint every this many steps; 0 = only at the end.
    pub checkpoint_every: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Learning-rate multiplier for the probe and adversary heads.
    pub head_lr_scale: f64,

    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub eta: f64,

    /// Selection budget; defaults to a quarter of the patches.
    pub k: Option<usize>,
    pub tau: f64,
    pub select_mode: SelectMode,

    pub got_eps: f64,
    pub got_max_iter: usize,
    pub got_tol: f64,
    pub weighted_marginals: bool,
    /// Fail the run when more than this fraction of steps has an
    /// unconverged transport solve.
    pub max_unconverged_frac: f64,

    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub d: usize,
    pub attention: bool,
    pub hidden: bool,
    /// JSON `{label: [floats]}`; pseudo-embeddings when absent.
    pub label_embeddings: Option<PathBuf>,
    pub d_text: usize,

    pub train_frac: f64,
    pub group_balanced_batching: bool,
    pub hflip: bool,
    pub probe_coupled: bool,
    /// Weight the adversary loss so every `(y, s)` cell counts equally.
    pub adversary_balanced: bool,
    /// Compare sensitive groups within each class in the GOT regularizer.
    pub class_conditional_got: bool,
    pub uncertain_as_negative: bool,
    pub strict_metrics: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("manifest.csv"),
            out_dir: PathBuf::from("run"),
            checkpoint_dir: None,
            run_id: None,
            mode: Mode::Stridenet,
            seed: 0,
            lr: 1e-4,
            batch: 64,
            epochs: 20,
            eval_every: 0,
            checkpoint_every: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            head_lr_scale: 1.0,
            alpha: 1.0,
            beta: 1.0,
            gamma: 2.0,
            lambda: 0.8,
            eta: 0.0,
            k: None,
            tau: 1.0,
            select_mode: SelectMode::Soft,
            got_eps: 0.05,
            got_max_iter: 200,
            got_tol: 1e-6,
            weighted_marginals: false,
            max_unconverged_frac: 0.05,
            height: 64,
            width: 64,
            patch: 8,
            d: 32,
            attention: true,
            hidden: false,
            label_embeddings: None,
            d_text: 32,
            train_frac: 0.8,
            group_balanced_batching: true,
            hflip: false,
            probe_coupled: false,
            adversary_balanced: false,
            class_conditional_got: false,
            uncertain_as_negative: false,
            strict_metrics: false,
        }
    }
}

/// Values actually used once the mode has been applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Effective {
    pub weights: LossWeights,
    pub stride: StrideConfig,
}

impl TrainConfig {
    /// TOML (`.toml`) or JSON (anything else). Relative paths inside the
    /// file resolve against the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: TrainConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.manifest);
        fix(&mut self.out_dir);
        if let Some(p) = self.checkpoint_dir.as_mut() {
            fix(p);
        }
        if let Some(p) = self.label_embeddings.as_mut() {
            fix(p);
        }
    }

    /// Applies one `key=value` override. The value is read as JSON when it
    /// parses (numbers, booleans, null), otherwise as a string.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (key, raw) = kv
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("override {kv:?} is not key=value")))?;
        let key = key.trim();
        let mut value = serde_json::to_value(&*self)?;
        let map = value.as_object_mut().expect("config serializes to an object");
        if !map.contains_key(key) {
            return Err(Error::Usage(format!("unknown config key {key:?}")));
        }
        let parsed = serde_json::from_str(raw.trim()).unwrap_or_else(|_| serde_json::Value::String(raw.trim().to_string()));
        map.insert(key.to_string(), parsed);
        *self = serde_json::from_value(value).map_err(|e| Error::Usage(format!("override {kv:?}: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("epochs and batch must be positive".into()));
        }
        if !(self.head_lr_scale > 0.0) {
            return Err(Error::Config(format!("head_lr_scale must be positive, got {}", self.head_lr_scale)));
        }
        if !(0.0..=1.0).contains(&self.max_unconverged_frac) {
            return Err(Error::Config("max_unconverged_frac must lie in [0, 1]".into()));
        }
        self.encoder().validate()?;
        self.got().validate()?;
        let eff = self.effective();
        eff.weights.validate()?;
        eff.stride.validate(self.encoder().num_patches())
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            height: self.height,
            width: self.width,
            patch: self.patch,
            d: self.d,
            attention: self.attention,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn got(&self) -> GotConfig {
        GotConfig {
            lambda: self.lambda,
            eps: self.got_eps,
            max_iter: self.got_max_iter,
            tol: self.got_tol,
            weighted_marginals: self.weighted_marginals,
        }
    }

    /// erm: no alignment, probe, adversary or sparsity terms, all patches
    /// kept; got: no adversary, all patches kept; stridenet: as configured.
    pub fn effective(&self) -> Effective {
        let p = self.encoder().num_patches();
        let configured = LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            lambda: self.lambda,
            eta: self.eta,
        };
        let (weights, k) = match self.mode {
            Mode::Erm => (
                LossWeights {
                    alpha: 0.0,
                    beta: 0.0,
                    gamma: 0.0,
                    eta: 0.0,
                    ..configured
                },
                p,
            ),
            Mode::Got => (LossWeights { gamma: 0.0, ..configured }, p),
            Mode::Stridenet => (configured, self.k.unwrap_or((p / 4).max(1))),
        };
        Effective {
            weights,
            stride: StrideConfig {
                k,
                tau: self.tau,
                mode: self.select_mode,
            },
        }
    }

    /// Learning-rate multiplier for parameter `name`.
    pub fn lr_scale(&self, name: &str) -> f64 {
        if name.starts_with("probe.") || name.starts_with("adv.") {
            self.head_lr_scale
        } else {
            1.0
        }
    }

    pub fn checkpoint_root(&self) -> PathBuf {
        self.checkpoint_dir.clone().unwrap_or_else(|| self.out_dir.join("checkpoints"))
    }

    pub fn run_id(&self) -> String {
        self.run_id.clone().unwrap_or_else(|| format!("{}-seed{}", self.mode, self.seed))
    }

    /// Hex SHA-256 of the canonical JSON form, ignoring output locations
    /// and logging cadence so a resumed run may write elsewhere.
    pub fn hash(&self) -> String {
        let canonical = TrainConfig {
            out_dir: PathBuf::new(),
            checkpoint_dir: None,
            run_id: None,
            eval_every: 0,
            checkpoint_every: 0,
            ..self.clone()
        };
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}
