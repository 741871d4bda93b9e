//! Flat experiment configuration read from TOML with strict key checking.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::actions::{ActionFrame, BinningSpec};
use crate::error::{Error, Result};
use crate::imaging::AugmentPolicy;
use crate::models::checkpoint::sha256_hex;
use crate::models::{EncoderCfg, EncoderKind, ModelCfg, ProjectionGuard};
use crate::optim::OptimCfg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Simclr,
    Stec,
    Byol,
    ByolStec,
    Relic,
    StecStar,
}

impl Method {
    pub fn has_manip(self) -> bool {
        matches!(self, Method::Stec | Method::ByolStec | Method::StecStar)
    }

    pub fn uses_target(self) -> bool {
        matches!(self, Method::Byol | Method::ByolStec | Method::Relic | Method::StecStar)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Simclr => "simclr",
            Method::Stec => "stec",
            Method::Byol => "byol",
            Method::ByolStec => "byol_stec",
            Method::Relic => "relic",
            Method::StecStar => "stec_star",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManipHead {
    #[default]
    Classification,
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentPreset {
    #[default]
    Cifar,
    Full,
    Geometric,
    Identity,
}

/// Every setting of a training run. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentCfg {
    pub method: Method,
    pub seed: u64,
    /// Directory written by `gen-data`; when empty a synthetic set is generated in memory.
    pub data_dir: String,
    pub out_dir: String,
    pub synthetic_n: usize,
    pub synthetic_classes: usize,
    pub resolution: usize,

    pub epochs: usize,
    pub batch_size: usize,
    pub log_every: usize,
    pub checkpoint_every_epochs: usize,

    pub encoder: EncoderKind,
    pub encoder_widths: Vec<usize>,
    pub feature_dim: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub manip_hidden: usize,
    pub predictor: bool,
    pub predictor_hidden: usize,
    pub projection_guard: ProjectionGuard,

    pub lambda_manip: f64,
    pub tau: f64,
    pub alpha: f64,
    pub manip_head: ManipHead,
    pub action_frame: ActionFrame,
    pub bins: usize,
    pub ema_tau0: f64,

    pub augment: AugmentPreset,
    pub crop_scale_min: Option<f64>,
    pub jitter_strength: Option<f64>,
    pub hue_strength: Option<f64>,

    pub base_lr: f64,
    pub momentum: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub lars: bool,
    pub lars_trust_coeff: f64,

    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub probe_batch_size: usize,
    pub probe_weight_decay: f64,
    pub probe_test_fraction: f64,
}

impl Default for ExperimentCfg {
    fn default() -> Self {
        Self {
            method: Method::Stec,
            seed: 0,
            data_dir: String::new(),
            out_dir: "runs/stec".into(),
            synthetic_n: 1024,
            synthetic_classes: 10,
            resolution: 32,
            epochs: 20,
            batch_size: 64,
            log_every: 10,
            checkpoint_every_epochs: 1,
            encoder: EncoderKind::Mlp,
            encoder_widths: vec![512],
            feature_dim: 64,
            proj_hidden: 512,
            proj_dim: 64,
            manip_hidden: 512,
            predictor: false,
            predictor_hidden: 512,
            projection_guard: ProjectionGuard::Error,
            lambda_manip: 1.0,
            tau: 0.5,
            alpha: 1.0,
            manip_head: ManipHead::Classification,
            action_frame: ActionFrame::Egocentric,
            bins: 6,
            ema_tau0: 0.99,
            augment: AugmentPreset::Cifar,
            crop_scale_min: None,
            jitter_strength: None,
            hue_strength: None,
            base_lr: 1.0,
            momentum: 0.9,
            warmup_epochs: 2,
            weight_decay: 1e-6,
            lars: true,
            lars_trust_coeff: 0.001,
            probe_epochs: 100,
            probe_lr: 0.1,
            probe_batch_size: 256,
            probe_weight_decay: 5e-4,
            probe_test_fraction: 0.2,
        }
    }
}

impl ExperimentCfg {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    pub fn out_path(&self) -> PathBuf {
        PathBuf::from(&self.out_dir)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size < 2 || self.log_every == 0 {
            return bad("epochs, log_every must be positive and batch_size at least 2".into());
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau {} must be positive", self.tau));
        }
        if !(self.lambda_manip >= 0.0) || !(self.alpha >= 0.0) {
            return bad("lambda_manip and alpha must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.ema_tau0) {
            return bad(format!("ema_tau0 {} must lie in [0, 1)", self.ema_tau0));
        }
        if self.predictor && !self.method.uses_target() {
            return bad("predictor is only used with target-network methods".into());
        }
        if !(0.0..1.0).contains(&self.probe_test_fraction) || self.probe_batch_size == 0 || !(self.probe_lr > 0.0) {
            return bad("probe settings out of range".into());
        }
        if self.data_dir.is_empty() && (self.synthetic_n < self.batch_size || self.synthetic_classes < 2) {
            return bad("synthetic_n must be at least batch_size and synthetic_classes at least 2".into());
        }
        self.model().validate()?;
        self.policy().validate()?;
        self.binning().validate()?;
        self.optim().validate()
    }

    pub fn model(&self) -> ModelCfg {
        ModelCfg {
            encoder: EncoderCfg {
                kind: self.encoder,
                widths: self.encoder_widths.clone(),
                feature_dim: self.feature_dim,
                resolution: self.resolution,
            },
            proj_hidden: self.proj_hidden,
            proj_dim: self.proj_dim,
            manip_hidden: self.manip_hidden,
            manip_outputs: match self.manip_head {
                ManipHead::Classification => 6 * self.bins,
                ManipHead::Regression => 6,
            },
            predictor: self.predictor,
            predictor_hidden: self.predictor_hidden,
        }
    }

    pub fn policy(&self) -> AugmentPolicy {
        let mut p = match self.augment {
            AugmentPreset::Cifar => AugmentPolicy::cifar(self.resolution),
            AugmentPreset::Full => AugmentPolicy::full(self.resolution),
            AugmentPreset::Geometric => AugmentPolicy::geometric(self.resolution),
            AugmentPreset::Identity => AugmentPolicy::identity(self.resolution),
        };
        if let Some(v) = self.crop_scale_min {
            p.crop_scale_min = v;
        }
        if let Some(v) = self.jitter_strength {
            p.jitter_strength = v;
        }
        if let Some(v) = self.hue_strength {
            p.hue_strength = v;
        }
        p
    }

    pub fn binning(&self) -> BinningSpec {
        match self.action_frame {
            ActionFrame::Egocentric => BinningSpec {
                bins: self.bins,
                ..BinningSpec::default()
            },
            ActionFrame::Allocentric => BinningSpec::allocentric(self.bins),
        }
    }

    pub fn optim(&self) -> OptimCfg {
        OptimCfg {
            base_lr: self.base_lr,
            batch_size: self.batch_size,
            momentum: self.momentum,
            nesterov: false,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epochs,
            weight_decay: self.weight_decay,
            lars_enabled: self.lars,
            lars_trust_coeff: self.lars_trust_coeff,
        }
    }

    /// Coefficient of `Σ‖w‖²` whose gradient is the weight decay term.
    pub fn lambda_reg(&self) -> f64 {
        self.weight_decay / 2.0
    }
}
