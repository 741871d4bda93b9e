//! Experiment configuration, the self-supervised training loop, and the
//! linear probe.

pub mod config;
pub mod probe;
pub mod train;

pub use config::{AugmentPreset, ExperimentCfg, ManipHead, Method};
pub use probe::{train_probe, train_probe_on_features, ProbeCfg, ProbeReport};
pub use train::{evaluate_step, init_store, load_metrics, train_ssl, MetricsRecord, TrainOptions, TrainOutcome};

use crate::datasets::{gen_synthetic, load, Dataset};
use crate::error::Result;

/// The dataset a configuration names: loaded from `data_dir`, or generated.
pub fn dataset_for(cfg: &ExperimentCfg) -> Result<Dataset> {
    if cfg.data_dir.is_empty() {
        gen_synthetic(cfg.synthetic_n, cfg.synthetic_classes, cfg.resolution, cfg.seed)
    } else {
        load(std::path::Path::new(&cfg.data_dir))
    }
}

impl ExperimentCfg {
    pub fn probe_cfg(&self) -> ProbeCfg {
        ProbeCfg {
            epochs: self.probe_epochs,
            lr: self.probe_lr,
            batch_size: self.probe_batch_size,
            weight_decay: self.probe_weight_decay,
            test_fraction: self.probe_test_fraction,
            seed: self.seed,
        }
    }
}
