//! The self-supervised training loop.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentCfg, ManipHead, Method};
use crate::actions::clamp_rate;
use crate::datasets::{epoch_order, make_batch, Batch, Dataset};
use crate::error::{Error, IoContext, Result};
use crate::gradcore::{Graph, Var};
use crate::models::{ema_decay_at, normalize_projections, Checkpoint, Mode, Net, ParamStore, Source};
use crate::objectives::{
    byol_id_loss, manip_loss, manip_regression_loss, ntxent_id_loss, relic_id_loss, total_loss, LossBreakdown,
};
use crate::optim::{lars_sgd_step, lr_at, MomentumState};
use crate::tensor::Tensor;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// One logged training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: u64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub lr: f64,
    /// Present for target-network methods.
    pub ema_decay: Option<f64>,
    /// Fraction of action components outside the binning range.
    pub clamp_rate: f64,
    /// Seconds since the run (or resumed segment) started.
    pub wall_time: f64,
}

impl MetricsRecord {
    /// Equality ignoring `wall_time`.
    pub fn same_values(&self, other: &Self) -> bool {
        MetricsRecord {
            wall_time: 0.0,
            ..self.clone()
        } == MetricsRecord {
            wall_time: 0.0,
            ..other.clone()
        }
    }
}

/// Runtime options that are not part of the experiment definition.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where metrics and checkpoints go; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Continue from the checkpoint in `out_dir`.
    pub resume: bool,
    /// Stop (with a checkpoint) once this many steps have completed.
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub store: ParamStore,
    pub momentum: MomentumState,
    pub records: Vec<MetricsRecord>,
    pub steps_done: u64,
    pub total_steps: u64,
}

/// Evaluation of one batch: scalar summary plus gradients of the objective.
pub struct StepResult {
    pub loss: LossBreakdown,
    pub grads: BTreeMap<String, Tensor>,
    pub stats: Vec<(String, crate::gradcore::BatchStats)>,
    pub clamp_rate: f64,
}

/// Builds the method's objective on `batch`, differentiates it, and
/// summarizes the parts.
pub fn evaluate_step(cfg: &ExperimentCfg, store: &ParamStore, batch: &Batch) -> Result<StepResult> {
    let model = cfg.model();
    let b = batch.pairs();
    let pos = &batch.pair_index;
    let mut g = Graph::new();
    let mut net = Net::new(store, &model, Source::Online, Mode::Train);
    let x = g.input(batch.images());
    let h = net.encode(&mut g, x)?;
    let z = net.project(&mut g, h, true)?;

    let target_proj = |g: &mut Graph| -> Result<Var> {
        let mut tnet = Net::new(store, &model, Source::Target, Mode::Train);
        let tx = g.input(batch.images());
        let th = tnet.encode(g, tx)?;
        let tz = tnet.project(g, th, false)?;
        normalize_projections(g, tz, cfg.projection_guard)
    };

    let (id_loss, id_accuracy) = match cfg.method {
        Method::Simclr | Method::Stec => {
            let zn = normalize_projections(&mut g, z, cfg.projection_guard)?;
            let out = ntxent_id_loss(&mut g, zn, zn, pos, cfg.tau)?;
            (out.loss, out.accuracy)
        }
        Method::Byol | Method::ByolStec => {
            let p = if model.predictor { net.predict(&mut g, z)? } else { z };
            let pn = normalize_projections(&mut g, p, cfg.projection_guard)?;
            let tn = target_proj(&mut g)?;
            let out = byol_id_loss(&mut g, pn, tn, pos)?;
            (out.loss, out.accuracy)
        }
        Method::Relic | Method::StecStar => {
            let zn = normalize_projections(&mut g, z, cfg.projection_guard)?;
            let tn = target_proj(&mut g)?;
            let out = relic_id_loss(&mut g, zn, tn, pos, cfg.tau, cfg.alpha)?;
            (out.loss, out.accuracy)
        }
    };

    let mut objective = id_loss;
    let mut manip = (0.0, 0.0, false);
    let mut clamp = 0.0;
    if cfg.method.has_manip() {
        let spec = cfg.binning();
        let targets = batch.manip_targets(cfg.action_frame, &spec);
        clamp = clamp_rate(targets.iter().map(|(a, _)| a), &spec);
        let h1 = g.slice_rows(h, 0, b)?;
        let h2 = g.slice_rows(h, b, 2 * b)?;
        // with zero weight the head stays out of the objective and is not trained
        let trained = cfg.lambda_manip > 0.0;
        let out = if trained {
            net.manip_logits(&mut g, h1, h2)?
        } else {
            let mut frozen = Net::new(store, &model, Source::Frozen, Mode::Train);
            let (d1, d2) = (g.detach(h1), g.detach(h2));
            frozen.manip_logits(&mut g, d1, d2)?
        };
        let m = match cfg.manip_head {
            ManipHead::Classification => {
                let labels: Vec<[usize; 6]> = targets.iter().map(|(_, l)| *l).collect();
                manip_loss(&mut g, out, &labels, &batch.masks, spec.bins)?
            }
            ManipHead::Regression => {
                let values: Vec<[f64; 6]> = targets.iter().map(|(a, _)| *a).collect();
                manip_regression_loss(&mut g, out, &values, &batch.masks, &spec)?
            }
        };
        manip = (g.value(m.loss).item(), m.accuracy, m.empty);
        if trained && !m.empty {
            let weighted = g.scale(m.loss, cfg.lambda_manip);
            objective = g.add(objective, weighted)?;
        }
    }

    let grads = g.backward(objective)?.into_named();
    let reg: f64 = grads
        .keys()
        .filter(|n| !store.flags(n).no_weight_decay)
        .map(|n| store.get(n).map_or(0.0, Tensor::sq_norm))
        .sum();
    let loss = total_loss(
        g.value(id_loss).item(),
        manip.0,
        reg,
        if cfg.method.has_manip() { cfg.lambda_manip } else { 0.0 },
        cfg.lambda_reg(),
        id_accuracy,
        manip.1,
        manip.2,
    )?;
    Ok(StepResult {
        loss,
        grads,
        stats: net.take_stats(),
        clamp_rate: clamp,
    })
}

/// Fresh parameters for `cfg`, with target copies for target-network methods.
pub fn init_store(cfg: &ExperimentCfg) -> Result<ParamStore> {
    let mut store = ParamStore::init(&cfg.model(), cfg.seed)?;
    if cfg.method.uses_target() {
        store.enable_shadow();
    }
    Ok(store)
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    (n / batch_size).max(1)
}

fn read_records(path: &Path, before_step: u64) -> Result<Vec<MetricsRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let f = File::open(path).at(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.at(path)?;
        if line.trim().is_empty() {
            continue;
        }
        let r: MetricsRecord = serde_json::from_str(&line)?;
        if r.step < before_step {
            out.push(r);
        }
    }
    Ok(out)
}

/// Reads every record of a metrics stream.
pub fn load_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    read_records(path, u64::MAX)
}

/// Runs the configured method on `ds`.
///
/// On a non-finite loss or gradient the run stops with [`Error::NonFinite`]
/// and the last checkpoint on disk is left untouched.
pub fn train_ssl(cfg: &ExperimentCfg, ds: &Dataset, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.height() != cfg.resolution || ds.width() != cfg.resolution {
        return Err(Error::Config(format!(
            "dataset is {}x{} but resolution is {}",
            ds.height(),
            ds.width(),
            cfg.resolution
        )));
    }
    if cfg.batch_size > ds.len() {
        return Err(Error::Config(format!(
            "batch_size {} exceeds the {} images available",
            cfg.batch_size,
            ds.len()
        )));
    }
    let spe = steps_per_epoch(ds.len(), cfg.batch_size);
    let total = (cfg.epochs * spe) as u64;
    let schedule = cfg.optim().schedule(spe);
    let optim = cfg.optim();
    let policy = cfg.policy();
    let binning = cfg.binning();

    let ckpt_dir = opts.out_dir.as_ref().map(|d| d.join(CHECKPOINT_DIR));
    let metrics_path = opts.out_dir.as_ref().map(|d| d.join(METRICS_FILE));
    let (mut store, mut momentum, start, mut records) = match (&ckpt_dir, opts.resume) {
        (Some(dir), true) if dir.exists() => {
            let c = Checkpoint::load(dir)?;
            if c.config_hash != cfg.hash() {
                return Err(Error::Config("checkpoint was written by a different configuration".into()));
            }
            let kept = read_records(metrics_path.as_ref().expect("set with out_dir"), c.step)?;
            (c.store, c.momentum, c.step, kept)
        }
        _ => (init_store(cfg)?, MomentumState::new(), 0, Vec::new()),
    };

    let mut writer = match (&opts.out_dir, &metrics_path) {
        (Some(dir), Some(path)) => {
            fs::create_dir_all(dir).at(dir)?;
            let mut f = OpenOptions::new().create(true).write(true).truncate(true).open(path).at(path)?;
            for r in &records {
                writeln!(f, "{}", serde_json::to_string(r)?).at(path)?;
            }
            Some(f)
        }
        _ => None,
    };

    let end = opts.stop_after.map_or(total, |s| s.min(total));
    let save = |store: &ParamStore, momentum: &MomentumState, step: u64| -> Result<()> {
        if let Some(dir) = &ckpt_dir {
            Checkpoint {
                step,
                epoch: step / spe as u64,
                config_hash: cfg.hash(),
                model: cfg.model(),
                store: store.clone(),
                momentum: momentum.clone(),
            }
            .save(dir)?;
        }
        Ok(())
    };

    let started = Instant::now();
    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel::<Result<Batch>>(2);
        let policy = &policy;
        let binning = &binning;
        scope.spawn(move || {
            let mut order: Option<(u64, Vec<usize>)> = None;
            for step in start..end {
                let epoch = step / spe as u64;
                if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
                    order = Some((epoch, epoch_order(ds.len(), cfg.seed, epoch)));
                }
                let o = &order.as_ref().expect("set above").1;
                let k = (step % spe as u64) as usize * cfg.batch_size;
                let batch = make_batch(ds, &o[k..k + cfg.batch_size], policy, binning, cfg.seed, step);
                let failed = batch.is_err();
                if tx.send(batch).is_err() || failed {
                    break;
                }
            }
        });

        for step in start..end {
            let batch = rx
                .recv()
                .map_err(|_| Error::InvalidArgument("batch producer stopped early".into()))??;
            let epoch = step / spe as u64;
            let lr = lr_at(step as usize, &schedule);
            let result = evaluate_step(cfg, &store, &batch)?;
            if !result.loss.total.is_finite() {
                return Err(Error::NonFinite(format!("loss at step {step}")));
            }
            lars_sgd_step(&mut store, &result.grads, lr, &optim, &mut momentum)?;
            store.update_running_stats(&result.stats);
            let ema_decay = if cfg.method.uses_target() {
                let d = ema_decay_at(step, total, cfg.ema_tau0);
                store.ema_update(d)?;
                Some(d)
            } else {
                None
            };
            if step % cfg.log_every as u64 == 0 || step + 1 == total {
                let r = MetricsRecord {
                    step,
                    epoch,
                    loss: result.loss,
                    lr,
                    ema_decay,
                    clamp_rate: result.clamp_rate,
                    wall_time: started.elapsed().as_secs_f64(),
                };
                if let (Some(f), Some(p)) = (writer.as_mut(), &metrics_path) {
                    writeln!(f, "{}", serde_json::to_string(&r)?).at(p)?;
                    f.flush().at(p)?;
                }
                log::debug!("step {step} total {:.5} id_acc {:.3}", r.loss.total, r.loss.id_accuracy);
                records.push(r);
            }
            let done = step + 1;
            let epoch_end = done % spe as u64 == 0;
            let periodic = epoch_end && cfg.checkpoint_every_epochs > 0 && (done / spe as u64).is_multiple_of(cfg.checkpoint_every_epochs as u64);
            if periodic || done == end {
                save(&store, &momentum, done)?;
            }
        }
        Ok(())
    })?;

    Ok(TrainOutcome {
        store,
        momentum,
        records,
        steps_done: end,
        total_steps: total,
    })
}
