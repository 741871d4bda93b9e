//! Linear evaluation on frozen features.

use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::gradcore::Graph;
use crate::models::{encode_frozen, ModelCfg, Mode, Net, ParamStore, Source};
use crate::optim::{lars_sgd_step, lr_at, MomentumState, OptimCfg, Schedule};
use crate::rng::rng_for;
use crate::tensor::Tensor;

use rand::seq::SliceRandom;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCfg {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeCfg {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.1,
            batch_size: 256,
            weight_decay: 5e-4,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub train_size: usize,
    pub test_size: usize,
}

/// Splits indices so the last `fraction` of every class is held out.
pub fn split_indices(labels: &[u32], classes: usize, fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..classes {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] as usize == c).collect();
        let held = (members.len() as f64 * fraction).round() as usize;
        let cut = members.len() - held;
        train.extend_from_slice(&members[..cut]);
        test.extend_from_slice(&members[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn standardize(train: &Tensor, others: &[&Tensor]) -> (Tensor, Vec<Tensor>) {
    let (n, d) = (train.rows(), train.cols());
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(train.row(r)) {
            *m += v / n as f64;
        }
    }
    for r in 0..n {
        for ((s, v), m) in var.iter_mut().zip(train.row(r)).zip(&mean) {
            *s += (v - m).powi(2) / n as f64;
        }
    }
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v.sqrt() + 1e-8)).collect();
    let apply = |t: &Tensor| Tensor::from_fn(t.shape(), |k| (t.data()[k] - mean[k % d]) * inv[k % d]);
    (apply(train), others.iter().map(|t| apply(t)).collect())
}

fn accuracy(store: &ParamStore, model: &ModelCfg, x: &Tensor, labels: &[u32]) -> Result<f64> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut g = Graph::new();
    let mut net = Net::new(store, model, Source::Frozen, Mode::Eval);
    let xv = g.input(x.clone());
    let logits = net.probe_logits(&mut g, xv)?;
    let lv = g.value(logits);
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(r, &l)| {
            let row = lv.row(*r);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == l as usize
        })
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Softmax regression on fixed feature rows with Nesterov momentum SGD.
pub fn train_probe_on_features(
    train_x: &Tensor,
    train_y: &[u32],
    test_x: &Tensor,
    test_y: &[u32],
    classes: usize,
    cfg: &ProbeCfg,
) -> Result<ProbeReport> {
    if train_x.rows() != train_y.len() || test_x.rows() != test_y.len() || train_y.is_empty() {
        return Err(Error::InvalidArgument("feature rows and labels disagree".into()));
    }
    if let Some(l) = train_y.iter().chain(test_y).find(|&&l| l as usize >= classes) {
        return Err(Error::InvalidArgument(format!("label {l} outside the probe's {classes} classes")));
    }
    let (train_x, rest) = standardize(train_x, &[test_x]);
    let test_x = &rest[0];
    let d = train_x.cols();
    let model = ModelCfg {
        encoder: crate::models::EncoderCfg {
            feature_dim: d.max(8),
            ..Default::default()
        },
        ..Default::default()
    };
    let mut store = ParamStore::new();
    store.add_probe(d, classes, cfg.seed);
    let bsz = cfg.batch_size.min(train_y.len());
    let spe = train_y.len().div_ceil(bsz);
    let optim = OptimCfg {
        base_lr: cfg.lr,
        batch_size: 256,
        momentum: 0.9,
        nesterov: true,
        warmup_epochs: 0,
        total_epochs: cfg.epochs,
        weight_decay: cfg.weight_decay,
        lars_enabled: false,
        lars_trust_coeff: 1.0,
    };
    let schedule = Schedule {
        peak: cfg.lr,
        warmup_steps: 0,
        total_steps: cfg.epochs * spe,
    };
    let mut momentum = MomentumState::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_y.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, &[0x5052_4f42, epoch as u64]));
        for chunk in order.chunks(bsz) {
            let mut g = Graph::new();
            let rows: Vec<f64> = chunk.iter().flat_map(|&i| train_x.row(i).to_vec()).collect();
            let x = g.input(Tensor::matrix(chunk.len(), d, rows)?);
            let mut net = Net::new(&store, &model, Source::Online, Mode::Train);
            let logits = net.probe_logits(&mut g, x)?;
            let lp = g.log_softmax_rows(logits, None)?;
            let index: Vec<(usize, usize)> = chunk.iter().enumerate().map(|(r, &i)| (r, train_y[i] as usize)).collect();
            let picked = g.gather(lp, &index)?;
            let m = g.mean(picked);
            let loss = g.scale(m, -1.0);
            let grads = g.backward(loss)?.into_named();
            lars_sgd_step(&mut store, &grads, lr_at(step, &schedule), &optim, &mut momentum)?;
            step += 1;
        }
    }
    Ok(ProbeReport {
        train_accuracy: accuracy(&store, &model, &train_x, train_y)?,
        test_accuracy: accuracy(&store, &model, test_x, test_y)?,
        train_size: train_y.len(),
        test_size: test_y.len(),
    })
}

/// Encoder features of every image, computed in eval mode without gradients.
pub fn dataset_features(store: &ParamStore, model: &ModelCfg, ds: &Dataset, chunk: usize) -> Result<Tensor> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut data = Vec::new();
    for part in idx.chunks(chunk.max(1)) {
        data.extend(encode_frozen(store, model, ds.rows(part))?.into_data());
    }
    Ok(Tensor::matrix(ds.len(), model.encoder.feature_dim, data)?)
}

/// Linear probe on the frozen encoder of `store` over a class-stratified split of `ds`.
pub fn train_probe(store: &ParamStore, model: &ModelCfg, ds: &Dataset, cfg: &ProbeCfg) -> Result<ProbeReport> {
    if model.encoder.resolution != ds.height() || ds.height() != ds.width() {
        return Err(Error::InvalidArgument(format!(
            "dataset resolution {}x{} does not match the encoder's {}",
            ds.height(),
            ds.width(),
            model.encoder.resolution
        )));
    }
    let feats = dataset_features(store, model, ds, 256)?;
    let (train, test) = split_indices(ds.labels(), ds.classes(), cfg.test_fraction);
    let pick = |idx: &[usize]| -> Result<(Tensor, Vec<u32>)> {
        let rows: Vec<f64> = idx.iter().flat_map(|&i| feats.row(i).to_vec()).collect();
        Ok((
            Tensor::matrix(idx.len(), feats.cols(), rows)?,
            idx.iter().map(|&i| ds.labels()[i]).collect(),
        ))
    };
    let (tx, ty) = pick(&train)?;
    let (vx, vy) = pick(&test)?;
    train_probe_on_features(&tx, &ty, &vx, &vy, ds.classes(), cfg)
}
