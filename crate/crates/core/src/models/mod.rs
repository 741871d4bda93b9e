//! Networks and their parameters: encoder `f`, projector `g` with cosine
//! similarity, manipulation head `ψ`, optional predictor, linear probe, and
//! EMA target copies of `f` and `g`.

pub mod checkpoint;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{BatchStats, ConvGeom, Graph, Var, BN_EPS, BN_MOMENTUM};
use crate::rng::rng_for;
use crate::tensor::Tensor;

pub use checkpoint::Checkpoint;

/// Norm floor used when normalizing projections.
pub const PROJECTION_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Mlp,
    Smallconv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderCfg {
    pub kind: EncoderKind,
    /// Hidden widths (MLP) or channel counts of the stride-2 convolutions.
    pub widths: Vec<usize>,
    pub feature_dim: usize,
    pub resolution: usize,
}

impl Default for EncoderCfg {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Mlp,
            widths: vec![512],
            feature_dim: 64,
            resolution: 32,
        }
    }
}

impl EncoderCfg {
    pub fn input_len(&self) -> usize {
        self.resolution * self.resolution * 3
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCfg {
    pub encoder: EncoderCfg,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub manip_hidden: usize,
    /// `6·K` for classification, 6 for regression.
    pub manip_outputs: usize,
    pub predictor: bool,
    pub predictor_hidden: usize,
}

impl Default for ModelCfg {
    fn default() -> Self {
        Self {
            encoder: EncoderCfg::default(),
            proj_hidden: 512,
            proj_dim: 64,
            manip_hidden: 512,
            manip_outputs: 36,
            predictor: false,
            predictor_hidden: 512,
        }
    }
}

impl ModelCfg {
    pub fn validate(&self) -> Result<()> {
        if self.encoder.feature_dim < 8 {
            return Err(Error::Config(format!(
                "feature_dim {} must be at least 8",
                self.encoder.feature_dim
            )));
        }
        if self.encoder.widths.is_empty() || self.encoder.widths.contains(&0) {
            return Err(Error::Config("encoder widths must be non-empty and positive".into()));
        }
        if self.encoder.kind == EncoderKind::Smallconv {
            let mut r = self.encoder.resolution;
            for _ in &self.encoder.widths {
                if r < 2 {
                    return Err(Error::Config("too many stride-2 stages for the resolution".into()));
                }
                r = r.div_ceil(2);
            }
        }
        if self.proj_hidden == 0 || self.proj_dim == 0 || self.manip_hidden == 0 || self.manip_outputs == 0 {
            return Err(Error::Config("head widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamFlags {
    pub exclude_from_lars: bool,
    pub no_weight_decay: bool,
}

impl ParamFlags {
    /// Biases and batch-norm scales/offsets.
    pub const AUXILIARY: ParamFlags = ParamFlags {
        exclude_from_lars: true,
        no_weight_decay: true,
    };
}

/// Learnable tensors, their flags, batch-norm running statistics and the
/// optional EMA shadow of the encoder and projector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    flags: BTreeMap<String, ParamFlags>,
    buffers: BTreeMap<String, Tensor>,
    shadow: Option<BTreeMap<String, Tensor>>,
}

fn name_seed(name: &str) -> u64 {
    // FNV-1a
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Whether a parameter belongs to the networks mirrored by target copies.
pub fn is_shadowed(name: &str) -> bool {
    name.starts_with("f.") || name.starts_with("g.")
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fresh parameters for every network in `cfg`.
    pub fn init(cfg: &ModelCfg, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut s = Self::new();
        let e = &cfg.encoder;
        match e.kind {
            EncoderKind::Mlp => {
                let mut d = e.input_len();
                for (i, &w) in e.widths.iter().enumerate() {
                    s.add_linear(&format!("f.l{i}"), d, w, false, seed);
                    s.add_bn(&format!("f.bn{i}"), w);
                    d = w;
                }
                s.add_linear("f.out", d, e.feature_dim, true, seed);
            }
            EncoderKind::Smallconv => {
                let mut c = 3;
                for (i, &w) in e.widths.iter().enumerate() {
                    s.add_weight(&format!("f.conv{i}.w"), 9 * c, w, seed);
                    s.add_bn(&format!("f.bn{i}"), w);
                    c = w;
                }
                s.add_linear("f.out", c, e.feature_dim, true, seed);
            }
        }
        s.add_linear("g.l0", e.feature_dim, cfg.proj_hidden, false, seed);
        s.add_bn("g.bn0", cfg.proj_hidden);
        s.add_linear("g.out", cfg.proj_hidden, cfg.proj_dim, true, seed);
        s.add_bn("g.bn_out", cfg.proj_dim);
        s.add_linear("psi.l0", 2 * e.feature_dim, cfg.manip_hidden, false, seed);
        s.add_bn("psi.bn0", cfg.manip_hidden);
        s.add_linear("psi.out", cfg.manip_hidden, cfg.manip_outputs, true, seed);
        if cfg.predictor {
            s.add_linear("pred.l0", cfg.proj_dim, cfg.predictor_hidden, false, seed);
            s.add_bn("pred.bn0", cfg.predictor_hidden);
            s.add_linear("pred.out", cfg.predictor_hidden, cfg.proj_dim, true, seed);
        }
        Ok(s)
    }

    fn add_weight(&mut self, name: &str, fan_in: usize, fan_out: usize, seed: u64) {
        let mut rng = rng_for(seed, &[name_seed(name)]);
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = Tensor::from_fn(&[fan_in, fan_out], |_| rng.gen_range(-bound..bound));
        self.insert(name, w, ParamFlags::default());
    }

    fn add_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, with_bias: bool, seed: u64) {
        self.add_weight(&format!("{prefix}.w"), fan_in, fan_out, seed);
        if with_bias {
            self.insert(&format!("{prefix}.b"), Tensor::zeros(&[fan_out]), ParamFlags::AUXILIARY);
        }
    }

    fn add_bn(&mut self, prefix: &str, width: usize) {
        self.insert(&format!("{prefix}.gamma"), Tensor::full(&[width], 1.0), ParamFlags::AUXILIARY);
        self.insert(&format!("{prefix}.beta"), Tensor::zeros(&[width]), ParamFlags::AUXILIARY);
        self.buffers
            .insert(format!("{prefix}.running_mean"), Tensor::zeros(&[width]));
        self.buffers
            .insert(format!("{prefix}.running_var"), Tensor::full(&[width], 1.0));
    }

    /// Adds (or re-initializes) a linear probe on `in_dim` features.
    pub fn add_probe(&mut self, in_dim: usize, classes: usize, seed: u64) {
        self.add_linear("probe", in_dim, classes, true, seed);
    }

    pub fn insert(&mut self, name: &str, t: Tensor, flags: ParamFlags) {
        self.params.insert(name.to_string(), t);
        self.flags.insert(name.to_string(), flags);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn flags(&self, name: &str) -> ParamFlags {
        self.flags.get(name).copied().unwrap_or_default()
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub(crate) fn set_buffer(&mut self, name: &str, t: Tensor) {
        self.buffers.insert(name.to_string(), t);
    }

    pub fn shadow(&self) -> Option<&BTreeMap<String, Tensor>> {
        self.shadow.as_ref()
    }

    pub(crate) fn set_shadow(&mut self, shadow: Option<BTreeMap<String, Tensor>>) {
        self.shadow = shadow;
    }

    /// Starts target copies of `f` and `g` from the current online weights.
    pub fn enable_shadow(&mut self) {
        let shadow = self
            .params
            .iter()
            .filter(|(n, _)| is_shadowed(n))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        self.shadow = Some(shadow);
    }

    /// `shadow ← decay·shadow + (1 − decay)·online`, elementwise.
    pub fn ema_update(&mut self, decay: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::InvalidArgument(format!("EMA decay {decay} outside [0, 1]")));
        }
        let shadow = self
            .shadow
            .as_mut()
            .ok_or_else(|| Error::InvalidArgument("EMA update without target networks".into()))?;
        for (name, target) in shadow.iter_mut() {
            let online = self
                .params
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("shadow entry {name} has no online parameter")))?;
            for (t, o) in target.data_mut().iter_mut().zip(online.data()) {
                *t = decay * *t + (1.0 - decay) * o;
            }
        }
        Ok(())
    }

    /// Folds batch statistics into running estimates.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats)]) {
        for (prefix, s) in stats {
            if let Some(m) = self.buffers.get_mut(&format!("{prefix}.running_mean")) {
                for (r, v) in m.data_mut().iter_mut().zip(&s.mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                }
            }
            if let Some(m) = self.buffers.get_mut(&format!("{prefix}.running_var")) {
                for (r, v) in m.data_mut().iter_mut().zip(&s.var) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                }
            }
        }
    }

    /// `Σ ‖w‖²` over parameters that take weight decay, optionally restricted by prefix.
    pub fn decayed_sq_norm(&self, include: impl Fn(&str) -> bool) -> f64 {
        self.params
            .iter()
            .filter(|(n, _)| !self.flags(n).no_weight_decay && include(n))
            .map(|(_, t)| t.sq_norm())
            .sum()
    }
}

/// Decay for step `t` of `T`: `1 − (1 − τ₀)(cos(πt/T) + 1)/2`.
pub fn ema_decay_at(step: u64, total_steps: u64, tau0: f64) -> f64 {
    let frac = if total_steps == 0 {
        1.0
    } else {
        (step as f64 / total_steps as f64).min(1.0)
    };
    1.0 - (1.0 - tau0) * ((std::f64::consts::PI * frac).cos() + 1.0) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Where a [`Net`] reads its weights from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    /// Differentiable online weights.
    Online,
    /// Online weights as constants.
    Frozen,
    /// EMA shadow weights as constants.
    Target,
}

/// Binds parameters of a [`ParamStore`] into a graph on first use.
pub struct Net<'s> {
    store: &'s ParamStore,
    cfg: &'s ModelCfg,
    source: Source,
    mode: Mode,
    vars: BTreeMap<String, Var>,
    stats: Vec<(String, BatchStats)>,
}

impl<'s> Net<'s> {
    pub fn new(store: &'s ParamStore, cfg: &'s ModelCfg, source: Source, mode: Mode) -> Self {
        Self {
            store,
            cfg,
            source,
            mode,
            vars: BTreeMap::new(),
            stats: Vec::new(),
        }
    }

    pub fn cfg(&self) -> &ModelCfg {
        self.cfg
    }

    /// Batch statistics gathered in train mode, for online networks only.
    pub fn take_stats(&mut self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut self.stats)
    }

    fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let t = match self.source {
            Source::Target => self
                .store
                .shadow()
                .ok_or_else(|| Error::InvalidArgument("target networks requested but no shadow present".into()))?
                .get(name),
            _ => self.store.get(name),
        }
        .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?
        .clone();
        let v = match self.source {
            Source::Online => g.param(name, t),
            _ => g.input(t),
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn linear(&mut self, g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
        let w = self.var(g, &format!("{prefix}.w"))?;
        let y = g.matmul(x, w)?;
        let bias = format!("{prefix}.b");
        if self.store.get(&bias).is_some() {
            let b = self.var(g, &bias)?;
            Ok(g.add_row(y, b)?)
        } else {
            Ok(y)
        }
    }

    fn bn(&mut self, g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.var(g, &format!("{prefix}.gamma"))?;
        let beta = self.var(g, &format!("{prefix}.beta"))?;
        // target copies normalize with batch statistics, like the online networks in training
        let use_batch = self.mode == Mode::Train || self.source == Source::Target;
        if use_batch {
            let (y, stats) = g.batch_norm_train(x, gamma, beta, BN_EPS)?;
            if self.source == Source::Online {
                self.stats.push((prefix.to_string(), stats));
            }
            Ok(y)
        } else {
            let mean = self
                .store
                .buffer(&format!("{prefix}.running_mean"))
                .ok_or_else(|| Error::InvalidArgument(format!("missing running mean for {prefix}")))?;
            let var = self
                .store
                .buffer(&format!("{prefix}.running_var"))
                .ok_or_else(|| Error::InvalidArgument(format!("missing running variance for {prefix}")))?;
            Ok(g.batch_norm_eval(x, gamma, beta, mean.data(), var.data(), BN_EPS)?)
        }
    }

    fn bn_relu(&mut self, g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
        let y = self.bn(g, prefix, x)?;
        Ok(g.relu(y))
    }

    /// `f`: images `[N × R·R·3]` (HWC per row) to features `[N × D]`.
    pub fn encode(&mut self, g: &mut Graph, images: Var) -> Result<Var> {
        let e = self.cfg.encoder.clone();
        let shape = g.shape(images).to_vec();
        if shape.len() != 2 || shape[1] != e.input_len() {
            return Err(Error::InvalidArgument(format!(
                "encoder expects [N x {}] inputs at resolution {}, got {shape:?}",
                e.input_len(),
                e.resolution
            )));
        }
        let n = shape[0];
        match e.kind {
            EncoderKind::Mlp => {
                let mut x = images;
                for i in 0..e.widths.len() {
                    x = self.linear(g, &format!("f.l{i}"), x)?;
                    x = self.bn_relu(g, &format!("f.bn{i}"), x)?;
                }
                self.linear(g, "f.out", x)
            }
            EncoderKind::Smallconv => {
                let (mut h, mut w, mut c) = (e.resolution, e.resolution, 3);
                let mut x = g.reshape(images, &[n, h, w, c])?;
                for (i, &cout) in e.widths.iter().enumerate() {
                    let geom = ConvGeom {
                        batch: n,
                        height: h,
                        width: w,
                        channels: c,
                        kernel: 3,
                        stride: 2,
                        pad: 1,
                    };
                    let cols = g.im2col(x, geom)?;
                    let wt = self.var(g, &format!("f.conv{i}.w"))?;
                    let y = g.matmul(cols, wt)?;
                    let y = self.bn_relu(g, &format!("f.bn{i}"), y)?;
                    (h, w, c) = (geom.out_height(), geom.out_width(), cout);
                    x = g.reshape(y, &[n, h, w, c])?;
                }
                let flat = g.reshape(x, &[n * h * w, c])?;
                let pooled = g.group_mean(flat, h * w)?;
                self.linear(g, "f.out", pooled)
            }
        }
    }

    /// `g`: one hidden layer with BN+ReLU, linear output, optional output BN.
    pub fn project(&mut self, g: &mut Graph, h: Var, output_bn: bool) -> Result<Var> {
        let x = self.linear(g, "g.l0", h)?;
        let x = self.bn_relu(g, "g.bn0", x)?;
        let z = self.linear(g, "g.out", x)?;
        if output_bn {
            self.bn(g, "g.bn_out", z)
        } else {
            Ok(z)
        }
    }

    /// Predictor on projections (non-contrastive variants only).
    pub fn predict(&mut self, g: &mut Graph, z: Var) -> Result<Var> {
        let x = self.linear(g, "pred.l0", z)?;
        let x = self.bn_relu(g, "pred.bn0", x)?;
        self.linear(g, "pred.out", x)
    }

    /// `ψ` on `[h; h']`: `[B × manip_outputs]`.
    pub fn manip_logits(&mut self, g: &mut Graph, h: Var, h_prime: Var) -> Result<Var> {
        let x = g.concat_cols(h, h_prime)?;
        let x = self.linear(g, "psi.l0", x)?;
        let x = self.bn_relu(g, "psi.bn0", x)?;
        self.linear(g, "psi.out", x)
    }

    pub fn probe_logits(&mut self, g: &mut Graph, h: Var) -> Result<Var> {
        self.linear(g, "probe", h)
    }
}

/// What to do when a projection has zero norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionGuard {
    #[default]
    Error,
    EpsilonFloor,
}

/// Normalizes projection rows, rejecting zero rows under [`ProjectionGuard::Error`].
pub fn normalize_projections(g: &mut Graph, z: Var, guard: ProjectionGuard) -> Result<Var> {
    if guard == ProjectionGuard::Error {
        let t = g.value(z);
        if let Some(r) = (0..t.rows()).find(|&r| t.row(r).iter().all(|v| *v == 0.0)) {
            return Err(Error::InvalidArgument(format!("projection row {r} has zero norm")));
        }
    }
    Ok(g.l2_normalize_rows(z, PROJECTION_EPS)?)
}

/// `φ(h, h') = ⟨g(h)/‖g(h)‖, g(h')/‖g(h')‖⟩` for each row pair, with the
/// online projector. Each side is projected as its own batch.
pub fn project_phi(
    store: &ParamStore,
    cfg: &ModelCfg,
    h: &Tensor,
    h_prime: &Tensor,
    mode: Mode,
    guard: ProjectionGuard,
) -> Result<Vec<f64>> {
    if h.shape() != h_prime.shape() || h.cols() != cfg.encoder.feature_dim {
        return Err(Error::InvalidArgument(format!(
            "feature shapes {:?} and {:?} do not match dimension {}",
            h.shape(),
            h_prime.shape(),
            cfg.encoder.feature_dim
        )));
    }
    let mut g = Graph::new();
    let mut net = Net::new(store, cfg, Source::Frozen, mode);
    let a = g.input(h.clone());
    let b = g.input(h_prime.clone());
    let za = net.project(&mut g, a, true)?;
    let zb = net.project(&mut g, b, true)?;
    let na = normalize_projections(&mut g, za, guard)?;
    let nb = normalize_projections(&mut g, zb, guard)?;
    let (va, vb) = (g.value(na), g.value(nb));
    Ok((0..va.rows())
        .map(|r| va.row(r).iter().zip(vb.row(r)).map(|(x, y)| x * y).sum())
        .collect())
}

/// Features in eval mode with frozen weights.
pub fn encode_frozen(store: &ParamStore, cfg: &ModelCfg, images: Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut net = Net::new(store, cfg, Source::Frozen, Mode::Eval);
    let x = g.input(images);
    let h = net.encode(&mut g, x)?;
    Ok(g.value(h).clone())
}

/// Row-wise softmax of a logits matrix grouped into `groups × k` per row.
pub fn grouped_softmax(logits: &Tensor, k: usize) -> Vec<Vec<f64>> {
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(kind: EncoderKind) -> ModelCfg {
        ModelCfg {
            encoder: EncoderCfg {
                kind,
                widths: vec![6, 5],
                feature_dim: 8,
                resolution: 6,
            },
            proj_hidden: 10,
            proj_dim: 7,
            manip_hidden: 9,
            manip_outputs: 12,
            predictor: true,
            predictor_hidden: 5,
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen())
    }

    #[test]
    fn flags_cover_biases_and_bn() {
        let s = ParamStore::init(&small_cfg(EncoderKind::Mlp), 0).unwrap();
        for name in s.params().keys() {
            let aux = name.ends_with(".b") || name.ends_with(".gamma") || name.ends_with(".beta");
            assert_eq!(s.flags(name), if aux { ParamFlags::AUXILIARY } else { ParamFlags::default() }, "{name}");
        }
    }

    #[test]
    fn zero_final_layer_gives_zero_features() {
        for kind in [EncoderKind::Mlp, EncoderKind::Smallconv] {
            let cfg = small_cfg(kind);
            let mut s = ParamStore::init(&cfg, 1).unwrap();
            s.get_mut("f.out.w").unwrap().data_mut().fill(0.0);
            let h = encode_frozen(&s, &cfg, random(&[3, 108], 2)).unwrap();
            assert!(h.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn eval_encoding_is_permutation_equivariant() {
        for kind in [EncoderKind::Mlp, EncoderKind::Smallconv] {
            let cfg = small_cfg(kind);
            let s = ParamStore::init(&cfg, 3).unwrap();
            let x = random(&[4, 108], 4);
            let perm = [2, 0, 3, 1];
            let mut px = Vec::new();
            for &p in &perm {
                px.extend_from_slice(x.row(p));
            }
            let h = encode_frozen(&s, &cfg, x).unwrap();
            let hp = encode_frozen(&s, &cfg, Tensor::matrix(4, 108, px).unwrap()).unwrap();
            for (i, &p) in perm.iter().enumerate() {
                assert_eq!(hp.row(i), h.row(p));
            }
        }
    }

    #[test]
    fn resolution_mismatch_is_rejected() {
        let cfg = small_cfg(EncoderKind::Mlp);
        let s = ParamStore::init(&cfg, 0).unwrap();
        assert!(encode_frozen(&s, &cfg, random(&[2, 100], 0)).is_err());
    }

    #[test]
    fn phi_identities() {
        let cfg = small_cfg(EncoderKind::Mlp);
        let s = ParamStore::init(&cfg, 5).unwrap();
        let h = random(&[5, 8], 6);
        let h2 = random(&[5, 8], 7);
        for v in project_phi(&s, &cfg, &h, &h, Mode::Train, ProjectionGuard::Error).unwrap() {
            assert!((v - 1.0).abs() < 1e-14);
        }
        let ab = project_phi(&s, &cfg, &h, &h2, Mode::Train, ProjectionGuard::Error).unwrap();
        let ba = project_phi(&s, &cfg, &h2, &h, Mode::Train, ProjectionGuard::Error).unwrap();
        assert_eq!(ab, ba);
        assert!(ab.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn phi_of_orthogonal_projections_is_zero() {
        // projector reduced to an identity-like map with no BN effect in eval mode
        let cfg = ModelCfg {
            proj_hidden: 8,
            proj_dim: 8,
            ..small_cfg(EncoderKind::Mlp)
        };
        let mut s = ParamStore::init(&cfg, 0).unwrap();
        let eye = Tensor::from_fn(&[8, 8], |i| if i / 8 == i % 8 { 1.0 } else { 0.0 });
        *s.get_mut("g.l0.w").unwrap() = eye.clone();
        *s.get_mut("g.out.w").unwrap() = eye;
        let mut h = vec![0.0; 8];
        let mut h2 = vec![0.0; 8];
        h[0] = 1.0;
        h2[1] = 1.0;
        let phi = project_phi(
            &s,
            &cfg,
            &Tensor::matrix(1, 8, h).unwrap(),
            &Tensor::matrix(1, 8, h2).unwrap(),
            Mode::Eval,
            ProjectionGuard::Error,
        )
        .unwrap();
        assert!(phi[0].abs() < 1e-12);
    }

    #[test]
    fn zero_projection_guard() {
        let cfg = small_cfg(EncoderKind::Mlp);
        let mut s = ParamStore::init(&cfg, 0).unwrap();
        s.get_mut("g.out.w").unwrap().data_mut().fill(0.0);
        s.get_mut("g.bn_out.gamma").unwrap().data_mut().fill(0.0);
        let h = random(&[3, 8], 1);
        assert!(project_phi(&s, &cfg, &h, &h, Mode::Train, ProjectionGuard::Error).is_err());
        let v = project_phi(&s, &cfg, &h, &h, Mode::Train, ProjectionGuard::EpsilonFloor).unwrap();
        assert!(v.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn manip_logits_zero_output_layer_is_uniform() {
        let cfg = small_cfg(EncoderKind::Mlp);
        let mut s = ParamStore::init(&cfg, 0).unwrap();
        s.get_mut("psi.out.w").unwrap().data_mut().fill(0.0);
        let mut g = Graph::new();
        let mut net = Net::new(&s, &cfg, Source::Frozen, Mode::Train);
        let a = g.input(random(&[4, 8], 1));
        let b = g.input(random(&[4, 8], 2));
        let l = net.manip_logits(&mut g, a, b).unwrap();
        for row in grouped_softmax(g.value(l), 6) {
            for p in row {
                assert!((p - 1.0 / 6.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn manip_logits_depend_on_argument_order() {
        let cfg = small_cfg(EncoderKind::Mlp);
        let s = ParamStore::init(&cfg, 8).unwrap();
        let (ha, hb) = (random(&[4, 8], 1), random(&[4, 8], 2));
        let run = |x: &Tensor, y: &Tensor| {
            let mut g = Graph::new();
            let mut net = Net::new(&s, &cfg, Source::Frozen, Mode::Train);
            let a = g.input(x.clone());
            let b = g.input(y.clone());
            let l = net.manip_logits(&mut g, a, b).unwrap();
            let rows = grouped_softmax(g.value(l), 6);
            for r in &rows {
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            g.value(l).clone()
        };
        assert!(run(&ha, &hb).max_abs_diff(&run(&hb, &ha)) > 1e-6);
    }

    #[test]
    fn ema_examples() {
        let cfg = small_cfg(EncoderKind::Mlp);
        let mut s = ParamStore::init(&cfg, 0).unwrap();
        assert!(s.ema_update(0.5).is_err());
        s.enable_shadow();
        let shadow_names: Vec<_> = s.shadow().unwrap().keys().cloned().collect();
        assert!(shadow_names.iter().all(|n| is_shadowed(n)));
        for n in &shadow_names {
            s.get_mut(n).unwrap().data_mut().fill(1.0);
        }
        let before = s.shadow().unwrap().clone();
        s.ema_update(1.0).unwrap();
        assert_eq!(s.shadow().unwrap(), &before);
        let zeroed = before.iter().map(|(n, t)| (n.clone(), Tensor::zeros(t.shape()))).collect();
        s.set_shadow(Some(zeroed));
        let decay = ema_decay_at(0, 100, 0.99);
        assert!((decay - 0.99).abs() < 1e-15);
        s.ema_update(decay).unwrap();
        for t in s.shadow().unwrap().values() {
            assert!(t.data().iter().all(|v| (v - 0.01).abs() < 1e-15));
        }
        s.ema_update(0.0).unwrap();
        for n in &shadow_names {
            assert_eq!(s.shadow().unwrap()[n], s.params()[n]);
        }
        assert!((ema_decay_at(100, 100, 0.99) - 1.0).abs() < 1e-15);
    }
}
