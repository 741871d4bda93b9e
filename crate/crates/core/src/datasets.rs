//! Labeled image sets: a synthetic shapes generator, a checksummed on-disk
//! format, and assembly of paired augmented views.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actions::{allocentric_action, bin_action, ActionFrame, BinningSpec, EgoAction};
use crate::error::{Error, IoContext, Result};
use crate::imaging::{augment_view, hsv_to_rgb, AugmentPolicy, AugmentedView, Image};
use crate::models::checkpoint::sha256_hex;
use crate::rng::rng_for;
use crate::tensor::Tensor;

pub const DATASET_FORMAT: &str = "stec-dataset";
pub const DATASET_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const IMAGES: &str = "images.bin";
const LABELS: &str = "labels.bin";

/// Tag mixed into seeds for per-epoch shuffles.
const SHUFFLE_TAG: u64 = 0x5348_5546;

/// `N` RGB images in HWC order with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    height: usize,
    width: usize,
    classes: usize,
    images: Vec<f64>,
    labels: Vec<u32>,
}

impl Dataset {
    pub fn new(height: usize, width: usize, classes: usize, images: Vec<f64>, labels: Vec<u32>) -> Result<Self> {
        let per = height * width * 3;
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} values do not hold {} images of {height}x{width}x3",
                images.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::InvalidArgument(format!("label {l} outside {classes} classes")));
        }
        if images.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            height,
            width,
            classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn pixels(&self, i: usize) -> &[f64] {
        let per = self.height * self.width * 3;
        &self.images[i * per..(i + 1) * per]
    }

    pub fn image(&self, i: usize) -> Image {
        Image::new(self.height, self.width, self.pixels(i).to_vec()).expect("validated on construction")
    }

    /// Selected images as rows of a matrix.
    pub fn rows(&self, indices: &[usize]) -> Tensor {
        let per = self.height * self.width * 3;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(self.pixels(i));
        }
        Tensor::matrix(indices.len(), per, data).expect("row length")
    }
}

const SHAPES: usize = 10;

/// Whether normalized point `(u, v)` relative to the shape centre (in units
/// of the shape radius) lies inside shape `kind`.
fn inside(kind: usize, u: f64, v: f64) -> bool {
    let (au, av) = (u.abs(), v.abs());
    match kind {
        0 => u * u + v * v <= 1.0,
        1 => au <= 0.8 && av <= 0.8,
        2 => (-0.8..=0.8).contains(&v) && au <= (0.8 - v) * 0.6,
        3 => (au <= 0.25 && av <= 0.9) || (av <= 0.25 && au <= 0.9),
        4 => {
            let r2 = u * u + v * v;
            (0.4..=1.0).contains(&r2)
        }
        5 => au <= 1.0 && av <= 0.35,
        6 => au + av <= 1.0,
        7 => au <= 0.85 && av <= 0.85 && !(au <= 0.45 && av <= 0.45),
        8 => (u - v).abs() <= 0.3 && au <= 0.9 || (u + v).abs() <= 0.3 && au <= 0.9,
        _ => av <= 1.0 && au <= 0.35 || ((-1.0..=-0.4).contains(&v) && au <= 0.9),
    }
}

/// Coloured shapes on textured backgrounds. The class picks the shape (and
/// a hue tendency); position, size, colours and texture vary per image.
/// Labels are stratified: image `i` has class `i mod classes`.
pub fn gen_synthetic(n: usize, classes: usize, resolution: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {classes}")));
    }
    if resolution < 4 {
        return Err(Error::InvalidArgument(format!("resolution {resolution} is too small")));
    }
    let per = resolution * resolution * 3;
    let images: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| synth_image(i % classes, classes, resolution, seed, i as u64).into_data())
        .collect();
    let labels = (0..n).map(|i| (i % classes) as u32).collect();
    let mut flat = Vec::with_capacity(n * per);
    images.into_iter().for_each(|v| flat.extend(v));
    Dataset::new(resolution, resolution, classes, flat, labels)
}

fn synth_image(class: usize, classes: usize, res: usize, seed: u64, index: u64) -> Image {
    let mut rng = rng_for(seed, &[index]);
    let kind = class % SHAPES;
    let stretch = if (class / SHAPES) % 2 == 1 { 0.6 } else { 1.0 };
    let base_hue = class as f64 / classes as f64;
    let fg_hue = (base_hue + rng.gen_range(-0.12..0.12)).rem_euclid(1.0);
    let fg = hsv_to_rgb([fg_hue, rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0)]);
    let bg_a = hsv_to_rgb([rng.gen::<f64>(), rng.gen_range(0.0..0.5), rng.gen_range(0.1..0.5)]);
    let bg_b = hsv_to_rgb([rng.gen::<f64>(), rng.gen_range(0.0..0.5), rng.gen_range(0.1..0.5)]);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let freq: f64 = rng.gen_range(1.5..5.0);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let radius = rng.gen_range(0.22..0.38);
    let cx = rng.gen_range(radius..1.0 - radius);
    let cy = rng.gen_range(radius..1.0 - radius);
    let noise: Vec<f64> = (0..res * res).map(|_| rng.gen_range(-0.04..0.04)).collect();
    let (sa, ca) = angle.sin_cos();
    Image::from_fn(res, res, |y, x| {
        let px = (x as f64 + 0.5) / res as f64;
        let py = (y as f64 + 0.5) / res as f64;
        let u = (px - cx) / radius;
        let v = (py - cy) / (radius * stretch);
        let n = noise[y * res + x];
        if inside(kind, u, v) {
            fg.map(|c| c + n)
        } else {
            let t = 0.5 + 0.5 * ((px * ca + py * sa) * freq * std::f64::consts::TAU + phase).sin();
            std::array::from_fn(|k| bg_a[k] * (1.0 - t) + bg_b[k] * t + n)
        }
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    count: usize,
    height: usize,
    width: usize,
    channels: usize,
    classes: usize,
    dtype: String,
    endianness: String,
    images_sha256: String,
    labels_sha256: String,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Endian {
    Little,
    Big,
}

/// Writes `manifest.json`, `images.bin` (f64) and `labels.bin` (u32), little-endian.
pub fn save(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let images: Vec<u8> = ds.images.iter().flat_map(|v| v.to_le_bytes()).collect();
    let labels: Vec<u8> = ds.labels.iter().flat_map(|v| v.to_le_bytes()).collect();
    let manifest = Manifest {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        count: ds.len(),
        height: ds.height,
        width: ds.width,
        channels: 3,
        classes: ds.classes,
        dtype: "f64".into(),
        endianness: "little".into(),
        images_sha256: sha256_hex(&images),
        labels_sha256: sha256_hex(&labels),
    };
    fs::write(dir.join(IMAGES), &images).at(dir.join(IMAGES))?;
    fs::write(dir.join(LABELS), &labels).at(dir.join(LABELS))?;
    fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?).at(dir.join(MANIFEST))?;
    Ok(())
}

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "dataset".into(),
        detail: detail.into(),
    }
}

/// Reads a dataset written by [`save`]; big-endian payloads are accepted
/// when the manifest says so.
pub fn load(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST);
    let m: Manifest = serde_json::from_slice(&fs::read(&mpath).at(&mpath)?).map_err(|e| format_err(e.to_string()))?;
    if m.format != DATASET_FORMAT {
        return Err(format_err(format!("unexpected format tag {:?}", m.format)));
    }
    if m.version != DATASET_VERSION {
        return Err(Error::Version {
            what: "dataset".into(),
            found: m.version,
            expected: DATASET_VERSION,
        });
    }
    let endian = match m.endianness.as_str() {
        "little" => Endian::Little,
        "big" => Endian::Big,
        other => return Err(format_err(format!("unknown endianness {other:?}"))),
    };
    if m.dtype != "f64" || m.channels != 3 {
        return Err(format_err(format!("unsupported dtype {} with {} channels", m.dtype, m.channels)));
    }
    let read_checked = |name: &str, expected: &str| -> Result<Vec<u8>> {
        let p = dir.join(name);
        let bytes = fs::read(&p).at(&p)?;
        let found = sha256_hex(&bytes);
        if found != expected {
            return Err(Error::Checksum {
                what: p.display().to_string(),
                expected: expected.to_string(),
                found,
            });
        }
        Ok(bytes)
    };
    let ib = read_checked(IMAGES, &m.images_sha256)?;
    let lb = read_checked(LABELS, &m.labels_sha256)?;
    let want = m.count * m.height * m.width * 3;
    if ib.len() != want * 8 || lb.len() != m.count * 4 {
        return Err(format_err("payload sizes do not match the manifest"));
    }
    let images = ib
        .chunks_exact(8)
        .map(|c| {
            let b: [u8; 8] = c.try_into().expect("8 bytes");
            match endian {
                Endian::Little => f64::from_le_bytes(b),
                Endian::Big => f64::from_be_bytes(b),
            }
        })
        .collect();
    let labels = lb
        .chunks_exact(4)
        .map(|c| {
            let b: [u8; 4] = c.try_into().expect("4 bytes");
            match endian {
                Endian::Little => u32::from_le_bytes(b),
                Endian::Big => u32::from_be_bytes(b),
            }
        })
        .collect();
    Dataset::new(m.height, m.width, m.classes, images, labels)
}

/// Two augmented views of each of `B` distinct images. Views `0..B` are the
/// first views and `B..2B` the second; `pair_index[i] = (i + B) mod 2B`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub views: Vec<AugmentedView>,
    pub pair_index: Vec<usize>,
    /// Action from view `i` to view `i + B`.
    pub ego_actions: Vec<EgoAction>,
    /// False when either view of the pair was solarized.
    pub masks: Vec<bool>,
}

impl Batch {
    pub fn pairs(&self) -> usize {
        self.indices.len()
    }

    /// View images as rows `[2B × R·R·3]`.
    pub fn images(&self) -> Tensor {
        let per = self.views[0].image.data().len();
        let mut data = Vec::with_capacity(self.views.len() * per);
        for v in &self.views {
            data.extend_from_slice(v.image.data());
        }
        Tensor::matrix(self.views.len(), per, data).expect("equal view sizes")
    }

    /// Continuous targets and labels for the manipulation head in `frame`.
    pub fn manip_targets(&self, frame: ActionFrame, spec: &BinningSpec) -> Vec<([f64; 6], [usize; 6])> {
        let b = self.pairs();
        (0..b)
            .map(|i| match frame {
                ActionFrame::Egocentric => (self.ego_actions[i].a_manip, bin_action(&self.ego_actions[i].a_manip, spec)),
                ActionFrame::Allocentric => {
                    let (x, xp) = (&self.views[i].record, &self.views[i + b].record);
                    let a = allocentric_action(x, xp, x.source_width, x.source_height);
                    (a, bin_action(&a, spec))
                }
            })
            .collect()
    }
}

/// Deterministic shuffle of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &[SHUFFLE_TAG, epoch]));
    order
}

/// Builds a batch from the given distinct images. View `v` of item `k` is
/// drawn from its own stream seeded by `(seed, step, k, v)`, so the result
/// does not depend on how many threads assemble it.
pub fn make_batch(
    ds: &Dataset,
    indices: &[usize],
    policy: &AugmentPolicy,
    binning: &BinningSpec,
    seed: u64,
    step: u64,
) -> Result<Batch> {
    let b = indices.len();
    if b == 0 || b > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "batch of {b} from a dataset of {} images",
            ds.len()
        )));
    }
    let mut seen = indices.to_vec();
    seen.sort_unstable();
    if seen.windows(2).any(|w| w[0] == w[1]) || seen.last().is_some_and(|&i| i >= ds.len()) {
        return Err(Error::InvalidArgument("batch indices must be distinct and in range".into()));
    }
    policy.validate()?;
    let views: Vec<AugmentedView> = (0..2 * b)
        .into_par_iter()
        .map(|slot| {
            let (view, k) = (slot / b, slot % b);
            let mut rng = rng_for(seed, &[step, k as u64, view as u64]);
            augment_view(&ds.image(indices[k]), policy, &mut rng, indices[k])
        })
        .collect();
    let ego_actions = (0..b)
        .map(|k| EgoAction::from_records(&views[k].record, &views[k + b].record, binning))
        .collect::<Result<Vec<_>>>()?;
    let masks = ego_actions.iter().map(|a| a.valid).collect();
    Ok(Batch {
        indices: indices.to_vec(),
        pair_index: (0..2 * b).map(|i| (i + b) % (2 * b)).collect(),
        views,
        ego_actions,
        masks,
    })
}

/// Draws `B` distinct images for `step` and assembles their batch.
pub fn sample_batch(
    ds: &Dataset,
    b: usize,
    policy: &AugmentPolicy,
    binning: &BinningSpec,
    seed: u64,
    step: u64,
) -> Result<Batch> {
    if b > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "batch of {b} from a dataset of {} images",
            ds.len()
        )));
    }
    let mut rng = rng_for(seed, &[SHUFFLE_TAG, u64::MAX, step]);
    let indices = rand::seq::index::sample(&mut rng, ds.len(), b).into_vec();
    make_batch(ds, &indices, policy, binning, seed, step)
}
