//! Representation diagnostics: centroid separation between augmented and
//! unaugmented features, feature export, and accuracy summaries.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::harness::MetricsRecord;
use crate::imaging::{augment_view, AugmentPolicy};
use crate::models::{encode_frozen, ModelCfg, ParamStore};
use crate::rng::rng_for;
use crate::tensor::Tensor;

/// Views with magnitude above this count as augmented.
pub const DEFAULT_MAGNITUDE_THRESHOLD: f64 = 0.3;

/// Tag mixed into the seeds of exported augmented views.
const EXPORT_TAG: u64 = 0x4558_504f;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub source_id: usize,
    pub label: u32,
    /// False for the unaugmented pass.
    pub augmented: bool,
    /// `1 − relative crop area`.
    pub magnitude: f64,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureDump {
    pub rows: Vec<FeatureRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    /// Distance per class that had both groups.
    pub per_class: BTreeMap<u32, f64>,
    /// Classes missing one of the groups.
    pub skipped: Vec<u32>,
    pub mean: f64,
}

/// Per class, the Euclidean distance between the centroid of augmented
/// rows (magnitude above `threshold`) and that of unaugmented rows.
pub fn centroid_separation(dump: &FeatureDump, threshold: f64) -> Result<Separation> {
    let dim = dump.rows.first().map_or(0, |r| r.features.len());
    if dump.rows.iter().any(|r| r.features.len() != dim) {
        return Err(Error::InvalidArgument("feature rows have different dimensions".into()));
    }
    // label -> (sum unaugmented, count, sum augmented, count)
    let mut acc: BTreeMap<u32, (Vec<f64>, usize, Vec<f64>, usize)> = BTreeMap::new();
    for r in &dump.rows {
        let e = acc
            .entry(r.label)
            .or_insert_with(|| (vec![0.0; dim], 0, vec![0.0; dim], 0));
        if !r.augmented {
            e.0.iter_mut().zip(&r.features).for_each(|(s, v)| *s += v);
            e.1 += 1;
        } else if r.magnitude > threshold {
            e.2.iter_mut().zip(&r.features).for_each(|(s, v)| *s += v);
            e.3 += 1;
        }
    }
    let mut per_class = BTreeMap::new();
    let mut skipped = Vec::new();
    for (label, (su, nu, sa, na)) in acc {
        if nu == 0 || na == 0 {
            skipped.push(label);
            continue;
        }
        let d = su
            .iter()
            .zip(&sa)
            .map(|(u, a)| (u / nu as f64 - a / na as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        per_class.insert(label, d);
    }
    let mean = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    Ok(Separation {
        per_class,
        skipped,
        mean,
    })
}

/// Encoder features of every image, once unaugmented and once through
/// `policy`: `2N` rows, unaugmented first.
pub fn export_features(
    store: &ParamStore,
    model: &ModelCfg,
    ds: &Dataset,
    policy: &AugmentPolicy,
    seed: u64,
) -> Result<FeatureDump> {
    let per = ds.height() * ds.width() * 3;
    let mut rows = Vec::with_capacity(2 * ds.len());
    let chunk = 256;
    for start in (0..ds.len()).step_by(chunk) {
        let idx: Vec<usize> = (start..(start + chunk).min(ds.len())).collect();
        let plain = encode_frozen(store, model, ds.rows(&idx))?;
        for (k, &i) in idx.iter().enumerate() {
            rows.push(FeatureRow {
                source_id: i,
                label: ds.labels()[i],
                augmented: false,
                magnitude: 0.0,
                features: plain.row(k).to_vec(),
            });
        }
    }
    for start in (0..ds.len()).step_by(chunk) {
        let idx: Vec<usize> = (start..(start + chunk).min(ds.len())).collect();
        let views: Vec<_> = idx
            .iter()
            .map(|&i| augment_view(&ds.image(i), policy, &mut rng_for(seed, &[EXPORT_TAG, i as u64]), i))
            .collect();
        let mut data = Vec::with_capacity(idx.len() * per);
        for v in &views {
            data.extend_from_slice(v.image.data());
        }
        let feats = encode_frozen(store, model, Tensor::matrix(idx.len(), per, data)?)?;
        for (k, v) in views.iter().enumerate() {
            rows.push(FeatureRow {
                source_id: v.source_id,
                label: ds.labels()[v.source_id],
                augmented: true,
                magnitude: v.record.magnitude(),
                features: feats.row(k).to_vec(),
            });
        }
    }
    Ok(FeatureDump { rows })
}

/// Header of the CSV dump for `dim` features.
pub fn csv_header(dim: usize) -> Vec<String> {
    let mut h: Vec<String> = ["source_id", "label", "augmented", "magnitude"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((0..dim).map(|i| format!("f{i}")));
    h
}

impl FeatureDump {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let dim = self.rows.first().map_or(0, |r| r.features.len());
        w.write_record(csv_header(dim))?;
        for r in &self.rows {
            let mut rec = vec![
                r.source_id.to_string(),
                r.label.to_string(),
                (r.augmented as u8).to_string(),
                format!("{:e}", r.magnitude),
            ];
            rec.extend(r.features.iter().map(|v| format!("{v:e}")));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let headers = r.headers()?.clone();
        let dim = headers.len().saturating_sub(4);
        if headers.iter().take(4).ne(csv_header(0).iter().map(String::as_str)) {
            return Err(Error::Format {
                what: path.display().to_string(),
                detail: "unexpected CSV header".into(),
            });
        }
        let bad = |detail: String| Error::Format {
            what: path.display().to_string(),
            detail,
        };
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad(format!("column {i} is not a number")))
            };
            rows.push(FeatureRow {
                source_id: num(0)? as usize,
                label: num(1)? as u32,
                augmented: num(2)? != 0.0,
                magnitude: num(3)?,
                features: (0..dim).map(|k| num(4 + k)).collect::<Result<_>>()?,
            });
        }
        Ok(Self { rows })
    }
}

/// Final moving averages of training-set accuracies.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub records: usize,
    pub window: usize,
    pub last_step: Option<u64>,
    pub id_accuracy: Option<f64>,
    pub manip_accuracy: Option<f64>,
    pub total_loss: Option<f64>,
    pub probe_train_accuracy: Option<f64>,
    pub probe_test_accuracy: Option<f64>,
}

/// Mean of the last `window` values of `values`.
pub fn trailing_mean(values: &[f64], window: usize) -> Option<f64> {
    if values.is_empty() || window == 0 {
        return None;
    }
    let tail = &values[values.len().saturating_sub(window)..];
    Some(tail.iter().sum::<f64>() / tail.len() as f64)
}

/// Summarizes a metrics stream with trailing averages over `window` records.
pub fn accuracy_report(records: &[MetricsRecord], window: usize) -> AccuracySummary {
    let col = |f: fn(&MetricsRecord) -> f64| -> Vec<f64> { records.iter().map(f).collect() };
    AccuracySummary {
        records: records.len(),
        window,
        last_step: records.last().map(|r| r.step),
        id_accuracy: trailing_mean(&col(|r| r.loss.id_accuracy), window),
        manip_accuracy: trailing_mean(&col(|r| r.loss.manip_accuracy), window),
        total_loss: trailing_mean(&col(|r| r.loss.total), window),
        probe_train_accuracy: None,
        probe_test_accuracy: None,
    }
}
