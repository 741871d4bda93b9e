//! Action algebra: crop/mirror records become affine matrices on normalized
//! `[-1, 1]` canvases, pairs of views become a 6-component egocentric action,
//! and actions become per-component class labels.

use std::ops::Mul;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::TransformRecord;

/// A 2-D affine transform in homogeneous form; the bottom row is always `(0, 0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMat {
    /// Top two rows: `[m11, m12, m13, m21, m22, m23]`.
    top: [f64; 6],
}

impl AffineMat {
    pub const IDENTITY: AffineMat = AffineMat {
        top: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
    };

    pub fn from_top_rows(top: [f64; 6]) -> Self {
        Self { top }
    }

    pub fn top_rows(&self) -> [f64; 6] {
        self.top
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let t = self.top;
        [[t[0], t[1], t[2]], [t[3], t[4], t[5]], [0.0, 0.0, 1.0]]
    }

    pub fn det(&self) -> f64 {
        self.top[0] * self.top[4] - self.top[1] * self.top[3]
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.det();
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(Error::Singular(det));
        }
        let [a, b, c, d, e, f] = self.top;
        let (ia, ib, id, ie) = (e / det, -b / det, -d / det, a / det);
        Ok(Self {
            top: [ia, ib, -(ia * c + ib * f), id, ie, -(id * c + ie * f)],
        })
    }

    pub fn apply(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let t = self.top;
        (t[0] * x + t[1] * y + t[2], t[3] * x + t[4] * y + t[5])
    }
}

impl Mul for AffineMat {
    type Output = AffineMat;

    fn mul(self, rhs: AffineMat) -> AffineMat {
        let [a, b, c, d, e, f] = self.top;
        let [p, q, r, s, t, u] = rhs.top;
        AffineMat {
            top: [
                a * p + b * s,
                a * q + b * t,
                a * r + b * u + c,
                d * p + e * s,
                d * q + e * t,
                d * r + e * u + f,
            ],
        }
    }
}

/// Corners of the normalized canvas.
pub const CANVAS_CORNERS: [(f64, f64); 4] = [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)];

/// `M_x`: maps points on the view's canvas to their source on the original
/// canvas, both normalized to `[-1, 1]`.
pub fn crop_matrix(record: &TransformRecord, width: usize, height: usize) -> Result<AffineMat> {
    let c = record.crop;
    if c.width == 0 || c.height == 0 {
        return Err(Error::InvalidArgument(format!("zero-area crop {c:?}")));
    }
    if c.left + c.width > width || c.top + c.height > height {
        return Err(Error::InvalidArgument(format!("crop {c:?} exceeds {width}x{height} canvas")));
    }
    let (w, h) = (width as f64, height as f64);
    let sw = c.width as f64 / w;
    let sh = c.height as f64 / h;
    Ok(AffineMat {
        top: [
            record.mirror_sign() * sw,
            0.0,
            sw - 1.0 + 2.0 * c.left as f64 / w,
            0.0,
            sh,
            1.0 - sh + 2.0 * c.top as f64 / h,
        ],
    })
}

/// Top rows of `M_{x'} · M_x⁻¹`.
pub fn ego_action(mx: &AffineMat, mx_prime: &AffineMat) -> Result<[f64; 6]> {
    Ok((*mx_prime * mx.inverse()?).top_rows())
}

/// Clamped uniform quantizer for the six action components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinningSpec {
    pub bins: usize,
    pub min: [f64; 6],
    pub max: [f64; 6],
}

impl Default for BinningSpec {
    fn default() -> Self {
        Self {
            bins: 6,
            min: [-2.0, -2.0, -0.5, -2.0, -2.0, -0.5],
            max: [2.0, 2.0, 0.5, 2.0, 2.0, 0.5],
        }
    }
}

impl BinningSpec {
    /// Range used for allocentric parameter differences, all within `[-1, 1]`.
    pub fn allocentric(bins: usize) -> Self {
        Self {
            bins,
            min: [-1.0; 6],
            max: [1.0; 6],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::Config(format!("bin count {} must be at least 2", self.bins)));
        }
        if let Some(k) = (0..6).find(|&k| !(self.min[k] < self.max[k])) {
            return Err(Error::Config(format!(
                "binning component {k}: min {} must be below max {}",
                self.min[k], self.max[k]
            )));
        }
        Ok(())
    }

    /// `clamp(⌊K·(a − min)/(max − min)⌋, 0, K − 1)` for one component.
    pub fn bin(&self, k: usize, value: f64) -> usize {
        let t = (value - self.min[k]) / (self.max[k] - self.min[k]);
        let raw = (self.bins as f64 * t).floor();
        if raw.is_nan() || raw < 0.0 {
            0
        } else {
            (raw as usize).min(self.bins - 1)
        }
    }

    /// True when the value lies outside `[min, max]` and is absorbed by clamping.
    pub fn is_clamped(&self, k: usize, value: f64) -> bool {
        value < self.min[k] || value > self.max[k]
    }
}

pub fn bin_action(action: &[f64; 6], spec: &BinningSpec) -> [usize; 6] {
    std::array::from_fn(|k| spec.bin(k, action[k]))
}

/// Fraction of components that fell outside the binning range.
pub fn clamp_rate<'a>(actions: impl IntoIterator<Item = &'a [f64; 6]>, spec: &BinningSpec) -> f64 {
    let (mut clamped, mut total) = (0usize, 0usize);
    for a in actions {
        for (k, v) in a.iter().enumerate() {
            clamped += spec.is_clamped(k, *v) as usize;
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        clamped as f64 / total as f64
    }
}

/// Continuous action, its labels, and whether it may supervise the manipulation loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoAction {
    pub a_manip: [f64; 6],
    pub bins: [usize; 6],
    /// False when either view was solarized.
    pub valid: bool,
}

impl EgoAction {
    pub fn from_records(x: &TransformRecord, x_prime: &TransformRecord, spec: &BinningSpec) -> Result<Self> {
        let mx = crop_matrix(x, x.source_width, x.source_height)?;
        let mxp = crop_matrix(x_prime, x_prime.source_width, x_prime.source_height)?;
        let a_manip = ego_action(&mx, &mxp)?;
        Ok(Self {
            a_manip,
            bins: bin_action(&a_manip, spec),
            valid: !(x.solarized || x_prime.solarized),
        })
    }
}

/// Where the manipulation target is expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionFrame {
    #[default]
    Egocentric,
    Allocentric,
}

fn allocentric_params(r: &TransformRecord, width: usize, height: usize) -> [f64; 6] {
    let (w, h) = (width as f64, height as f64);
    [
        r.crop.width as f64 / w,
        r.crop.height as f64 / h,
        r.crop.left as f64 / w,
        r.crop.top as f64 / h,
        r.mirrored as u8 as f64,
        0.0,
    ]
}

/// Differences of normalized crop parameters `(scale_w, scale_h, left, top,
/// mirror, 0)` between two views of one source, taken as `x − x'`.
pub fn allocentric_action(x: &TransformRecord, x_prime: &TransformRecord, width: usize, height: usize) -> [f64; 6] {
    let p = allocentric_params(x, width, height);
    let q = allocentric_params(x_prime, width, height);
    std::array::from_fn(|k| p[k] - q[k])
}
