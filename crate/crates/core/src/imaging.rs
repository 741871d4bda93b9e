//! Augmentation pipeline. Every sampled parameter is kept in a
//! [`TransformRecord`] so the action relating two views can be recovered
//! exactly.
//!
//! Stage order: crop → mirror → colour jitter → grayscale → blur → solarize.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Luma weights used by contrast, saturation and grayscale.
pub const LUMA: [f64; 3] = [0.2989, 0.587, 0.114];

/// An RGB image with values in `[0, 1]`, stored row-major as `H × W × 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::InvalidArgument(format!(
                "image {height}x{width}x3 needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(y, x).map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn pixels_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.data.chunks_mut(3)
    }

    fn clamp(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// Luma-weighted mean over the whole image.
    pub fn weighted_mean(&self) -> f64 {
        let n = (self.height * self.width).max(1) as f64;
        self.data.chunks(3).map(luma).sum::<f64>() / n
    }
}

pub fn luma(p: &[f64]) -> f64 {
    LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]
}

/// Crop rectangle on the source canvas, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropParams {
    pub left: usize,
    pub top: usize,
    pub width: usize,
    pub height: usize,
}

impl CropParams {
    pub fn full(width: usize, height: usize) -> Self {
        Self {
            left: 0,
            top: 0,
            width,
            height,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColorOp {
    Brightness,
    Contrast,
    Saturation,
    Hue,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorParams {
    pub applied: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub order: [ColorOp; 4],
}

impl Default for ColorParams {
    fn default() -> Self {
        Self {
            applied: false,
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue: 0.0,
            order: [ColorOp::Brightness, ColorOp::Contrast, ColorOp::Saturation, ColorOp::Hue],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BlurParams {
    pub applied: bool,
    pub sigma: f64,
    pub kernel: usize,
}

/// Everything sampled while producing one view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub source_width: usize,
    pub source_height: usize,
    pub crop: CropParams,
    pub mirrored: bool,
    pub color: ColorParams,
    pub grayscale: bool,
    pub blur: BlurParams,
    pub solarized: bool,
}

impl TransformRecord {
    pub fn identity(width: usize, height: usize) -> Self {
        Self {
            source_width: width,
            source_height: height,
            crop: CropParams::full(width, height),
            mirrored: false,
            color: ColorParams::default(),
            grayscale: false,
            blur: BlurParams::default(),
            solarized: false,
        }
    }

    /// `f_x`: −1 when mirrored, +1 otherwise.
    pub fn mirror_sign(&self) -> f64 {
        if self.mirrored {
            -1.0
        } else {
            1.0
        }
    }

    /// Fraction of the source area covered by the crop.
    pub fn relative_area(&self) -> f64 {
        (self.crop.width * self.crop.height) as f64 / (self.source_width * self.source_height) as f64
    }

    /// `1 − relative crop area`.
    pub fn magnitude(&self) -> f64 {
        1.0 - self.relative_area()
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity(self.source_width, self.source_height)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedView {
    pub image: Image,
    pub record: TransformRecord,
    pub source_id: usize,
}

/// Which stages run and with what strength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub resolution: usize,
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub crop_ratio_min: f64,
    pub crop_ratio_max: f64,
    pub p_mirror: f64,
    pub p_jitter: f64,
    /// Brightness/contrast/saturation strength `u`.
    pub jitter_strength: f64,
    /// Hue strength `v`.
    pub hue_strength: f64,
    pub p_grayscale: f64,
    pub blur: bool,
    pub p_blur: f64,
    pub solarize: bool,
    pub p_solarize: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self::cifar(32)
    }
}

impl AugmentPolicy {
    /// The small-image pipeline: no blur or solarization, `(u, v) = (0.4, 0.1)`.
    pub fn cifar(resolution: usize) -> Self {
        Self {
            resolution,
            crop_scale_min: 0.08,
            crop_scale_max: 1.0,
            crop_ratio_min: 3.0 / 4.0,
            crop_ratio_max: 4.0 / 3.0,
            p_mirror: 0.5,
            p_jitter: 0.8,
            jitter_strength: 0.4,
            hue_strength: 0.1,
            p_grayscale: 0.2,
            blur: false,
            p_blur: 0.5,
            solarize: false,
            p_solarize: 0.2,
        }
    }

    /// The large-image pipeline with blur and solarization, `(u, v) = (0.8, 0.2)`.
    pub fn full(resolution: usize) -> Self {
        Self {
            jitter_strength: 0.8,
            hue_strength: 0.2,
            blur: true,
            solarize: true,
            ..Self::cifar(resolution)
        }
    }

    /// Full-area crop, nothing stochastic.
    pub fn identity(resolution: usize) -> Self {
        Self {
            resolution,
            crop_scale_min: 1.0,
            crop_scale_max: 1.0,
            crop_ratio_min: 1.0,
            crop_ratio_max: 1.0,
            p_mirror: 0.0,
            p_jitter: 0.0,
            jitter_strength: 0.0,
            hue_strength: 0.0,
            p_grayscale: 0.0,
            blur: false,
            p_blur: 0.0,
            solarize: false,
            p_solarize: 0.0,
        }
    }

    /// Only crop and mirror.
    pub fn geometric(resolution: usize) -> Self {
        Self {
            p_jitter: 0.0,
            p_grayscale: 0.0,
            blur: false,
            solarize: false,
            ..Self::cifar(resolution)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {p} is not a probability")))
            }
        };
        prob("p_mirror", self.p_mirror)?;
        prob("p_jitter", self.p_jitter)?;
        prob("p_grayscale", self.p_grayscale)?;
        prob("p_blur", self.p_blur)?;
        prob("p_solarize", self.p_solarize)?;
        if self.resolution < 2 {
            return Err(Error::Config("resolution must be at least 2".into()));
        }
        if !(0.0 < self.crop_scale_min && self.crop_scale_min <= self.crop_scale_max && self.crop_scale_max <= 1.0) {
            return Err(Error::Config("crop scale must satisfy 0 < min <= max <= 1".into()));
        }
        if !(0.0 < self.crop_ratio_min && self.crop_ratio_min <= self.crop_ratio_max) {
            return Err(Error::Config("crop ratio must satisfy 0 < min <= max".into()));
        }
        if self.jitter_strength < 0.0 || self.hue_strength < 0.0 {
            return Err(Error::Config("jitter strengths must be non-negative".into()));
        }
        Ok(())
    }
}

const CROP_TRIES: usize = 10;

/// Samples a crop rectangle: area uniform in the scale range, aspect ratio
/// log-uniform. After 10 rejected draws the last area is centred and clipped.
pub fn sample_crop<R: Rng>(width: usize, height: usize, policy: &AugmentPolicy, rng: &mut R) -> CropParams {
    if policy.crop_scale_min >= 1.0 {
        // only the whole canvas has full area
        return CropParams::full(width, height);
    }
    let total = (width * height) as f64;
    let (lr_min, lr_max) = (policy.crop_ratio_min.ln(), policy.crop_ratio_max.ln());
    let mut area = total;
    let mut ratio = 1.0;
    for _ in 0..CROP_TRIES {
        area = total * rng.gen_range(policy.crop_scale_min..=policy.crop_scale_max);
        ratio = rng.gen_range(lr_min..=lr_max).exp();
        let w = (area * ratio).sqrt().round() as usize;
        let h = (area / ratio).sqrt().round() as usize;
        if (1..=width).contains(&w) && (1..=height).contains(&h) {
            let left = rng.gen_range(0..=width - w);
            let top = rng.gen_range(0..=height - h);
            return CropParams {
                left,
                top,
                width: w,
                height: h,
            };
        }
    }
    let w = ((area * ratio).sqrt().round() as usize).clamp(1, width);
    let h = ((area / w as f64).round() as usize).clamp(1, height);
    CropParams {
        left: (width - w) / 2,
        top: (height - h) / 2,
        width: w,
        height: h,
    }
}

/// Bilinear resampling of a crop to `target × target`, half-pixel centres,
/// edge samples clamped to the source canvas.
pub fn resize_crop(img: &Image, crop: CropParams, target: usize) -> Image {
    let (w_src, h_src) = (img.width as f64, img.height as f64);
    let sx = crop.width as f64 / target as f64;
    let sy = crop.height as f64 / target as f64;
    let mut data = Vec::with_capacity(target * target * 3);
    for oy in 0..target {
        let fy = (crop.top as f64 + (oy as f64 + 0.5) * sy - 0.5).clamp(0.0, h_src - 1.0);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let ty = fy - y0 as f64;
        for ox in 0..target {
            let fx = (crop.left as f64 + (ox as f64 + 0.5) * sx - 0.5).clamp(0.0, w_src - 1.0);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let tx = fx - x0 as f64;
            let (p00, p01, p10, p11) = (img.pixel(y0, x0), img.pixel(y0, x1), img.pixel(y1, x0), img.pixel(y1, x1));
            for c in 0..3 {
                let top = p00[c] + (p01[c] - p00[c]) * tx;
                let bottom = p10[c] + (p11[c] - p10[c]) * tx;
                data.push(top + (bottom - top) * ty);
            }
        }
    }
    Image {
        height: target,
        width: target,
        data,
    }
}

pub fn mirror(img: &Image) -> Image {
    Image::from_fn(img.height, img.width, |y, x| img.pixel(y, img.width - 1 - x))
}

/// Crops with a freshly sampled rectangle and resizes to `target`.
pub fn random_resized_crop<R: Rng>(img: &Image, rng: &mut R, policy: &AugmentPolicy) -> (Image, CropParams) {
    let crop = sample_crop(img.width, img.height, policy, rng);
    (resize_crop(img, crop, policy.resolution), crop)
}

pub fn adjust_brightness(img: &mut Image, factor: f64) {
    if factor == 1.0 {
        return;
    }
    img.data.iter_mut().for_each(|v| *v *= factor);
    img.clamp();
}

/// Scales distances from the luma-weighted image mean.
pub fn adjust_contrast(img: &mut Image, factor: f64) {
    if factor == 1.0 {
        return;
    }
    let mu = img.weighted_mean();
    img.data.iter_mut().for_each(|v| *v = factor * (*v - mu) + mu);
    img.clamp();
}

/// Scales distances from each pixel's own luma.
pub fn adjust_saturation(img: &mut Image, factor: f64) {
    if factor == 1.0 {
        return;
    }
    for p in img.pixels_mut() {
        let g = luma(p);
        p.iter_mut().for_each(|v| *v = factor * (*v - g) + g);
    }
    img.clamp();
}

pub fn adjust_hue(img: &mut Image, shift: f64) {
    if shift == 0.0 {
        return;
    }
    for p in img.pixels_mut() {
        let [h, s, v] = rgb_to_hsv([p[0], p[1], p[2]]);
        let rgb = hsv_to_rgb([(h + shift).rem_euclid(1.0), s, v]);
        p.copy_from_slice(&rgb);
    }
    img.clamp();
}

/// Hue in `[0, 1)`; saturation of gray pixels is 0.
pub fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    [h.rem_euclid(1.0), s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as usize) % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// With probability `p_jitter`, adjusts brightness, contrast, saturation and
/// hue in a random order. Factors and order are drawn even when the stage is skipped,
/// which then records the identity parameters.
pub fn color_jitter<R: Rng>(img: &Image, rng: &mut R, u: f64, v: f64, p_apply: f64) -> (Image, ColorParams) {
    let mut params = ColorParams::default();
    let applied = rng.gen_bool(p_apply);
    let lo = (1.0 - u).max(0.0);
    params.brightness = rng.gen_range(lo..=1.0 + u);
    params.contrast = rng.gen_range(lo..=1.0 + u);
    params.saturation = rng.gen_range(lo..=1.0 + u);
    params.hue = rng.gen_range(-v..=v);
    params.order.shuffle(rng);
    let mut out = img.clone();
    if applied {
        params.applied = true;
        apply_color(&mut out, &params);
    } else {
        params = ColorParams::default();
    }
    (out, params)
}

pub fn apply_color(img: &mut Image, params: &ColorParams) {
    for op in params.order {
        match op {
            ColorOp::Brightness => adjust_brightness(img, params.brightness),
            ColorOp::Contrast => adjust_contrast(img, params.contrast),
            ColorOp::Saturation => adjust_saturation(img, params.saturation),
            ColorOp::Hue => adjust_hue(img, params.hue),
        }
    }
}

pub fn grayscale(img: &Image) -> Image {
    let mut out = img.clone();
    for p in out.pixels_mut() {
        let g = luma(p);
        p.iter_mut().for_each(|v| *v = g);
    }
    out
}

/// Kernel edge: 10% of the image edge, rounded to an odd length.
pub fn blur_kernel_size(resolution: usize) -> usize {
    let k = (resolution as f64 * 0.1).floor() as usize;
    if k.is_multiple_of(2) {
        k + 1
    } else {
        k
    }
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub fn gaussian_blur(img: &Image, sigma: f64, kernel: usize) -> Image {
    let r = (kernel / 2) as isize;
    let mut weights: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let (h, w) = (img.height as isize, img.width as isize);
    let pass = |src: &Image, horizontal: bool| {
        Image::from_fn(img.height, img.width, |y, x| {
            let mut acc = [0.0; 3];
            for (k, wt) in weights.iter().enumerate() {
                let o = k as isize - r;
                let (yy, xx) = if horizontal {
                    (y as isize, (x as isize + o).clamp(0, w - 1))
                } else {
                    ((y as isize + o).clamp(0, h - 1), x as isize)
                };
                let p = src.pixel(yy as usize, xx as usize);
                for c in 0..3 {
                    acc[c] += wt * p[c];
                }
            }
            acc
        })
    };
    let tmp = pass(img, true);
    pass(&tmp, false)
}

/// Maps every value above `threshold` to `1 − x`.
pub fn solarize(img: &Image, threshold: f64) -> Image {
    let mut out = img.clone();
    out.data.iter_mut().for_each(|v| {
        if *v > threshold {
            *v = 1.0 - *v
        }
    });
    out
}

/// Runs the full pipeline on one source image.
///
/// Random draws happen in a fixed sequence independent of which stages fire,
/// so two policies differing only in probabilities consume the stream alike.
pub fn augment_view<R: Rng>(img: &Image, policy: &AugmentPolicy, rng: &mut R, source_id: usize) -> AugmentedView {
    let mut record = TransformRecord::identity(img.width, img.height);

    let (mut out, crop) = random_resized_crop(img, rng, policy);
    record.crop = crop;

    record.mirrored = rng.gen_bool(policy.p_mirror);
    if record.mirrored {
        out = mirror(&out);
    }

    let (jittered, color) = color_jitter(&out, rng, policy.jitter_strength, policy.hue_strength, policy.p_jitter);
    out = jittered;
    record.color = color;

    record.grayscale = rng.gen_bool(policy.p_grayscale);
    if record.grayscale {
        out = grayscale(&out);
    }

    let blur_fires = rng.gen_bool(policy.p_blur);
    let sigma = rng.gen_range(0.1..=2.0) * policy.resolution as f64 / 224.0;
    if policy.blur && blur_fires {
        let kernel = blur_kernel_size(policy.resolution);
        out = gaussian_blur(&out, sigma, kernel);
        record.blur = BlurParams {
            applied: true,
            sigma,
            kernel,
        };
    }

    let solarize_fires = rng.gen_bool(policy.p_solarize);
    if policy.solarize && solarize_fires {
        out = solarize(&out, 0.5);
        record.solarized = true;
    }

    AugmentedView {
        image: out,
        record,
        source_id,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_, _| [rng.gen(), rng.gen(), rng.gen()])
    }

    #[test]
    fn full_crop_equals_plain_resize() {
        let img = random_image(1, 12, 12);
        let full = CropParams::full(12, 12);
        let direct = resize_crop(&img, full, 12);
        assert_eq!(direct, img);
        let down = resize_crop(&img, full, 6);
        // each output pixel sits at the centre of a 2x2 block
        let p = img.pixel(0, 0);
        let q = img.pixel(1, 1);
        let r = img.pixel(0, 1);
        let s = img.pixel(1, 0);
        let want = (p[0] + q[0] + r[0] + s[0]) / 4.0;
        assert!((down.pixel(0, 0)[0] - want).abs() < 1e-12);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Image::filled(20, 16, [0.3, 0.6, 0.9]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (out, _) = random_resized_crop(&img, &mut rng, &AugmentPolicy::cifar(8));
            for p in out.data().chunks(3) {
                assert!((p[0] - 0.3).abs() < 1e-12 && (p[1] - 0.6).abs() < 1e-12 && (p[2] - 0.9).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn crop_is_deterministic_and_in_range() {
        let img = random_image(2, 32, 32);
        let policy = AugmentPolicy::cifar(32);
        let a = random_resized_crop(&img, &mut ChaCha8Rng::seed_from_u64(9), &policy);
        let b = random_resized_crop(&img, &mut ChaCha8Rng::seed_from_u64(9), &policy);
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..2000 {
            let c = sample_crop(32, 32, &policy, &mut rng);
            assert!(c.left + c.width <= 32 && c.top + c.height <= 32);
            let frac = (c.width * c.height) as f64 / 1024.0;
            // rounding each side by at most half a pixel
            assert!((0.08 * 0.75..=1.0).contains(&frac), "{c:?}");
        }
    }

    #[test]
    fn crop_fallback_is_centred() {
        // impossible aspect ratio forces the fallback path
        let policy = AugmentPolicy {
            crop_ratio_min: 50.0,
            crop_ratio_max: 60.0,
            crop_scale_min: 0.5,
            crop_scale_max: 0.5,
            ..AugmentPolicy::cifar(8)
        };
        let c = sample_crop(10, 10, &policy, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(c.width <= 10 && c.height <= 10);
        assert_eq!(c.left, (10 - c.width) / 2);
        assert_eq!(c.top, (10 - c.height) / 2);
    }

    #[test]
    fn zero_strength_jitter_is_identity() {
        let img = random_image(4, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let (out, params) = color_jitter(&img, &mut rng, 0.0, 0.0, 1.0);
            assert!(params.applied);
            assert_eq!(out, img);
        }
    }

    #[test]
    fn contrast_mean_of_pure_red() {
        let img = Image::filled(1, 1, [1.0, 0.0, 0.0]);
        assert_eq!(img.weighted_mean(), 0.2989);
    }

    #[test]
    fn half_hue_shift_twice_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let rgb = [rng.gen::<f64>(), rng.gen(), rng.gen()];
            let [h, s, v] = rgb_to_hsv(rgb);
            let once = hsv_to_rgb([(h + 0.5).rem_euclid(1.0), s, v]);
            let [h1, s1, v1] = rgb_to_hsv(once);
            let twice = hsv_to_rgb([(h1 + 0.5).rem_euclid(1.0), s1, v1]);
            for c in 0..3 {
                assert!((twice[c] - rgb[c]).abs() < 1e-6, "{rgb:?} -> {twice:?}");
            }
        }
    }

    #[test]
    fn gray_pixels_have_zero_saturation() {
        assert_eq!(rgb_to_hsv([0.4, 0.4, 0.4])[1], 0.0);
        assert_eq!(rgb_to_hsv([0.0, 0.0, 0.0]), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn solarize_examples() {
        let img = Image::new(1, 2, vec![0.6, 0.4, 0.5, 1.0, 0.0, 0.51]).unwrap();
        let out = solarize(&img, 0.5);
        let want = [0.4, 0.4, 0.5, 0.0, 0.0, 0.49];
        for (a, b) in out.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let zeros = Image::filled(3, 3, [0.0; 3]);
        assert_eq!(solarize(&zeros, 0.5), zeros);
    }

    #[test]
    fn blur_kernel_sizes_are_odd() {
        assert_eq!(blur_kernel_size(32), 3);
        assert_eq!(blur_kernel_size(96), 9);
        assert_eq!(blur_kernel_size(224), 23);
    }

    #[test]
    fn identity_policy_gives_identity_record() {
        let img = random_image(7, 16, 16);
        let view = augment_view(&img, &AugmentPolicy::identity(16), &mut ChaCha8Rng::seed_from_u64(1), 0);
        assert!(view.record.is_identity());
        assert!(view.image.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn solarize_sets_record_flag() {
        let img = random_image(8, 16, 16);
        let policy = AugmentPolicy {
            p_solarize: 1.0,
            ..AugmentPolicy::full(16)
        };
        let view = augment_view(&img, &policy, &mut ChaCha8Rng::seed_from_u64(2), 0);
        assert!(view.record.solarized);
    }

    #[test]
    fn augment_view_is_deterministic_and_bounded() {
        let policy = AugmentPolicy::full(16);
        for i in 0..200u64 {
            let img = random_image(100 + i, 20, 24);
            let a = augment_view(&img, &policy, &mut rng_for(i, &[]), 0);
            let b = augment_view(&img, &policy, &mut rng_for(i, &[]), 0);
            assert_eq!(a, b);
            assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!((a.image.height(), a.image.width()), (16, 16));
        }
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(Image::new(1, 1, vec![0.0, 1.5, 0.0]).is_err());
    }
}
