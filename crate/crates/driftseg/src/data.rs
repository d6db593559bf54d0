//! Dataset handling: preprocessing, augmentation, the synthetic two-domain
//! generator, and the on-disk format.
//!
//! A dataset is a flat list of [`LabeledImage`]s grouped by `case_id`
//! (patient). Masks are wrapped in [`Mask`], which counts every read so the
//! test suite can prove that training never touches a target-domain label.
//!
//! On disk: `<root>/<domain>/<case_id>/slice_###.png` (16-bit grayscale),
//! `slice_###_mask.png` (8-bit class ids, optional for the target domain),
//! plus a `manifest.json` per case recording the slice order.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid intensity window: lo {0} >= hi {1}")]
    InvalidWindow(i32, i32),
    #[error("crop {requested:?} larger than image {actual:?}")]
    CropTooLarge {
        requested: (usize, usize),
        actual: (usize, usize),
    },
    #[error("invalid augmentation policy: {0}")]
    BadPolicy(String),
    #[error("invalid generator config: {0}")]
    BadConfig(String),
    #[error("dataset format error at {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("split is not patient-disjoint: case {0} appears in train and val")]
    SplitOverlap(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Source,
    Target,
}

impl DomainTag {
    pub fn dir_name(self) -> &'static str {
        match self {
            DomainTag::Source => "source",
            DomainTag::Target => "target",
        }
    }
}

/// A class-id mask that counts every read of its pixel data.
#[derive(Debug, Clone)]
pub struct Mask {
    data: Array2<u8>,
    reads: Arc<AtomicUsize>,
}

impl Mask {
    pub fn new(data: Array2<u8>) -> Mask {
        Mask {
            data,
            reads: Arc::new(AtomicUsize::new(0)),
        }
    }

    /// Accesses the pixel data, bumping the read counter.
    pub fn read(&self) -> &Array2<u8> {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.data
    }

    pub fn dim(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn read_count(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }

    /// Rebinds this mask onto a shared counter.
    pub fn share_counter(&mut self, counter: Arc<AtomicUsize>) {
        self.reads = counter;
    }
}

impl PartialEq for Mask {
    fn eq(&self, other: &Self) -> bool {
        self.data == other.data
    }
}

/// One 2D grayscale slice with an optional per-pixel class mask.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    /// Intensities in `[0, 1]`.
    pub pixels: Array2<f64>,
    /// Absent for unlabeled target-domain images.
    pub mask: Option<Mask>,
    pub domain: DomainTag,
    /// Patient-level grouping key.
    pub case_id: String,
}

impl LabeledImage {
    pub fn validate(&self, num_classes: usize) -> Result<(), DataError> {
        if self.pixels.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(DataError::BadConfig(format!(
                "case {}: pixels outside [0, 1]",
                self.case_id
            )));
        }
        if let Some(mask) = &self.mask {
            if mask.dim() != self.pixels.dim() {
                return Err(DataError::BadConfig(format!(
                    "case {}: mask shape {:?} vs pixels {:?}",
                    self.case_id,
                    mask.dim(),
                    self.pixels.dim()
                )));
            }
            if mask.read().iter().any(|&c| c as usize >= num_classes) {
                return Err(DataError::BadConfig(format!(
                    "case {}: class id >= {num_classes}",
                    self.case_id
                )));
            }
        }
        Ok(())
    }
}

/// Total mask reads across a set of images.
pub fn mask_read_count(images: &[LabeledImage]) -> usize {
    images
        .iter()
        .filter_map(|img| img.mask.as_ref())
        .map(|m| m.read_count())
        .sum()
}

/// Strips the masks off (used on target data entering the trainer).
pub fn without_masks(images: &[LabeledImage]) -> Vec<LabeledImage> {
    images
        .iter()
        .map(|img| LabeledImage {
            pixels: img.pixels.clone(),
            mask: None,
            domain: img.domain,
            case_id: img.case_id.clone(),
        })
        .collect()
}

/// Patient-level train/val partition.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

impl DatasetSplit {
    pub fn new(train: Vec<String>, val: Vec<String>) -> Result<DatasetSplit, DataError> {
        for case in &train {
            if val.contains(case) {
                return Err(DataError::SplitOverlap(case.clone()));
            }
        }
        Ok(DatasetSplit { train, val })
    }

    /// Deterministic patient-wise split with `val_count` validation cases.
    pub fn patient_split(
        case_ids: &[String],
        val_count: usize,
        seed: u64,
    ) -> Result<DatasetSplit, DataError> {
        if val_count >= case_ids.len() {
            return Err(DataError::BadConfig(format!(
                "val_count {val_count} >= {} cases",
                case_ids.len()
            )));
        }
        let mut ids: Vec<String> = case_ids.to_vec();
        ids.sort();
        ids.dedup();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Fisher-Yates so the draw is stable across platforms.
        for i in (1..ids.len()).rev() {
            let j = rng.random_range(0..=i);
            ids.swap(i, j);
        }
        let val = ids.split_off(ids.len() - val_count);
        DatasetSplit::new(ids, val)
    }
}

// ---------------------------------------------------------------------------
// preprocessing
// ---------------------------------------------------------------------------

/// Clamps raw scanner intensities to `[lo, hi]` and rescales to `[0, 1]`.
pub fn hu_window(raw: &Array2<i32>, lo: i32, hi: i32) -> Result<Array2<f64>, DataError> {
    if lo >= hi {
        return Err(DataError::InvalidWindow(lo, hi));
    }
    let span = (hi - lo) as f64;
    Ok(raw.mapv(|v| (v.clamp(lo, hi) - lo) as f64 / span))
}

/// Centered crop with offsets `floor((H - h) / 2)`, `floor((W - w) / 2)`.
pub fn center_crop<T: Clone>(image: &Array2<T>, size: (usize, usize)) -> Result<Array2<T>, DataError> {
    let (h_in, w_in) = image.dim();
    let (h, w) = size;
    if h > h_in || w > w_in {
        return Err(DataError::CropTooLarge {
            requested: size,
            actual: (h_in, w_in),
        });
    }
    let r0 = (h_in - h) / 2;
    let c0 = (w_in - w) / 2;
    Ok(image.slice(ndarray::s![r0..r0 + h, c0..c0 + w]).to_owned())
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strength {
    Weak,
    Strong,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AugmentationPolicy {
    /// `[lo, hi]` range the blur sigma is drawn from.
    pub blur_sigma_range: (f64, f64),
    pub rotation_degrees_max: f64,
    pub dropout_fraction: f64,
    pub strength: Strength,
}

impl AugmentationPolicy {
    pub fn identity() -> AugmentationPolicy {
        AugmentationPolicy {
            blur_sigma_range: (0.0, 0.0),
            rotation_degrees_max: 0.0,
            dropout_fraction: 0.0,
            strength: Strength::Weak,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.blur_sigma_range.0 > self.blur_sigma_range.1 || self.blur_sigma_range.0 < 0.0 {
            return Err(DataError::BadPolicy(format!(
                "blur sigma range {:?}",
                self.blur_sigma_range
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_fraction) {
            return Err(DataError::BadPolicy(format!(
                "dropout fraction {}",
                self.dropout_fraction
            )));
        }
        if self.rotation_degrees_max < 0.0 {
            return Err(DataError::BadPolicy("negative rotation".into()));
        }
        Ok(())
    }
}

/// Bilinear rotation of intensities about the image center; samples falling
/// outside the frame read as 0.
pub fn rotate_pixels(pixels: &Array2<f64>, degrees: f64) -> Array2<f64> {
    if degrees == 0.0 {
        return pixels.clone();
    }
    let (h, w) = pixels.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let dy = i as f64 - cy;
        let dx = j as f64 - cx;
        // Inverse rotation back into the source frame.
        let sy = cy + cos * dy + sin * dx;
        let sx = cx - sin * dy + cos * dx;
        if sy < 0.0 || sx < 0.0 || sy > (h - 1) as f64 || sx > (w - 1) as f64 {
            return 0.0;
        }
        let y0 = sy.floor() as usize;
        let x0 = sx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let ty = sy - y0 as f64;
        let tx = sx - x0 as f64;
        let top = pixels[[y0, x0]] * (1.0 - tx) + pixels[[y0, x1]] * tx;
        let bot = pixels[[y1, x0]] * (1.0 - tx) + pixels[[y1, x1]] * tx;
        top * (1.0 - ty) + bot * ty
    })
}

/// Nearest-neighbor rotation for class masks (ids stay integral).
pub fn rotate_mask(mask: &Array2<u8>, degrees: f64) -> Array2<u8> {
    if degrees == 0.0 {
        return mask.clone();
    }
    let (h, w) = mask.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let dy = i as f64 - cy;
        let dx = j as f64 - cx;
        let sy = cy + cos * dy + sin * dx;
        let sx = cx - sin * dy + cos * dx;
        let ry = sy.round();
        let rx = sx.round();
        if ry < 0.0 || rx < 0.0 || ry > (h - 1) as f64 || rx > (w - 1) as f64 {
            return 0;
        }
        mask[[ry as usize, rx as usize]]
    })
}

/// Separable Gaussian blur with edge replication; `sigma = 0` is the
/// identity.
pub fn gaussian_blur(pixels: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return pixels.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= z);

    let (h, w) = pixels.dim();
    let mut tmp = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let jj = (j as i64 + ki as i64 - radius).clamp(0, w as i64 - 1) as usize;
                acc += kv * pixels[[i, jj]];
            }
            tmp[[i, j]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let ii = (i as i64 + ki as i64 - radius).clamp(0, h as i64 - 1) as usize;
                acc += kv * tmp[[ii, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Zeroes exactly `floor(fraction * H * W)` distinct pixels chosen by a
/// seeded partial shuffle.
pub fn pixel_dropout(pixels: &Array2<f64>, fraction: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let (h, w) = pixels.dim();
    let count = (fraction * (h * w) as f64).floor() as usize;
    let mut out = pixels.clone();
    if count == 0 {
        return out;
    }
    let mut indices: Vec<usize> = (0..h * w).collect();
    for i in 0..count {
        let j = rng.random_range(i..indices.len());
        indices.swap(i, j);
    }
    for &idx in indices.iter().take(count) {
        out[[idx / w, idx % w]] = 0.0;
    }
    out
}

/// Deterministic augmentation: a shared-geometry rotation (pixels bilinear,
/// mask nearest) followed by photometric blur and dropout on the pixels
/// only.
///
/// The rotation angle is the first draw from the seeded generator, so two
/// policies with the same `rotation_degrees_max` and the same seed produce
/// geometrically aligned views regardless of their photometric settings.
pub fn augment(
    image: &LabeledImage,
    policy: &AugmentationPolicy,
    rng_seed: u64,
) -> Result<LabeledImage, DataError> {
    policy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let angle = if policy.rotation_degrees_max > 0.0 {
        rng.random_range(-policy.rotation_degrees_max..=policy.rotation_degrees_max)
    } else {
        0.0
    };
    let sigma = if policy.blur_sigma_range.1 > 0.0 {
        rng.random_range(policy.blur_sigma_range.0..=policy.blur_sigma_range.1)
    } else {
        0.0
    };

    let mut pixels = rotate_pixels(&image.pixels, angle);
    pixels = gaussian_blur(&pixels, sigma);
    if policy.dropout_fraction > 0.0 {
        pixels = pixel_dropout(&pixels, policy.dropout_fraction, &mut rng);
    }
    let mask = image
        .mask
        .as_ref()
        .map(|m| Mask::new(rotate_mask(m.read(), angle)));
    Ok(LabeledImage {
        pixels,
        mask,
        domain: image.domain,
        case_id: image.case_id.clone(),
    })
}

// ---------------------------------------------------------------------------
// synthetic two-domain generator
// ---------------------------------------------------------------------------

/// Photometric style of one domain.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DomainStyle {
    /// Multiplicative intensity gain on the shared anatomy.
    pub gain: f64,
    /// Additive intensity offset.
    pub bias: f64,
    /// Background texture frequency (cycles across the image).
    pub texture_freq: f64,
    /// Half-width of the bounded uniform pixel noise.
    pub noise_level: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticConfig {
    pub image_size: (usize, usize),
    pub cases_per_domain: usize,
    pub slices_per_case: usize,
    pub lesion_count_range: (usize, usize),
    pub lesion_radius_range: (f64, f64),
    pub source_style: DomainStyle,
    pub target_style: DomainStyle,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            image_size: (64, 64),
            cases_per_domain: 20,
            slices_per_case: 8,
            lesion_count_range: (1, 3),
            lesion_radius_range: (2.0, 4.5),
            source_style: DomainStyle {
                gain: 1.0,
                bias: 0.0,
                texture_freq: 2.0,
                noise_level: 0.02,
            },
            target_style: DomainStyle {
                gain: 0.55,
                bias: 0.35,
                texture_freq: 6.0,
                noise_level: 0.05,
            },
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let (h, w) = self.image_size;
        if h < 8 || w < 8 {
            return Err(DataError::BadConfig("image smaller than 8x8".into()));
        }
        if self.lesion_radius_range.0 <= 0.0
            || self.lesion_radius_range.0 > self.lesion_radius_range.1
        {
            return Err(DataError::BadConfig(format!(
                "lesion radius range {:?}",
                self.lesion_radius_range
            )));
        }
        if 2.0 * self.lesion_radius_range.1 + 2.0 >= h.min(w) as f64 {
            return Err(DataError::BadConfig(
                "lesion larger than the image".into(),
            ));
        }
        if self.lesion_count_range.0 > self.lesion_count_range.1 {
            return Err(DataError::BadConfig(format!(
                "lesion count range {:?}",
                self.lesion_count_range
            )));
        }
        if self.cases_per_domain == 0 || self.slices_per_case == 0 {
            return Err(DataError::BadConfig("empty dataset requested".into()));
        }
        for style in [&self.source_style, &self.target_style] {
            if style.gain <= 0.0 || style.noise_level < 0.0 {
                return Err(DataError::BadConfig("invalid domain style".into()));
            }
        }
        Ok(())
    }
}

/// Mean intensity of non-lesion pixels in the `(2r+1)`-wide window around
/// `(row, col)`; `None` when the window holds no background.
pub fn local_background_mean(
    pixels: &Array2<f64>,
    mask: &Array2<u8>,
    row: usize,
    col: usize,
    radius: usize,
) -> Option<f64> {
    let (h, w) = pixels.dim();
    let r0 = row.saturating_sub(radius);
    let r1 = (row + radius + 1).min(h);
    let c0 = col.saturating_sub(radius);
    let c1 = (col + radius + 1).min(w);
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in r0..r1 {
        for j in c0..c1 {
            if mask[[i, j]] == 0 {
                sum += pixels[[i, j]];
                count += 1;
            }
        }
    }
    (count > 0).then(|| sum / count as f64)
}

fn quantize_u16(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 65535.0).round() / 65535.0
}

/// Shared "anatomy": a handful of elliptical vessel tubes over a radially
/// shaded body.
fn anatomy_field(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
    let mut field = Array2::from_elem((h, w), 0.30);
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    for i in 0..h {
        for j in 0..w {
            let d = (((i as f64 - cy) / cy).powi(2) + ((j as f64 - cx) / cx).powi(2)).sqrt();
            field[[i, j]] -= 0.08 * d;
        }
    }
    let vessels = rng.random_range(2..=4);
    for _ in 0..vessels {
        let vy = rng.random_range(0.2 * h as f64..0.8 * h as f64);
        let vx = rng.random_range(0.2 * w as f64..0.8 * w as f64);
        let len = rng.random_range(0.18 * h as f64..0.38 * h as f64);
        let width = rng.random_range(2.0..5.0);
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let delta = rng.random_range(0.16..0.26);
        let (sin, cos) = theta.sin_cos();
        for i in 0..h {
            for j in 0..w {
                let dy = i as f64 - vy;
                let dx = j as f64 - vx;
                let along = cos * dx + sin * dy;
                let across = -sin * dx + cos * dy;
                if (along / len).powi(2) + (across / width).powi(2) <= 1.0 {
                    field[[i, j]] += delta;
                }
            }
        }
    }
    field
}

fn synth_slice(
    rng: &mut ChaCha8Rng,
    config: &SyntheticConfig,
    style: &DomainStyle,
) -> (Array2<f64>, Array2<u8>) {
    let (h, w) = config.image_size;
    let anatomy = anatomy_field(rng, h, w);

    // Style: gain/bias, oriented sinusoidal texture, bounded uniform noise.
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let orient: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (sin_o, cos_o) = orient.sin_cos();
    let scale = h.max(w) as f64;
    let mut pixels = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let base = style.gain * anatomy[[i, j]] + style.bias;
            let u = (i as f64 * cos_o + j as f64 * sin_o) / scale;
            let texture = 0.035 * style.gain
                * (std::f64::consts::TAU * style.texture_freq * u + phase).sin();
            let noise = rng.random_range(-style.noise_level..=style.noise_level);
            pixels[[i, j]] = (base + texture + noise).clamp(0.0, 0.92);
        }
    }

    // Lesions: small bright elliptical blobs, raised strictly above the
    // local background mean.
    let mut mask = Array2::zeros((h, w));
    let count = rng.random_range(config.lesion_count_range.0..=config.lesion_count_range.1);
    let mut blobs = Vec::new();
    for _ in 0..count {
        let r = rng.random_range(config.lesion_radius_range.0..=config.lesion_radius_range.1);
        let ratio = rng.random_range(0.7..1.3);
        let margin = (r.max(r * ratio)).ceil() as usize + 1;
        let cy = rng.random_range(margin..h - margin) as f64;
        let cx = rng.random_range(margin..w - margin) as f64;
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let contrast = 0.16 * style.gain + rng.random_range(0.0..0.05);
        blobs.push((cy, cx, r, r * ratio, theta, contrast));
        let (sin, cos) = theta.sin_cos();
        for i in 0..h {
            for j in 0..w {
                let dy = i as f64 - cy;
                let dx = j as f64 - cx;
                let a = cos * dx + sin * dy;
                let b = -sin * dx + cos * dy;
                if (a / r).powi(2) + (b / (r * ratio)).powi(2) <= 1.0 {
                    mask[[i, j]] = 1u8;
                }
            }
        }
    }
    // The background is final, so one enforcement pass suffices.
    let fallback = {
        let mut sum = 0.0;
        let mut n = 0usize;
        for ((i, j), &m) in mask.indexed_iter() {
            if m == 0 {
                sum += pixels[[i, j]];
                n += 1;
            }
        }
        if n > 0 { sum / n as f64 } else { 0.5 }
    };
    let contrast_at = |i: usize, j: usize| {
        blobs
            .iter()
            .filter(|(cy, cx, r, rb, theta, _)| {
                let (sin, cos) = theta.sin_cos();
                let dy = i as f64 - cy;
                let dx = j as f64 - cx;
                let a = cos * dx + sin * dy;
                let b = -sin * dx + cos * dy;
                (a / r).powi(2) + (b / rb).powi(2) <= 1.0
            })
            .map(|&(_, _, _, _, _, c)| c)
            .fold(0.0f64, f64::max)
    };
    let background = pixels.clone();
    for ((i, j), &m) in mask.clone().indexed_iter() {
        if m == 1 {
            let bg = local_background_mean(&background, &mask, i, j, 4).unwrap_or(fallback);
            let target = bg + contrast_at(i, j).max(0.05);
            pixels[[i, j]] = pixels[[i, j]].max(target).min(0.995);
        }
    }

    pixels.mapv_inplace(quantize_u16);
    (pixels, mask)
}

/// Generates the paired synthetic datasets: identical anatomy model, styles
/// differing per domain, deterministic for a fixed seed. Every image carries
/// a ground-truth mask; target masks exist solely for final evaluation.
pub fn gen_synthetic_domains(
    config: &SyntheticConfig,
    seed: u64,
) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>), DataError> {
    config.validate()?;
    let mut out = Vec::new();
    for (domain, style, stream) in [
        (DomainTag::Source, &config.source_style, 0u64),
        (DomainTag::Target, &config.target_style, 1u64),
    ] {
        let mut images = Vec::new();
        for case in 0..config.cases_per_domain {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ (stream << 32) ^ (case as u64).wrapping_mul(0x9e37_79b9));
            let case_id = format!("case_{case:03}");
            for _ in 0..config.slices_per_case {
                let (pixels, mask) = synth_slice(&mut rng, config, style);
                images.push(LabeledImage {
                    pixels,
                    mask: Some(Mask::new(mask)),
                    domain,
                    case_id: case_id.clone(),
                });
            }
        }
        out.push(images);
    }
    let target = out.pop().unwrap();
    let source = out.pop().unwrap();
    Ok((source, target))
}

// ---------------------------------------------------------------------------
// on-disk format
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CaseManifest {
    case_id: String,
    domain: DomainTag,
    slices: Vec<String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes a dataset under `root`, grouped per case, one 16-bit PNG per slice
/// plus an 8-bit mask PNG where a mask exists.
pub fn save_dataset(cases: &[LabeledImage], root: &Path) -> Result<(), DataError> {
    use indexmap::IndexMap;
    let mut grouped: IndexMap<(DomainTag, String), Vec<&LabeledImage>> = IndexMap::new();
    for img in cases {
        grouped
            .entry((img.domain, img.case_id.clone()))
            .or_default()
            .push(img);
    }
    for ((domain, case_id), slices) in grouped {
        let case_dir = root.join(domain.dir_name()).join(&case_id);
        std::fs::create_dir_all(&case_dir).map_err(io_err(&case_dir))?;
        let mut names = Vec::new();
        for (idx, img) in slices.iter().enumerate() {
            let name = format!("slice_{idx:03}.png");
            let (h, w) = img.pixels.dim();
            let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
            for ((i, j), &v) in img.pixels.indexed_iter() {
                buf.put_pixel(j as u32, i as u32, image::Luma([(v * 65535.0).round() as u16]));
            }
            let img_path = case_dir.join(&name);
            buf.save(&img_path).map_err(|e| DataError::Format {
                path: img_path.clone(),
                message: e.to_string(),
            })?;
            if let Some(mask) = &img.mask {
                let m = mask.read();
                let mut mbuf =
                    image::ImageBuffer::<image::Luma<u8>, Vec<u8>>::new(w as u32, h as u32);
                for ((i, j), &c) in m.indexed_iter() {
                    mbuf.put_pixel(j as u32, i as u32, image::Luma([c]));
                }
                let mask_path = case_dir.join(format!("slice_{idx:03}_mask.png"));
                mbuf.save(&mask_path).map_err(|e| DataError::Format {
                    path: mask_path.clone(),
                    message: e.to_string(),
                })?;
            }
            names.push(name);
        }
        let manifest = CaseManifest {
            case_id: case_id.clone(),
            domain,
            slices: names,
        };
        let manifest_path = case_dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&manifest_path, json).map_err(io_err(&manifest_path))?;
    }
    Ok(())
}

/// Loads a dataset written by [`save_dataset`]. A missing mask is an error
/// for source-domain images and simply yields `mask: None` for the target
/// domain.
pub fn load_dataset(root: &Path) -> Result<Vec<LabeledImage>, DataError> {
    let mut images = Vec::new();
    for domain in [DomainTag::Source, DomainTag::Target] {
        let domain_dir = root.join(domain.dir_name());
        if !domain_dir.exists() {
            continue;
        }
        let mut case_dirs: Vec<PathBuf> = std::fs::read_dir(&domain_dir)
            .map_err(io_err(&domain_dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        case_dirs.sort();
        for case_dir in case_dirs {
            let manifest_path = case_dir.join("manifest.json");
            let raw = std::fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
            let manifest: CaseManifest =
                serde_json::from_str(&raw).map_err(|e| DataError::Format {
                    path: manifest_path.clone(),
                    message: e.to_string(),
                })?;
            for name in &manifest.slices {
                let img_path = case_dir.join(name);
                let decoded = image::open(&img_path).map_err(|e| DataError::Format {
                    path: img_path.clone(),
                    message: e.to_string(),
                })?;
                let gray = decoded.into_luma16();
                let (w, h) = gray.dimensions();
                let pixels = Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
                    gray.get_pixel(j as u32, i as u32)[0] as f64 / 65535.0
                });

                let mask_path = case_dir.join(format!(
                    "{}_mask.png",
                    name.trim_end_matches(".png")
                ));
                let mask = if mask_path.exists() {
                    let decoded = image::open(&mask_path).map_err(|e| DataError::Format {
                        path: mask_path.clone(),
                        message: e.to_string(),
                    })?;
                    let m = decoded.into_luma8();
                    Some(Mask::new(Array2::from_shape_fn(
                        (h as usize, w as usize),
                        |(i, j)| m.get_pixel(j as u32, i as u32)[0],
                    )))
                } else if domain == DomainTag::Source {
                    return Err(DataError::Format {
                        path: mask_path,
                        message: "source-domain slice has no mask".into(),
                    });
                } else {
                    None
                };
                images.push(LabeledImage {
                    pixels,
                    mask,
                    domain,
                    case_id: manifest.case_id.clone(),
                });
            }
        }
    }
    Ok(images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use proptest::prelude::*;

    #[test]
    fn hu_window_known_points() {
        let raw = arr2(&[[-1000, 500, 150]]);
        let out = hu_window(&raw, -200, 500).unwrap();
        assert_eq!(out[[0, 0]], 0.0);
        assert_eq!(out[[0, 1]], 1.0);
        assert_eq!(out[[0, 2]], 0.5);
        assert!(matches!(
            hu_window(&raw, 500, -200),
            Err(DataError::InvalidWindow(..))
        ));
    }

    #[test]
    fn hu_window_is_idempotent_on_unit_range() {
        let raw = arr2(&[[-50, 0, 300]]);
        let once = hu_window(&raw, -200, 500).unwrap();
        // Re-windowing a [0, 1] image with the unit window is the identity.
        let as_int = once.mapv(|v| (v * 1000.0).round() as i32);
        let twice = hu_window(&as_int, 0, 1000).unwrap();
        for (a, b) in once.iter().zip(twice.iter()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn center_crop_offsets_and_errors() {
        let img = Array2::from_shape_fn((512, 512), |(i, j)| (i * 512 + j) as f64);
        let cropped = center_crop(&img, (416, 416)).unwrap();
        assert_eq!(cropped[[0, 0]], img[[48, 48]]);

        let same = center_crop(&img, (512, 512)).unwrap();
        assert_eq!(same, img);

        assert!(matches!(
            center_crop(&img, (600, 600)),
            Err(DataError::CropTooLarge { .. })
        ));

        // Idempotence at a fixed size.
        let twice = center_crop(&cropped, (416, 416)).unwrap();
        assert_eq!(twice, cropped);
    }

    fn checker_image(case: &str) -> LabeledImage {
        let pixels = Array2::from_shape_fn((10, 10), |(i, j)| {
            0.2 + 0.6 * (((i + j) % 2) as f64)
        });
        let mask = Array2::from_shape_fn((10, 10), |(i, j)| u8::from(i > 4 && j > 4));
        LabeledImage {
            pixels,
            mask: Some(Mask::new(mask)),
            domain: DomainTag::Source,
            case_id: case.to_string(),
        }
    }

    #[test]
    fn augment_identity_policy_is_identity() {
        let img = checker_image("a");
        let out = augment(&img, &AugmentationPolicy::identity(), 7).unwrap();
        assert_eq!(out.pixels, img.pixels);
        assert_eq!(out.mask.unwrap().read(), img.mask.unwrap().read());
    }

    #[test]
    fn augment_is_deterministic_per_seed() {
        let img = checker_image("b");
        let policy = AugmentationPolicy {
            blur_sigma_range: (0.2, 1.0),
            rotation_degrees_max: 20.0,
            dropout_fraction: 0.1,
            strength: Strength::Strong,
        };
        let a = augment(&img, &policy, 42).unwrap();
        let b = augment(&img, &policy, 42).unwrap();
        assert!(a
            .pixels
            .iter()
            .zip(b.pixels.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.mask.unwrap().read(), b.mask.unwrap().read());
        let c = augment(&img, &policy, 43).unwrap();
        assert_ne!(a.pixels, c.pixels);
    }

    #[test]
    fn dropout_zeroes_exactly_the_floor_count() {
        let pixels = Array2::from_elem((10, 10), 0.8);
        let img = LabeledImage {
            pixels,
            mask: None,
            domain: DomainTag::Target,
            case_id: "c".into(),
        };
        let policy = AugmentationPolicy {
            blur_sigma_range: (0.0, 0.0),
            rotation_degrees_max: 0.0,
            dropout_fraction: 0.1,
            strength: Strength::Strong,
        };
        let out = augment(&img, &policy, 3).unwrap();
        let zeros = out.pixels.iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, 10);
    }

    #[test]
    fn shared_seed_aligns_geometry_across_policies() {
        let img = checker_image("d");
        let weak = AugmentationPolicy {
            blur_sigma_range: (0.0, 0.0),
            rotation_degrees_max: 15.0,
            dropout_fraction: 0.0,
            strength: Strength::Weak,
        };
        let strong = AugmentationPolicy {
            blur_sigma_range: (0.5, 1.5),
            rotation_degrees_max: 15.0,
            dropout_fraction: 0.2,
            strength: Strength::Strong,
        };
        let a = augment(&img, &weak, 11).unwrap();
        let b = augment(&img, &strong, 11).unwrap();
        // Identical rotation: the (nearest-neighbor) masks coincide exactly.
        assert_eq!(a.mask.unwrap().read(), b.mask.unwrap().read());
        assert_ne!(a.pixels, b.pixels);
    }

    #[test]
    fn generator_is_deterministic_and_counts_match() {
        let config = SyntheticConfig {
            cases_per_domain: 3,
            slices_per_case: 2,
            ..SyntheticConfig::default()
        };
        let (s1, t1) = gen_synthetic_domains(&config, 5).unwrap();
        let (s2, t2) = gen_synthetic_domains(&config, 5).unwrap();
        assert_eq!(s1.len(), 6);
        assert_eq!(t1.len(), 6);
        for (a, b) in s1.iter().zip(&s2).chain(t1.iter().zip(&t2)) {
            assert!(a
                .pixels
                .iter()
                .zip(b.pixels.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
            assert_eq!(a.mask.as_ref().unwrap().read(), b.mask.as_ref().unwrap().read());
        }
        let full = SyntheticConfig::default();
        let (s, t) = gen_synthetic_domains(&full, 1).unwrap();
        assert_eq!(s.len(), 160);
        assert_eq!(t.len(), 160);
    }

    #[test]
    fn zero_lesions_yield_empty_masks() {
        let config = SyntheticConfig {
            cases_per_domain: 2,
            slices_per_case: 2,
            lesion_count_range: (0, 0),
            ..SyntheticConfig::default()
        };
        let (s, t) = gen_synthetic_domains(&config, 9).unwrap();
        for img in s.iter().chain(&t) {
            assert!(img.mask.as_ref().unwrap().read().iter().all(|&m| m == 0));
        }
    }

    #[test]
    fn lesions_exceed_local_background_mean() {
        let config = SyntheticConfig {
            cases_per_domain: 4,
            slices_per_case: 2,
            ..SyntheticConfig::default()
        };
        let (s, t) = gen_synthetic_domains(&config, 13).unwrap();
        for img in s.iter().chain(&t) {
            let mask = img.mask.as_ref().unwrap().read().clone();
            for ((i, j), &m) in mask.indexed_iter() {
                if m == 1 {
                    if let Some(bg) = local_background_mean(&img.pixels, &mask, i, j, 4) {
                        assert!(
                            img.pixels[[i, j]] > bg,
                            "lesion pixel ({i}, {j}) = {} not above bg {bg}",
                            img.pixels[[i, j]]
                        );
                    }
                }
            }
            img.validate(2).unwrap();
        }
    }

    #[test]
    fn degenerate_config_is_rejected() {
        let config = SyntheticConfig {
            image_size: (16, 16),
            lesion_radius_range: (8.0, 10.0),
            ..SyntheticConfig::default()
        };
        assert!(matches!(
            gen_synthetic_domains(&config, 0),
            Err(DataError::BadConfig(_))
        ));
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let config = SyntheticConfig {
            cases_per_domain: 2,
            slices_per_case: 2,
            image_size: (16, 16),
            lesion_radius_range: (2.0, 3.0),
            ..SyntheticConfig::default()
        };
        let (s, t) = gen_synthetic_domains(&config, 21).unwrap();
        let all: Vec<LabeledImage> = s.into_iter().chain(t).collect();
        save_dataset(&all, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), all.len());
        for (a, b) in all.iter().zip(&loaded) {
            assert_eq!(a.case_id, b.case_id);
            assert_eq!(a.domain, b.domain);
            assert!(a
                .pixels
                .iter()
                .zip(b.pixels.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
            assert_eq!(a.mask.as_ref().unwrap().read(), b.mask.as_ref().unwrap().read());
        }
    }

    #[test]
    fn target_without_mask_loads_as_unlabeled() {
        let dir = tempfile::tempdir().unwrap();
        let img = LabeledImage {
            pixels: Array2::from_elem((8, 8), 0.5),
            mask: None,
            domain: DomainTag::Target,
            case_id: "t0".into(),
        };
        save_dataset(&[img], dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 1);
        assert!(loaded[0].mask.is_none());
    }

    #[test]
    fn missing_source_mask_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let img = checker_image("s0");
        save_dataset(&[img], dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("source/s0/slice_000_mask.png")).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(DataError::Format { .. })
        ));
    }

    #[test]
    fn corrupt_image_reports_its_path() {
        let dir = tempfile::tempdir().unwrap();
        let img = checker_image("s1");
        save_dataset(&[img], dir.path()).unwrap();
        let victim = dir.path().join("source/s1/slice_000.png");
        std::fs::write(&victim, b"not a png").unwrap();
        match load_dataset(dir.path()) {
            Err(DataError::Format { path, .. }) => assert_eq!(path, victim),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn patient_split_is_disjoint_and_total() {
        let ids: Vec<String> = (0..10).map(|i| format!("case_{i:03}")).collect();
        let split = DatasetSplit::patient_split(&ids, 3, 0).unwrap();
        assert_eq!(split.train.len(), 7);
        assert_eq!(split.val.len(), 3);
        for c in &split.train {
            assert!(!split.val.contains(c));
        }
        let mut all: Vec<String> = split.train.iter().chain(&split.val).cloned().collect();
        all.sort();
        assert_eq!(all, ids);

        assert!(DatasetSplit::new(vec!["a".into()], vec!["a".into()]).is_err());
    }

    #[test]
    fn mask_reads_are_counted() {
        let img = checker_image("m");
        let mask = img.mask.as_ref().unwrap();
        assert_eq!(mask.read_count(), 0);
        let _ = mask.read();
        let _ = mask.read();
        assert_eq!(mask.read_count(), 2);
        assert_eq!(mask_read_count(std::slice::from_ref(&img)), 2);

        let stripped = without_masks(std::slice::from_ref(&img));
        assert!(stripped[0].mask.is_none());
    }

    proptest! {
        #[test]
        fn hu_window_is_monotone(a in -1200i32..600, b in -1200i32..600) {
            let raw = arr2(&[[a.min(b), a.max(b)]]);
            let out = hu_window(&raw, -200, 500).unwrap();
            prop_assert!(out[[0, 0]] <= out[[0, 1]]);
            prop_assert!((0.0..=1.0).contains(&out[[0, 0]]));
        }
    }
}
