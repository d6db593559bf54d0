//! The training loop: warm-up on labeled source data, then mean-teacher
//! adaptation with style transfer, prototype alignment, contrastive
//! learning, and attention-guided auxiliary prediction, assembled into one
//! weighted objective per step.
//!
//! Model selection never touches target labels: each epoch scores
//! `source_val_metric + 0.5 * pseudo_agreement` and the best-scoring
//! checkpoint wins. Target masks are stripped from every image entering
//! [`train`]; the instrumented read counters in [`crate::data`] prove it.

use crate::aalp::{
    aalp_loss_var, cosine_reg_var, fuse_attention, masked_global_branch, mean_pool_vec,
    select_patch, CosineDenominator, DomainTerms, PatchSelection,
};
use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::contrast::{glcl_loss, ContrastiveBatch, NegativeQueue};
use crate::data::{
    augment, without_masks, AugmentationPolicy, DataError, DatasetSplit, LabeledImage, Strength,
};
use crate::net::{
    argmax_classes, aux_decode, class_probs, forward, forward_vars, project_global,
    project_local, BoundParams, ModelState, NetError, NetworkConfig,
};
use crate::proto::{
    downsample_labels_nearest, downsample_valid_nearest, effective_prototypes_var,
    momentum_update, prototype_loss_var, PrototypeBank,
};
use crate::style::{fft_style_transfer, histogram_match};
use crate::teacher::{
    dice_loss_var, ema_update, make_pseudo_labels, EmaSchedule, PseudoLabel, TeacherError,
};
use indexmap::IndexMap;
use ndarray::{Array1, Array2, Array3, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Teacher(#[from] TeacherError),
    #[error("loss construction failed: {0}")]
    Loss(String),
    #[error("training diverged: {component} became non-finite at step {step}")]
    Diverged {
        component: String,
        step: u64,
        /// Best state reached before the divergence.
        last_good: Box<Option<TrainOutcome>>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StyleMethod {
    Fft,
    Histogram,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchStrategy {
    Attention,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMetric {
    Iou,
    Dice,
}

/// Full training configuration; every default mirrors the published recipe
/// where one exists.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    /// Weights of (seg, consistency, prototype, aalp, contrast).
    pub loss_weights: [f64; 5],
    /// Low-frequency fraction for Fourier style transfer.
    pub beta: f64,
    pub keep_fraction: f64,
    pub temperature: f64,
    pub lambda_mix: f64,
    pub gamma: f64,
    pub delta: f64,
    pub prototype_momentum: f64,
    pub ema: EmaSchedule,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// 0 means one full pass over the source training images per epoch.
    pub steps_per_epoch: usize,
    /// Images drawn per domain per step.
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub seeds: Vec<u64>,
    pub style_method: StyleMethod,
    pub patch_strategy: PatchStrategy,
    pub histogram_bins: usize,
    pub queue_capacity: usize,
    pub cosine_denominator: CosineDenominator,
    /// Source cases held out for validation.
    pub val_cases: usize,
    /// Target-train images used for the pseudo-agreement score.
    pub selection_target_cap: usize,
    pub selection_metric: SelectionMetric,
    /// Images per domain fed through the auxiliary patch branch each step.
    pub aalp_images_per_step: usize,
    pub grad_clip_norm: f64,
    /// Patch edge as a fraction of each image dimension.
    pub patch_fraction: f64,
    /// Downsampling factor of the global branch input.
    pub global_downsample: usize,
    pub weak_policy: AugmentationPolicy,
    pub strong_policy: AugmentationPolicy,
    /// Ablation switches; mean-teacher consistency itself is controlled by
    /// `warmup_epochs == epochs` (source-only training).
    pub enable_prototype: bool,
    pub enable_aalp: bool,
    pub enable_contrast: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            network: NetworkConfig::default(),
            loss_weights: [1.0, 1.0, 0.1, 1.0, 0.5],
            beta: 0.04,
            keep_fraction: 0.8,
            temperature: 0.07,
            lambda_mix: 0.5,
            gamma: 0.05,
            delta: 0.025,
            prototype_momentum: 0.01,
            ema: EmaSchedule::default(),
            epochs: 120,
            warmup_epochs: 50,
            steps_per_epoch: 0,
            batch_size: 8,
            lr_encoder: 6e-5,
            lr_decoder: 6e-4,
            weight_decay: 5e-4,
            lr_schedule: LrSchedule::Cosine,
            seeds: vec![0, 1, 2, 3, 4],
            style_method: StyleMethod::Fft,
            patch_strategy: PatchStrategy::Attention,
            histogram_bins: 256,
            queue_capacity: 512,
            cosine_denominator: CosineDenominator::Product,
            val_cases: 4,
            selection_target_cap: 64,
            selection_metric: SelectionMetric::Iou,
            aalp_images_per_step: 2,
            grad_clip_norm: 1.0,
            patch_fraction: 0.25,
            global_downsample: 2,
            weak_policy: AugmentationPolicy {
                blur_sigma_range: (0.0, 0.3),
                rotation_degrees_max: 10.0,
                dropout_fraction: 0.0,
                strength: Strength::Weak,
            },
            strong_policy: AugmentationPolicy {
                blur_sigma_range: (0.3, 1.2),
                rotation_degrees_max: 10.0,
                dropout_fraction: 0.05,
                strength: Strength::Strong,
            },
            enable_prototype: true,
            enable_aalp: true,
            enable_contrast: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.network.validate()?;
        if self.loss_weights.iter().any(|w| *w < 0.0) {
            return Err(TrainError::Config("negative loss weight".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(TrainError::Config(format!(
                "warmup_epochs {} > epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.beta)
            || !(0.0..=1.0).contains(&self.keep_fraction)
            || !(0.0..=1.0).contains(&self.lambda_mix)
        {
            return Err(TrainError::Config("fraction parameter out of [0, 1]".into()));
        }
        if self.temperature <= 0.0 {
            return Err(TrainError::Config("temperature must be positive".into()));
        }
        self.ema.validate()?;
        self.weak_policy.validate()?;
        self.strong_policy.validate()?;
        if self.weak_policy.rotation_degrees_max != self.strong_policy.rotation_degrees_max {
            return Err(TrainError::Config(
                "weak and strong policies need the same rotation range so the \
                 teacher and student views stay geometrically aligned"
                    .into(),
            ));
        }
        if !(0.0..=0.5).contains(&(self.patch_fraction - 0.25).abs()) && self.patch_fraction <= 0.0
        {
            return Err(TrainError::Config("patch_fraction out of range".into()));
        }
        if self.global_downsample == 0 {
            return Err(TrainError::Config("global_downsample must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<TrainConfig, TrainError> {
        toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))
    }
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

/// Pixel-counting IoU of one class; an empty union counts as a perfect 1.
pub fn iou(pred: &Array2<u8>, truth: &Array2<u8>, cls: u8) -> f64 {
    assert_eq!(pred.dim(), truth.dim(), "metric shape mismatch");
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fneg = 0u64;
    for (p, t) in pred.iter().zip(truth.iter()) {
        match (*p == cls, *t == cls) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    if tp + fp + fneg == 0 {
        1.0
    } else {
        tp as f64 / (fp + tp + fneg) as f64
    }
}

/// Pixel-counting Dice score of one class; an empty union counts as 1.
pub fn dice_score(pred: &Array2<u8>, truth: &Array2<u8>, cls: u8) -> f64 {
    assert_eq!(pred.dim(), truth.dim(), "metric shape mismatch");
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fneg = 0u64;
    for (p, t) in pred.iter().zip(truth.iter()) {
        match (*p == cls, *t == cls) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    if tp + fp + fneg == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
    }
}

/// Label-free model selection score.
pub fn selection_score(metric_source: f64, metric_pseudo: f64) -> f64 {
    metric_source + 0.5 * metric_pseudo
}

/// Per-class pixel counts accumulated across a dataset.
#[derive(Debug, Clone, Default)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fneg: u64,
}

impl ClassCounts {
    pub fn iou(&self) -> f64 {
        let union = self.tp + self.fp + self.fneg;
        if union == 0 {
            1.0
        } else {
            self.tp as f64 / union as f64
        }
    }

    pub fn dice(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fneg;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

/// Accumulates counts for every class over (pred, truth) pairs; an optional
/// validity mask restricts the counted pixels.
pub fn accumulate_counts(
    counts: &mut [ClassCounts],
    pred: &Array2<u8>,
    truth: &Array2<u8>,
    valid: Option<&Array2<bool>>,
) {
    for ((idx, p), t) in pred.indexed_iter().zip(truth.iter()) {
        if let Some(v) = valid {
            if !v[idx] {
                continue;
            }
        }
        for (cls, slot) in counts.iter_mut().enumerate() {
            let cls = cls as u8;
            match (*p == cls, *t == cls) {
                (true, true) => slot.tp += 1,
                (true, false) => slot.fp += 1,
                (false, true) => slot.fneg += 1,
                _ => {}
            }
        }
    }
}

/// Pooled counts over all foreground classes.
pub fn foreground_counts(counts: &[ClassCounts]) -> ClassCounts {
    let mut out = ClassCounts::default();
    for c in counts.iter().skip(1) {
        out.tp += c.tp;
        out.fp += c.fp;
        out.fneg += c.fneg;
    }
    out
}

/// Per-epoch evaluation record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_iou: Vec<f64>,
    pub per_class_dice: Vec<f64>,
    pub mean_dice: f64,
    pub foreground_iou: f64,
    pub selection_score: f64,
    pub epoch: usize,
    pub seed: u64,
}

/// Loss components of Eq.-style assembly, as plain values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub seg: f64,
    pub consistency: f64,
    pub prototype: f64,
    pub aalp: f64,
    pub contrast: f64,
}

/// Weighted total objective; during warm-up only the segmentation term
/// contributes. A non-finite component aborts with its name.
pub fn total_loss(
    components: &LossComponents,
    weights: &[f64; 5],
    warmup: bool,
) -> Result<f64, TrainError> {
    let named = [
        ("seg", components.seg),
        ("consistency", components.consistency),
        ("prototype", components.prototype),
        ("aalp", components.aalp),
        ("contrast", components.contrast),
    ];
    for (name, v) in named {
        if !v.is_finite() {
            return Err(TrainError::Loss(format!("component {name} is {v}")));
        }
    }
    if warmup {
        return Ok(weights[0] * components.seg);
    }
    Ok(weights[0] * components.seg
        + weights[1] * components.consistency
        + weights[2] * components.prototype
        + weights[3] * components.aalp
        + weights[4] * components.contrast)
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

/// AdamW with decoupled weight decay and per-group learning rates
/// (`enc.*` parameters vs. everything else).
pub struct AdamW {
    m: IndexMap<String, ArrayD<f64>>,
    v: IndexMap<String, ArrayD<f64>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn new(state: &ModelState) -> AdamW {
        AdamW {
            m: state
                .params
                .iter()
                .map(|(k, v)| (k.clone(), ArrayD::zeros(v.shape())))
                .collect(),
            v: state
                .params
                .iter()
                .map(|(k, v)| (k.clone(), ArrayD::zeros(v.shape())))
                .collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update with the given schedule factor applied to both group
    /// learning rates.
    pub fn apply(
        &mut self,
        state: &mut ModelState,
        grads: &IndexMap<String, ArrayD<f64>>,
        lr_encoder: f64,
        lr_decoder: f64,
        weight_decay: f64,
        lr_factor: f64,
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, param) in state.params.iter_mut() {
            let g = &grads[name];
            let m = self.m.get_mut(name).unwrap();
            let v = self.v.get_mut(name).unwrap();
            let lr = if name.starts_with("enc.") {
                lr_encoder
            } else {
                lr_decoder
            } * lr_factor;
            for ((p, &gv), (mv, vv)) in param
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + self.eps) + weight_decay * *p);
            }
        }
    }
}

/// Cosine annealing factor in `[0, 1]` over the full horizon.
pub fn cosine_lr_factor(step: u64, total_steps: u64) -> f64 {
    if total_steps == 0 {
        return 1.0;
    }
    let t = (step as f64 / total_steps as f64).min(1.0);
    0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Scales all gradients so the global L2 norm does not exceed `max_norm`.
pub fn clip_global_norm(grads: &mut IndexMap<String, ArrayD<f64>>, max_norm: f64) -> f64 {
    let norm: f64 = grads
        .values()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

/// One CSV row of the per-epoch log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub seg: f64,
    pub consistency: f64,
    pub prototype: f64,
    pub aalp: f64,
    pub contrast: f64,
    pub selection_score: f64,
    pub source_val_metric: f64,
}

pub const EPOCH_CSV_HEADER: &str =
    "epoch,loss_seg,loss_consistency,loss_prototype,loss_aalp,loss_contrast,selection_score,source_val_metric";

impl EpochRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            self.epoch,
            self.seg,
            self.consistency,
            self.prototype,
            self.aalp,
            self.contrast,
            self.selection_score,
            self.source_val_metric
        )
    }

    pub fn parse_csv_line(line: &str) -> Option<EpochRow> {
        let mut parts = line.split(',');
        Some(EpochRow {
            epoch: parts.next()?.trim().parse().ok()?,
            seg: parts.next()?.trim().parse().ok()?,
            consistency: parts.next()?.trim().parse().ok()?,
            prototype: parts.next()?.trim().parse().ok()?,
            aalp: parts.next()?.trim().parse().ok()?,
            contrast: parts.next()?.trim().parse().ok()?,
            selection_score: parts.next()?.trim().parse().ok()?,
            source_val_metric: parts.next()?.trim().parse().ok()?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub history: Vec<EvalReport>,
    pub epoch_rows: Vec<EpochRow>,
}

impl TrainOutcome {
    pub fn epoch_csv(&self) -> String {
        let mut out = String::from(EPOCH_CSV_HEADER);
        for row in &self.epoch_rows {
            out.push('\n');
            out.push_str(&row.to_csv_line());
        }
        out.push('\n');
        out
    }
}

fn rotation_only(policy: &AugmentationPolicy) -> AugmentationPolicy {
    AugmentationPolicy {
        blur_sigma_range: (0.0, 0.0),
        rotation_degrees_max: policy.rotation_degrees_max,
        dropout_fraction: 0.0,
        strength: policy.strength,
    }
}

fn style_transfer(
    config: &TrainConfig,
    content: &Array2<f64>,
    style: &Array2<f64>,
) -> Result<Array2<f64>, TrainError> {
    match config.style_method {
        StyleMethod::Fft => fft_style_transfer(content, style, config.beta)
            .map_err(|e| TrainError::Loss(e.to_string())),
        StyleMethod::Histogram => histogram_match(content, style, config.histogram_bins)
            .map_err(|e| TrainError::Loss(e.to_string())),
    }
}

/// Block-average downsampling for the global AALP branch.
fn downsample_pixels(pixels: &Array2<f64>, factor: usize) -> Array2<f64> {
    if factor <= 1 {
        return pixels.clone();
    }
    let (h, w) = pixels.dim();
    let (oh, ow) = (h / factor, w / factor);
    Array2::from_shape_fn((oh, ow), |(i, j)| {
        let mut acc = 0.0;
        for di in 0..factor {
            for dj in 0..factor {
                acc += pixels[[i * factor + di, j * factor + dj]];
            }
        }
        acc / (factor * factor) as f64
    })
}

fn crop2<T: Clone>(grid: &Array2<T>, bounds: (usize, usize, usize, usize)) -> Array2<T> {
    let (r, c, h, w) = bounds;
    grid.slice(ndarray::s![r..r + h, c..c + w]).to_owned()
}

/// Softmax over the class axis of `[C, H, W]` logits, on the tape.
fn probs_var(logits: &Var) -> Var {
    let shape = logits.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    logits
        .reshape(&[c, h * w])
        .softmax_axis(0)
        .reshape(&[c, h, w])
}

fn to_plain1(v: &Var) -> Array1<f64> {
    v.value()
        .view()
        .into_dimensionality::<ndarray::Ix1>()
        .unwrap()
        .to_owned()
}

/// Count-weighted batch prototypes across several images (equivalent to one
/// pooled centroid per class over all contributing pixels).
fn batch_prototypes_pooled(
    tape: &Tape,
    features: &[Var],
    labels: &[Array2<u8>],
    valids: &[Array2<bool>],
    num_classes: usize,
) -> Vec<Option<Var>> {
    let mut class_counts = vec![0usize; num_classes];
    for (lab, val) in labels.iter().zip(valids) {
        for (l, v) in lab.iter().zip(val.iter()) {
            if *v {
                class_counts[*l as usize] += 1;
            }
        }
    }
    let mut sums: Vec<Option<Var>> = vec![None; num_classes];
    for ((feat, lab), val) in features.iter().zip(labels).zip(valids) {
        let shape = feat.shape();
        let (d, h, w) = (shape[0], shape[1], shape[2]);
        let flat = feat.reshape(&[d, h * w]);
        for cls in 0..num_classes {
            if class_counts[cls] == 0 {
                continue;
            }
            let mut selector = ArrayD::zeros(ndarray::IxDyn(&[h * w, 1]));
            let mut any = false;
            for i in 0..h {
                for j in 0..w {
                    if val[[i, j]] && lab[[i, j]] as usize == cls {
                        selector[[i * w + j, 0]] = 1.0 / class_counts[cls] as f64;
                        any = true;
                    }
                }
            }
            if !any {
                continue;
            }
            let part = flat.matmul(&tape.constant(selector)).reshape(&[d]);
            sums[cls] = Some(match &sums[cls] {
                Some(acc) => acc.add(&part),
                None => part,
            });
        }
    }
    sums
}

struct PreparedImage {
    weak: LabeledImage,
    strong: LabeledImage,
    /// Rotation-only view used as the content image for style transfer.
    geometric: LabeledImage,
}

fn prepare_views(
    image: &LabeledImage,
    config: &TrainConfig,
    seed: u64,
) -> Result<PreparedImage, TrainError> {
    Ok(PreparedImage {
        weak: augment(image, &config.weak_policy, seed)?,
        strong: augment(image, &config.strong_policy, seed)?,
        geometric: augment(image, &rotation_only(&config.strong_policy), seed)?,
    })
}

struct AalpComputed {
    terms: DomainTerms,
}

#[allow(clippy::too_many_arguments)]
fn aalp_domain_terms(
    tape: &Tape,
    params: &BoundParams,
    config: &TrainConfig,
    images: &[&PreparedImage],
    teacher_attention: &[Option<Vec<Vec<Array2<f64>>>>],
    patch_labels: &[(Array2<u8>, Option<Array2<bool>>)],
    rng: &mut ChaCha8Rng,
) -> Result<AalpComputed, TrainError> {
    let netcfg = &config.network;
    let mut dice_acc = tape.scalar(0.0);
    let mut cos_acc = tape.scalar(0.0);
    let count = images.len();
    for (idx, prepared) in images.iter().enumerate() {
        let (img_h, img_w) = prepared.strong.pixels.dim();
        let patch_h = ((img_h as f64 * config.patch_fraction).round() as usize).max(4);
        let patch_w = ((img_w as f64 * config.patch_fraction).round() as usize).max(4);

        let down = downsample_pixels(&prepared.strong.pixels, config.global_downsample);
        let (dh, dw) = down.dim();
        let feat_res = netcfg.stage_resolutions(dh, dw)[0];

        let selection = match config.patch_strategy {
            PatchStrategy::Attention => {
                let attn = teacher_attention[idx].as_ref().ok_or_else(|| {
                    TrainError::Loss("attention strategy requires captured attention".into())
                })?;
                let saliency =
                    fuse_attention(attn).map_err(|e| TrainError::Loss(e.to_string()))?;
                select_patch(&saliency, (img_h, img_w), (patch_h, patch_w), feat_res)
                    .map_err(|e| TrainError::Loss(e.to_string()))?
            }
            PatchStrategy::Random => {
                let top = rng.random_range(0..=img_h - patch_h);
                let left = rng.random_range(0..=img_w - patch_w);
                let bounds = (top, left, patch_h, patch_w);
                PatchSelection {
                    patch_bounds: bounds,
                    region_mask: crate::aalp::region_mask_for(
                        bounds,
                        (img_h, img_w),
                        feat_res,
                    ),
                    component_size: 0,
                }
            }
        };

        let patch_pixels = crop2(&prepared.strong.pixels, selection.patch_bounds);
        let local_out = forward_vars(tape, params, netcfg, &patch_pixels, false);
        let global_out = forward_vars(tape, params, netcfg, &down, false);
        let local_shape = local_out.fused.shape();
        let aligned = masked_global_branch(
            &global_out.fused,
            &selection,
            local_shape[1],
            local_shape[2],
        )
        .map_err(|e| TrainError::Loss(e.to_string()))?;
        let patch_logits = aux_decode(params, &local_out.fused.concat_channels(&aligned))
            .upsample_bilinear(selection.patch_bounds.2, selection.patch_bounds.3);
        let patch_probs = probs_var(&patch_logits);

        let (labels, valid) = &patch_labels[idx];
        let patch_label = crop2(labels, selection.patch_bounds);
        let patch_valid = valid.as_ref().map(|v| crop2(v, selection.patch_bounds));
        let dice = dice_loss_var(&patch_probs, &patch_label, patch_valid.as_ref())?;

        let cos = cosine_reg_var(
            &mean_pool_vec(&local_out.fused),
            &mean_pool_vec(&aligned),
            config.cosine_denominator,
        )
        .map_err(|e| TrainError::Loss(e.to_string()))?;

        dice_acc = dice_acc.add(&dice);
        cos_acc = cos_acc.add(&cos);
    }
    let scale = 1.0 / count.max(1) as f64;
    Ok(AalpComputed {
        terms: DomainTerms {
            dice: dice_acc.mul_scalar(scale),
            cosine: cos_acc.mul_scalar(scale),
        },
    })
}

/// Runs the full loop. `target` labels, if any, are stripped before the
/// first step and never read; evaluation on target ground truth is a
/// separate concern ([`evaluate`]).
pub fn train(
    config: &TrainConfig,
    seed: u64,
    source: &[LabeledImage],
    target: &[LabeledImage],
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(TrainError::Config("empty dataset".into()));
    }
    let netcfg = &config.network;
    let num_classes = netcfg.num_classes;

    // Label firewall: the trainer's own copy of the target set has no masks.
    let target: Vec<LabeledImage> = without_masks(target);

    let mut case_ids: Vec<String> = source.iter().map(|i| i.case_id.clone()).collect();
    case_ids.sort();
    case_ids.dedup();
    let split = DatasetSplit::patient_split(&case_ids, config.val_cases.min(case_ids.len() - 1), seed)?;
    let source_train: Vec<&LabeledImage> = source
        .iter()
        .filter(|i| split.train.contains(&i.case_id))
        .collect();
    let source_val: Vec<&LabeledImage> = source
        .iter()
        .filter(|i| split.val.contains(&i.case_id))
        .collect();
    if source_train.is_empty() || source_val.is_empty() {
        return Err(TrainError::Config("empty source split".into()));
    }

    let mut student = ModelState::init(netcfg, seed)?;
    let mut teacher = student.clone();
    let mut optimizer = AdamW::new(&student);
    let fpn = netcfg.fpn_channels;
    let mut source_bank = PrototypeBank::new(num_classes, fpn, config.prototype_momentum);
    let mut target_bank = PrototypeBank::new(num_classes, fpn, config.prototype_momentum);
    let mut queue = NegativeQueue::new(config.queue_capacity);

    let steps_per_epoch = if config.steps_per_epoch > 0 {
        config.steps_per_epoch
    } else {
        source_train.len().div_ceil(config.batch_size)
    };
    let total_steps = (config.epochs * steps_per_epoch) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x5eed);

    let mut history: Vec<EvalReport> = Vec::new();
    let mut epoch_rows: Vec<EpochRow> = Vec::new();
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    let mut global_step = 0u64;

    let snapshot = |student: &ModelState,
                    teacher: &ModelState,
                    source_bank: &PrototypeBank,
                    target_bank: &PrototypeBank,
                    queue: &NegativeQueue| Checkpoint {
        network: netcfg.clone(),
        config_hash: netcfg.content_hash(),
        step_count: student.step_count,
        train_config_toml: config.to_toml(),
        source_val_cases: split.val.clone(),
        student: student.clone(),
        teacher: teacher.clone(),
        source_bank: source_bank.clone(),
        target_bank: target_bank.clone(),
        queue_capacity: queue.capacity(),
        queue_write_cursor: queue.write_cursor,
        queue_entries: queue.entries().cloned().collect(),
    };

    for epoch in 0..config.epochs {
        let warmup = epoch < config.warmup_epochs;
        let mut sums = LossComponents::default();
        for _ in 0..steps_per_epoch {
            let components = train_step(
                config,
                &source_train,
                &target,
                &mut student,
                &mut teacher,
                &mut optimizer,
                &mut source_bank,
                &mut target_bank,
                &mut queue,
                warmup,
                global_step,
                total_steps,
                &mut rng,
            )
            .map_err(|e| match e {
                TrainError::Loss(msg) => TrainError::Diverged {
                    component: msg,
                    step: global_step,
                    last_good: Box::new(best.as_ref().map(|(_, be, ck)| TrainOutcome {
                        best: ck.clone(),
                        best_epoch: *be,
                        history: history.clone(),
                        epoch_rows: epoch_rows.clone(),
                    })),
                },
                other => other,
            })?;
            sums.seg += components.seg;
            sums.consistency += components.consistency;
            sums.prototype += components.prototype;
            sums.aalp += components.aalp;
            sums.contrast += components.contrast;
            global_step += 1;
        }
        let n = steps_per_epoch as f64;
        let mean = LossComponents {
            seg: sums.seg / n,
            consistency: sums.consistency / n,
            prototype: sums.prototype / n,
            aalp: sums.aalp / n,
            contrast: sums.contrast / n,
        };

        // Epoch evaluation: source validation metric plus pseudo agreement.
        let report = epoch_report(config, &student, &teacher, &source_val, &target, epoch, seed);
        let score = report.selection_score;
        if best.as_ref().map_or(true, |(s, _, _)| score > *s) {
            best = Some((
                score,
                epoch,
                snapshot(&student, &teacher, &source_bank, &target_bank, &queue),
            ));
        }
        epoch_rows.push(EpochRow {
            epoch,
            seg: mean.seg,
            consistency: mean.consistency,
            prototype: mean.prototype,
            aalp: mean.aalp,
            contrast: mean.contrast,
            selection_score: score,
            source_val_metric: report.per_class_iou.first().map(|_| match config.selection_metric {
                SelectionMetric::Iou => foreground_iou_of(&report),
                SelectionMetric::Dice => report.mean_dice,
            }).unwrap_or(0.0),
        });
        history.push(report);
    }

    let (_, best_epoch, best_ck) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best: best_ck,
        best_epoch,
        history,
        epoch_rows,
    })
}

fn foreground_iou_of(report: &EvalReport) -> f64 {
    report.foreground_iou
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    config: &TrainConfig,
    source_train: &[&LabeledImage],
    target: &[LabeledImage],
    student: &mut ModelState,
    teacher: &mut ModelState,
    optimizer: &mut AdamW,
    source_bank: &mut PrototypeBank,
    target_bank: &mut PrototypeBank,
    queue: &mut NegativeQueue,
    warmup: bool,
    global_step: u64,
    total_steps: u64,
    rng: &mut ChaCha8Rng,
) -> Result<LossComponents, TrainError> {
    let netcfg = &config.network;
    let num_classes = netcfg.num_classes;
    let b = config.batch_size;

    let draw = |rng: &mut ChaCha8Rng, len: usize, count: usize| -> Vec<usize> {
        (0..count).map(|_| rng.random_range(0..len)).collect()
    };
    let src_idx = draw(rng, source_train.len(), b);
    let tgt_idx = draw(rng, target.len(), b.min(target.len()).max(1));

    let tape = Tape::new();
    let params = BoundParams::leaves(&tape, student);

    let mut components = LossComponents::default();
    let mut seg_acc = tape.scalar(0.0);
    let mut seg_terms = 0usize;

    // Source views (and their style-transferred twins outside warm-up).
    let mut src_prepared = Vec::new();
    for &i in &src_idx {
        let seed = rng.random_range(0..u64::MAX);
        src_prepared.push(prepare_views(source_train[i], config, seed)?);
    }
    let mut src_masks: Vec<Array2<u8>> = Vec::new();
    for p in &src_prepared {
        let mask = p
            .strong
            .mask
            .as_ref()
            .ok_or_else(|| TrainError::Config("source image without mask".into()))?
            .read()
            .clone();
        src_masks.push(mask);
    }

    let mut src_forward = Vec::new();
    for (p, mask) in src_prepared.iter().zip(&src_masks) {
        let out = forward_vars(&tape, &params, netcfg, &p.strong.pixels, false);
        let dice = dice_loss_var(&probs_var(&out.logits), mask, None)?;
        seg_acc = seg_acc.add(&dice);
        seg_terms += 1;
        src_forward.push(out);
    }

    if warmup {
        components.seg = seg_acc.mul_scalar(1.0 / seg_terms as f64).scalar_value();
        let total_var = seg_acc
            .mul_scalar(1.0 / seg_terms as f64)
            .mul_scalar(config.loss_weights[0]);
        finish_step(
            config, student, teacher, optimizer, total_var, &params, global_step, total_steps,
        )?;
        return Ok(components);
    }

    // Target views.
    let mut tgt_prepared = Vec::new();
    for &i in &tgt_idx {
        let seed = rng.random_range(0..u64::MAX);
        tgt_prepared.push(prepare_views(&target[i], config, seed)?);
    }

    // Style-transferred twins, paired by batch index.
    let mut stylized_src = Vec::new(); // source content, target style
    let mut stylized_tgt = Vec::new(); // target content, source style
    for (i, p) in src_prepared.iter().enumerate() {
        let style_donor = &tgt_prepared[i % tgt_prepared.len()].geometric.pixels;
        stylized_src.push(style_transfer(config, &p.geometric.pixels, style_donor)?);
    }
    for (i, p) in tgt_prepared.iter().enumerate() {
        let style_donor = &src_prepared[i % src_prepared.len()].geometric.pixels;
        stylized_tgt.push(style_transfer(config, &p.geometric.pixels, style_donor)?);
    }

    // Stylized source still carries source labels (geometry matches).
    let mut stylized_src_forward = Vec::new();
    for (pixels, mask) in stylized_src.iter().zip(&src_masks) {
        let out = forward_vars(&tape, &params, netcfg, pixels, false);
        let dice = dice_loss_var(&probs_var(&out.logits), mask, None)?;
        seg_acc = seg_acc.add(&dice);
        seg_terms += 1;
        stylized_src_forward.push(out);
    }
    let seg_loss = seg_acc.mul_scalar(1.0 / seg_terms as f64);

    // Teacher products on the weak views.
    let capture = config.enable_aalp && config.patch_strategy == PatchStrategy::Attention;
    let mut pseudos: Vec<PseudoLabel> = Vec::new();
    let mut tgt_teacher_attn = Vec::new();
    let mut teacher_globals = Vec::new();
    for p in &tgt_prepared {
        let out = forward(teacher, netcfg, &p.weak.pixels, capture);
        pseudos.push(make_pseudo_labels(&class_probs(&out.logits), config.keep_fraction));
        tgt_teacher_attn.push(out.attention);
        teacher_globals.push(teacher_global_vector(teacher, netcfg, &out.fused));
    }
    let mut src_teacher_attn = Vec::new();
    let mut tgt_teacher_fused = Vec::new();
    for p in &src_prepared {
        let out = forward(teacher, netcfg, &p.weak.pixels, capture);
        src_teacher_attn.push(out.attention);
        teacher_globals.push(teacher_global_vector(teacher, netcfg, &out.fused));
    }
    for p in &tgt_prepared {
        // Fused teacher features for the target prototypes (weak view).
        let out = forward(teacher, netcfg, &p.weak.pixels, false);
        tgt_teacher_fused.push(out.fused);
    }

    // Consistency on the strong target view and its source-styled twin.
    let mut cons_acc = tape.scalar(0.0);
    let mut cons_terms = 0usize;
    let mut tgt_forward = Vec::new();
    for (p, pseudo) in tgt_prepared.iter().zip(&pseudos) {
        let out = forward_vars(&tape, &params, netcfg, &p.strong.pixels, false);
        cons_acc = cons_acc.add(&dice_loss_var(&probs_var(&out.logits), &pseudo.labels, Some(&pseudo.valid))?);
        cons_terms += 1;
        tgt_forward.push(out);
    }
    let mut stylized_tgt_forward = Vec::new();
    for (pixels, pseudo) in stylized_tgt.iter().zip(&pseudos) {
        let out = forward_vars(&tape, &params, netcfg, pixels, false);
        cons_acc = cons_acc.add(&dice_loss_var(&probs_var(&out.logits), &pseudo.labels, Some(&pseudo.valid))?);
        cons_terms += 1;
        stylized_tgt_forward.push(out);
    }
    let consistency_loss = cons_acc.mul_scalar(1.0 / cons_terms as f64);

    // Prototype alignment.
    let mut proto_loss_var_opt = None;
    if config.enable_prototype {
        let feat_res = {
            let s = src_forward[0].fused.shape();
            (s[1], s[2])
        };
        let src_feats: Vec<Var> = src_forward.iter().map(|o| o.fused.clone()).collect();
        let src_labels: Vec<Array2<u8>> = src_masks
            .iter()
            .map(|m| downsample_labels_nearest(m, feat_res.0, feat_res.1))
            .collect();
        let src_valids: Vec<Array2<bool>> = src_labels
            .iter()
            .map(|_| Array2::from_elem(feat_res, true))
            .collect();
        let src_batch = batch_prototypes_pooled(&tape, &src_feats, &src_labels, &src_valids, num_classes);

        let tgt_feats: Vec<Var> = tgt_teacher_fused
            .iter()
            .map(|f| tape.constant(f.clone().into_dyn()))
            .collect();
        let tgt_labels: Vec<Array2<u8>> = pseudos
            .iter()
            .map(|p| downsample_labels_nearest(&p.labels, feat_res.0, feat_res.1))
            .collect();
        let tgt_valids: Vec<Array2<bool>> = pseudos
            .iter()
            .map(|p| downsample_valid_nearest(&p.valid, feat_res.0, feat_res.1))
            .collect();
        let tgt_batch = batch_prototypes_pooled(&tape, &tgt_feats, &tgt_labels, &tgt_valids, num_classes);

        let src_eff = effective_prototypes_var(&tape, source_bank, &src_batch);
        let tgt_eff = effective_prototypes_var(&tape, target_bank, &tgt_batch);
        let loss = prototype_loss_var(&tape, &src_eff, &tgt_eff);

        // Detached numeric bank updates.
        let detach = |batch: &[Option<Var>]| -> Vec<Option<Array1<f64>>> {
            batch.iter().map(|o| o.as_ref().map(to_plain1)).collect()
        };
        *source_bank = momentum_update(source_bank, &detach(&src_batch))
            .map_err(|e| TrainError::Loss(e.to_string()))?;
        *target_bank = momentum_update(target_bank, &detach(&tgt_batch))
            .map_err(|e| TrainError::Loss(e.to_string()))?;
        proto_loss_var_opt = Some(loss);
    }

    // AALP on a subset of each domain.
    let mut aalp_loss_opt = None;
    if config.enable_aalp {
        let a = config.aalp_images_per_step.max(1);
        let asrc = a.min(src_prepared.len());
        let atgt = a.min(tgt_prepared.len());
        let src_subset: Vec<&PreparedImage> = src_prepared.iter().take(asrc).collect();
        let src_labels: Vec<(Array2<u8>, Option<Array2<bool>>)> = src_masks
            .iter()
            .take(asrc)
            .map(|m| (m.clone(), None))
            .collect();
        let source_terms = aalp_domain_terms(
            &tape,
            &params,
            config,
            &src_subset,
            &src_teacher_attn[..asrc],
            &src_labels,
            rng,
        )?;
        let tgt_subset: Vec<&PreparedImage> = tgt_prepared.iter().take(atgt).collect();
        let tgt_labels: Vec<(Array2<u8>, Option<Array2<bool>>)> = pseudos
            .iter()
            .take(atgt)
            .map(|p| (p.labels.clone(), Some(p.valid.clone())))
            .collect();
        let target_terms = aalp_domain_terms(
            &tape,
            &params,
            config,
            &tgt_subset,
            &tgt_teacher_attn[..atgt],
            &tgt_labels,
            rng,
        )?;
        aalp_loss_opt = Some(aalp_loss_var(
            &source_terms.terms,
            &target_terms.terms,
            config.gamma,
            config.delta,
        ));
    }

    // GLCL over the aligned quadruple.
    let mut contrast_loss_opt = None;
    if config.enable_contrast {
        let pair_count = src_forward.len().min(tgt_forward.len());
        let locals = |outs: &[crate::net::ForwardVars], n: usize| -> Vec<Var> {
            outs.iter()
                .take(n)
                .map(|o| project_local(&params, netcfg, &o.fused))
                .collect()
        };
        let globals = |outs: &[crate::net::ForwardVars], n: usize| -> Vec<Var> {
            outs.iter()
                .take(n)
                .map(|o| project_global(&params, &o.fused))
                .collect()
        };
        let batch = ContrastiveBatch {
            local_source: locals(&src_forward, pair_count),
            local_source_stylized: locals(&stylized_src_forward, pair_count),
            local_target: locals(&tgt_forward, pair_count),
            local_target_stylized: locals(&stylized_tgt_forward, pair_count),
            global_source: globals(&src_forward, pair_count),
            global_source_stylized: globals(&stylized_src_forward, pair_count),
            global_target: globals(&tgt_forward, pair_count),
            global_target_stylized: globals(&stylized_tgt_forward, pair_count),
            temperature: config.temperature,
            teacher_globals,
        };
        let parts = glcl_loss(&tape, &batch, queue, config.lambda_mix)
            .map_err(|e| TrainError::Loss(e.to_string()))?;
        contrast_loss_opt = Some(parts.total);
    }

    // Assemble the weighted objective.
    components.seg = seg_loss.scalar_value();
    components.consistency = consistency_loss.scalar_value();
    components.prototype = proto_loss_var_opt
        .as_ref()
        .map_or(0.0, |v| v.scalar_value());
    components.aalp = aalp_loss_opt.as_ref().map_or(0.0, |v| v.scalar_value());
    components.contrast = contrast_loss_opt
        .as_ref()
        .map_or(0.0, |v| v.scalar_value());
    total_loss(&components, &config.loss_weights, false)?;

    let w = &config.loss_weights;
    let mut total_var = seg_loss
        .mul_scalar(w[0])
        .add(&consistency_loss.mul_scalar(w[1]));
    if let Some(v) = &proto_loss_var_opt {
        total_var = total_var.add(&v.mul_scalar(w[2]));
    }
    if let Some(v) = &aalp_loss_opt {
        total_var = total_var.add(&v.mul_scalar(w[3]));
    }
    if let Some(v) = &contrast_loss_opt {
        total_var = total_var.add(&v.mul_scalar(w[4]));
    }

    finish_step(
        config, student, teacher, optimizer, total_var, &params, global_step, total_steps,
    )?;
    Ok(components)
}

fn teacher_global_vector(
    teacher: &ModelState,
    netcfg: &NetworkConfig,
    fused: &Array3<f64>,
) -> Array1<f64> {
    let tape = Tape::new();
    let params = BoundParams::constants(&tape, teacher);
    let _ = netcfg;
    to_plain1(&project_global(&params, &tape.constant(fused.clone().into_dyn())))
}

#[allow(clippy::too_many_arguments)]
fn finish_step(
    config: &TrainConfig,
    student: &mut ModelState,
    teacher: &mut ModelState,
    optimizer: &mut AdamW,
    total_var: Var,
    params: &BoundParams,
    global_step: u64,
    total_steps: u64,
) -> Result<(), TrainError> {
    let total = total_var.scalar_value();
    if !total.is_finite() {
        return Err(TrainError::Loss(format!("total loss is {total}")));
    }
    let grads = total_var.backward();
    let mut grad_map: IndexMap<String, ArrayD<f64>> = params
        .vars
        .iter()
        .map(|(name, var)| (name.clone(), grads.get(var)))
        .collect();
    clip_global_norm(&mut grad_map, config.grad_clip_norm);
    let LrSchedule::Cosine = config.lr_schedule;
    let factor = cosine_lr_factor(global_step, total_steps);
    optimizer.apply(
        student,
        &grad_map,
        config.lr_encoder,
        config.lr_decoder,
        config.weight_decay,
        factor,
    );
    student.step_count += 1;
    let alpha = config.ema.alpha_at(global_step);
    *teacher = ema_update(teacher, student, alpha)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

/// Per-pixel prediction for one image.
pub fn predict(state: &ModelState, netcfg: &NetworkConfig, pixels: &Array2<f64>) -> Array2<u8> {
    argmax_classes(&forward(state, netcfg, pixels, false).logits)
}

/// Count-aggregated metrics of `state` on labeled images.
pub fn dataset_counts(
    state: &ModelState,
    netcfg: &NetworkConfig,
    images: &[&LabeledImage],
) -> Vec<ClassCounts> {
    let mut counts = vec![ClassCounts::default(); netcfg.num_classes];
    for img in images {
        let Some(mask) = img.mask.as_ref() else { continue };
        let pred = predict(state, netcfg, &img.pixels);
        accumulate_counts(&mut counts, &pred, mask.read(), None);
    }
    counts
}

/// Agreement between the student's predictions and the teacher's
/// entropy-filtered pseudo-labels on (unlabeled) target images.
pub fn pseudo_agreement(
    student: &ModelState,
    teacher: &ModelState,
    netcfg: &NetworkConfig,
    images: &[&LabeledImage],
    keep_fraction: f64,
    metric: SelectionMetric,
) -> f64 {
    let mut counts = vec![ClassCounts::default(); netcfg.num_classes];
    for img in images {
        let teacher_probs = class_probs(&forward(teacher, netcfg, &img.pixels, false).logits);
        let pseudo = make_pseudo_labels(&teacher_probs, keep_fraction);
        let pred = predict(student, netcfg, &img.pixels);
        accumulate_counts(&mut counts, &pred, &pseudo.labels, Some(&pseudo.valid));
    }
    let fg = foreground_counts(&counts);
    match metric {
        SelectionMetric::Iou => fg.iou(),
        SelectionMetric::Dice => fg.dice(),
    }
}

fn epoch_report(
    config: &TrainConfig,
    student: &ModelState,
    teacher: &ModelState,
    source_val: &[&LabeledImage],
    target: &[LabeledImage],
    epoch: usize,
    seed: u64,
) -> EvalReport {
    let netcfg = &config.network;
    let counts = dataset_counts(student, netcfg, source_val);
    let per_class_iou: Vec<f64> = counts.iter().map(ClassCounts::iou).collect();
    let per_class_dice: Vec<f64> = counts.iter().map(ClassCounts::dice).collect();
    let fg = foreground_counts(&counts);
    let metric_source = match config.selection_metric {
        SelectionMetric::Iou => fg.iou(),
        SelectionMetric::Dice => fg.dice(),
    };
    let cap = config.selection_target_cap.max(1).min(target.len());
    let target_subset: Vec<&LabeledImage> = target.iter().take(cap).collect();
    let metric_pseudo = pseudo_agreement(
        student,
        teacher,
        netcfg,
        &target_subset,
        config.keep_fraction,
        config.selection_metric,
    );
    let mean_dice = if per_class_dice.len() > 1 {
        per_class_dice[1..].iter().sum::<f64>() / (per_class_dice.len() - 1) as f64
    } else {
        0.0
    };
    EvalReport {
        foreground_iou: fg.iou(),
        mean_dice,
        per_class_iou,
        per_class_dice,
        selection_score: selection_score(metric_source, metric_pseudo),
        epoch,
        seed,
    }
}

/// Final evaluation of a checkpoint's student on labeled images (this is
/// where target ground truth may legitimately be read).
pub fn evaluate(
    checkpoint: &Checkpoint,
    images: &[LabeledImage],
    epoch: usize,
    seed: u64,
) -> EvalReport {
    let netcfg = &checkpoint.network;
    let refs: Vec<&LabeledImage> = images.iter().filter(|i| i.mask.is_some()).collect();
    let counts = dataset_counts(&checkpoint.student, netcfg, &refs);
    let per_class_iou: Vec<f64> = counts.iter().map(ClassCounts::iou).collect();
    let per_class_dice: Vec<f64> = counts.iter().map(ClassCounts::dice).collect();
    let fg = foreground_counts(&counts);
    let mean_dice = if per_class_dice.len() > 1 {
        per_class_dice[1..].iter().sum::<f64>() / (per_class_dice.len() - 1) as f64
    } else {
        0.0
    };
    EvalReport {
        foreground_iou: fg.iou(),
        mean_dice,
        per_class_iou,
        per_class_dice,
        selection_score: 0.0,
        epoch,
        seed,
    }
}

/// Recomputes the label-free selection score of a checkpoint from source
/// validation images and unlabeled target images, mirroring the per-epoch
/// computation inside [`train`].
pub fn reproduce_selection_score(
    checkpoint: &Checkpoint,
    config: &TrainConfig,
    source: &[LabeledImage],
    target: &[LabeledImage],
) -> f64 {
    let netcfg = &checkpoint.network;
    let val: Vec<&LabeledImage> = source
        .iter()
        .filter(|i| checkpoint.source_val_cases.contains(&i.case_id))
        .collect();
    let counts = dataset_counts(&checkpoint.student, netcfg, &val);
    let fg = foreground_counts(&counts);
    let metric_source = match config.selection_metric {
        SelectionMetric::Iou => fg.iou(),
        SelectionMetric::Dice => fg.dice(),
    };
    let stripped = without_masks(target);
    let cap = config.selection_target_cap.max(1).min(stripped.len());
    let subset: Vec<&LabeledImage> = stripped.iter().take(cap).collect();
    let metric_pseudo = pseudo_agreement(
        &checkpoint.student,
        &checkpoint.teacher,
        netcfg,
        &subset,
        config.keep_fraction,
        config.selection_metric,
    );
    selection_score(metric_source, metric_pseudo)
}
