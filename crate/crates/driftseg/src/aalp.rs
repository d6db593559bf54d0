//! Attention-based auxiliary local prediction: saliency fusion from
//! transformer attention, connected-component patch selection, global-local
//! feature fusion, and the auxiliary losses.
//!
//! Random cropping rarely hits small lesions. Instead, the attention
//! matrices of the final two transformer blocks are reduced to a saliency
//! grid; cells above the mean saliency form candidate regions, the largest
//! 4-connected component anchors the crop, and an auxiliary decoder predicts
//! the patch from concatenated local (full-resolution crop) and global
//! (masked downsampled image) features.

use crate::autodiff::{Tape, Var};
use crate::net::{aux_decode, BoundParams};
use ndarray::{Array1, Array2, ArrayD, IxDyn};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AalpError {
    #[error("token count {0} is not a perfect square")]
    NonSquareTokens(usize),
    #[error("no attention blocks provided")]
    NoBlocks,
    #[error("attention matrices disagree in shape")]
    InconsistentBlocks,
    #[error("patch {0:?} larger than image {1:?}")]
    PatchTooLarge((usize, usize), (usize, usize)),
    #[error("mask resolution {0:?} does not match global features {1:?}")]
    MaskResolution((usize, usize), (usize, usize)),
    #[error("zero vector in cosine regularization")]
    ZeroVector,
}

/// Saliency grid reduced from attention matrices, with its mean.
#[derive(Debug, Clone)]
pub struct SaliencyMap {
    pub values: Array2<f64>,
    pub mean_value: f64,
}

/// A chosen crop: bounds in image coordinates plus the selection mask at
/// global-feature resolution.
#[derive(Debug, Clone, serde::Serialize)]
pub struct PatchSelection {
    /// `(row, col, height, width)` in image coordinates.
    pub patch_bounds: (usize, usize, usize, usize),
    /// 1 exactly on the feature cells whose footprint intersects the patch.
    #[serde(skip)]
    pub region_mask: Array2<f64>,
    /// Cell count of the winning component; 0 when the fallback fired.
    pub component_size: usize,
}

/// Which denominator the cosine regularizer uses. `Product` is the standard
/// scale-invariant form; `Max` reproduces the printed variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CosineDenominator {
    Product,
    Max,
}

/// Reduces per-block, per-head attention into one saliency grid.
///
/// Per block the heads are averaged and the matrix collapses to a length-N
/// vector whose entry `k` totals the attention received by token `k`; the
/// block vectors are summed and reshaped onto the `sqrt(N)` token grid.
pub fn fuse_attention(blocks: &[Vec<Array2<f64>>]) -> Result<SaliencyMap, AalpError> {
    if blocks.is_empty() || blocks.iter().any(|b| b.is_empty()) {
        return Err(AalpError::NoBlocks);
    }
    let n = blocks[0][0].nrows();
    for block in blocks {
        for head in block {
            if head.dim() != (n, n) {
                return Err(AalpError::InconsistentBlocks);
            }
        }
    }
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(AalpError::NonSquareTokens(n));
    }

    let mut fused = Array1::<f64>::zeros(n);
    for block in blocks {
        let heads = block.len() as f64;
        for k in 0..n {
            let mut received = 0.0;
            for head in block {
                for j in 0..n {
                    received += head[[j, k]];
                }
            }
            fused[k] += received / heads;
        }
    }
    let values = Array2::from_shape_fn((side, side), |(i, j)| fused[i * side + j]);
    let mean_value = values.mean().unwrap();
    Ok(SaliencyMap { values, mean_value })
}

fn connected_components(candidates: &Array2<bool>) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = candidates.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut components = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if !candidates[[i, j]] || seen[[i, j]] {
                continue;
            }
            let mut cells = Vec::new();
            let mut stack = vec![(i, j)];
            seen[[i, j]] = true;
            while let Some((r, c)) = stack.pop() {
                cells.push((r, c));
                let mut push = |nr: usize, nc: usize, seen: &mut Array2<bool>| {
                    if candidates[[nr, nc]] && !seen[[nr, nc]] {
                        seen[[nr, nc]] = true;
                        stack.push((nr, nc));
                    }
                };
                if r > 0 {
                    push(r - 1, c, &mut seen);
                }
                if r + 1 < h {
                    push(r + 1, c, &mut seen);
                }
                if c > 0 {
                    push(r, c - 1, &mut seen);
                }
                if c + 1 < w {
                    push(r, c + 1, &mut seen);
                }
            }
            components.push(cells);
        }
    }
    components
}

/// Region mask at `feature_resolution` marking every cell whose image
/// footprint intersects the patch bounds.
pub fn region_mask_for(
    bounds: (usize, usize, usize, usize),
    image_size: (usize, usize),
    feature_resolution: (usize, usize),
) -> Array2<f64> {
    let (top, left, ph, pw) = bounds;
    let (img_h, img_w) = image_size;
    let (fh, fw) = feature_resolution;
    // Cell a covers image rows [a * H / fh, (a + 1) * H / fh); intersection
    // tests stay in integers.
    Array2::from_shape_fn((fh, fw), |(a, b)| {
        let row_hit = a * img_h < (top + ph) * fh && (a + 1) * img_h > top * fh;
        let col_hit = b * img_w < (left + pw) * fw && (b + 1) * img_w > left * fw;
        if row_hit && col_hit {
            1.0
        } else {
            0.0
        }
    })
}

/// Chooses the crop: cells strictly above the mean saliency form candidates,
/// the largest 4-connected component's centroid (ties: the component holding
/// the single highest saliency) centers the patch, and a constant grid falls
/// back to the image center.
pub fn select_patch(
    saliency: &SaliencyMap,
    image_size: (usize, usize),
    patch_size: (usize, usize),
    feature_resolution: (usize, usize),
) -> Result<PatchSelection, AalpError> {
    let (img_h, img_w) = image_size;
    let (ph, pw) = patch_size;
    if ph > img_h || pw > img_w {
        return Err(AalpError::PatchTooLarge(patch_size, image_size));
    }
    let (gh, gw) = saliency.values.dim();
    let candidates =
        Array2::from_shape_fn((gh, gw), |(i, j)| saliency.values[[i, j]] > saliency.mean_value);
    let components = connected_components(&candidates);

    let clamp_top = |center: f64, extent: usize, limit: usize| -> usize {
        let top = center.round() as i64 - (extent / 2) as i64;
        top.clamp(0, (limit - extent) as i64) as usize
    };

    let (bounds, component_size) = if components.is_empty() {
        let top = (img_h - ph) / 2;
        let left = (img_w - pw) / 2;
        ((top, left, ph, pw), 0)
    } else {
        let peak = |cells: &[(usize, usize)]| {
            cells
                .iter()
                .map(|&(r, c)| saliency.values[[r, c]])
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let best = components
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| {
                a.len()
                    .cmp(&b.len())
                    .then(peak(a).total_cmp(&peak(b)))
                    .then(ib.cmp(ia)) // earliest discovery wins remaining ties
            })
            .map(|(_, c)| c)
            .unwrap();
        let n = best.len() as f64;
        let rbar = best.iter().map(|&(r, _)| r as f64).sum::<f64>() / n;
        let cbar = best.iter().map(|&(_, c)| c as f64).sum::<f64>() / n;
        let cell_r = rbar.round() as usize;
        let cell_c = cbar.round() as usize;
        let center_i = (cell_r as f64 + 0.5) * img_h as f64 / gh as f64;
        let center_j = (cell_c as f64 + 0.5) * img_w as f64 / gw as f64;
        (
            (
                clamp_top(center_i, ph, img_h),
                clamp_top(center_j, pw, img_w),
                ph,
                pw,
            ),
            best.len(),
        )
    };

    Ok(PatchSelection {
        patch_bounds: bounds,
        region_mask: region_mask_for(bounds, image_size, feature_resolution),
        component_size,
    })
}

/// Masked global branch: multiplies the `[F, gh, gw]` global features by the
/// selection mask, crops to the selected cells, and bilinearly upsamples to
/// `(oh, ow)`.
pub fn masked_global_branch(
    f_global: &Var,
    selection: &PatchSelection,
    oh: usize,
    ow: usize,
) -> Result<Var, AalpError> {
    let gs = f_global.shape();
    let (gh, gw) = (gs[1], gs[2]);
    let mask = &selection.region_mask;
    if mask.dim() != (gh, gw) {
        return Err(AalpError::MaskResolution(mask.dim(), (gh, gw)));
    }
    let channels = gs[0];
    let mut mask3 = ArrayD::zeros(IxDyn(&[channels, gh, gw]));
    for c in 0..channels {
        for i in 0..gh {
            for j in 0..gw {
                mask3[[c, i, j]] = mask[[i, j]];
            }
        }
    }
    let tape = f_global.tape();
    let masked = f_global.mul(&tape.constant(mask3));

    // Bounding box of the selected cells; an all-zero mask keeps the full
    // (zeroed) extent.
    let mut rmin = gh;
    let mut rmax = 0usize;
    let mut cmin = gw;
    let mut cmax = 0usize;
    for ((i, j), &v) in mask.indexed_iter() {
        if v > 0.0 {
            rmin = rmin.min(i);
            rmax = rmax.max(i);
            cmin = cmin.min(j);
            cmax = cmax.max(j);
        }
    }
    let cropped = if rmin <= rmax {
        masked.crop_spatial(rmin, cmin, rmax - rmin + 1, cmax - cmin + 1)
    } else {
        masked
    };
    Ok(cropped.upsample_bilinear(oh, ow))
}

/// Fuses local patch features with the masked global branch and decodes
/// patch logits.
pub fn global_local_fuse(
    params: &BoundParams,
    f_local: &Var,
    f_global: &Var,
    selection: &PatchSelection,
) -> Result<Var, AalpError> {
    let ls = f_local.shape();
    let aligned = masked_global_branch(f_global, selection, ls[1], ls[2])?;
    Ok(aux_decode(params, &f_local.concat_channels(&aligned)))
}

/// Mean-pools a `[F, h, w]` feature map to a `[F]` vector.
pub fn mean_pool_vec(features: &Var) -> Var {
    let f = features.shape()[0];
    features.adaptive_avg_pool(1, 1).reshape(&[f])
}

/// Cosine distance `1 - cos(a, b)` on the tape.
pub fn cosine_reg_var(
    a: &Var,
    b: &Var,
    denominator: CosineDenominator,
) -> Result<Var, AalpError> {
    let na = a.square().sum().sqrt();
    let nb = b.square().sum().sqrt();
    if na.scalar_value() == 0.0 || nb.scalar_value() == 0.0 {
        return Err(AalpError::ZeroVector);
    }
    let dot = a.mul(b).sum();
    let denom = match denominator {
        CosineDenominator::Product => na.mul(&nb),
        CosineDenominator::Max => {
            if na.scalar_value() >= nb.scalar_value() {
                na
            } else {
                nb
            }
        }
    };
    Ok(dot.div(&denom).neg().add_scalar(1.0))
}

/// Plain-value cosine distance.
pub fn cosine_reg(
    a: &Array1<f64>,
    b: &Array1<f64>,
    denominator: CosineDenominator,
) -> Result<f64, AalpError> {
    let tape = Tape::new();
    let av = tape.constant(a.clone().into_dyn());
    let bv = tape.constant(b.clone().into_dyn());
    Ok(cosine_reg_var(&av, &bv, denominator)?.scalar_value())
}

/// Per-domain auxiliary terms: the patch Dice and the cosine regularizer.
pub struct DomainTerms {
    pub dice: Var,
    pub cosine: Var,
}

/// Combined auxiliary loss: `gamma * dice_s + delta * cos_s + 2 * gamma *
/// dice_t + 2 * delta * cos_t`.
pub fn aalp_loss_var(source: &DomainTerms, target: &DomainTerms, gamma: f64, delta: f64) -> Var {
    source
        .dice
        .mul_scalar(gamma)
        .add(&source.cosine.mul_scalar(delta))
        .add(&target.dice.mul_scalar(2.0 * gamma))
        .add(&target.cosine.mul_scalar(2.0 * delta))
}

/// Scalar form of the auxiliary loss combination.
pub fn aalp_loss(
    dice_source: f64,
    cos_source: f64,
    dice_target: f64,
    cos_target: f64,
    gamma: f64,
    delta: f64,
) -> f64 {
    gamma * dice_source + delta * cos_source + 2.0 * gamma * dice_target + 2.0 * delta * cos_target
}
