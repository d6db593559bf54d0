//! Prototype alignment: per-class feature centroids, momentum maintenance,
//! and the cross-domain prototype distance loss.
//!
//! A prototype is the centroid of all feature vectors belonging to one class.
//! Source prototypes come from ground-truth labels, target prototypes from
//! entropy-filtered pseudo-labels; pulling the two banks together aligns the
//! category-level feature distributions.

use crate::autodiff::{Tape, Var};
use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProtoError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Per-class centroids with momentum state. Classes stay uninitialized until
/// their first batch contribution and are excluded from the loss until then.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    /// `[C, D]`, one row per class.
    pub prototypes: Array2<f64>,
    pub initialized: Vec<bool>,
    /// Weight of the stored prototype in the momentum update.
    pub momentum: f64,
}

impl PrototypeBank {
    pub fn new(num_classes: usize, dim: usize, momentum: f64) -> PrototypeBank {
        PrototypeBank {
            prototypes: Array2::zeros((num_classes, dim)),
            initialized: vec![false; num_classes],
            momentum,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.nrows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.ncols()
    }
}

/// Nearest-neighbor downsampling of a label map to feature resolution,
/// sampling at cell centers.
pub fn downsample_labels_nearest(labels: &Array2<u8>, h: usize, w: usize) -> Array2<u8> {
    let (src_h, src_w) = labels.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let si = (((i as f64 + 0.5) * src_h as f64 / h as f64) as usize).min(src_h - 1);
        let sj = (((j as f64 + 0.5) * src_w as f64 / w as f64) as usize).min(src_w - 1);
        labels[[si, sj]]
    })
}

/// Same center-sampling rule for validity masks.
pub fn downsample_valid_nearest(valid: &Array2<bool>, h: usize, w: usize) -> Array2<bool> {
    let (src_h, src_w) = valid.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let si = (((i as f64 + 0.5) * src_h as f64 / h as f64) as usize).min(src_h - 1);
        let sj = (((j as f64 + 0.5) * src_w as f64 / w as f64) as usize).min(src_w - 1);
        valid[[si, sj]]
    })
}

/// Per-class masked mean of `[D, h, w]` features on the tape; classes with no
/// contributing pixel yield `None`.
pub fn batch_prototypes_var(
    features: &Var,
    labels: &Array2<u8>,
    valid: &Array2<bool>,
    num_classes: usize,
) -> Result<Vec<Option<Var>>, ProtoError> {
    let shape = features.shape();
    if shape.len() != 3 {
        return Err(ProtoError::Dimension(format!(
            "expected [D, h, w] features, got {shape:?}"
        )));
    }
    let (d, h, w) = (shape[0], shape[1], shape[2]);
    if labels.dim() != (h, w) || valid.dim() != (h, w) {
        return Err(ProtoError::Dimension(format!(
            "labels {:?} / valid {:?} vs features ({h}, {w})",
            labels.dim(),
            valid.dim()
        )));
    }
    let tape = features.tape();
    let flat = features.reshape(&[d, h * w]);
    let mut out = Vec::with_capacity(num_classes);
    for cls in 0..num_classes {
        let mut selector = ArrayD::zeros(IxDyn(&[h * w, 1]));
        let mut count = 0usize;
        for i in 0..h {
            for j in 0..w {
                if valid[[i, j]] && labels[[i, j]] as usize == cls {
                    selector[[i * w + j, 0]] = 1.0;
                    count += 1;
                }
            }
        }
        if count == 0 {
            out.push(None);
            continue;
        }
        selector.mapv_inplace(|v| v / count as f64);
        let centroid = flat.matmul(&tape.constant(selector)).reshape(&[d]);
        out.push(Some(centroid));
    }
    Ok(out)
}

/// Plain-value per-class masked means.
pub fn batch_prototypes(
    features: &Array3<f64>,
    labels: &Array2<u8>,
    valid: &Array2<bool>,
    num_classes: usize,
) -> Result<Vec<Option<Array1<f64>>>, ProtoError> {
    let tape = Tape::new();
    let f = tape.constant(features.clone().into_dyn());
    Ok(batch_prototypes_var(&f, labels, valid, num_classes)?
        .into_iter()
        .map(|opt| {
            opt.map(|v| {
                v.value()
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap()
                    .to_owned()
            })
        })
        .collect())
}

/// Momentum update of the numeric bank. Present classes move toward the
/// batch value as `batch + momentum * (old - batch)`, which equals
/// `momentum * old + (1 - momentum) * batch` but makes the contraction
/// `|new - batch| = momentum * |old - batch|` exact in floating point.
/// Uninitialized classes adopt the batch value outright; absent classes stay
/// bit-identical.
pub fn momentum_update(
    bank: &PrototypeBank,
    batch: &[Option<Array1<f64>>],
) -> Result<PrototypeBank, ProtoError> {
    if batch.len() != bank.num_classes() {
        return Err(ProtoError::Dimension(format!(
            "{} batch entries vs {} classes",
            batch.len(),
            bank.num_classes()
        )));
    }
    let mut out = bank.clone();
    for (cls, entry) in batch.iter().enumerate() {
        let Some(z_batch) = entry else { continue };
        if z_batch.len() != bank.dim() {
            return Err(ProtoError::Dimension(format!(
                "class {cls}: batch dim {} vs bank dim {}",
                z_batch.len(),
                bank.dim()
            )));
        }
        if !out.initialized[cls] {
            out.prototypes.row_mut(cls).assign(z_batch);
            out.initialized[cls] = true;
        } else {
            let alpha = bank.momentum;
            let mut row = out.prototypes.row_mut(cls);
            for (slot, &b) in row.iter_mut().zip(z_batch.iter()) {
                *slot = b + alpha * (*slot - b);
            }
        }
    }
    Ok(out)
}

/// Post-update prototypes on the tape: stored history enters as a constant,
/// only the batch contribution carries gradient.
pub fn effective_prototypes_var(
    tape: &Tape,
    bank: &PrototypeBank,
    batch: &[Option<Var>],
) -> Vec<Option<Var>> {
    (0..bank.num_classes())
        .map(|cls| match (&batch[cls], bank.initialized[cls]) {
            (Some(z_batch), true) => {
                let alpha = bank.momentum;
                let old = tape.constant(bank.prototypes.row(cls).to_owned().into_dyn());
                Some(old.mul_scalar(alpha).add(&z_batch.mul_scalar(1.0 - alpha)))
            }
            (Some(z_batch), false) => Some(z_batch.clone()),
            (None, true) => Some(tape.constant(bank.prototypes.row(cls).to_owned().into_dyn())),
            (None, false) => None,
        })
        .collect()
}

/// Sum of Euclidean distances between prototypes initialized in both banks,
/// on the tape.
pub fn prototype_loss_var(
    tape: &Tape,
    source: &[Option<Var>],
    target: &[Option<Var>],
) -> Var {
    let mut acc = tape.scalar(0.0);
    for (s, t) in source.iter().zip(target) {
        if let (Some(s), Some(t)) = (s, t) {
            let dist = s.sub(t).square().sum().sqrt();
            acc = acc.add(&dist);
        }
    }
    acc
}

/// Plain-value prototype loss between two numeric banks.
pub fn prototype_loss(source: &PrototypeBank, target: &PrototypeBank) -> Result<f64, ProtoError> {
    if source.num_classes() != target.num_classes() || source.dim() != target.dim() {
        return Err(ProtoError::Dimension(format!(
            "banks disagree: {}x{} vs {}x{}",
            source.num_classes(),
            source.dim(),
            target.num_classes(),
            target.dim()
        )));
    }
    let mut total = 0.0;
    for cls in 0..source.num_classes() {
        if source.initialized[cls] && target.initialized[cls] {
            let diff = &source.prototypes.row(cls) - &target.prototypes.row(cls);
            total += diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn batch_prototypes_arithmetic_mean() {
        // D = 1 features [[1, 3], [5, 7]], labels [[0, 0], [1, 1]].
        let mut features = Array3::zeros((1, 2, 2));
        features[[0, 0, 0]] = 1.0;
        features[[0, 0, 1]] = 3.0;
        features[[0, 1, 0]] = 5.0;
        features[[0, 1, 1]] = 7.0;
        let labels = arr2(&[[0u8, 0], [1, 1]]);
        let valid = Array2::from_elem((2, 2), true);
        let protos = batch_prototypes(&features, &labels, &valid, 2).unwrap();
        assert_eq!(protos[0].as_ref().unwrap()[0], 2.0);
        assert_eq!(protos[1].as_ref().unwrap()[0], 6.0);
    }

    #[test]
    fn absent_class_yields_none() {
        let features = Array3::zeros((2, 2, 2));
        let labels = Array2::zeros((2, 2));
        let valid = Array2::from_elem((2, 2), true);
        let protos = batch_prototypes(&features, &labels, &valid, 3).unwrap();
        assert!(protos[0].is_some());
        assert!(protos[1].is_none());
        assert!(protos[2].is_none());
    }

    #[test]
    fn masked_mean_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let features = Array3::from_shape_fn((3, 2, 3), |_| rng.random_range(-1.0..1.0));
        let labels = arr2(&[[1u8, 1, 1], [0, 0, 2]]);
        let mut valid = Array2::from_elem((2, 3), true);
        valid[[0, 2]] = false; // drop one of the three class-1 pixels
        let protos = batch_prototypes(&features, &labels, &valid, 3).unwrap();

        let mut expect = [0.0f64; 3];
        for d in 0..3 {
            expect[d] = (features[[d, 0, 0]] + features[[d, 0, 1]]) / 2.0;
        }
        let got = protos[1].as_ref().unwrap();
        for d in 0..3 {
            assert!((got[d] - expect[d]).abs() < 1e-12);
        }
    }

    #[test]
    fn momentum_first_write_adopts() {
        let bank = PrototypeBank::new(2, 2, 0.01);
        let batch = vec![Some(arr1(&[1.0, 2.0])), None];
        let updated = momentum_update(&bank, &batch).unwrap();
        assert!(updated.initialized[0]);
        assert!(!updated.initialized[1]);
        assert_eq!(updated.prototypes.row(0).to_vec(), vec![1.0, 2.0]);
    }

    #[test]
    fn momentum_paper_coefficient() {
        // momentum 0.01, old z = 0, batch z = 1: new = 0.01 * 0 + 0.99 * 1.
        let mut bank = PrototypeBank::new(1, 1, 0.01);
        bank.initialized[0] = true;
        let updated = momentum_update(&bank, &[Some(arr1(&[1.0]))]).unwrap();
        assert_eq!(updated.prototypes[[0, 0]], 0.99);
    }

    #[test]
    fn momentum_absent_class_is_bit_identical() {
        let mut bank = PrototypeBank::new(2, 2, 0.3);
        bank.prototypes[[1, 0]] = 0.123456789;
        bank.initialized[1] = true;
        let updated = momentum_update(&bank, &[None, None]).unwrap();
        assert_eq!(
            updated.prototypes[[1, 0]].to_bits(),
            bank.prototypes[[1, 0]].to_bits()
        );
    }

    #[test]
    fn momentum_contraction_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let alpha = rng.random_range(0.0..1.0);
            let mut bank = PrototypeBank::new(1, 4, alpha);
            bank.initialized[0] = true;
            for v in bank.prototypes.iter_mut() {
                *v = rng.random_range(-3.0..3.0);
            }
            let batch = Array1::from_shape_fn(4, |_| rng.random_range(-3.0..3.0));
            let updated = momentum_update(&bank, &[Some(batch.clone())]).unwrap();
            for d in 0..4 {
                let lhs = updated.prototypes[[0, d]] - batch[d];
                let rhs = alpha * (bank.prototypes[[0, d]] - batch[d]);
                // One rounding in the final addition is all the slack left.
                let scale = rhs.abs().max(batch[d].abs()).max(1.0);
                assert!(
                    (lhs - rhs).abs() <= scale * f64::EPSILON,
                    "contraction drift: {lhs} vs {rhs}"
                );
            }
        }
    }

    fn bank_from_rows(rows: &[(bool, Vec<f64>)], momentum: f64) -> PrototypeBank {
        let d = rows[0].1.len();
        let mut bank = PrototypeBank::new(rows.len(), d, momentum);
        for (i, (init, row)) in rows.iter().enumerate() {
            bank.initialized[i] = *init;
            bank.prototypes.row_mut(i).assign(&arr1(row));
        }
        bank
    }

    #[test]
    fn prototype_loss_known_values() {
        let a = bank_from_rows(&[(true, vec![1.0, 0.0])], 0.5);
        let b = bank_from_rows(&[(true, vec![0.0, 1.0])], 0.5);
        assert!((prototype_loss(&a, &b).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(prototype_loss(&a, &a).unwrap(), 0.0);

        // Per-class distances 3 and 4 sum to 7 (not RMS).
        let s = bank_from_rows(&[(true, vec![3.0, 0.0]), (true, vec![0.0, 4.0])], 0.5);
        let t = bank_from_rows(&[(true, vec![0.0, 0.0]), (true, vec![0.0, 0.0])], 0.5);
        assert!((prototype_loss(&s, &t).unwrap() - 7.0).abs() < 1e-12);
    }

    #[test]
    fn prototype_loss_skips_uninitialized_classes() {
        let s = bank_from_rows(&[(true, vec![5.0]), (false, vec![9.0])], 0.5);
        let t = bank_from_rows(&[(true, vec![5.0]), (true, vec![1.0])], 0.5);
        assert_eq!(prototype_loss(&s, &t).unwrap(), 0.0);
    }

    #[test]
    fn effective_prototypes_route_gradient_to_batch_only() {
        let tape = Tape::new();
        let mut bank = PrototypeBank::new(1, 2, 0.25);
        bank.initialized[0] = true;
        bank.prototypes.row_mut(0).assign(&arr1(&[1.0, -1.0]));

        let batch_leaf = tape.leaf(arr1(&[0.5, 0.5]).into_dyn());
        let eff = effective_prototypes_var(&tape, &bank, &[Some(batch_leaf.clone())]);
        let target = effective_prototypes_var(&tape, &bank, &[None]);
        let loss = prototype_loss_var(&tape, &eff, &target);
        let grads = loss.backward();
        // Gradient reaches the batch contribution and matches finite
        // differences.
        let analytic = grads.get(&batch_leaf);
        let f = |xs: &[ndarray::ArrayD<f64>]| -> f64 {
            let t = Tape::new();
            let leaf = t.leaf(xs[0].clone());
            let eff = effective_prototypes_var(&t, &bank, &[Some(leaf)]);
            let tgt = effective_prototypes_var(&t, &bank, &[None]);
            prototype_loss_var(&t, &eff, &tgt).scalar_value()
        };
        let numeric = crate::autodiff::check::numeric_gradient(
            &f,
            &[arr1(&[0.5, 0.5]).into_dyn()],
            1e-6,
        );
        let err = crate::autodiff::check::max_relative_error(&[analytic], &numeric);
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn downsampling_is_identity_at_same_size() {
        let labels = arr2(&[[0u8, 1], [2, 3]]);
        assert_eq!(downsample_labels_nearest(&labels, 2, 2), labels);
        let down = downsample_labels_nearest(&labels, 1, 1);
        // Center of a 2x2 grid samples the bottom-right cell.
        assert_eq!(down[[0, 0]], 3);
    }

    proptest! {
        #[test]
        fn prototype_loss_is_symmetric(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mk = |rng: &mut ChaCha8Rng| {
                let mut bank = PrototypeBank::new(3, 2, 0.5);
                for c in 0..3 {
                    bank.initialized[c] = rng.random_bool(0.8);
                    for d in 0..2 {
                        bank.prototypes[[c, d]] = rng.random_range(-2.0..2.0);
                    }
                }
                bank
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let fwd = prototype_loss(&a, &b).unwrap();
            let bwd = prototype_loss(&b, &a).unwrap();
            prop_assert!((fwd - bwd).abs() < 1e-12);
            // Zero iff mutually initialized prototypes coincide.
            if fwd == 0.0 {
                for c in 0..3 {
                    if a.initialized[c] && b.initialized[c] {
                        prop_assert_eq!(a.prototypes.row(c), b.prototypes.row(c));
                    }
                }
            }
        }

        #[test]
        fn batch_prototype_lies_in_convex_hull(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let features = Array3::from_shape_fn((2, 3, 3), |_| rng.random_range(-1.0..1.0));
            let labels = Array2::from_shape_fn((3, 3), |_| u8::from(rng.random_bool(0.5)));
            let valid = Array2::from_elem((3, 3), true);
            let protos = batch_prototypes(&features, &labels, &valid, 2).unwrap();
            for (cls, proto) in protos.iter().enumerate() {
                let Some(p) = proto else { continue };
                for d in 0..2 {
                    let members: Vec<f64> = labels
                        .indexed_iter()
                        .filter(|(_, &l)| l as usize == cls)
                        .map(|((i, j), _)| features[[d, i, j]])
                        .collect();
                    let lo = members.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = members.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(p[d] >= lo - 1e-12 && p[d] <= hi + 1e-12);
                }
            }
        }
    }
}
