//! Mean-teacher self-training: EMA weight updates, entropy-filtered
//! pseudo-labels, and the Dice/consistency losses.
//!
//! The teacher is a slowly moving average of the student. On unlabeled
//! images it predicts a probability map, pixels are ranked by prediction
//! entropy, and only the most confident fraction become valid supervision
//! targets for the student's strongly augmented view.

use crate::autodiff::{Tape, Var};
use crate::net::ModelState;
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TeacherError {
    #[error("parameter sets do not match: {0}")]
    ParamMismatch(String),
    #[error("invalid probabilities: {0}")]
    BadProbabilities(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Per-pixel pseudo-labels with their entropy-filter validity mask.
#[derive(Debug, Clone)]
pub struct PseudoLabel {
    /// Argmax class of the teacher's probabilities, defined everywhere.
    pub labels: Array2<u8>,
    /// True on the `floor(keep_fraction * H * W)` lowest-entropy pixels.
    pub valid: Array2<bool>,
    pub keep_fraction: f64,
}

/// EMA coefficient schedule: linear ramp from `alpha_start` to `alpha_end`
/// over `warmup_steps`, holding afterwards.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct EmaSchedule {
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub warmup_steps: u64,
}

impl Default for EmaSchedule {
    fn default() -> Self {
        EmaSchedule {
            alpha_start: 0.99,
            alpha_end: 0.999,
            warmup_steps: 1000,
        }
    }
}

impl EmaSchedule {
    pub fn validate(&self) -> Result<(), TeacherError> {
        if !(0.0 <= self.alpha_start && self.alpha_start <= self.alpha_end && self.alpha_end < 1.0)
        {
            return Err(TeacherError::BadProbabilities(format!(
                "need 0 <= alpha_start <= alpha_end < 1, got {} and {}",
                self.alpha_start, self.alpha_end
            )));
        }
        Ok(())
    }

    pub fn alpha_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            return self.alpha_end;
        }
        let t = step as f64 / self.warmup_steps as f64;
        self.alpha_start + (self.alpha_end - self.alpha_start) * t
    }
}

/// One EMA step: every teacher parameter becomes
/// `alpha * teacher + (1 - alpha) * student`, evaluated literally in that
/// form so the affine identity holds bit-for-bit. Increments `step_count`.
pub fn ema_update(
    teacher: &ModelState,
    student: &ModelState,
    alpha: f64,
) -> Result<ModelState, TeacherError> {
    assert!((0.0..=1.0).contains(&alpha), "alpha out of [0, 1]");
    if teacher.params.len() != student.params.len() {
        return Err(TeacherError::ParamMismatch(format!(
            "{} vs {} parameters",
            teacher.params.len(),
            student.params.len()
        )));
    }
    let mut params = teacher.params.clone();
    for (name, t) in params.iter_mut() {
        let s = student
            .params
            .get(name)
            .ok_or_else(|| TeacherError::ParamMismatch(format!("missing {name} in student")))?;
        if s.shape() != t.shape() {
            return Err(TeacherError::ParamMismatch(format!(
                "{name}: {:?} vs {:?}",
                t.shape(),
                s.shape()
            )));
        }
        t.zip_mut_with(s, |tv, &sv| *tv = alpha * *tv + (1.0 - alpha) * sv);
    }
    Ok(ModelState {
        params,
        step_count: teacher.step_count + 1,
    })
}

/// Natural-log prediction entropy per pixel; `0 * ln 0` counts as 0.
pub fn pixel_entropy(prob: &Array3<f64>) -> Result<Array2<f64>, TeacherError> {
    let (c, h, w) = prob.dim();
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut sum = 0.0;
            let mut ent = 0.0;
            for k in 0..c {
                let p = prob[[k, i, j]];
                if !(0.0..=1.0).contains(&p) {
                    return Err(TeacherError::BadProbabilities(format!(
                        "p = {p} at class {k}, pixel ({i}, {j})"
                    )));
                }
                sum += p;
                if p > 0.0 {
                    ent -= p * p.ln();
                }
            }
            if (sum - 1.0).abs() > 1e-5 {
                return Err(TeacherError::BadProbabilities(format!(
                    "probabilities sum to {sum} at pixel ({i}, {j})"
                )));
            }
            out[[i, j]] = ent;
        }
    }
    Ok(out)
}

/// Argmax labels plus validity for the `floor(keep_fraction * H * W)`
/// lowest-entropy pixels; entropy ties break by row-major pixel index.
pub fn make_pseudo_labels(prob: &Array3<f64>, keep_fraction: f64) -> PseudoLabel {
    assert!(
        (0.0..=1.0).contains(&keep_fraction),
        "keep_fraction out of [0, 1]"
    );
    let entropy = pixel_entropy(prob).expect("valid probability map");
    let labels = crate::net::argmax_classes(prob);
    let (h, w) = entropy.dim();
    let keep = (keep_fraction * (h * w) as f64).floor() as usize;

    let mut order: Vec<usize> = (0..h * w).collect();
    order.sort_by(|&a, &b| {
        entropy[[a / w, a % w]]
            .total_cmp(&entropy[[b / w, b % w]])
            .then(a.cmp(&b))
    });
    let mut valid = Array2::from_elem((h, w), false);
    for &idx in order.iter().take(keep) {
        valid[[idx / w, idx % w]] = true;
    }
    PseudoLabel {
        labels,
        valid,
        keep_fraction,
    }
}

/// Smoothed Dice loss over foreground classes, on the tape.
///
/// Per foreground class `c`: `1 - (2 * sum(p_c * y_c) + 2) / (sum(p_c) +
/// sum(y_c) + 2)` with all sums restricted to `valid` pixels, averaged over
/// the `C - 1` foreground classes. The smoothing keeps the all-background
/// case at exactly zero.
pub fn dice_loss_var(
    prob: &Var,
    target: &Array2<u8>,
    valid: Option<&Array2<bool>>,
) -> Result<Var, TeacherError> {
    let shape = prob.shape();
    if shape.len() != 3 {
        return Err(TeacherError::Shape(format!("expected [C, H, W], got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if target.dim() != (h, w) {
        return Err(TeacherError::Shape(format!(
            "target {:?} vs prob spatial ({h}, {w})",
            target.dim()
        )));
    }
    if let Some(v) = valid {
        if v.dim() != (h, w) {
            return Err(TeacherError::Shape(format!(
                "valid {:?} vs prob spatial ({h}, {w})",
                v.dim()
            )));
        }
    }
    if target.iter().any(|&t| t as usize >= c) {
        return Err(TeacherError::Shape(format!("target class id >= {c}")));
    }
    let is_valid = |i: usize, j: usize| valid.map_or(true, |v| v[[i, j]]);

    let tape = tape_of(prob);
    let mut acc = tape.scalar(0.0);
    for cls in 1..c {
        let mut inter_mask = ArrayD::zeros(IxDyn(&[c, h, w]));
        let mut valid_mask = ArrayD::zeros(IxDyn(&[c, h, w]));
        let mut ysum = 0.0;
        for i in 0..h {
            for j in 0..w {
                if is_valid(i, j) {
                    valid_mask[[cls, i, j]] = 1.0;
                    if target[[i, j]] as usize == cls {
                        inter_mask[[cls, i, j]] = 1.0;
                        ysum += 1.0;
                    }
                }
            }
        }
        let inter = prob.mul(&tape.constant(inter_mask)).sum();
        let psum = prob.mul(&tape.constant(valid_mask)).sum();
        let num = inter.mul_scalar(2.0).add_scalar(2.0);
        let den = psum.add_scalar(ysum + 2.0);
        let dice = num.div(&den);
        acc = acc.add(&dice.neg().add_scalar(1.0));
    }
    Ok(acc.mul_scalar(1.0 / (c - 1) as f64))
}

/// Plain-value Dice loss.
pub fn dice_loss(
    prob: &Array3<f64>,
    target: &Array2<u8>,
    valid: Option<&Array2<bool>>,
) -> Result<f64, TeacherError> {
    let tape = Tape::new();
    let p = tape.constant(prob.clone().into_dyn());
    Ok(dice_loss_var(&p, target, valid)?.scalar_value())
}

/// Consistency loss: Dice of the student's prediction on the strong view
/// against the teacher's pseudo-labels, restricted to valid pixels.
pub fn consistency_loss_var(student_prob: &Var, pseudo: &PseudoLabel) -> Result<Var, TeacherError> {
    dice_loss_var(student_prob, &pseudo.labels, Some(&pseudo.valid))
}

/// Plain-value consistency loss.
pub fn consistency_loss(
    student_prob: &Array3<f64>,
    pseudo: &PseudoLabel,
) -> Result<f64, TeacherError> {
    dice_loss(student_prob, &pseudo.labels, Some(&pseudo.valid))
}

fn tape_of(v: &Var) -> Tape {
    v.tape()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{ModelState, NetworkConfig};
    use ndarray::{Array2, Array3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_state(seed: u64) -> ModelState {
        let mut cfg = NetworkConfig::default();
        cfg.stages.truncate(1);
        cfg.stages[0].num_blocks = 1;
        cfg.stages[0].embed_dim = 4;
        cfg.stages[0].num_heads = 1;
        cfg.fpn_channels = 4;
        cfg.local_proj_dim = 2;
        cfg.local_proj_grid = 2;
        cfg.global_proj_dim = 2;
        ModelState::init(&cfg, seed).unwrap()
    }

    #[test]
    fn ema_alpha_extremes() {
        let teacher = toy_state(0);
        let student = toy_state(1);
        let copied = ema_update(&teacher, &student, 0.0).unwrap();
        for (name, p) in &copied.params {
            assert_eq!(p, &student.params[name], "alpha = 0 must copy student");
        }
        let frozen = ema_update(&teacher, &student, 1.0).unwrap();
        for (name, p) in &frozen.params {
            assert_eq!(p, &teacher.params[name], "alpha = 1 must freeze teacher");
        }
        assert_eq!(copied.step_count, teacher.step_count + 1);
    }

    #[test]
    fn ema_scalar_arithmetic() {
        let mut teacher = toy_state(2);
        let mut student = toy_state(2);
        teacher.params[0].fill(1.0);
        student.params[0].fill(0.0);
        let updated = ema_update(&teacher, &student, 0.99).unwrap();
        assert_eq!(updated.params[0].first().copied().unwrap(), 0.99);
    }

    #[test]
    fn ema_affine_identity_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut teacher = toy_state(4);
        let mut student = toy_state(5);
        for p in teacher.params.values_mut() {
            p.mapv_inplace(|_| rng.random_range(-2.0..2.0));
        }
        for p in student.params.values_mut() {
            p.mapv_inplace(|_| rng.random_range(-2.0..2.0));
        }
        let alpha = 0.997;
        let updated = ema_update(&teacher, &student, alpha).unwrap();
        for (name, p) in &updated.params {
            let t = &teacher.params[name];
            let s = &student.params[name];
            for ((&u, &tv), &sv) in p.iter().zip(t.iter()).zip(s.iter()) {
                let expect = alpha * tv + (1.0 - alpha) * sv;
                assert_eq!(u.to_bits(), expect.to_bits(), "{name} drifted");
            }
        }
    }

    #[test]
    fn ema_rejects_mismatched_states() {
        let teacher = toy_state(6);
        let mut student = toy_state(6);
        student.params.shift_remove("dec.head2.b");
        assert!(ema_update(&teacher, &student, 0.5).is_err());

        let mut reshaped = toy_state(6);
        *reshaped.params.get_mut("dec.head2.b").unwrap() =
            ndarray::ArrayD::zeros(ndarray::IxDyn(&[7]));
        assert!(ema_update(&teacher, &reshaped, 0.5).is_err());
    }

    #[test]
    fn ema_schedule_ramps_linearly() {
        let s = EmaSchedule {
            alpha_start: 0.9,
            alpha_end: 0.99,
            warmup_steps: 9,
        };
        s.validate().unwrap();
        assert_eq!(s.alpha_at(0), 0.9);
        assert!((s.alpha_at(3) - 0.93).abs() < 1e-12);
        assert_eq!(s.alpha_at(9), 0.99);
        assert_eq!(s.alpha_at(1000), 0.99);
        assert!(EmaSchedule { alpha_start: 0.9, alpha_end: 1.0, warmup_steps: 1 }
            .validate()
            .is_err());
    }

    fn prob_map(per_pixel: &[(f64, f64)], h: usize, w: usize) -> Array3<f64> {
        let mut prob = Array3::zeros((2, h, w));
        for (idx, &(p0, p1)) in per_pixel.iter().enumerate() {
            prob[[0, idx / w, idx % w]] = p0;
            prob[[1, idx / w, idx % w]] = p1;
        }
        prob
    }

    #[test]
    fn entropy_known_values() {
        let prob = prob_map(&[(0.5, 0.5), (1.0, 0.0)], 1, 2);
        let ent = pixel_entropy(&prob).unwrap();
        assert!((ent[[0, 0]] - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(ent[[0, 1]], 0.0);

        let mut uniform4 = Array3::zeros((4, 1, 1));
        uniform4.fill(0.25);
        let e4 = pixel_entropy(&uniform4).unwrap();
        assert!((e4[[0, 0]] - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_rejects_bad_probabilities() {
        let prob = prob_map(&[(1.2, -0.2)], 1, 1);
        assert!(pixel_entropy(&prob).is_err());
        let not_normalized = prob_map(&[(0.3, 0.3)], 1, 1);
        assert!(pixel_entropy(&not_normalized).is_err());
    }

    #[test]
    fn pseudo_labels_keep_everything_at_fraction_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut prob = Array3::zeros((2, 4, 4));
        for i in 0..4 {
            for j in 0..4 {
                let p = rng.random_range(0.0..1.0);
                prob[[0, i, j]] = p;
                prob[[1, i, j]] = 1.0 - p;
            }
        }
        let pl = make_pseudo_labels(&prob, 1.0);
        assert!(pl.valid.iter().all(|&v| v));
    }

    #[test]
    fn pseudo_labels_tie_break_is_row_major() {
        let mut prob = Array3::zeros((2, 10, 10));
        prob.fill(0.5); // identical entropy everywhere
        let pl = make_pseudo_labels(&prob, 0.8);
        let valid: Vec<bool> = pl.valid.iter().copied().collect();
        assert_eq!(valid.iter().filter(|&&v| v).count(), 80);
        assert!(valid[..80].iter().all(|&v| v));
        assert!(valid[80..].iter().all(|&v| !v));
    }

    #[test]
    fn pseudo_labels_match_sort_and_select_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let (h, w) = (5, 7);
            let mut prob = Array3::zeros((3, h, w));
            for i in 0..h {
                for j in 0..w {
                    let a: f64 = rng.random_range(0.05..1.0);
                    let b: f64 = rng.random_range(0.05..1.0);
                    let c: f64 = rng.random_range(0.05..1.0);
                    let z = a + b + c;
                    prob[[0, i, j]] = a / z;
                    prob[[1, i, j]] = b / z;
                    prob[[2, i, j]] = c / z;
                }
            }
            let keep = 0.5;
            let pl = make_pseudo_labels(&prob, keep);

            // Independent oracle: sort (entropy, index) pairs and select.
            let ent = pixel_entropy(&prob).unwrap();
            let mut pairs: Vec<(f64, usize)> = ent
                .iter()
                .enumerate()
                .map(|(idx, &e)| (e, idx))
                .collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let k = (keep * (h * w) as f64).floor() as usize;
            let mut expect = Array2::from_elem((h, w), false);
            for &(_, idx) in pairs.iter().take(k) {
                expect[[idx / w, idx % w]] = true;
            }
            assert_eq!(pl.valid, expect);
        }
    }

    #[test]
    fn dice_zero_on_perfect_prediction() {
        let mut target = Array2::zeros((4, 4));
        target[[1, 1]] = 1u8;
        target[[2, 2]] = 1u8;
        let mut prob = Array3::zeros((2, 4, 4));
        for i in 0..4 {
            for j in 0..4 {
                let t = target[[i, j]] as usize;
                prob[[t, i, j]] = 1.0;
            }
        }
        let loss = dice_loss(&prob, &target, None).unwrap();
        assert!(loss < 1e-6);
    }

    #[test]
    fn dice_missed_foreground_matches_smoothed_formula() {
        // Prediction gives the foreground zero probability; k target
        // foreground pixels force 1 - 2 / (k + 2).
        for k in [1usize, 3, 7] {
            let mut target = Array2::zeros((3, 3));
            for idx in 0..k {
                target[[idx / 3, idx % 3]] = 1u8;
            }
            let mut prob = Array3::zeros((2, 3, 3));
            for i in 0..3 {
                for j in 0..3 {
                    prob[[0, i, j]] = 1.0;
                }
            }
            let loss = dice_loss(&prob, &target, None).unwrap();
            let expect = 1.0 - 2.0 / (k as f64 + 2.0);
            assert!((loss - expect).abs() < 1e-12, "k = {k}");
        }
    }

    #[test]
    fn dice_all_background_is_zero() {
        let target = Array2::zeros((4, 4));
        let mut prob = Array3::zeros((2, 4, 4));
        for i in 0..4 {
            for j in 0..4 {
                prob[[0, i, j]] = 1.0;
            }
        }
        assert_eq!(dice_loss(&prob, &target, None).unwrap(), 0.0);
    }

    #[test]
    fn consistency_matches_pixel_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..30 {
            let mut prob = Array3::zeros((2, 4, 4));
            let mut labels = Array2::zeros((4, 4));
            let mut valid = Array2::from_elem((4, 4), false);
            for i in 0..4 {
                for j in 0..4 {
                    let p: f64 = rng.random_range(0.0..1.0);
                    prob[[1, i, j]] = p;
                    prob[[0, i, j]] = 1.0 - p;
                    labels[[i, j]] = u8::from(rng.random_bool(0.4));
                    valid[[i, j]] = rng.random_bool(0.7);
                }
            }
            let pseudo = PseudoLabel {
                labels: labels.clone(),
                valid: valid.clone(),
                keep_fraction: 0.7,
            };
            let loss = consistency_loss(&prob, &pseudo).unwrap();

            // Brute-force counting of the smoothed Dice terms.
            let mut inter = 0.0;
            let mut psum = 0.0;
            let mut ysum = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    if !valid[[i, j]] {
                        continue;
                    }
                    psum += prob[[1, i, j]];
                    if labels[[i, j]] == 1 {
                        ysum += 1.0;
                        inter += prob[[1, i, j]];
                    }
                }
            }
            let expect = 1.0 - (2.0 * inter + 2.0) / (psum + ysum + 2.0);
            assert!((loss - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn consistency_empty_support_is_zero_with_zero_gradient() {
        let mut prob_arr = Array3::zeros((2, 4, 4));
        prob_arr.fill(0.5);
        let pseudo = PseudoLabel {
            labels: Array2::zeros((4, 4)),
            valid: Array2::from_elem((4, 4), false),
            keep_fraction: 0.0,
        };
        let tape = Tape::new();
        let prob = tape.leaf(prob_arr.into_dyn());
        let loss = consistency_loss_var(&prob, &pseudo).unwrap();
        assert_eq!(loss.scalar_value(), 0.0);
        let grads = loss.backward();
        assert!(grads.get(&prob).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn consistency_rejects_misaligned_shapes() {
        let prob = Array3::zeros((2, 4, 4));
        let pseudo = PseudoLabel {
            labels: Array2::zeros((3, 3)),
            valid: Array2::from_elem((3, 3), true),
            keep_fraction: 1.0,
        };
        assert!(consistency_loss(&prob, &pseudo).is_err());
    }

    proptest! {
        #[test]
        fn entropy_within_bounds(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = rng.random_range(2usize..5);
            let mut prob = Array3::zeros((c, 3, 3));
            for i in 0..3 {
                for j in 0..3 {
                    let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.01..1.0)).collect();
                    let z: f64 = raw.iter().sum();
                    for (k, r) in raw.iter().enumerate() {
                        prob[[k, i, j]] = r / z;
                    }
                }
            }
            let ent = pixel_entropy(&prob).unwrap();
            for &e in ent.iter() {
                prop_assert!(e >= 0.0);
                prop_assert!(e <= (c as f64).ln() + 1e-12);
            }
        }

        #[test]
        fn dice_stays_in_unit_interval(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut prob = Array3::zeros((2, 4, 4));
            let mut target = Array2::zeros((4, 4));
            for i in 0..4 {
                for j in 0..4 {
                    let p: f64 = rng.random_range(0.0..1.0);
                    prob[[1, i, j]] = p;
                    prob[[0, i, j]] = 1.0 - p;
                    target[[i, j]] = u8::from(rng.random_bool(0.5));
                }
            }
            let loss = dice_loss(&prob, &target, None).unwrap();
            prop_assert!((0.0..=1.0).contains(&loss));
        }

        #[test]
        fn pseudo_labels_are_permutation_equivariant(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (h, w) = (4, 4);
            let mut prob = Array3::zeros((2, h, w));
            for i in 0..h {
                for j in 0..w {
                    // Distinct confidence per pixel avoids tie-break effects.
                    let p = 0.5 + 0.49 * ((i * w + j) as f64 + 1.0)
                        / (h * w) as f64
                        * rng.random_range(0.5..1.0);
                    prob[[1, i, j]] = p;
                    prob[[0, i, j]] = 1.0 - p;
                }
            }
            let base = make_pseudo_labels(&prob, 0.5);

            // Reverse the pixel order (a permutation) and re-run.
            let mut permuted = Array3::zeros((2, h, w));
            for i in 0..h {
                for j in 0..w {
                    let flat = h * w - 1 - (i * w + j);
                    permuted[[0, i, j]] = prob[[0, flat / w, flat % w]];
                    permuted[[1, i, j]] = prob[[1, flat / w, flat % w]];
                }
            }
            let perm = make_pseudo_labels(&permuted, 0.5);
            for i in 0..h {
                for j in 0..w {
                    let flat = h * w - 1 - (i * w + j);
                    prop_assert_eq!(perm.valid[[i, j]], base.valid[[flat / w, flat % w]]);
                    prop_assert_eq!(perm.labels[[i, j]], base.labels[[flat / w, flat % w]]);
                }
            }
        }
    }
}
