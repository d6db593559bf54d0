//! Input-space domain alignment: Fourier amplitude swapping and histogram
//! matching.
//!
//! Both techniques restyle a source image toward a target image without any
//! learned parameters. The Fourier route decomposes each image into an
//! amplitude spectrum (style: texture, intensity) and a phase spectrum
//! (structure: layout, edges), swaps the low-frequency amplitude block, and
//! reconstructs. Histogram matching aligns the intensity distributions via
//! their CDFs.
//!
//! The whole module uses one frequency-centering convention: the
//! zero-frequency (DC) term sits at grid position `(h/2, w/2)`, so "central
//! low-frequency" is literal.

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StyleError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("beta must lie in [0, 1], got {0}")]
    InvalidBeta(f64),
    #[error("histogram matching needs at least 2 bins, got {0}")]
    InvalidBins(usize),
    #[error("empty image")]
    EmptyImage,
}

/// Amplitude and phase grids of one image, DC term at the grid center.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    /// Non-negative magnitude of each frequency component.
    pub amplitude: Array2<f64>,
    /// Argument of each component, in `(-pi, pi]`.
    pub phase: Array2<f64>,
}

/// Binary mask selecting the centered low-frequency rectangle.
#[derive(Debug, Clone)]
pub struct FrequencyMask {
    pub mask: Array2<f64>,
    pub beta: f64,
}

fn fft_2d(data: &mut Array2<Complex<f64>>, inverse: bool) {
    let (h, w) = data.dim();
    let mut planner = FftPlanner::new();
    let row_fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    for mut row in data.rows_mut() {
        row_fft.process(row.as_slice_mut().expect("row-major layout"));
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut col = vec![Complex::default(); h];
    for j in 0..w {
        for i in 0..h {
            col[i] = data[[i, j]];
        }
        col_fft.process(&mut col);
        for i in 0..h {
            data[[i, j]] = col[i];
        }
    }
}

/// Moves DC from `(0, 0)` to `(h/2, w/2)` (forward) or back (inverse).
fn shift_grid<T: Copy + Default>(grid: &Array2<T>, inverse: bool) -> Array2<T> {
    let (h, w) = grid.dim();
    let (dr, dc) = if inverse {
        (h - h / 2, w - w / 2)
    } else {
        (h / 2, w / 2)
    };
    let mut out = Array2::default((h, w));
    for i in 0..h {
        for j in 0..w {
            out[[(i + dr) % h, (j + dc) % w]] = grid[[i, j]];
        }
    }
    out
}

/// Decomposes an image into centered amplitude and phase spectra.
pub fn fft_decompose(image: &Array2<f64>) -> SpectralDecomposition {
    let mut freq = image.mapv(|v| Complex::new(v, 0.0));
    fft_2d(&mut freq, false);
    let freq = shift_grid(&freq, false);
    let amplitude = freq.mapv(|z| z.norm());
    let phase = freq.mapv(|z| {
        let p = z.arg();
        // atan2 can return -pi; fold it onto the (-pi, pi] convention.
        if p == -std::f64::consts::PI {
            std::f64::consts::PI
        } else {
            p
        }
    });
    SpectralDecomposition { amplitude, phase }
}

/// Reconstructs the image from a spectral decomposition, clamped to `[0, 1]`.
pub fn fft_compose(spec: &SpectralDecomposition) -> Result<Array2<f64>, StyleError> {
    if spec.amplitude.dim() != spec.phase.dim() {
        return Err(StyleError::ShapeMismatch(
            spec.amplitude.dim(),
            spec.phase.dim(),
        ));
    }
    let (h, w) = spec.amplitude.dim();
    let mut freq = Array2::default((h, w));
    for i in 0..h {
        for j in 0..w {
            freq[[i, j]] = Complex::from_polar(spec.amplitude[[i, j]], spec.phase[[i, j]]);
        }
    }
    let mut freq = shift_grid(&freq, true);
    fft_2d(&mut freq, true);
    let scale = 1.0 / (h * w) as f64;
    Ok(freq.mapv(|z| (z.re * scale).clamp(0.0, 1.0)))
}

/// Builds the centered low-frequency rectangle with half-extents
/// `floor(beta * h / 2)` and `floor(beta * w / 2)`.
///
/// `beta = 0` yields the empty mask; any positive `beta` includes at least
/// the center row and column.
pub fn build_lowfreq_mask(h: usize, w: usize, beta: f64) -> Result<FrequencyMask, StyleError> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(StyleError::InvalidBeta(beta));
    }
    let mut mask = Array2::zeros((h, w));
    if beta > 0.0 {
        let he = (beta * h as f64 / 2.0).floor() as i64;
        let we = (beta * w as f64 / 2.0).floor() as i64;
        let (ch, cw) = (h as i64 / 2, w as i64 / 2);
        for i in 0..h as i64 {
            for j in 0..w as i64 {
                if (i - ch).abs() <= he && (j - cw).abs() <= we {
                    mask[[i as usize, j as usize]] = 1.0;
                }
            }
        }
    }
    Ok(FrequencyMask { mask, beta })
}

/// Blends the target amplitude into the source's masked low-frequency region;
/// the source phase passes through untouched.
pub fn blend_amplitude(
    src: &SpectralDecomposition,
    tgt: &SpectralDecomposition,
    mask: &FrequencyMask,
) -> Result<SpectralDecomposition, StyleError> {
    if src.amplitude.dim() != tgt.amplitude.dim() {
        return Err(StyleError::ShapeMismatch(
            src.amplitude.dim(),
            tgt.amplitude.dim(),
        ));
    }
    if src.amplitude.dim() != mask.mask.dim() {
        return Err(StyleError::ShapeMismatch(src.amplitude.dim(), mask.mask.dim()));
    }
    let amplitude = &src.amplitude * &(1.0 - &mask.mask) + &tgt.amplitude * &mask.mask;
    Ok(SpectralDecomposition {
        amplitude,
        phase: src.phase.clone(),
    })
}

/// Renders `src` in the low-frequency style of `tgt` while keeping the
/// source structure (phase) intact.
pub fn fft_style_transfer(
    src: &Array2<f64>,
    tgt: &Array2<f64>,
    beta: f64,
) -> Result<Array2<f64>, StyleError> {
    if src.dim() != tgt.dim() {
        return Err(StyleError::ShapeMismatch(src.dim(), tgt.dim()));
    }
    let (h, w) = src.dim();
    let mask = build_lowfreq_mask(h, w, beta)?;
    let blended = blend_amplitude(&fft_decompose(src), &fft_decompose(tgt), &mask)?;
    fft_compose(&blended)
}

fn bin_of(v: f64, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

/// Maps the intensity distribution of `src` onto that of `tgt` via their
/// discrete CDFs over `bins` intensity bins.
///
/// Each source bin maps to the smallest target bin whose CDF reaches the
/// source CDF (compared with exact integer arithmetic), and pixels take the
/// mean target intensity of the matched bin, so a constant target collapses
/// the output exactly onto that constant.
pub fn histogram_match(
    src: &Array2<f64>,
    tgt: &Array2<f64>,
    bins: usize,
) -> Result<Array2<f64>, StyleError> {
    if bins < 2 {
        return Err(StyleError::InvalidBins(bins));
    }
    if src.is_empty() || tgt.is_empty() {
        return Err(StyleError::EmptyImage);
    }
    let mut src_counts = vec![0u64; bins];
    for &v in src.iter() {
        src_counts[bin_of(v, bins)] += 1;
    }
    let mut tgt_counts = vec![0u64; bins];
    // Mean of each bin as first + mean deviation, so a bin of identical
    // values reproduces that value bit-exactly.
    let mut tgt_first = vec![0.0f64; bins];
    let mut tgt_dev = vec![0.0f64; bins];
    for &v in tgt.iter() {
        let b = bin_of(v, bins);
        if tgt_counts[b] == 0 {
            tgt_first[b] = v;
        }
        tgt_dev[b] += v - tgt_first[b];
        tgt_counts[b] += 1;
    }
    let representative: Vec<f64> = (0..bins)
        .map(|b| {
            if tgt_counts[b] > 0 {
                tgt_first[b] + tgt_dev[b] / tgt_counts[b] as f64
            } else {
                b as f64 / (bins - 1) as f64
            }
        })
        .collect();

    let n_src = src.len() as u128;
    let n_tgt = tgt.len() as u128;
    let mut mapping = vec![0usize; bins];
    let mut src_cum = 0u128;
    let mut tgt_cum = 0u128;
    let mut t = 0usize;
    for (k, &count) in src_counts.iter().enumerate() {
        src_cum += count as u128;
        // Smallest target bin whose CDF >= source CDF, cross-multiplied so
        // the comparison stays exact.
        while t + 1 < bins && (tgt_cum + tgt_counts[t] as u128) * n_src < src_cum * n_tgt {
            tgt_cum += tgt_counts[t] as u128;
            t += 1;
        }
        mapping[k] = t;
    }

    Ok(src.mapv(|v| representative[mapping[bin_of(v, bins)]]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..1.0))
    }

    fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn constant_image_has_dc_only_spectrum() {
        let c = 0.37;
        let img = Array2::from_elem((8, 6), c);
        let spec = fft_decompose(&img);
        let center = (4, 3);
        assert!((spec.amplitude[center] - c * 48.0).abs() < 1e-9);
        assert!(spec.phase[center].abs() < 1e-12);
        for ((i, j), &a) in spec.amplitude.indexed_iter() {
            if (i, j) != center {
                assert!(a < 1e-9, "stray amplitude {a} at ({i}, {j})");
            }
        }
    }

    #[test]
    fn decompose_compose_round_trip() {
        for seed in 0..5 {
            let img = random_image(16, 16, seed);
            let back = fft_compose(&fft_decompose(&img)).unwrap();
            assert!(max_abs_diff(&img, &back) < 1e-5);
        }
    }

    #[test]
    fn amplitude_invariant_under_cyclic_shift() {
        let img = random_image(12, 12, 7);
        let mut shifted = Array2::zeros((12, 12));
        for ((i, j), &v) in img.indexed_iter() {
            shifted[[(i + 3) % 12, (j + 5) % 12]] = v;
        }
        let a = fft_decompose(&img).amplitude;
        let b = fft_decompose(&shifted).amplitude;
        assert!(max_abs_diff(&a, &b) < 1e-9);
    }

    #[test]
    fn zero_amplitude_composes_to_zero() {
        let spec = SpectralDecomposition {
            amplitude: Array2::zeros((8, 8)),
            phase: random_image(8, 8, 1),
        };
        let img = fft_compose(&spec).unwrap();
        assert!(img.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn compose_rejects_shape_mismatch() {
        let spec = SpectralDecomposition {
            amplitude: Array2::zeros((8, 8)),
            phase: Array2::zeros((8, 4)),
        };
        assert!(matches!(
            fft_compose(&spec),
            Err(StyleError::ShapeMismatch(..))
        ));
    }

    #[test]
    fn mask_edge_betas() {
        let empty = build_lowfreq_mask(16, 16, 0.0).unwrap();
        assert_eq!(empty.mask.sum(), 0.0);
        let full = build_lowfreq_mask(16, 16, 1.0).unwrap();
        assert_eq!(full.mask.sum(), 256.0);
        assert!(build_lowfreq_mask(4, 4, 1.5).is_err());
    }

    #[test]
    fn mask_counts_match_brute_force() {
        // Independent enumeration of |u - 8| <= 2 && |v - 8| <= 2.
        let m = build_lowfreq_mask(16, 16, 0.25).unwrap();
        let mut expected = 0;
        for u in 0i64..16 {
            for v in 0i64..16 {
                if (u - 8).abs() <= 2 && (v - 8).abs() <= 2 {
                    expected += 1;
                    assert_eq!(m.mask[[u as usize, v as usize]], 1.0);
                }
            }
        }
        assert_eq!(expected, 25);
        assert_eq!(m.mask.sum(), 25.0);
    }

    #[test]
    fn mask_symmetric_about_dc_center() {
        // 180-degree rotation of the frequency plane maps index i to
        // (2c - i) mod n about the DC bin c; the mask must be invariant.
        for (h, w, beta) in [(16, 16, 0.25), (15, 9, 0.4), (8, 12, 0.77)] {
            let m = build_lowfreq_mask(h, w, beta).unwrap();
            let (ch, cw) = (h as i64 / 2, w as i64 / 2);
            for i in 0..h as i64 {
                for j in 0..w as i64 {
                    let ri = (2 * ch - i).rem_euclid(h as i64) as usize;
                    let rj = (2 * cw - j).rem_euclid(w as i64) as usize;
                    assert_eq!(m.mask[[i as usize, j as usize]], m.mask[[ri, rj]]);
                }
            }
        }
    }

    #[test]
    fn style_transfer_beta_zero_is_identity() {
        let src = random_image(16, 16, 2);
        let tgt = random_image(16, 16, 3);
        let out = fft_style_transfer(&src, &tgt, 0.0).unwrap();
        assert!(max_abs_diff(&src, &out) < 1e-5);
    }

    #[test]
    fn style_transfer_with_self_is_identity() {
        let src = random_image(16, 16, 4);
        for beta in [0.1, 0.5, 1.0] {
            let out = fft_style_transfer(&src, &src, beta).unwrap();
            assert!(max_abs_diff(&src, &out) < 1e-5);
        }
    }

    #[test]
    fn style_transfer_rejects_shape_mismatch() {
        let src = random_image(16, 16, 5);
        let tgt = random_image(8, 8, 6);
        assert!(matches!(
            fft_style_transfer(&src, &tgt, 0.1),
            Err(StyleError::ShapeMismatch(..))
        ));
    }

    #[test]
    fn style_transfer_blends_dc_toward_target() {
        // Structured source, constant target: the DC coefficient of the
        // output must equal the target's DC term (the mask always covers
        // DC for beta > 0) while the strongest edge stays where it was.
        let mut src = Array2::from_elem((16, 16), 0.2);
        for i in 0..16 {
            for j in 8..16 {
                src[[i, j]] = 0.8;
            }
        }
        let c = 0.55;
        let tgt = Array2::from_elem((16, 16), c);
        let out = fft_style_transfer(&src, &tgt, 0.1).unwrap();

        let dc_out = fft_decompose(&out).amplitude[[8, 8]];
        let dc_tgt = c * 256.0;
        assert!(
            (dc_out - dc_tgt).abs() < 1e-6 * dc_tgt,
            "dc {dc_out} vs analytic blend {dc_tgt}"
        );
        // Largest horizontal jump still sits on the source's edge column.
        let edge = (0..16)
            .map(|j| (out[[8, j.max(1)]] - out[[8, j.max(1) - 1]]).abs())
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0;
        assert_eq!(edge, 8);
    }

    #[test]
    fn blend_preserves_phase_bit_exactly() {
        let src = fft_decompose(&random_image(16, 16, 8));
        let tgt = fft_decompose(&random_image(16, 16, 9));
        let mask = build_lowfreq_mask(16, 16, 0.3).unwrap();
        let blended = blend_amplitude(&src, &tgt, &mask).unwrap();
        assert!(blended
            .phase
            .iter()
            .zip(src.phase.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn histogram_self_match_within_bin_width() {
        let src = random_image(24, 24, 10);
        let out = histogram_match(&src, &src, 256).unwrap();
        assert!(max_abs_diff(&src, &out) <= 1.0 / 256.0 + 1e-12);
    }

    #[test]
    fn histogram_constant_target_collapses_exactly() {
        let src = random_image(16, 16, 11);
        let c = 0.31;
        let tgt = Array2::from_elem((16, 16), c);
        let out = histogram_match(&src, &tgt, 256).unwrap();
        assert!(out.iter().all(|&v| v == c));
    }

    #[test]
    fn histogram_two_level_mapping_is_exact() {
        // Hand-computed CDFs: both distributions are 50/50 two-level, so the
        // low level maps to 0.25 and the high level to 0.75 exactly.
        let mut src = Array2::zeros((10, 10));
        let mut tgt = Array2::zeros((10, 10));
        for j in 0..10 {
            for i in 0..5 {
                src[[i, j]] = 0.0;
                tgt[[i, j]] = 0.25;
            }
            for i in 5..10 {
                src[[i, j]] = 1.0;
                tgt[[i, j]] = 0.75;
            }
        }
        let out = histogram_match(&src, &tgt, 256).unwrap();
        for ((i, j), &v) in out.indexed_iter() {
            assert_eq!(v, if i < 5 { 0.25 } else { 0.75 }, "pixel ({i}, {j})");
        }
    }

    #[test]
    fn histogram_rejects_bad_inputs() {
        let img = random_image(4, 4, 12);
        assert!(matches!(
            histogram_match(&img, &img, 1),
            Err(StyleError::InvalidBins(1))
        ));
        let empty = Array2::zeros((0, 0));
        assert!(matches!(
            histogram_match(&empty, &img, 16),
            Err(StyleError::EmptyImage)
        ));
    }

    proptest! {
        #[test]
        fn round_trip_error_stays_small(seed in 0u64..500) {
            let img = random_image(8, 8, seed);
            let back = fft_compose(&fft_decompose(&img)).unwrap();
            prop_assert!(max_abs_diff(&img, &back) < 1e-5);
        }

        #[test]
        fn histogram_mapping_is_monotone(seed in 0u64..200) {
            let src = random_image(8, 8, seed);
            let tgt = random_image(8, 8, seed.wrapping_add(1));
            let out = histogram_match(&src, &tgt, 64).unwrap();
            // Sort pixels by source value; mapped values must be sorted too.
            let mut pairs: Vec<(f64, f64)> = src.iter().copied()
                .zip(out.iter().copied())
                .collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            for w in pairs.windows(2) {
                prop_assert!(w[0].1 <= w[1].1 + 1e-12);
            }
        }
    }
}
