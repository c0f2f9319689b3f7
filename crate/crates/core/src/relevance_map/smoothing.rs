use ndarray::Array2;

use super::{normalize, MapError, RelevanceMap, Smoothing};

/// Normalized 1-D Gaussian taps truncated at `4σ` (radius `⌊4σ + 0.5⌋`).
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma + 0.5) as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Mirror index with edge repetition: `d c b a | a b c d | d c b a`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn blur_axis(src: &Array2<f64>, kernel: &[f64], along_rows: bool) -> Array2<f64> {
    let radius = (kernel.len() / 2) as isize;
    let (rows, cols) = src.dim();
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, w)| {
                let off = k as isize - radius;
                let v = if along_rows {
                    src[[reflect(r as isize + off, rows), c]]
                } else {
                    src[[r, reflect(c as isize + off, cols)]]
                };
                w * v
            })
            .sum()
    })
}

/// Separable Gaussian blur (mirror padding), then `factor × factor` block means
/// (ragged edge blocks average the cells they have), then min–max renormalization.
///
/// `sigma == 0` skips the blur.
pub fn smooth_and_downsample(
    map: &RelevanceMap,
    sigma: f64,
    factor: usize,
) -> Result<RelevanceMap, MapError> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(MapError::InvalidSmoothing(format!("sigma {sigma}")));
    }
    if factor == 0 {
        return Err(MapError::InvalidSmoothing("downsample factor 0".into()));
    }
    let (rows, cols) = map.values.dim();
    if factor > rows || factor > cols {
        return Err(MapError::FactorTooLarge { factor, rows, cols });
    }

    let blurred = if sigma > 0.0 {
        let kernel = gaussian_kernel(sigma);
        // columns first, then rows
        blur_axis(&blur_axis(&map.values, &kernel, false), &kernel, true)
    } else {
        map.values.clone()
    };

    let (out_rows, out_cols) = (rows.div_ceil(factor), cols.div_ceil(factor));
    let mut pooled = Array2::from_shape_fn((out_rows, out_cols), |(r, c)| {
        let rs = r * factor..((r + 1) * factor).min(rows);
        let cs = c * factor..((c + 1) * factor).min(cols);
        let n = (rs.len() * cs.len()) as f64;
        let mut sum = 0.0;
        for rr in rs {
            for cc in cs.clone() {
                sum += blurred[[rr, cc]];
            }
        }
        sum / n
    });
    normalize(&mut pooled);

    let mut provenance = map.provenance.clone();
    provenance.smoothing = Some(Smoothing {
        sigma,
        downsample_factor: factor,
    });
    Ok(RelevanceMap {
        values: pooled,
        normalized: true,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn reflect_repeats_edges() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(idx, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
        assert_eq!(reflect(-1, 1), 0);
        assert_eq!(reflect(5, 1), 0);
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel(1.0);
        assert_eq!(k.len(), 9);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..k.len() {
            assert_eq!(k[i], k[k.len() - 1 - i]);
        }
    }

    #[test]
    fn identity_when_sigma_zero_and_factor_one() {
        let m = RelevanceMap::normalized(array![[0.0, 0.2, 1.0], [0.4, 0.5, 0.6]]);
        let out = smooth_and_downsample(&m, 0.0, 1).unwrap();
        assert_eq!(out.values, m.values);
    }

    #[test]
    fn uniform_map_stays_uniform() {
        let m = RelevanceMap::new(Array2::from_elem((6, 5), 0.3));
        let out = smooth_and_downsample(&m, 1.0, 2).unwrap();
        assert_eq!(out.values.dim(), (3, 3));
        assert!(out.values.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn ragged_blocks_average_available_cells() {
        let m = RelevanceMap::new(array![[0.0, 0.0, 3.0], [0.0, 4.0, 9.0], [6.0, 6.0, 12.0]]);
        let out = smooth_and_downsample(&m, 0.0, 2).unwrap();
        // block means: 1, 6, 6, 12 -> normalized by (v - 1) / 11
        let expected = array![[0.0, 5.0 / 11.0], [5.0 / 11.0, 1.0]];
        for (a, b) in out.values.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn factor_larger_than_map_is_rejected() {
        let m = RelevanceMap::new(Array2::zeros((3, 8)));
        assert!(matches!(
            smooth_and_downsample(&m, 1.0, 4),
            Err(MapError::FactorTooLarge { .. })
        ));
    }

    fn mirror(mut i: isize, n: usize) -> usize {
        let n = n as isize;
        while i < 0 || i >= n {
            i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
        }
        i as usize
    }

    /// Dense 2-D convolution with the outer-product kernel, mirror padding.
    fn dense_blur(src: &Array2<f64>, sigma: f64) -> Array2<f64> {
        let radius = (4.0 * sigma + 0.5) as isize;
        let (rows, cols) = src.dim();
        let mut weights = Vec::new();
        let mut total = 0.0;
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let w = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                total += w;
                weights.push((dy, dx, w));
            }
        }
        Array2::from_shape_fn((rows, cols), |(r, c)| {
            weights
                .iter()
                .map(|&(dy, dx, w)| {
                    let rr = mirror(r as isize + dy, rows);
                    let cc = mirror(c as isize + dx, cols);
                    src[[rr, cc]] * w / total
                })
                .sum()
        })
    }

    #[test]
    fn impulse_matches_dense_convolution() {
        let mut src = Array2::zeros((9, 9));
        src[[4, 4]] = 1.0;
        let m = RelevanceMap::new(src.clone());
        let out = smooth_and_downsample(&m, 1.0, 1).unwrap();
        let mut expected = dense_blur(&src, 1.0);
        normalize(&mut expected);
        for (a, b) in out.values.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn off_center_impulse_matches_dense_convolution_near_border() {
        let mut src = Array2::zeros((7, 10));
        src[[0, 8]] = 1.0;
        src[[5, 1]] = 0.5;
        let out = smooth_and_downsample(&RelevanceMap::new(src.clone()), 1.5, 1).unwrap();
        let mut expected = dense_blur(&src, 1.5);
        normalize(&mut expected);
        for (a, b) in out.values.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
