//! Small signal-processing helpers shared by every stage: windows, 1-D and
//! 2-D smoothing, parabolic peak refinement and decibel conversion.

use ndarray::Array2;

/// Magnitudes below this value are clamped before taking a logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

/// `20 log10(x)` with the magnitude clamped to [`LOG_FLOOR`].
#[inline]
pub fn db(x: f64) -> f64 {
    20.0 * x.max(LOG_FLOOR).log10()
}

/// Symmetric Hann window of length `n` (both end points are zero for `n > 1`).
pub fn hann(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![1.0],
        _ => {
            let m = (n - 1) as f64;
            (0..n)
                .map(|k| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * k as f64 / m).cos()))
                .collect()
        }
    }
}

/// Scales `w` so that it sums to one.
pub fn unit_sum(mut w: Vec<f64>) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    if s != 0.0 {
        w.iter_mut().for_each(|v| *v /= s);
    }
    w
}

/// Gaussian kernel truncated at `half_width` taps on each side, normalized to unit sum.
pub fn gaussian_kernel(sigma: f64, half_width: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..=2 * half_width)
        .map(|k| {
            let d = k as f64 - half_width as f64;
            (-0.5 * d * d / (sigma * sigma)).exp()
        })
        .collect();
    unit_sum(w)
}

/// Gaussian kernel truncated at `ceil(3 sigma)` taps on each side.
pub fn gaussian_kernel_3sigma(sigma: f64) -> Vec<f64> {
    gaussian_kernel(sigma, (3.0 * sigma).ceil().max(1.0) as usize)
}

/// Centered convolution where taps falling outside the signal are dropped and
/// the remaining weights renormalized. Constant inputs stay constant.
pub fn smooth_renormalized(x: &[f64], kernel: &[f64]) -> Vec<f64> {
    let n = x.len();
    let half = (kernel.len() / 2) as isize;
    (0..n as isize)
        .map(|i| {
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for (k, &w) in kernel.iter().enumerate() {
                let j = i + k as isize - half;
                if j >= 0 && (j as usize) < n {
                    acc += w * x[j as usize];
                    wsum += w;
                }
            }
            if wsum > 0.0 {
                acc / wsum
            } else {
                0.0
            }
        })
        .collect()
}

/// Centered convolution with nearest-neighbour padding at both ends.
pub fn smooth_clamped(x: &[f64], kernel: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let half = (kernel.len() / 2) as isize;
    (0..n as isize)
        .map(|i| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, &w)| {
                    let j = (i + k as isize - half).clamp(0, n as isize - 1) as usize;
                    w * x[j]
                })
                .sum()
        })
        .collect()
}

/// Centered convolution with zero padding at both ends.
pub fn smooth_zero_padded(x: &[f64], kernel: &[f64]) -> Vec<f64> {
    let n = x.len();
    let half = (kernel.len() / 2) as isize;
    (0..n as isize)
        .map(|i| {
            let mut acc = 0.0;
            for (k, &w) in kernel.iter().enumerate() {
                let j = i + k as isize - half;
                if j >= 0 && (j as usize) < n {
                    acc += w * x[j as usize];
                }
            }
            acc
        })
        .collect()
}

/// Separable 2-D smoothing of a `rows x cols` matrix with zero padding.
/// `row_kernel` runs along axis 0, `col_kernel` along axis 1.
pub fn smooth_2d_zero_padded(m: &Array2<f64>, row_kernel: &[f64], col_kernel: &[f64]) -> Array2<f64> {
    let (rows, cols) = m.dim();
    let mut tmp = Array2::<f64>::zeros((rows, cols));
    let ch = (col_kernel.len() / 2) as isize;
    for r in 0..rows {
        let src = m.row(r);
        let mut dst = tmp.row_mut(r);
        for c in 0..cols as isize {
            let mut acc = 0.0;
            for (k, &w) in col_kernel.iter().enumerate() {
                let j = c + k as isize - ch;
                if j >= 0 && (j as usize) < cols {
                    acc += w * src[j as usize];
                }
            }
            dst[c as usize] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((rows, cols));
    let rh = (row_kernel.len() / 2) as isize;
    for r in 0..rows as isize {
        let mut dst = out.row_mut(r as usize);
        for (k, &w) in row_kernel.iter().enumerate() {
            let j = r + k as isize - rh;
            if j >= 0 && (j as usize) < rows {
                dst.scaled_add(w, &tmp.row(j as usize));
            }
        }
    }
    out
}

/// Vertex offset of the parabola through `(-1, a)`, `(0, b)`, `(1, c)`.
/// Returns 0 for a degenerate (flat) parabola.
#[inline]
pub fn parabolic_offset(a: f64, b: f64, c: f64) -> f64 {
    let den = a - 2.0 * b + c;
    if den == 0.0 {
        0.0
    } else {
        0.5 * (a - c) / den
    }
}

/// Linear-interpolated quantile (`q` in `[0, 1]`) of an unsorted slice.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = pos - lo as f64;
    v[lo] * (1.0 - t) + v[hi] * t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hann_is_symmetric_with_unit_peak() {
        let w = hann(41);
        assert_eq!(w.len(), 41);
        assert_eq!(w[0], 0.0);
        assert!((w[20] - 1.0).abs() < 1e-15);
        for k in 0..41 {
            assert!((w[k] - w[40 - k]).abs() < 1e-15);
        }
    }

    #[test]
    fn renormalized_smoothing_keeps_constants() {
        let k = unit_sum(hann(33));
        let y = smooth_renormalized(&[4.0; 10], &k);
        assert!(y.iter().all(|v| (v - 4.0).abs() < 1e-12));
    }

    #[test]
    fn clamped_smoothing_keeps_constants() {
        let k = gaussian_kernel_3sigma(2.8);
        let y = smooth_clamped(&[-2.5; 7], &k);
        assert!(y.iter().all(|v| (v + 2.5).abs() < 1e-12));
    }

    #[test]
    fn parabola_vertex() {
        assert_eq!(parabolic_offset(1.0, 3.0, 1.0), 0.0);
        assert!((parabolic_offset(1.0, 3.0, 2.0) - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn zero_padded_2d_preserves_interior_mass() {
        let mut m = Array2::zeros((30, 30));
        m[[15, 15]] = 2.0;
        let g = gaussian_kernel(3.0, 5);
        let s = smooth_2d_zero_padded(&m, &g, &g);
        assert!((s.sum() - 2.0).abs() < 1e-12);
        assert!(s.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn quantiles() {
        let v = [4.0, 1.0, 3.0, 2.0, 5.0];
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert_eq!(quantile(&v, 0.25), 2.0);
        assert_eq!(quantile(&[], 0.5), 0.0);
    }
}
