//! Small 2-D raster utilities: bilinear resampling and Gaussian smoothing.

use ndarray::Array2;

/// Bilinear resize with half-pixel centers and clamped borders.
/// A constant raster stays constant.
pub fn resize_bilinear(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.clone();
    }
    let axis = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let pos = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let lo = (pos.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, pos - lo as f64)
    };
    let cols: Vec<_> = (0..out_w).map(|x| axis(x, w, out_w)).collect();
    let mut out = Array2::zeros((out_h, out_w));
    for y in 0..out_h {
        let (y0, y1, fy) = axis(y, h, out_h);
        for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
            let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
            let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
            out[[y, x]] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

/// Normalized 1-D Gaussian kernel truncated at four standard deviations.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`), valid for any offset.
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn blur_axis(src: &Array2<f64>, kernel: &[f64], along_rows: bool) -> Array2<f64> {
    let (h, w) = src.dim();
    let radius = (kernel.len() / 2) as i64;
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &kv) in kernel.iter().enumerate() {
                let off = j as i64 - radius;
                acc += kv
                    * if along_rows {
                        src[[reflect(y as i64 + off, h), x]]
                    } else {
                        src[[y, reflect(x as i64 + off, w)]]
                    };
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Separable Gaussian blur with reflective borders. `sigma <= 0` returns the input unchanged.
/// Total mass is conserved.
pub fn gaussian_blur(src: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return src.clone();
    }
    let k = gaussian_kernel(sigma);
    let tmp = blur_axis(src, &k, false);
    blur_axis(&tmp, &k, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-4..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0]);
    }

    #[test]
    fn constant_survives_resize_and_blur() {
        let c = Array2::from_elem((7, 7), 2.5);
        let up = resize_bilinear(&c, 224, 224);
        assert!(up.iter().all(|&v| (v - 2.5).abs() < 1e-12));
        let b = gaussian_blur(&c, 4.0);
        assert!(b.iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn blur_conserves_mass_with_wide_kernel() {
        let src = Array2::from_shape_fn((5, 6), |(y, x)| ((y * 7 + x * 3) % 5) as f64);
        let total: f64 = src.sum();
        for sigma in [0.5, 1.0, 4.0, 9.0] {
            let out = gaussian_blur(&src, sigma);
            assert!((out.sum() - total).abs() <= 1e-9 * total, "sigma {sigma}");
        }
    }

    #[test]
    fn bilinear_midpoint() {
        let src = Array2::from_shape_vec((1, 2), vec![0.0, 1.0]).unwrap();
        let out = resize_bilinear(&src, 1, 4);
        let expect = [0.0, 0.25, 0.75, 1.0];
        for (a, b) in out.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
