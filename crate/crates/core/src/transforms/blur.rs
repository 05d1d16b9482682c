use crate::error::{validation, Result};
use crate::image::Image;

/// Standard deviation used for a Gaussian kernel of odd size `k`.
pub fn gaussian_sigma(k: usize) -> f64 {
    0.3 * ((k as f64 - 1.0) * 0.5 - 1.0) + 0.8
}

/// Normalized 1-D Gaussian weights of odd length `k`.
pub fn gaussian_kernel(k: usize) -> Vec<f64> {
    let sigma = gaussian_sigma(k);
    let half = (k / 2) as f64;
    let raw: Vec<f64> = (0..k)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

fn check_kernel(k: usize, img: &Image) -> Result<()> {
    if k < 3 || k % 2 == 0 {
        return Err(validation(format!("kernel size {k} must be odd and at least 3")));
    }
    let side = img.height().min(img.width());
    if k >= side {
        return Err(validation(format!(
            "kernel size {k} must be smaller than the image side {side}"
        )));
    }
    Ok(())
}

/// Mirror index without repeating the edge pixel (`dcb|abcd|cba`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i } else { 2 * (n - 1) - i };
    }
    i as usize
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_blur(img: &Image, k: usize) -> Result<Image> {
    check_kernel(k, img)?;
    let weights = gaussian_kernel(k);
    let half = (k / 2) as isize;
    let (c, h, w) = img.shape();
    let mut tmp = Image::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let acc: f64 = weights
                    .iter()
                    .enumerate()
                    .map(|(i, wt)| {
                        wt * img.get(ch, y, reflect(x as isize + i as isize - half, w)) as f64
                    })
                    .sum();
                tmp.set(ch, y, x, acc as f32);
            }
        }
    }
    let mut out = Image::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let acc: f64 = weights
                    .iter()
                    .enumerate()
                    .map(|(i, wt)| {
                        wt * tmp.get(ch, reflect(y as isize + i as isize - half, h), x) as f64
                    })
                    .sum();
                out.set(ch, y, x, acc as f32);
            }
        }
    }
    Ok(out)
}

/// Per-channel `k × k` median with reflected borders.
pub fn median_blur(img: &Image, k: usize) -> Result<Image> {
    check_kernel(k, img)?;
    let half = (k / 2) as isize;
    let (c, h, w) = img.shape();
    let mut out = Image::zeros(c, h, w);
    let mut window = Vec::with_capacity(k * k);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                window.clear();
                for dy in -half..=half {
                    for dx in -half..=half {
                        let sy = reflect(y as isize + dy, h);
                        let sx = reflect(x as isize + dx, w);
                        window.push(img.get(ch, sy, sx));
                    }
                }
                let mid = window.len() / 2;
                let (_, m, _) = window.select_nth_unstable_by(mid, f32::total_cmp);
                out.set(ch, y, x, *m);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_are_normalized_and_symmetric() {
        for k in [3, 5, 7, 11, 31] {
            let g = gaussian_kernel(k);
            assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for i in 0..k {
                assert!((g[i] - g[k - 1 - i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn reflection_skips_edge() {
        let idx: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
    }

    #[test]
    fn constant_is_fixed_point() {
        let img = Image::filled(3, 8, 8, 0.4);
        assert_eq!(median_blur(&img, 3).unwrap(), img);
        let g = gaussian_blur(&img, 5).unwrap();
        assert!(g.max_abs_diff(&img) < 1e-6);
    }

    #[test]
    fn median_removes_isolated_spike() {
        let mut img = Image::zeros(1, 5, 5);
        img.set(0, 2, 2, 1.0);
        assert_eq!(median_blur(&img, 3).unwrap().get(0, 2, 2), 0.0);
    }

    #[test]
    fn invalid_kernels_rejected() {
        let img = Image::zeros(1, 5, 5);
        assert!(gaussian_blur(&img, 4).is_err());
        assert!(gaussian_blur(&img, 1).is_err());
        assert!(median_blur(&img, 5).is_err());
    }
}
