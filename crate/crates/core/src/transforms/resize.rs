use crate::error::{validation, Result};
use crate::image::Image;

/// Bilinear resampling with half-pixel centres (`align_corners = false`).
///
/// Same-size requests return an exact copy.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Image {
    let (c, h, w) = img.shape();
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = taps(h, out_h);
    let xs = taps(w, out_w);
    let mut out = Image::zeros(c, out_h, out_w);
    for ch in 0..c {
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = img.get(ch, y0, x0) * (1.0 - fx) + img.get(ch, y0, x1) * fx;
                let bottom = img.get(ch, y1, x0) * (1.0 - fx) + img.get(ch, y1, x1) * fx;
                out.set(ch, oy, ox, top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

fn check_side(target_side: usize) -> Result<()> {
    if target_side < 8 {
        return Err(validation(format!(
            "working resolution {target_side} below the minimum of 8"
        )));
    }
    Ok(())
}

/// Runs `inner` once at `target_side × target_side` and resamples the result
/// back to the input resolution.
pub fn at_resolution(
    x: &Image,
    target_side: usize,
    inner: impl FnOnce(Image) -> Result<Image>,
) -> Result<Image> {
    let mut out = at_resolution_batch(std::slice::from_ref(x), target_side, |v| {
        let img = v.into_iter().next().expect("one image");
        Ok(vec![inner(img)?])
    })?;
    Ok(out.remove(0))
}

/// Batched form of [`at_resolution`]: `inner` sees every image at once.
pub fn at_resolution_batch(
    images: &[Image],
    target_side: usize,
    inner: impl FnOnce(Vec<Image>) -> Result<Vec<Image>>,
) -> Result<Vec<Image>> {
    check_side(target_side)?;
    let small: Vec<Image> = images
        .iter()
        .map(|img| resize_bilinear(img, target_side, target_side))
        .collect();
    let processed = inner(small)?;
    if processed.len() != images.len() {
        return Err(validation("inner operation changed the number of images"));
    }
    Ok(processed
        .iter()
        .zip(images)
        .map(|(p, orig)| resize_bilinear(p, orig.height(), orig.width()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_exact_copy() {
        let img = Image::new(1, 2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(resize_bilinear(&img, 2, 2), img);
    }

    #[test]
    fn constant_stays_constant() {
        let img = Image::filled(3, 9, 7, 0.25);
        let r = resize_bilinear(&img, 4, 13);
        assert!(r.data().iter().all(|v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn downsample_by_two_averages_pairs() {
        let img = Image::new(1, 1, 4, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let r = resize_bilinear(&img, 1, 2);
        assert_eq!(r.data(), &[0.5, 2.5]);
    }

    #[test]
    fn identity_inner_at_native_resolution_is_exact() {
        let img = Image::new(1, 8, 8, (0..64).map(|i| i as f32 / 64.0).collect()).unwrap();
        let out = at_resolution(&img, 8, Ok).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn round_trip_preserves_shape_and_calls_once() {
        let img = Image::filled(1, 224, 224, 0.5);
        let mut calls = 0;
        let out = at_resolution(&img, 32, |x| {
            calls += 1;
            assert_eq!(x.shape(), (1, 32, 32));
            Ok(x)
        })
        .unwrap();
        assert_eq!(calls, 1);
        assert_eq!(out.shape(), (1, 224, 224));
    }

    #[test]
    fn tiny_targets_rejected() {
        assert!(at_resolution(&Image::zeros(1, 16, 16), 4, Ok).is_err());
    }
}
