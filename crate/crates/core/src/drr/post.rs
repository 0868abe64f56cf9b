//! Post-processing of rendered views: blur, side-by-side composition and
//! ruler-based scale normalization.

use super::image::{ImageMeta, RadiographImage, View};
use crate::error::{Error, Result};

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= sum);
    k
}

/// One separable pass along rows (`horizontal`) or columns. Written as
/// `center + Σ w (x - center)` so constant images are reproduced exactly.
fn blur_pass(src: &[f64], width: usize, height: usize, kernel: &[f64], horizontal: bool) -> Vec<f64> {
    let radius = (kernel.len() / 2) as i64;
    let mut out = vec![0.0; src.len()];
    for y in 0..height {
        for x in 0..width {
            let center = src[y * width + x];
            let mut acc = 0.0;
            for (t, &w) in kernel.iter().enumerate() {
                let off = t as i64 - radius;
                let (sx, sy) = if horizontal {
                    ((x as i64 + off).clamp(0, width as i64 - 1) as usize, y)
                } else {
                    (x, (y as i64 + off).clamp(0, height as i64 - 1) as usize)
                };
                acc += w * (src[sy * width + sx] - center);
            }
            out[y * width + x] = center + acc;
        }
    }
    out
}

/// Separable Gaussian blur truncated at ±3σ with replicated borders.
/// `sigma == 0` returns the input unchanged.
pub fn gaussian_blur(image: &RadiographImage, sigma: f64) -> Result<RadiographImage> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Param(format!("blur sigma {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let kernel = gaussian_kernel(sigma);
    let (w, h) = (image.width, image.height);
    let src: Vec<f64> = image.pixels.iter().map(|&v| v as f64).collect();
    let tmp = blur_pass(&src, w, h, &kernel, true);
    let out = blur_pass(&tmp, w, h, &kernel, false);
    let pixels = out.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
    RadiographImage::new(w, h, pixels, image.meta)
}

/// Places the AP view left of the ML view.
pub fn compose_views(ap: &RadiographImage, ml: &RadiographImage) -> Result<RadiographImage> {
    if ap.meta.view != View::Ap || ml.meta.view != View::Ml {
        return Err(Error::Composition(format!(
            "expected AP and ML, got {:?} and {:?}",
            ap.meta.view, ml.meta.view
        )));
    }
    if ap.height != ml.height {
        return Err(Error::Composition(format!(
            "heights differ: {} vs {}",
            ap.height, ml.height
        )));
    }
    if ap.meta.specimen_id != ml.meta.specimen_id {
        return Err(Error::Composition(format!(
            "specimens differ: {} vs {}",
            ap.meta.specimen_id, ml.meta.specimen_id
        )));
    }
    if ap.meta.pose != ml.meta.pose {
        return Err(Error::Composition("poses differ".into()));
    }
    let width = ap.width + ml.width;
    let mut pixels = Vec::with_capacity(width * ap.height);
    for y in 0..ap.height {
        pixels.extend_from_slice(&ap.pixels[y * ap.width..(y + 1) * ap.width]);
        pixels.extend_from_slice(&ml.pixels[y * ml.width..(y + 1) * ml.width]);
    }
    RadiographImage::new(
        width,
        ap.height,
        pixels,
        ImageMeta {
            specimen_id: ap.meta.specimen_id,
            view: View::Combined,
            pose: ap.meta.pose,
            scale: [ap.meta.scale[0], ml.meta.scale[1]],
        },
    )
}

/// Shrink coefficient that maps a ruler of `ruler_px` pixels onto
/// `target_px_per_mm · ruler_mm` pixels.
pub fn scale_coefficient(ruler_px: f64, ruler_mm: f64, target_px_per_mm: f64) -> Result<f64> {
    if !(ruler_px > 0.0) || !(ruler_mm > 0.0) || !(target_px_per_mm > 0.0) {
        return Err(Error::Param(format!(
            "ruler {ruler_px} px / {ruler_mm} mm, target {target_px_per_mm} px/mm"
        )));
    }
    let c = target_px_per_mm * ruler_mm / ruler_px;
    if c > 1.0 + 1e-12 {
        return Err(Error::UpscaleRequired { coefficient: c });
    }
    Ok(c.min(1.0))
}

/// The largest common pixel density reachable by shrinking only.
pub fn common_target(rulers_px: &[f64], ruler_mm: f64) -> Option<f64> {
    rulers_px
        .iter()
        .map(|&r| r / ruler_mm)
        .min_by(|a, b| a.total_cmp(b))
}

/// Shrinks the content of one single-view image about its center by `c`
/// and pads with background (0).
fn shrink(image: &RadiographImage, c: f64) -> Vec<f32> {
    let (w, h) = (image.width, image.height);
    if c == 1.0 {
        return image.pixels.clone();
    }
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut out = vec![0f32; w * h];
    // Area-averaging resampler: each output pixel integrates the source
    // footprint it covers (source pixels are 1/c output pixels wide).
    let inv = 1.0 / c;
    for oy in 0..h {
        let y0 = cy + (oy as f64 - cy) * inv;
        let y1 = y0 + inv;
        if y1 <= 0.0 || y0 >= h as f64 {
            continue;
        }
        for ox in 0..w {
            let x0 = cx + (ox as f64 - cx) * inv;
            let x1 = x0 + inv;
            if x1 <= 0.0 || x0 >= w as f64 {
                continue;
            }
            let mut acc = 0.0;
            for sy in y0.floor().max(0.0) as usize..(y1.ceil() as usize).min(h) {
                let fy = (y1.min(sy as f64 + 1.0) - y0.max(sy as f64)).max(0.0);
                for sx in x0.floor().max(0.0) as usize..(x1.ceil() as usize).min(w) {
                    let fx = (x1.min(sx as f64 + 1.0) - x0.max(sx as f64)).max(0.0);
                    acc += fx * fy * image.pixels[sy * w + sx] as f64;
                }
            }
            out[oy * w + ox] = (acc * c * c).clamp(0.0, 1.0) as f32;
        }
    }
    out
}

/// Rescales every image so its ruler measures `target_px_per_mm · ruler_mm`
/// pixels, keeping the frame size. Combined images are split and each half
/// is shrunk with its own coefficient; `ruler_px` then holds `[ap, ml]`
/// pairs flattened in order.
pub fn scale_normalize(
    images: &[RadiographImage],
    ruler_px: &[f64],
    ruler_mm: f64,
    target_px_per_mm: f64,
) -> Result<Vec<RadiographImage>> {
    let needed: usize = images
        .iter()
        .map(|im| if im.meta.view == View::Combined { 2 } else { 1 })
        .sum();
    if ruler_px.len() != needed {
        return Err(Error::Shape(format!(
            "{} ruler measurements for {needed} views",
            ruler_px.len()
        )));
    }
    let mut rulers = ruler_px.iter();
    let mut out = Vec::with_capacity(images.len());
    for im in images {
        match im.meta.view {
            View::Ap | View::Ml => {
                let c = scale_coefficient(*rulers.next().unwrap(), ruler_mm, target_px_per_mm)?;
                let mut meta = im.meta;
                meta.scale[if im.meta.view == View::Ap { 0 } else { 1 }] = c;
                out.push(RadiographImage::new(im.width, im.height, shrink(im, c), meta)?);
            }
            View::Combined => {
                let half = im.width / 2;
                let split = |offset: usize, view| {
                    let pixels = (0..im.height)
                        .flat_map(|y| im.pixels[y * im.width + offset..y * im.width + offset + half].iter().copied())
                        .collect();
                    RadiographImage::new(half, im.height, pixels, ImageMeta { view, ..im.meta })
                };
                let c_ap = scale_coefficient(*rulers.next().unwrap(), ruler_mm, target_px_per_mm)?;
                let c_ml = scale_coefficient(*rulers.next().unwrap(), ruler_mm, target_px_per_mm)?;
                let mut ap = split(0, View::Ap)?;
                let mut ml = split(half, View::Ml)?;
                ap.pixels = shrink(&ap, c_ap);
                ml.pixels = shrink(&ml, c_ml);
                ap.meta.scale[0] = c_ap;
                ml.meta.scale[1] = c_ml;
                out.push(compose_views(&ap, &ml)?);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drr::grid::PoseEnergy;

    fn meta(view: View, specimen_id: u32) -> ImageMeta {
        ImageMeta {
            specimen_id,
            view,
            pose: PoseEnergy {
                rx: 91.0,
                ry: 0.0,
                energy: 146.0,
            },
            scale: [1.0, 1.0],
        }
    }

    fn image(w: usize, h: usize, f: impl Fn(usize, usize) -> f32, view: View) -> RadiographImage {
        let pixels = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        RadiographImage::new(w, h, pixels, meta(view, 1)).unwrap()
    }

    #[test]
    fn blur_of_constant_is_exact() {
        let im = image(17, 9, |_, _| 0.37, View::Ap);
        let out = gaussian_blur(&im, 1.0).unwrap();
        assert_eq!(out.pixels, im.pixels);
    }

    #[test]
    fn zero_sigma_is_identity() {
        let im = image(8, 8, |x, y| ((x * 7 + y * 3) % 11) as f32 / 11.0, View::Ap);
        assert_eq!(gaussian_blur(&im, 0.0).unwrap(), im);
    }

    #[test]
    fn impulse_matches_direct_convolution() {
        let sigma = 1.3;
        let (w, h) = (21, 19);
        let im = image(w, h, |x, y| if (x, y) == (10, 9) { 1.0 } else { 0.0 }, View::Ap);
        let out = gaussian_blur(&im, sigma).unwrap();

        // Non-separable oracle: 2D kernel built from the same truncated,
        // renormalized 1D weights, applied with replicated borders.
        let r = (3.0 * sigma).ceil() as i64;
        let w1: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let s: f64 = w1.iter().sum();
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut acc = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let sx = (x + dx).clamp(0, w as i64 - 1) as usize;
                        let sy = (y + dy).clamp(0, h as i64 - 1) as usize;
                        let k = w1[(dx + r) as usize] * w1[(dy + r) as usize] / (s * s);
                        acc += k * im.at(sx, sy) as f64;
                    }
                }
                let got = out.at(x as usize, y as usize) as f64;
                assert!((got - acc).abs() < 1e-6, "({x},{y}) {got} vs {acc}");
            }
        }
    }

    #[test]
    fn compose_places_views_side_by_side() {
        let ap = image(64, 128, |x, _| x as f32 / 64.0, View::Ap);
        let ml = image(64, 128, |_, y| y as f32 / 128.0, View::Ml);
        let c = compose_views(&ap, &ml).unwrap();
        assert_eq!((c.width, c.height), (128, 128));
        assert_eq!(c.meta.view, View::Combined);
        for y in 0..128 {
            for x in 0..64 {
                assert_eq!(c.at(x, y), ap.at(x, y));
                assert_eq!(c.at(64 + x, y), ml.at(x, y));
            }
        }

        let big_ap = image(400, 800, |_, _| 0.0, View::Ap);
        let big_ml = image(400, 800, |_, _| 0.0, View::Ml);
        let big = compose_views(&big_ap, &big_ml).unwrap();
        assert_eq!((big.width, big.height), (800, 800));
    }

    #[test]
    fn compose_rejects_mismatches() {
        let ap = image(4, 8, |_, _| 0.0, View::Ap);
        let mut other = image(4, 8, |_, _| 0.0, View::Ml);
        other.meta.specimen_id = 2;
        assert!(matches!(compose_views(&ap, &other), Err(Error::Composition(_))));
        let short = image(4, 6, |_, _| 0.0, View::Ml);
        assert!(compose_views(&ap, &short).is_err());
    }

    #[test]
    fn ruler_shrinks_to_eighty_percent() {
        // 50 px ruler, 10 mm, target 4 px/mm -> c = 0.8, ruler measures 40 px.
        let (w, h) = (100, 20);
        let im = image(w, h, |x, y| if (25..75).contains(&x) && (8..12).contains(&y) { 1.0 } else { 0.0 }, View::Ap);
        let c = scale_coefficient(50.0, 10.0, 4.0).unwrap();
        assert!((c - 0.8).abs() < 1e-15);
        let out = scale_normalize(&[im.clone()], &[50.0], 10.0, 4.0).unwrap();
        assert_eq!((out[0].width, out[0].height), (w, h));
        assert!((out[0].meta.scale[0] - 0.8).abs() < 1e-15);
        let row_mass = |img: &RadiographImage| -> f64 {
            let mass: f64 = img.pixels.iter().map(|&v| v as f64).sum();
            let rows = (0..h).filter(|&y| (0..w).any(|x| img.at(x, y) > 0.0)).count();
            mass / rows as f64
        };
        // Column extent of the ruler: total intensity over its thickness.
        let thickness_in = 4.0;
        let length_out = out[0].pixels.iter().map(|&v| v as f64).sum::<f64>() / (thickness_in * 0.8);
        assert!((length_out - 40.0).abs() < 1e-3, "{length_out}");
        assert!(row_mass(&out[0]) < row_mass(&im));
        // Content is centered: symmetric about the vertical midline.
        for y in 0..h {
            for x in 0..w / 2 {
                assert!((out[0].at(x, y) - out[0].at(w - 1 - x, y)).abs() < 1e-6);
            }
        }
        // Borders are background.
        assert_eq!(out[0].at(0, 0), 0.0);
    }

    #[test]
    fn unit_coefficient_keeps_pixels() {
        let im = image(10, 10, |x, y| ((x + y) % 3) as f32 / 3.0, View::Ml);
        let out = scale_normalize(&[im.clone()], &[40.0], 10.0, 4.0).unwrap();
        assert_eq!(out[0].pixels, im.pixels);
        assert_eq!(out[0].meta.scale, [1.0, 1.0]);
    }

    #[test]
    fn background_stays_background() {
        let im = image(12, 12, |_, _| 0.0, View::Ap);
        let out = scale_normalize(&[im], &[60.0], 10.0, 4.0).unwrap();
        assert!(out[0].pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn upscale_is_refused() {
        let im = image(4, 4, |_, _| 0.0, View::Ap);
        assert!(matches!(
            scale_normalize(&[im], &[30.0], 10.0, 4.0),
            Err(Error::UpscaleRequired { .. })
        ));
    }

    #[test]
    fn combined_halves_use_their_own_coefficients() {
        let ap = image(20, 10, |_, _| 0.5, View::Ap);
        let ml = image(20, 10, |_, _| 0.5, View::Ml);
        let c = compose_views(&ap, &ml).unwrap();
        let out = scale_normalize(&[c], &[40.0, 50.0], 10.0, 4.0).unwrap();
        assert_eq!(out[0].meta.scale, [1.0, 0.8]);
        assert_eq!(out[0].width, 40);
        // AP half untouched, ML half padded at its border.
        assert_eq!(out[0].at(0, 0), 0.5);
        assert_eq!(out[0].at(20, 0), 0.0);
    }
}
