//! Albedo alignment and image metrics.

use crate::raster::Image;
use crate::{Error, Result};

pub const PSNR_CAP: f64 = 100.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Foreground pixels: alpha above one half.
pub fn mask_from_alpha(alpha: &Image) -> Vec<bool> {
    (0..alpha.pixel_count()).map(|i| alpha.pixel(i)[0] > 0.5).collect()
}

fn check_mask(img: &Image, mask: &[bool]) -> Result<()> {
    if mask.len() != img.pixel_count() {
        return Err(Error::invalid(format!(
            "mask has {} entries for {} pixels",
            mask.len(),
            img.pixel_count()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignedAlbedo {
    pub scales: [f64; 3],
    /// Channels whose denominator vanished; their scale is 1.
    pub degenerate: [bool; 3],
    /// `clamp(s ⊙ Â, 0, 1)`
    pub aligned: Image,
}

/// Per-channel least-squares scale of `pred` onto `gt` over masked pixels.
pub fn align_albedo(pred: &Image, gt: &Image, mask: &[bool]) -> Result<AlignedAlbedo> {
    pred.same_shape(gt)?;
    check_mask(pred, mask)?;
    let mut num = [0.0; 3];
    let mut den = [0.0; 3];
    for i in (0..pred.pixel_count()).filter(|&i| mask[i]) {
        let (p, g) = (pred.rgb(i), gt.rgb(i));
        for c in 0..3 {
            num[c] += p[c] * g[c];
            den[c] += p[c] * p[c];
        }
    }
    let mut scales = [1.0; 3];
    let mut degenerate = [false; 3];
    for c in 0..3 {
        if den[c] > 0.0 {
            scales[c] = num[c] / den[c];
        } else {
            degenerate[c] = true;
        }
    }
    let mut aligned = Image::new(pred.width, pred.height, 3);
    for i in 0..pred.pixel_count() {
        let p = pred.rgb(i);
        let out = aligned.pixel_mut(i);
        for c in 0..3 {
            out[c] = (scales[c] * p[c]).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(AlignedAlbedo {
        scales,
        degenerate,
        aligned,
    })
}

/// `10 log10(1 / MSE)` over masked pixels of unit-range images, capped.
pub fn psnr(a: &Image, b: &Image, mask: Option<&[bool]>) -> Result<f64> {
    a.same_shape(b)?;
    if a.channels != b.channels {
        return Err(Error::invalid("images differ in channel count"));
    }
    if let Some(m) = mask {
        check_mask(a, m)?;
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..a.pixel_count() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        for (x, y) in a.pixel(i).iter().zip(b.pixel(i)) {
            let d = *x as f64 - *y as f64;
            sum += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("no pixels to compare"));
    }
    let mse = sum / n as f64;
    Ok(if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    })
}

fn gray(img: &Image) -> Vec<f64> {
    (0..img.pixel_count())
        .map(|i| {
            let p = img.rgb(i);
            0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
        })
        .collect()
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM of the Rec.601 luma over all fully contained 11×11 Gaussian windows.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "{w}×{h} image is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window"
        )));
    }
    let (x, y) = (gray(a), gray(b));
    let g = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for oy in 0..oh {
        for ox in 0..ow {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (j, gj) in g.iter().enumerate() {
                for (i, gi) in g.iter().enumerate() {
                    let k = (oy + j) * w + ox + i;
                    let wt = gi * gj;
                    mx += wt * x[k];
                    my += wt * y[k];
                    sxx += wt * x[k] * x[k];
                    syy += wt * y[k] * y[k];
                    sxy += wt * x[k] * y[k];
                }
            }
            let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / (ow * oh) as f64)
}

/// Mean angle in degrees between paired vectors, normalized first; pairs
/// with a zero vector are skipped.
pub fn mean_angle(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::invalid("normal lists differ in length"));
    }
    let unit = |v: [f64; 3]| {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        (n > 1e-12).then(|| v.map(|c| c / n))
    };
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, g) in pred.iter().zip(gt) {
        let (Some(p), Some(g)) = (unit(*p), unit(*g)) else {
            continue;
        };
        let d = (p[0] * g[0] + p[1] * g[1] + p[2] * g[2]).clamp(-1.0, 1.0);
        sum += d.acos().to_degrees();
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid("no valid normals to compare"));
    }
    Ok(sum / n as f64)
}

/// Mean angular error in degrees between normal images over masked pixels.
pub fn normal_error(pred: &Image, gt: &Image, mask: &[bool]) -> Result<f64> {
    pred.same_shape(gt)?;
    check_mask(pred, mask)?;
    let idx: Vec<usize> = (0..pred.pixel_count()).filter(|&i| mask[i]).collect();
    let p: Vec<[f64; 3]> = idx.iter().map(|&i| pred.rgb(i)).collect();
    let g: Vec<[f64; 3]> = idx.iter().map(|&i| gt.rgb(i)).collect();
    mean_angle(&p, &g)
}
