//! Image preprocessing: color-constancy correction, a morphological
//! hair-removal baseline, and bilinear resizing.

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};

/// Per-channel multiplicative gains produced by a color-constancy estimate.
#[derive(Clone, Copy, Debug)]
pub struct ColorGains {
    pub gains: [f64; CHANNELS],
    pub k: f64,
}

/// Gains under the white-patch assumption: the maximum response of each
/// channel is mapped to the calibration constant `k`.
pub fn max_rgb_gains(image: &Image, k: f64) -> Result<ColorGains> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::Parameter {
            op: "max_rgb",
            detail: format!("calibration constant k must lie in (0,1], got {}", k),
        });
    }
    let mut gains = [1.0; CHANNELS];
    for c in 0..CHANNELS {
        let mx = image.channel(c).iter().cloned().fold(0.0f64, f64::max);
        if mx <= 0.0 {
            return Err(Error::DegenerateChannel { channel: c });
        }
        gains[c] = k / mx;
    }
    Ok(ColorGains { gains, k })
}

/// Max-RGB color constancy: scale each channel so its maximum equals `k`.
/// Exactly idempotent: a channel whose maximum already equals `k` is passed
/// through untouched, and scaling maps the maximal pixel to `k` exactly.
pub fn max_rgb(image: &Image, k: f64) -> Result<Image> {
    max_rgb_gains(image, k)?; // validate k and channel degeneracy
    let mut out = image.clone();
    for c in 0..CHANNELS {
        let mx = image.channel(c).iter().cloned().fold(0.0f64, f64::max);
        if mx == k {
            continue;
        }
        for v in out.channel_mut(c) {
            // v/mx hits exactly 1.0 at the channel maximum, so the new
            // maximum is exactly k and a second pass is the identity
            *v = ((*v / mx) * k).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Shades-of-Gray color constancy: per-channel gain `k / mean(v^p)^(1/p)`.
/// `p = 1` is gray-world; `p -> inf` converges to Max-RGB.
pub fn shades_of_gray(image: &Image, p: f64, k: f64) -> Result<Image> {
    if !(p >= 1.0) {
        return Err(Error::Parameter {
            op: "shades_of_gray",
            detail: format!("Minkowski order p must be >= 1, got {}", p),
        });
    }
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::Parameter {
            op: "shades_of_gray",
            detail: format!("calibration constant k must lie in (0,1], got {}", k),
        });
    }
    let mut out = image.clone();
    for c in 0..CHANNELS {
        let ch = image.channel(c);
        let norm = (ch.iter().map(|v| v.powf(p)).sum::<f64>() / ch.len() as f64).powf(1.0 / p);
        if norm <= 0.0 {
            return Err(Error::DegenerateChannel { channel: c });
        }
        let gain = k / norm;
        for v in out.channel_mut(c) {
            *v = (*v * gain).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Black-hat hair mask: pixels whose closed-luminance response exceeds the
/// original by more than `threshold` (thin dark structures).
pub fn hair_mask(image: &Image, kernel_radius: usize, threshold: f64) -> Result<Vec<bool>> {
    if kernel_radius < 1 {
        return Err(Error::Parameter {
            op: "morph_hair_removal",
            detail: "kernel radius must be >= 1".into(),
        });
    }
    let (h, w) = (image.height(), image.width());
    let lum = image.luminance();
    let se = disk_offsets(kernel_radius as i64);
    let dilated = morph_filter(&lum, h, w, &se, f64::NEG_INFINITY, f64::max);
    let closed = morph_filter(&dilated, h, w, &se, f64::INFINITY, f64::min);
    Ok(closed.iter().zip(&lum).map(|(c, l)| c - l > threshold).collect())
}

/// Generic morphological hair-removal baseline: a black-hat response on the
/// luminance flags thin dark structures, whose pixels are replaced by the
/// mean of unmasked neighbors.
pub fn morph_hair_removal(image: &Image, kernel_radius: usize, threshold: f64) -> Result<Image> {
    let (h, w) = (image.height(), image.width());
    let mask = hair_mask(image, kernel_radius, threshold)?;

    if mask.iter().all(|&m| m) {
        return Err(Error::InpaintImpossible);
    }
    if mask.iter().all(|&m| !m) {
        return Ok(image.clone());
    }

    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            // widen the search ring until an unmasked neighbor appears
            let mut radius = kernel_radius as i64;
            loop {
                let mut acc = [0.0; CHANNELS];
                let mut count = 0usize;
                for dy in -radius..=radius {
                    for dx in -radius..=radius {
                        if dy * dy + dx * dx > radius * radius {
                            continue;
                        }
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask[ny * w + nx] {
                            continue;
                        }
                        for c in 0..CHANNELS {
                            acc[c] += image.get(c, ny, nx);
                        }
                        count += 1;
                    }
                }
                if count > 0 {
                    for c in 0..CHANNELS {
                        out.set(c, y, x, acc[c] / count as f64);
                    }
                    break;
                }
                radius *= 2;
            }
        }
    }
    Ok(out)
}

fn disk_offsets(radius: i64) -> Vec<(i64, i64)> {
    let mut out = Vec::new();
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            if dy * dy + dx * dx <= radius * radius {
                out.push((dy, dx));
            }
        }
    }
    out
}

fn morph_filter(
    src: &[f64],
    h: usize,
    w: usize,
    se: &[(i64, i64)],
    init: f64,
    fold: fn(f64, f64) -> f64,
) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut v = init;
            for &(dy, dx) in se {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                    continue;
                }
                v = fold(v, src[ny as usize * w + nx as usize]);
            }
            out[y * w + x] = v;
        }
    }
    out
}

/// Bilinear resize with pixel-center alignment; output stays in `[0,1]`
/// and resizing to the source size is an exact copy.
pub fn resize(image: &Image, target_h: usize, target_w: usize) -> Result<Image> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::Parameter {
            op: "resize",
            detail: "target dimensions must be >= 1".into(),
        });
    }
    let (h, w) = (image.height(), image.width());
    let mut out = Image::new(target_h, target_w);
    let sy = h as f64 / target_h as f64;
    let sx = w as f64 / target_w as f64;
    for c in 0..CHANNELS {
        for ty in 0..target_h {
            let fy = ((ty as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for tx in 0..target_w {
                let fx = ((tx as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                let top = image.get(c, y0, x0) * (1.0 - wx) + image.get(c, y0, x1) * wx;
                let bot = image.get(c, y1, x0) * (1.0 - wx) + image.get(c, y1, x1) * wx;
                out.set(c, ty, tx, top * (1.0 - wy) + bot * wy);
            }
        }
    }
    Ok(out)
}
