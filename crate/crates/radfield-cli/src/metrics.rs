//! Image-quality metrics: PSNR and single-scale SSIM over RGB images stored
//! as row-major `h·w·3` slices of values in [0,1].

use anyhow::{bail, Result};

/// PSNR in dB for a mean squared error, capped at 99 dB once the error
/// drops below 1e-10 (identical images would otherwise diverge).
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        99.0
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Peak signal-to-noise ratio between two same-shaped images.
pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        bail!("psnr: image sizes differ ({} vs {})", a.len(), b.len());
    }
    let mse = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    Ok(psnr_from_mse(mse))
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// The 11-tap Gaussian (σ = 1.5) used by SSIM, normalized to sum 1.
pub fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW as f64 - 1.0) / 2.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= s;
    }
    k
}

/// Channel-mean grayscale conversion of an RGB image.
pub fn grayscale(rgb: &[f64], pixels: usize) -> Vec<f64> {
    (0..pixels)
        .map(|i| (rgb[i * 3] + rgb[i * 3 + 1] + rgb[i * 3 + 2]) / 3.0)
        .collect()
}

/// Horizontal then vertical convolution with the SSIM kernel; returns the
/// `(h − 10) × (w − 10)` valid region.
fn gauss_valid(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = ssim_kernel();
    let wv = w - SSIM_WINDOW + 1;
    let hv = h - SSIM_WINDOW + 1;
    let mut horiz = vec![0.0; h * wv];
    for r in 0..h {
        for c in 0..wv {
            let mut s = 0.0;
            for (t, kv) in k.iter().enumerate() {
                s += kv * img[r * w + c + t];
            }
            horiz[r * wv + c] = s;
        }
    }
    let mut out = vec![0.0; hv * wv];
    for r in 0..hv {
        for c in 0..wv {
            let mut s = 0.0;
            for (t, kv) in k.iter().enumerate() {
                s += kv * horiz[(r + t) * wv + c];
            }
            out[r * wv + c] = s;
        }
    }
    out
}

/// Single-scale SSIM between two RGB images: channel-mean grayscale, 11×11
/// Gaussian window (σ = 1.5), C1 = 0.01², C2 = 0.03², averaged over the
/// valid (unpadded) window positions.
pub fn ssim(a: &[f64], b: &[f64], height: usize, width: usize) -> Result<f64> {
    if a.len() != b.len() || a.len() != height * width * 3 {
        bail!(
            "ssim: expected two {height}x{width} RGB images ({} values), got {} and {}",
            height * width * 3,
            a.len(),
            b.len()
        );
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        bail!("ssim: image {height}x{width} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window");
    }
    let x = grayscale(a, height * width);
    let y = grayscale(b, height * width);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(u, v)| u * v).collect();
    let mx = gauss_valid(&x, height, width);
    let my = gauss_valid(&y, height, width);
    let mxx = gauss_valid(&xx, height, width);
    let myy = gauss_valid(&yy, height, width);
    let mxy = gauss_valid(&xy, height, width);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cxy = mxy[i] - ux * uy;
        total += (2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2)
            / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
    }
    Ok(total / mx.len() as f64)
}
