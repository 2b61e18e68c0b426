use super::HarnessError;
use crate::imagebuf::Image;

pub const PSNR_CAP: f64 = 99.0;

fn check_dims(a: &Image, b: &Image) -> Result<(), HarnessError> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(HarnessError::Dimension(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64, HarnessError> {
    check_dims(a, b)?;
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(s / a.data.len().max(1) as f64)
}

/// `10 log10(1 / MSE)` over all channels, capped at 99 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, HarnessError> {
    let m = mse(a, b)?;
    Ok(if m <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * m.log10()).min(PSNR_CAP)
    })
}

/// Rec. 601 luma.
pub fn luma(img: &Image) -> Vec<f64> {
    img.data
        .chunks_exact(3)
        .map(|c| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2])
        .collect()
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|x| x / s).collect()
}

/// Separable filter over the positions where the whole window fits.
fn filter_valid(x: &[f64], w: usize, h: usize, g: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = g.len();
    let (ow, oh) = (w + 1 - k, h + 1 - k);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = (0..k).map(|i| g[i] * x[y * w + ox + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..k).map(|i| g[i] * rows[(oy + i) * ow + ox]).sum();
        }
    }
    (out, ow, oh)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Mean SSIM on luma with an 11x11 Gaussian window (sigma 1.5), dynamic range 1.
/// Images smaller than the window use a window of the smaller side (odd).
pub fn ssim(a: &Image, b: &Image) -> Result<f64, HarnessError> {
    check_dims(a, b)?;
    let (w, h) = (a.width, a.height);
    if w == 0 || h == 0 {
        return Err(HarnessError::Dimension("ssim of an empty image".into()));
    }
    let mut size = SSIM_WINDOW.min(w).min(h);
    if size % 2 == 0 {
        size -= 1;
    }
    let g = gaussian_window(size, SSIM_SIGMA);
    let (x, y) = (luma(a), luma(b));
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let (mx, ow, oh) = filter_valid(&x, w, h, &g);
    let (my, ..) = filter_valid(&y, w, h, &g);
    let (sxx, ..) = filter_valid(&prod(&x, &x), w, h, &g);
    let (syy, ..) = filter_valid(&prod(&y, &y), w, h, &g);
    let (sxy, ..) = filter_valid(&prod(&x, &y), w, h, &g);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for i in 0..ow * oh {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cxy = sxy[i] - ux * uy;
        total += ((2.0 * (ux * uy) + c1) * (2.0 * cxy + c2))
            / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / (ow * oh) as f64)
}

/// PSNR of the best constant image (the per-channel mean of `reference`).
pub fn constant_baseline_psnr(reference: &Image) -> f64 {
    let n = (reference.width * reference.height).max(1) as f64;
    let mut mean = [0.0; 3];
    for c in reference.data.chunks_exact(3) {
        for k in 0..3 {
            mean[k] += c[k] / n;
        }
    }
    let flat = Image::filled(reference.width, reference.height, mean);
    psnr(&flat, reference).expect("same size")
}
