use ndarray::{Array2, ArrayView2};

use crate::error::{check_shape, Error, Result};

pub const SSIM_WINDOW: usize = 7;
const KL_SMOOTHING: f64 = 1e-12;

pub fn mse(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    check_shape(a.dim(), b.dim())?;
    let n = a.len() as f64;
    Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// Peak signal-to-noise ratio in dB; identical inputs give `+inf`.
pub fn psnr(a: ArrayView2<f64>, b: ArrayView2<f64>, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(Error::invalid("data_range must be positive"));
    }
    let err = mse(a, b)?;
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / err).log10())
}

/// Summed-area table with a zero first row/column.
fn integral(a: &Array2<f64>) -> Array2<f64> {
    let (h, w) = a.dim();
    let mut s = Array2::zeros((h + 1, w + 1));
    for i in 0..h {
        let mut row = 0.0;
        for j in 0..w {
            row += a[[i, j]];
            s[[i + 1, j + 1]] = s[[i, j + 1]] + row;
        }
    }
    s
}

fn window_sum(s: &Array2<f64>, i: usize, j: usize, k: usize) -> f64 {
    s[[i + k, j + k]] - s[[i, j + k]] - s[[i + k, j]] + s[[i, j]]
}

/// Mean structural similarity over all fully contained 7×7 uniform windows
/// (population statistics within each window).
pub fn ssim(a: ArrayView2<f64>, b: ArrayView2<f64>, data_range: f64) -> Result<f64> {
    check_shape(a.dim(), b.dim())?;
    let (h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!("ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW} inputs")));
    }
    if !(data_range > 0.0) {
        return Err(Error::invalid("data_range must be positive"));
    }
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let a = a.to_owned();
    let b = b.to_owned();
    let sa = integral(&a);
    let sb = integral(&b);
    let saa = integral(&(&a * &a));
    let sbb = integral(&(&b * &b));
    let sab = integral(&(&a * &b));
    let k = SSIM_WINDOW;
    let n = (k * k) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=h - k {
        for j in 0..=w - k {
            let ma = window_sum(&sa, i, j, k) / n;
            let mb = window_sum(&sb, i, j, k) / n;
            let va = (window_sum(&saa, i, j, k) / n - ma * ma).max(0.0);
            let vb = (window_sum(&sbb, i, j, k) / n - mb * mb).max(0.0);
            let cov = window_sum(&sab, i, j, k) / n - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// `D_KL(hist(a) ‖ hist(b))` over a shared binning of the joint value range.
pub fn kl_divergence(a: ArrayView2<f64>, b: ArrayView2<f64>, n_bins: usize) -> Result<f64> {
    if n_bins < 8 {
        return Err(Error::invalid("kl_divergence needs at least 8 bins"));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("kl_divergence of an empty array"));
    }
    let lo = a.iter().chain(b.iter()).cloned().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b.iter()).cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / n_bins as f64 } else { 1.0 };
    let hist = |x: ArrayView2<f64>| {
        let mut h = vec![0.0; n_bins];
        for &v in x.iter() {
            let bin = (((v - lo) / width) as usize).min(n_bins - 1);
            h[bin] += 1.0;
        }
        let n = x.len() as f64;
        let smoothed: Vec<f64> = h.iter().map(|c| c / n + KL_SMOOTHING).collect();
        let z: f64 = smoothed.iter().sum();
        smoothed.into_iter().map(|p| p / z).collect::<Vec<_>>()
    };
    let p = hist(a);
    let q = hist(b);
    Ok(p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum::<f64>().max(0.0))
}
