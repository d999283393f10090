use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// PSNR reported when the two images are identical.
pub const PSNR_CAP_DB: f64 = 300.0;

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub mse: f64,
}

impl MetricReport {
    pub fn compute(x: &Image, reference: &Image) -> Result<Self> {
        Ok(MetricReport {
            psnr_db: psnr(x, reference)?,
            ssim: ssim(x, reference)?,
            mse: mse(x, reference)?,
        })
    }
}

pub fn mse(x: &Image, reference: &Image) -> Result<f64> {
    x.check_same_shape(reference, "mse")?;
    let n = x.as_slice().len() as f64;
    Ok(x.as_slice()
        .iter()
        .zip(reference.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// `10 log10(peak^2 / MSE)` with `peak = max(reference)`.
pub fn psnr(x: &Image, reference: &Image) -> Result<f64> {
    let err = mse(x, reference)?;
    if reference.as_slice().iter().all(|&v| v == 0.0) {
        return Err(Error::invalid("PSNR reference is identically zero"));
    }
    if err == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    let peak = reference.as_slice().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok((10.0 * (peak * peak / err).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let w: Vec<f64> = (0..=2 * SSIM_RADIUS)
        .map(|i| {
            let d = i as f64 - SSIM_RADIUS as f64;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter evaluated only where the window fits.
fn filter_valid(src: &[f64], n: usize, w: &[f64]) -> Vec<f64> {
    let k = w.len();
    let m = n - k + 1;
    let mut rows = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            rows[i * m + j] = (0..k).map(|t| w[t] * src[i * n + j + t]).sum();
        }
    }
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|t| w[t] * rows[(i + t) * m + j]).sum();
        }
    }
    out
}

/// Mean SSIM over all 11x11 Gaussian windows (sigma 1.5) lying inside the
/// image, with `L = max(ref) - min(ref)` (or 1 for a constant reference).
pub fn ssim(x: &Image, reference: &Image) -> Result<f64> {
    x.check_same_shape(reference, "ssim")?;
    let n = x.n();
    let k = 2 * SSIM_RADIUS + 1;
    if n < k {
        return Err(Error::invalid(format!("SSIM needs images of at least {k}x{k}")));
    }
    let a = x.as_slice();
    let b = reference.as_slice();
    let (lo, hi) = b
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);

    let w = gaussian_window();
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(u, v)| u * v).collect();
    let mu_a = filter_valid(a, n, &w);
    let mu_b = filter_valid(b, n, &w);
    let e_aa = filter_valid(&aa, n, &w);
    let e_bb = filter_valid(&bb, n, &w);
    let e_ab = filter_valid(&ab, n, &w);

    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}
