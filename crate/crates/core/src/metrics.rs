//! Image quality metrics for reconstructions against ground truth.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, EitError, Result};
use crate::raster::PixelImage;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair(recon: &PixelImage, gt: &PixelImage) -> Result<()> {
    check_len("image side", gt.side(), recon.side())
}

fn range_of(img: &PixelImage, what: &str) -> Result<f64> {
    let r = img.max() - img.min();
    if r > 0.0 {
        Ok(r)
    } else {
        Err(EitError::invalid(format!("{what} is constant, its dynamic range is zero")))
    }
}

pub fn mse(recon: &PixelImage, gt: &PixelImage) -> Result<f64> {
    check_pair(recon, gt)?;
    let n = gt.values().len() as f64;
    Ok(recon.values().iter().zip(gt.values()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n)
}

/// `10 log10(range² / mse)` with the range of `gt`; `+∞` for identical images.
pub fn psnr(recon: &PixelImage, gt: &PixelImage) -> Result<f64> {
    let range = range_of(gt, "ground truth")?;
    let e = mse(recon, gt)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (range * range / e).log10())
}

/// Where the SSIM stabilizing constants take their dynamic range from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SsimRange {
    #[default]
    GroundTruth,
    /// Range over both images, which makes the index symmetric.
    Pair,
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, t) in w.iter_mut().enumerate() {
        let x = i as f64 - c;
        *t = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|t| t / s)
}

/// Separable Gaussian filter over all fully contained windows.
fn filter_valid(x: &[f64], n: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let m = n + 1 - SSIM_WINDOW;
    let mut rows = vec![0.0; n * m];
    for r in 0..n {
        for c in 0..m {
            rows[r * m + c] = (0..SSIM_WINDOW).map(|k| taps[k] * x[r * n + c + k]).sum();
        }
    }
    let mut out = vec![0.0; m * m];
    for r in 0..m {
        for c in 0..m {
            out[r * m + c] = (0..SSIM_WINDOW).map(|k| taps[k] * rows[(r + k) * m + c]).sum();
        }
    }
    out
}

/// Mean structural similarity with an 11×11 Gaussian window (σ = 1.5).
pub fn ssim_with(recon: &PixelImage, gt: &PixelImage, range: SsimRange) -> Result<f64> {
    check_pair(recon, gt)?;
    let n = gt.side();
    if n < SSIM_WINDOW {
        return Err(EitError::invalid(format!(
            "images of side {n} are smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window"
        )));
    }
    let l = match range {
        SsimRange::GroundTruth => range_of(gt, "ground truth")?,
        SsimRange::Pair => {
            let hi = gt.max().max(recon.max());
            let lo = gt.min().min(recon.min());
            if !(hi > lo) {
                return Err(EitError::invalid("both images are the same constant"));
            }
            hi - lo
        }
    };
    let c1 = (SSIM_K1 * l).powi(2);
    let c2 = (SSIM_K2 * l).powi(2);
    let taps = gaussian_taps();
    let (x, y) = (recon.values(), gt.values());
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = filter_valid(x, n, &taps);
    let my = filter_valid(y, n, &taps);
    let mxx = filter_valid(&prod(x, x), n, &taps);
    let myy = filter_valid(&prod(y, y), n, &taps);
    let mxy = filter_valid(&prod(x, y), n, &taps);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

pub fn ssim(recon: &PixelImage, gt: &PixelImage) -> Result<f64> {
    ssim_with(recon, gt, SsimRange::GroundTruth)
}

/// `‖recon − gt‖₁ / ‖gt‖₁`.
pub fn re(recon: &PixelImage, gt: &PixelImage) -> Result<f64> {
    check_pair(recon, gt)?;
    let den: f64 = gt.values().iter().map(|v| v.abs()).sum();
    if den == 0.0 {
        return Err(EitError::invalid("relative error of an all-zero ground truth"));
    }
    Ok(recon.values().iter().zip(gt.values()).map(|(a, b)| (a - b).abs()).sum::<f64>() / den)
}

/// Mean absolute pixel difference.
pub fn ae(recon: &PixelImage, gt: &PixelImage) -> Result<f64> {
    check_pair(recon, gt)?;
    let n = gt.values().len() as f64;
    Ok(recon.values().iter().zip(gt.values()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
}

/// Ratio of the value ranges of `recon` and `gt`.
pub fn dr(recon: &PixelImage, gt: &PixelImage) -> Result<f64> {
    check_pair(recon, gt)?;
    let g = range_of(gt, "ground truth")?;
    Ok((recon.max() - recon.min()) / g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub re: f64,
    pub ae: f64,
    pub dr: f64,
}

impl MetricReport {
    pub const FIELDS: [&'static str; 6] = ["mse", "psnr", "ssim", "re", "ae", "dr"];

    pub fn evaluate(recon: &PixelImage, gt: &PixelImage) -> Result<MetricReport> {
        Ok(MetricReport {
            mse: mse(recon, gt)?,
            psnr: psnr(recon, gt)?,
            ssim: ssim(recon, gt)?,
            re: re(recon, gt)?,
            ae: ae(recon, gt)?,
            dr: dr(recon, gt)?,
        })
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.mse, self.psnr, self.ssim, self.re, self.ae, self.dr]
    }

    fn from_array(a: [f64; 6]) -> MetricReport {
        MetricReport {
            mse: a[0],
            psnr: a[1],
            ssim: a[2],
            re: a[3],
            ae: a[4],
            dr: a[5],
        }
    }
}

/// Per-field mean and sample standard deviation.
pub fn summarize(reports: &[MetricReport]) -> Option<(MetricReport, MetricReport)> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    let mut mean = [0.0; 6];
    for r in reports {
        for (m, v) in mean.iter_mut().zip(r.as_array()) {
            *m += v / n;
        }
    }
    let mut std = [0.0; 6];
    if reports.len() > 1 {
        for r in reports {
            for ((s, v), m) in std.iter_mut().zip(r.as_array()).zip(mean) {
                *s += (v - m).powi(2) / (n - 1.0);
            }
        }
    }
    Some((MetricReport::from_array(mean), MetricReport::from_array(std.map(f64::sqrt))))
}
