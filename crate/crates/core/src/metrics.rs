//! Image quality metrics on images normalized to [0, 1].

use std::fmt;

use crate::error::{shape_err, Result};
use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Peak signal-to-noise ratio in dB for a data range of 1. Infinite when the
/// images are identical.
pub fn psnr(reference: &Image, test: &Image) -> Result<f64> {
    reference.check_same_shape(test, "psnr")?;
    let mse = reference
        .data()
        .iter()
        .zip(test.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / reference.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter evaluated at valid window positions only.
fn filter_valid(data: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..k).map(|j| win[j] * data[r * w + c + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..k).map(|j| win[j] * rows[(r + j) * ow + c]).sum();
        }
    }
    out
}

/// Mean structural similarity, 11x11 Gaussian window (sigma 1.5), data range 1.
pub fn ssim(reference: &Image, test: &Image) -> Result<f64> {
    reference.check_same_shape(test, "ssim")?;
    let (h, w) = reference.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(shape_err(
            "ssim",
            format!("image {}x{} smaller than the {} pixel window", h, w, SSIM_WINDOW),
        ));
    }
    let win = gaussian_window();
    let (a, b) = (reference.data(), test.data());
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter_valid(a, h, w, &win);
    let mu_b = filter_valid(b, h, w, &win);
    let e_aa = filter_valid(&prod(a, a), h, w, &win);
    let e_bb = filter_valid(&prod(b, b), h, w, &win);
    let e_ab = filter_valid(&prod(a, b), h, w, &win);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2))
        })
        .sum();
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricPair {
    pub psnr: f64,
    pub ssim: f64,
}

impl MetricPair {
    pub fn compute(reference: &Image, test: &Image) -> Result<Self> {
        Ok(Self { psnr: psnr(reference, test)?, ssim: ssim(reference, test)? })
    }
}

/// Averages over a test set, one row per reconstruction method.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<(String, MetricPair)>,
    pub n_images: usize,
}

impl MetricReport {
    /// `pairs[m][i]` is (reference, reconstruction) for method `m`, image `i`.
    pub fn from_images(methods: &[(&str, Vec<(Image, Image)>)]) -> Result<Self> {
        let mut rows = Vec::new();
        let mut n_images = 0;
        for (name, pairs) in methods {
            let mut sum = MetricPair { psnr: 0.0, ssim: 0.0 };
            for (r, t) in pairs {
                let m = MetricPair::compute(r, t)?;
                sum.psnr += m.psnr;
                sum.ssim += m.ssim;
            }
            let n = pairs.len().max(1) as f64;
            n_images = n_images.max(pairs.len());
            rows.push((name.to_string(), MetricPair { psnr: sum.psnr / n, ssim: sum.ssim / n }));
        }
        Ok(Self { rows, n_images })
    }

    pub fn get(&self, name: &str) -> Option<MetricPair> {
        self.rows.iter().find(|(n, _)| n == name).map(|(_, m)| *m)
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "n_images={}", self.n_images)?;
        for (name, m) in &self.rows {
            writeln!(f, "{}.psnr={:.4}", name, m.psnr)?;
            writeln!(f, "{}.ssim={:.6}", name, m.ssim)?;
        }
        Ok(())
    }
}
