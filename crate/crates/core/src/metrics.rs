//! Image quality metrics and ensemble bias/STD maps.

use crate::error::{Error, Result};
use crate::image::{GridShape, ImageGrid};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_congruent(a: &ImageGrid, b: &ImageGrid) -> Result<()> {
    if !a.congruent(b) {
        return Err(Error::ShapeMismatch {
            expected: b.data().len(),
            actual: a.data().len(),
        });
    }
    Ok(())
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// `10·log₁₀(MAX²/MSE)` with `MAX` the truth maximum. Identical images give
/// `f64::INFINITY`.
pub fn psnr(recon: &ImageGrid, truth: &ImageGrid) -> Result<f64> {
    check_congruent(recon, truth)?;
    let peak = truth.max();
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument("PSNR needs a truth image with a positive maximum".into()));
    }
    let e = mse(recon.data(), truth.data());
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / e).log10())
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable valid-mode filtering of a row-major image with the SSIM window.
fn filter_valid(data: &[f64], width: usize, height: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = width + 1 - SSIM_WINDOW;
    let oh = height + 1 - SSIM_WINDOW;
    let mut rows = vec![0.0; height * ow];
    for r in 0..height {
        let line = &data[r * width..(r + 1) * width];
        for c in 0..ow {
            rows[r * ow + c] = taps.iter().zip(&line[c..c + SSIM_WINDOW]).map(|(w, v)| w * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = taps
                .iter()
                .enumerate()
                .map(|(k, w)| w * rows[(r + k) * ow + c])
                .sum();
        }
    }
    out
}

/// Mean local SSIM over pixels whose 11×11 window lies inside the image.
/// The dynamic range `L` is `max − min` of the truth.
pub fn ssim(recon: &ImageGrid, truth: &ImageGrid) -> Result<f64> {
    check_congruent(recon, truth)?;
    let (w, h) = (truth.width(), truth.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {w}×{h}"
        )));
    }
    let range = truth.max() - truth.min();
    if !(range > 0.0) {
        return Err(Error::InvalidArgument("SSIM is undefined for a constant truth image".into()));
    }
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let taps = ssim_taps();
    let (x, y) = (recon.data(), truth.data());
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = filter_valid(x, w, h, &taps);
    let my = filter_valid(y, w, h, &taps);
    let sxx = filter_valid(&xx, w, h, &taps);
    let syy = filter_valid(&yy, w, h, &taps);
    let sxy = filter_valid(&xy, w, h, &taps);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (a, b) = (mx[i], my[i]);
        let vx = sxx[i] - a * a;
        let vy = syy[i] - b * b;
        let cov = sxy[i] - a * b;
        total += ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

/// Repeated reconstructions of one measurement, with an optional truth and
/// region of interest.
#[derive(Debug, Clone, PartialEq)]
pub struct RunEnsemble {
    runs: Vec<ImageGrid>,
    truth: Option<ImageGrid>,
    mask: Option<Vec<bool>>,
}

impl RunEnsemble {
    pub fn new(runs: Vec<ImageGrid>) -> Result<Self> {
        let first = runs
            .first()
            .ok_or_else(|| Error::InvalidArgument("an ensemble needs at least one run".into()))?;
        for r in &runs[1..] {
            check_congruent(r, first)?;
        }
        Ok(Self {
            runs,
            truth: None,
            mask: None,
        })
    }

    pub fn with_truth(mut self, truth: ImageGrid) -> Result<Self> {
        check_congruent(&truth, &self.runs[0])?;
        self.truth = Some(truth);
        Ok(self)
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.shape().len() {
            return Err(Error::ShapeMismatch {
                expected: self.shape().len(),
                actual: mask.len(),
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::InvalidArgument("ROI mask selects no pixels".into()));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn runs(&self) -> &[ImageGrid] {
        &self.runs
    }

    pub fn n_runs(&self) -> usize {
        self.runs.len()
    }

    pub fn truth(&self) -> Option<&ImageGrid> {
        self.truth.as_ref()
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn shape(&self) -> GridShape {
        self.runs[0].shape()
    }

    fn require_truth(&self) -> Result<&ImageGrid> {
        self.truth
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("ensemble has no ground truth".into()))
    }

    /// Per-pixel values sorted, so statistics do not depend on run order.
    fn pixel_stats(&self, f: impl Fn(&mut [f64]) -> f64) -> Vec<f64> {
        let mut buf = vec![0.0; self.runs.len()];
        (0..self.shape().len())
            .map(|i| {
                for (b, r) in buf.iter_mut().zip(&self.runs) {
                    *b = r.data()[i];
                }
                buf.sort_by(f64::total_cmp);
                f(&mut buf)
            })
            .collect()
    }

    pub fn mean_image(&self) -> ImageGrid {
        let n = self.runs.len() as f64;
        let data = self.pixel_stats(|v| v.iter().sum::<f64>() / n);
        ImageGrid::new(self.shape(), data).expect("mean of finite runs")
    }

    /// Pixelwise `|E[x̂] − x|`.
    pub fn bias_map(&self) -> Result<ImageGrid> {
        let truth = self.require_truth()?;
        let mean = self.mean_image();
        let data = mean.data().iter().zip(truth.data()).map(|(m, t)| (m - t).abs()).collect();
        ImageGrid::new(self.shape(), data)
    }

    /// Pixelwise population standard deviation (divides by `n`).
    pub fn std_map(&self) -> Result<ImageGrid> {
        if self.runs.len() < 2 {
            return Err(Error::InvalidArgument("STD needs at least two runs".into()));
        }
        let n = self.runs.len() as f64;
        let data = self.pixel_stats(|v| {
            let m = v.iter().sum::<f64>() / n;
            (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt()
        });
        ImageGrid::new(self.shape(), data)
    }

    /// Average of `map` over the mask, or the whole image without one.
    pub fn summarize(&self, map: &ImageGrid) -> Result<f64> {
        check_congruent(map, &self.runs[0])?;
        Ok(masked_mean(map.data(), self.mask.as_deref()))
    }

    pub fn summary(&self) -> Result<EnsembleSummary> {
        let truth = self.require_truth()?;
        let std = if self.runs.len() >= 2 {
            self.summarize(&self.std_map()?)?
        } else {
            0.0
        };
        let bias = self.summarize(&self.bias_map()?)?;
        let mean = self.mean_image();
        let per_psnr = self.runs.iter().map(|r| psnr(r, truth)).collect::<Result<Vec<_>>>()?;
        let per_ssim = self.runs.iter().map(|r| ssim(r, truth)).collect::<Result<Vec<_>>>()?;
        let (psnr_run_mean, psnr_run_spread) = mean_spread(&per_psnr);
        let (ssim_run_mean, ssim_run_spread) = mean_spread(&per_ssim);
        Ok(EnsembleSummary {
            run_count: self.runs.len(),
            std,
            bias,
            psnr: psnr(&mean, truth)?,
            ssim: ssim(&mean, truth)?,
            psnr_run_mean,
            psnr_run_spread,
            ssim_run_mean,
            ssim_run_spread,
        })
    }
}

fn masked_mean(values: &[f64], mask: Option<&[bool]>) -> f64 {
    match mask {
        None => values.iter().sum::<f64>() / values.len() as f64,
        Some(m) => {
            let (s, n) = values
                .iter()
                .zip(m)
                .filter(|(_, &k)| k)
                .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
            s / n as f64
        }
    }
}

fn mean_spread(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt();
    (m, s)
}

/// Scalar ensemble summary. `psnr`/`ssim` are of the ensemble mean image,
/// the `*_run_*` fields are mean and population spread over single runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleSummary {
    pub run_count: usize,
    pub std: f64,
    pub bias: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_run_mean: f64,
    pub psnr_run_spread: f64,
    pub ssim_run_mean: f64,
    pub ssim_run_spread: f64,
}

/// Pixels whose centers lie within `radius` mm of the grid center.
pub fn circular_mask(shape: GridShape, radius: f64) -> Vec<bool> {
    let mut out = Vec::with_capacity(shape.len());
    for r in 0..shape.height {
        for c in 0..shape.width {
            let (x, y) = shape.pixel_center(r, c);
            out.push(x * x + y * y <= radius * radius);
        }
    }
    out
}
