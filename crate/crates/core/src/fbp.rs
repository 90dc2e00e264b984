//! Fan-beam filtered backprojection for a flat detector.

use std::f64::consts::PI;

use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{ensure_finite, ensure_len, Error, Result};
use crate::forward::Measurement;
use crate::geometry::FanBeamGeometry;
use crate::image::{GridShape, ImageGrid};

/// Counts below this are clamped before the logarithm.
pub const DEFAULT_COUNT_FLOOR: f64 = 1.0;

/// Per-bin line integrals `−log(y / gain)`, view-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LineIntegralSinogram {
    values: Vec<f64>,
    geometry: FanBeamGeometry,
}

impl LineIntegralSinogram {
    pub fn new(values: Vec<f64>, geometry: FanBeamGeometry) -> Result<Self> {
        ensure_len(&values, geometry.n_bins())?;
        ensure_finite(&values, "line integrals")?;
        Ok(Self { values, geometry })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn geometry(&self) -> &FanBeamGeometry {
        &self.geometry
    }
}

/// `l = −log(max(y, floor) / gain)`. Detector blur is not deconvolved.
pub fn log_transform(m: &Measurement, floor: f64) -> Result<LineIntegralSinogram> {
    if !(floor > 0.0) {
        return Err(Error::InvalidArgument(format!("count floor must be positive, got {floor}")));
    }
    let gain = m.model().detector().gain();
    if gain.iter().any(|&g| !(g > 0.0)) {
        return Err(Error::InvalidArgument("flood field must be positive".into()));
    }
    let n_det = gain.len();
    let values = m
        .counts()
        .iter()
        .enumerate()
        .map(|(i, &y)| -(y.max(floor) / gain[i % n_det]).ln())
        .collect();
    LineIntegralSinogram::new(values, m.model().projector().geometry().clone())
}

/// Discrete Ram-Lak kernel sampled at spacing `ds`, wrapped onto `len` taps.
fn ramp_kernel(len: usize, ds: f64) -> Vec<f64> {
    let mut h = vec![0.0; len];
    h[0] = 1.0 / (4.0 * ds * ds);
    for k in 1..len / 2 {
        if k % 2 == 1 {
            let v = -1.0 / ((k * k) as f64 * PI * PI * ds * ds);
            h[k] = v;
            h[len - k] = v;
        }
    }
    h
}

/// Circular-gap angular weights; uniform `2π/n` for a full rotation.
fn angular_weights(angles: &[f64]) -> Vec<f64> {
    let n = angles.len();
    if n == 1 {
        return vec![2.0 * PI];
    }
    (0..n)
        .map(|i| {
            let prev = if i == 0 { angles[n - 1] - 2.0 * PI } else { angles[i - 1] };
            let next = if i == n - 1 { angles[0] + 2.0 * PI } else { angles[i + 1] };
            0.5 * (next - prev)
        })
        .collect()
}

/// Cosine-weighted, ramp-filtered projections in virtual-detector units.
fn filtered_projections(l: &LineIntegralSinogram) -> Vec<f64> {
    let g = l.geometry();
    let n = g.n_det();
    let mag = g.sdd() / g.sad();
    let ds = g.det_pixel() / mag;
    let d = g.sad();
    let padded = (2 * n).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(padded);
    let inv = planner.plan_fft_inverse(padded);
    let mut kernel: Vec<Complex<f64>> = ramp_kernel(padded, ds).into_iter().map(|v| Complex::new(v, 0.0)).collect();
    fwd.process(&mut kernel);
    let cosine: Vec<f64> = (0..n)
        .map(|j| {
            let s = g.bin_offset(j) / mag;
            d / (d * d + s * s).sqrt()
        })
        .collect();
    // ½ for the full-circle redundancy, ds for the discrete convolution, 1/padded for the inverse FFT
    let scale = 0.5 * ds / padded as f64;
    let mut out = vec![0.0; l.values().len()];
    out.par_chunks_mut(n)
        .zip(l.values().par_chunks(n))
        .for_each(|(dst, src)| {
            let mut buf = vec![Complex::new(0.0, 0.0); padded];
            for j in 0..n {
                buf[j] = Complex::new(src[j] * cosine[j], 0.0);
            }
            fwd.process(&mut buf);
            for (b, k) in buf.iter_mut().zip(&kernel) {
                *b *= k;
            }
            inv.process(&mut buf);
            for j in 0..n {
                dst[j] = buf[j].re * scale;
            }
        });
    out
}

/// Fan-beam FBP onto `shape`. Parallel over image rows; every pixel sums its
/// views in index order.
pub fn fbp_reconstruct(l: &LineIntegralSinogram, shape: GridShape) -> Result<ImageGrid> {
    let g = l.geometry();
    let n = g.n_det();
    let q = filtered_projections(l);
    let weights = angular_weights(g.angles());
    let trig: Vec<(f64, f64)> = g.angles().iter().map(|a| (a.cos(), a.sin())).collect();
    let (d, sdd, pitch) = (g.sad(), g.sdd(), g.det_pixel());
    let center = (n as f64 - 1.0) / 2.0;
    let mut data = vec![0.0; shape.len()];
    data.par_chunks_mut(shape.width).enumerate().for_each(|(row, out)| {
        for (col, px) in out.iter_mut().enumerate() {
            let (x, y) = shape.pixel_center(row, col);
            let mut acc = 0.0;
            for (v, &(c, s)) in trig.iter().enumerate() {
                let dist = d - (x * c + y * s);
                let lateral = -x * s + y * c;
                let u = lateral * sdd / dist;
                let pos = u / pitch + center;
                if pos < 0.0 || pos > (n - 1) as f64 {
                    continue;
                }
                let j = (pos.floor() as usize).min(n - 2);
                let f = pos - j as f64;
                let row_q = &q[v * n..(v + 1) * n];
                let val = (1.0 - f) * row_q[j] + f * row_q[j + 1];
                let u_w = dist / d;
                acc += weights[v] * val / (u_w * u_w);
            }
            *px = acc;
        }
    });
    ImageGrid::new(shape, data)
}

/// `log_transform` followed by `fbp_reconstruct` on the measurement's grid.
pub fn fbp_from_measurement(m: &Measurement) -> Result<ImageGrid> {
    let l = log_transform(m, DEFAULT_COUNT_FLOOR)?;
    fbp_reconstruct(&l, m.model().projector().shape())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_kernel_taps() {
        let h = ramp_kernel(8, 1.0);
        assert_eq!(h[0], 0.25);
        assert_eq!(h[2], 0.0);
        assert_eq!(h[1], h[7]);
        assert!((h[3] + 1.0 / (9.0 * PI * PI)).abs() < 1e-15);
    }

    #[test]
    fn uniform_angular_weights() {
        let n = 12;
        let a: Vec<f64> = (0..n).map(|i| 2.0 * PI * i as f64 / n as f64).collect();
        for w in angular_weights(&a) {
            assert!((w - 2.0 * PI / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_sinogram_gives_zero_image() {
        let g = FanBeamGeometry::full_rotation(1000.0, 500.0, 32, 2.0, 16).unwrap();
        let l = LineIntegralSinogram::new(vec![0.0; g.n_bins()], g).unwrap();
        let img = fbp_reconstruct(&l, GridShape::new(8, 8, 2.0).unwrap()).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
    }
}
