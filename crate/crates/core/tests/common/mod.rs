//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use dpsct::forward::{ForwardModel, Measurement, NoiseOptions};
use dpsct::geometry::{FanBeamGeometry, GainBlurOperator, Projector};
use dpsct::image::{GridShape, ImageGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn small_geometry(n_det: usize, n_views: usize) -> FanBeamGeometry {
    FanBeamGeometry::full_rotation(200.0, 100.0, n_det, 1.0, n_views).unwrap()
}

/// Chord of the segment `src → dst` through an axis-aligned box, clipped
/// with the slab method. Shares no code with the projector's traversal.
fn chord(src: [f64; 2], dst: [f64; 2], lo: [f64; 2], hi: [f64; 2]) -> f64 {
    let d = [dst[0] - src[0], dst[1] - src[1]];
    let (mut a0, mut a1) = (0.0f64, 1.0f64);
    for k in 0..2 {
        if d[k] == 0.0 {
            if src[k] < lo[k] || src[k] > hi[k] {
                return 0.0;
            }
        } else {
            let (p, q) = ((lo[k] - src[k]) / d[k], (hi[k] - src[k]) / d[k]);
            a0 = a0.max(p.min(q));
            a1 = a1.min(p.max(q));
        }
    }
    if a1 > a0 {
        (a1 - a0) * d[0].hypot(d[1])
    } else {
        0.0
    }
}

/// Row-major `n_bins × n_pixels` system matrix built pixel by pixel.
pub fn dense_projector_oracle(g: &FanBeamGeometry, shape: GridShape) -> Vec<f64> {
    let n_pix = shape.len();
    let h = shape.pixel_size / 2.0;
    let mut a = vec![0.0; g.n_bins() * n_pix];
    for view in 0..g.n_views() {
        for bin in 0..g.n_det() {
            let (src, dst) = g.ray(view, bin);
            let row = view * g.n_det() + bin;
            for r in 0..shape.height {
                for c in 0..shape.width {
                    let (x, y) = shape.pixel_center(r, c);
                    a[row * n_pix + r * shape.width + c] = chord(src, dst, [x - h, y - h], [x + h, y + h]);
                }
            }
        }
    }
    a
}

/// Dense matrix of a projector read back from its stored rays.
pub fn dense_from_projector(p: &Projector) -> Vec<f64> {
    let g = p.geometry();
    let n_pix = p.shape().len();
    let mut a = vec![0.0; g.n_bins() * n_pix];
    for view in 0..g.n_views() {
        for bin in 0..g.n_det() {
            let row = view * g.n_det() + bin;
            for (pix, len) in p.ray_entries(view, bin) {
                a[row * n_pix + pix] += len;
            }
        }
    }
    a
}

/// One view's `n × n` detector matrix: gain, then Gaussian blur with
/// half-sample mirror boundaries written via the period-2n fold.
pub fn dense_detector_oracle(gain: &[f64], sigma: f64) -> Vec<f64> {
    let n = gain.len() as i64;
    let taps: Vec<(i64, f64)> = if sigma == 0.0 {
        vec![(0, 1.0)]
    } else {
        let r = (4.0 * sigma).ceil() as i64;
        let raw: Vec<(i64, f64)> = (-r..=r).map(|k| (k, (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())).collect();
        let s: f64 = raw.iter().map(|t| t.1).sum();
        raw.into_iter().map(|(k, w)| (k, w / s)).collect()
    };
    let fold = |i: i64| -> usize {
        let m = i.rem_euclid(2 * n);
        (if m < n { m } else { 2 * n - 1 - m }) as usize
    };
    let nu = n as usize;
    let mut b = vec![0.0; nu * nu];
    for i in 0..n {
        for &(k, w) in &taps {
            let j = fold(i + k);
            b[i as usize * nu + j] += w * gain[j];
        }
    }
    b
}

pub fn matvec(a: &[f64], x: &[f64]) -> Vec<f64> {
    a.chunks(x.len()).map(|row| dot(row, x)).collect()
}

pub fn model(shape: GridShape, g: FanBeamGeometry, i0: f64, blur: f64) -> ForwardModel {
    let n_det = g.n_det();
    ForwardModel::new(
        Arc::new(Projector::new(g, shape)),
        Arc::new(GainBlurOperator::uniform(n_det, i0, blur).unwrap()),
    )
    .unwrap()
}

/// A 16×16 problem with a smooth positive image and a noisy measurement.
pub fn small_problem(seed: u64, n_views: usize) -> (Measurement, ImageGrid) {
    let shape = GridShape::new(16, 16, 2.0).unwrap();
    let mut r = rng(seed);
    let m = model(shape, small_geometry(48, n_views), r.random_range(2e3..5e4), r.random_range(0.0..1.0));
    let truth = ImageGrid::new(shape, uniform_vec(&mut r, shape.len(), 0.005, 0.04)).unwrap();
    let meas = m.simulate_noisy(&truth, NoiseOptions::seeded(seed)).unwrap();
    (meas, truth)
}
