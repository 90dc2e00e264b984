//! Fan-beam geometry and the Siddon line-integral projector.
//!
//! The source sits at `sad · (cos θ, sin θ)` and the flat detector is centered
//! at `-(sdd - sad) · (cos θ, sin θ)` with its axis along `(-sin θ, cos θ)`.
//! Sinograms are stored view-major: `sino[view * n_det + bin]`.

use std::f64::consts::TAU;

use rayon::prelude::*;

use crate::error::{ensure_finite, ensure_len, Error, Result};
use crate::image::{GridShape, ImageGrid};

#[derive(Debug, Clone, PartialEq)]
pub struct FanBeamGeometry {
    sdd: f64,
    sad: f64,
    n_det: usize,
    det_pixel: f64,
    angles: Vec<f64>,
}

impl FanBeamGeometry {
    pub fn new(sdd: f64, sad: f64, n_det: usize, det_pixel: f64, angles: Vec<f64>) -> Result<Self> {
        if !(sad > 0.0 && sad < sdd && sdd.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < sad < sdd, got sad={sad} sdd={sdd}"
            )));
        }
        if n_det == 0 {
            return Err(Error::InvalidArgument("n_det must be positive".into()));
        }
        if !(det_pixel > 0.0 && det_pixel.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "detector pixel must be positive, got {det_pixel}"
            )));
        }
        if angles.is_empty() {
            return Err(Error::InvalidArgument("at least one view angle required".into()));
        }
        ensure_finite(&angles, "view angles")?;
        if angles.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("view angles must be strictly increasing".into()));
        }
        if angles[angles.len() - 1] - angles[0] >= TAU {
            return Err(Error::InvalidArgument("view angles must lie within one rotation".into()));
        }
        Ok(Self {
            sdd,
            sad,
            n_det,
            det_pixel,
            angles,
        })
    }

    /// `n_views` equally spaced angles over a full rotation starting at 0.
    pub fn full_rotation(sdd: f64, sad: f64, n_det: usize, det_pixel: f64, n_views: usize) -> Result<Self> {
        let angles = (0..n_views).map(|k| TAU * k as f64 / n_views as f64).collect();
        Self::new(sdd, sad, n_det, det_pixel, angles)
    }

    pub fn sdd(&self) -> f64 {
        self.sdd
    }

    pub fn sad(&self) -> f64 {
        self.sad
    }

    pub fn n_det(&self) -> usize {
        self.n_det
    }

    pub fn det_pixel(&self) -> f64 {
        self.det_pixel
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn n_views(&self) -> usize {
        self.angles.len()
    }

    /// Total number of detector readings, `n_views · n_det`.
    pub fn n_bins(&self) -> usize {
        self.n_views() * self.n_det
    }

    /// Signed position of a detector bin center along the detector axis, mm.
    pub fn bin_offset(&self, bin: usize) -> f64 {
        (bin as f64 - (self.n_det as f64 - 1.0) / 2.0) * self.det_pixel
    }

    /// Source position and detector-bin center for one ray.
    pub fn ray(&self, view: usize, bin: usize) -> ([f64; 2], [f64; 2]) {
        let (s, c) = self.angles[view].sin_cos();
        let src = [self.sad * c, self.sad * s];
        let u = self.bin_offset(bin);
        let back = self.sdd - self.sad;
        let dst = [-back * c - u * s, -back * s + u * c];
        (src, dst)
    }
}

/// Exact ray–pixel intersection lengths for one ray, appended to `out` as
/// `(pixel index, length mm)` in traversal order.
fn siddon_ray(shape: &GridShape, src: [f64; 2], dst: [f64; 2], out: &mut Vec<(u32, f64)>) {
    let (hx, hy) = shape.half_extent();
    let d = [dst[0] - src[0], dst[1] - src[1]];
    let ray_len = (d[0] * d[0] + d[1] * d[1]).sqrt();

    let mut a_min: f64 = 0.0;
    let mut a_max: f64 = 1.0;
    for (axis, h) in [(0usize, hx), (1usize, hy)] {
        if d[axis] == 0.0 {
            if src[axis] <= -h || src[axis] >= h {
                return;
            }
        } else {
            let a0 = (-h - src[axis]) / d[axis];
            let a1 = (h - src[axis]) / d[axis];
            a_min = a_min.max(a0.min(a1));
            a_max = a_max.min(a0.max(a1));
        }
    }
    if a_min >= a_max {
        return;
    }

    let ps = shape.pixel_size;
    let crossings = |axis: usize, n: usize, h: f64| -> Vec<f64> {
        if d[axis] == 0.0 {
            return Vec::new();
        }
        let mut v: Vec<f64> = (0..=n)
            .map(|i| (-h + i as f64 * ps - src[axis]) / d[axis])
            .filter(|&a| a > a_min && a < a_max)
            .collect();
        if d[axis] < 0.0 {
            v.reverse();
        }
        v
    };
    let ax = crossings(0, shape.width, hx);
    let ay = crossings(1, shape.height, hy);

    let (w, h) = (shape.width as i64, shape.height as i64);
    let mut emit = |lo: f64, hi: f64| {
        if hi <= lo {
            return;
        }
        let mid = 0.5 * (lo + hi);
        let x = src[0] + mid * d[0];
        let y = src[1] + mid * d[1];
        let col = (((x + hx) / ps).floor() as i64).clamp(0, w - 1);
        let row = (((hy - y) / ps).floor() as i64).clamp(0, h - 1);
        out.push(((row * w + col) as u32, (hi - lo) * ray_len));
    };

    let (mut i, mut j) = (0, 0);
    let mut prev = a_min;
    while i < ax.len() || j < ay.len() {
        let next = if j >= ay.len() || (i < ax.len() && ax[i] <= ay[j]) {
            i += 1;
            ax[i - 1]
        } else {
            j += 1;
            ay[j - 1]
        };
        emit(prev, next);
        prev = next;
    }
    emit(prev, a_max);
}

/// Views per backprojection accumulation chunk. Fixed so that the summation
/// order, and therefore the result, is independent of the thread count.
const BACKPROJECT_CHUNK: usize = 8;

/// Precomputed sparse system matrix `A` for one geometry and grid.
///
/// Rows are rays (view-major); each row lists the pixels the ray crosses and
/// the exact chord length through each.
#[derive(Debug, Clone)]
pub struct Projector {
    geometry: FanBeamGeometry,
    shape: GridShape,
    row_ptr: Vec<usize>,
    pixels: Vec<u32>,
    lengths: Vec<f64>,
}

impl Projector {
    pub fn new(geometry: FanBeamGeometry, shape: GridShape) -> Self {
        let n_det = geometry.n_det();
        let per_view: Vec<(Vec<usize>, Vec<u32>, Vec<f64>)> = (0..geometry.n_views())
            .into_par_iter()
            .map(|view| {
                let mut counts = Vec::with_capacity(n_det);
                let mut pixels = Vec::new();
                let mut lengths = Vec::new();
                let mut buf = Vec::with_capacity(shape.width + shape.height + 2);
                for bin in 0..n_det {
                    buf.clear();
                    let (src, dst) = geometry.ray(view, bin);
                    siddon_ray(&shape, src, dst, &mut buf);
                    counts.push(buf.len());
                    for &(p, l) in &buf {
                        pixels.push(p);
                        lengths.push(l);
                    }
                }
                (counts, pixels, lengths)
            })
            .collect();

        let mut row_ptr = Vec::with_capacity(geometry.n_bins() + 1);
        row_ptr.push(0);
        let nnz: usize = per_view.iter().map(|v| v.1.len()).sum();
        let mut pixels = Vec::with_capacity(nnz);
        let mut lengths = Vec::with_capacity(nnz);
        for (counts, p, l) in per_view {
            for c in counts {
                let last = *row_ptr.last().unwrap();
                row_ptr.push(last + c);
            }
            pixels.extend(p);
            lengths.extend(l);
        }
        Self {
            geometry,
            shape,
            row_ptr,
            pixels,
            lengths,
        }
    }

    pub fn geometry(&self) -> &FanBeamGeometry {
        &self.geometry
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn nnz(&self) -> usize {
        self.pixels.len()
    }

    /// The nonzero `(pixel, length)` entries of one ray.
    pub fn ray_entries(&self, view: usize, bin: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = view * self.geometry.n_det() + bin;
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.pixels[span.clone()]
            .iter()
            .zip(&self.lengths[span])
            .map(|(&p, &l)| (p as usize, l))
    }

    fn check_views(&self, views: &[usize]) -> Result<()> {
        let n = self.geometry.n_views();
        match views.iter().find(|&&v| v >= n) {
            Some(v) => Err(Error::InvalidArgument(format!("view {v} out of range for {n} views"))),
            None => Ok(()),
        }
    }

    #[inline]
    fn project_view_into(&self, x: &[f64], view: usize, out: &mut [f64]) {
        let n_det = self.geometry.n_det();
        for (bin, o) in out.iter_mut().enumerate() {
            let r = view * n_det + bin;
            let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
            let mut acc = 0.0;
            for k in a..b {
                acc += self.lengths[k] * x[self.pixels[k] as usize];
            }
            *o = acc;
        }
    }

    #[inline]
    fn backproject_view_into(&self, sino_view: &[f64], view: usize, img: &mut [f64]) {
        let n_det = self.geometry.n_det();
        for (bin, &s) in sino_view.iter().enumerate() {
            if s == 0.0 {
                continue;
            }
            let r = view * n_det + bin;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                img[self.pixels[k] as usize] += self.lengths[k] * s;
            }
        }
    }

    /// Line integrals `A x` for all views.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        let all: Vec<usize> = (0..self.geometry.n_views()).collect();
        self.project_views(x, &all)
    }

    /// Line integrals for the listed views only, stacked in list order.
    pub fn project_views(&self, x: &[f64], views: &[usize]) -> Result<Vec<f64>> {
        ensure_len(x, self.shape.len())?;
        ensure_finite(x, "projector input")?;
        self.check_views(views)?;
        let n_det = self.geometry.n_det();
        let mut out = vec![0.0; views.len() * n_det];
        out.par_chunks_mut(n_det)
            .zip(views.par_iter())
            .for_each(|(chunk, &v)| self.project_view_into(x, v, chunk));
        Ok(out)
    }

    /// Adjoint `Aᵀ s` of [`Projector::project`].
    pub fn backproject(&self, sino: &[f64]) -> Result<Vec<f64>> {
        let all: Vec<usize> = (0..self.geometry.n_views()).collect();
        self.backproject_views(sino, &all)
    }

    /// Adjoint of [`Projector::project_views`] for the same view list.
    pub fn backproject_views(&self, sino: &[f64], views: &[usize]) -> Result<Vec<f64>> {
        let n_det = self.geometry.n_det();
        ensure_len(sino, views.len() * n_det)?;
        ensure_finite(sino, "backprojector input")?;
        self.check_views(views)?;
        let n_pix = self.shape.len();
        let partials: Vec<Vec<f64>> = sino
            .par_chunks(n_det * BACKPROJECT_CHUNK)
            .zip(views.par_chunks(BACKPROJECT_CHUNK))
            .map(|(s, vs)| {
                let mut img = vec![0.0; n_pix];
                for (sv, &v) in s.chunks(n_det).zip(vs) {
                    self.backproject_view_into(sv, v, &mut img);
                }
                img
            })
            .collect();
        let mut out = vec![0.0; n_pix];
        for p in partials {
            for (o, v) in out.iter_mut().zip(p) {
                *o += v;
            }
        }
        Ok(out)
    }
}

/// One-shot projection; builds a throwaway [`Projector`].
pub fn project(img: &ImageGrid, geometry: &FanBeamGeometry) -> Result<Vec<f64>> {
    Projector::new(geometry.clone(), img.shape()).project(img.data())
}

/// One-shot backprojection onto a grid of the given shape.
pub fn backproject(sino: &[f64], geometry: &FanBeamGeometry, shape: GridShape) -> Result<ImageGrid> {
    let data = Projector::new(geometry.clone(), shape).backproject(sino)?;
    ImageGrid::new(shape, data)
}

/// Detector-stage operator `B`: per-bin fluence gain followed by a
/// shift-invariant Gaussian blur along the detector axis.
///
/// `B v = blur(gain ⊙ v)` per view, with symmetric (half-sample) reflection
/// at the detector edges so that a flat field is preserved.
#[derive(Debug, Clone, PartialEq)]
pub struct GainBlurOperator {
    gain: Vec<f64>,
    blur_sigma: f64,
    kernel: Vec<f64>,
}

impl GainBlurOperator {
    pub fn new(gain: Vec<f64>, blur_sigma: f64) -> Result<Self> {
        if gain.is_empty() {
            return Err(Error::InvalidArgument("gain vector is empty".into()));
        }
        if gain.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            return Err(Error::InvalidArgument("all gains must be positive and finite".into()));
        }
        if !(blur_sigma >= 0.0 && blur_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "blur sigma must be nonnegative, got {blur_sigma}"
            )));
        }
        Ok(Self {
            kernel: gaussian_kernel(blur_sigma),
            gain,
            blur_sigma,
        })
    }

    /// Same fluence `i0` on every detector bin.
    pub fn uniform(n_det: usize, i0: f64, blur_sigma: f64) -> Result<Self> {
        Self::new(vec![i0; n_det], blur_sigma)
    }

    pub fn gain(&self) -> &[f64] {
        &self.gain
    }

    pub fn blur_sigma(&self) -> f64 {
        self.blur_sigma
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub fn n_det(&self) -> usize {
        self.gain.len()
    }

    fn check(&self, v: &[f64]) -> Result<()> {
        if !v.len().is_multiple_of(self.n_det()) {
            return Err(Error::ShapeMismatch {
                expected: (v.len() / self.n_det() + 1) * self.n_det(),
                actual: v.len(),
            });
        }
        ensure_finite(v, "detector-domain input")
    }

    /// Mean counts `B v` for transmitted fractions `v`.
    pub fn apply(&self, flux: &[f64]) -> Result<Vec<f64>> {
        self.check(flux)?;
        let n = self.n_det();
        let mut out = vec![0.0; flux.len()];
        out.par_chunks_mut(n)
            .zip(flux.par_chunks(n))
            .for_each(|(o, f)| {
                let scaled: Vec<f64> = f.iter().zip(&self.gain).map(|(a, g)| a * g).collect();
                self.blur_view(&scaled, o);
            });
        Ok(out)
    }

    /// Adjoint `Bᵀ r`.
    pub fn adjoint(&self, residual: &[f64]) -> Result<Vec<f64>> {
        self.check(residual)?;
        let n = self.n_det();
        let mut out = vec![0.0; residual.len()];
        out.par_chunks_mut(n)
            .zip(residual.par_chunks(n))
            .for_each(|(o, r)| {
                self.blur_view_adjoint(r, o);
                for (v, g) in o.iter_mut().zip(&self.gain) {
                    *v *= g;
                }
            });
        Ok(out)
    }

    fn blur_view(&self, input: &[f64], out: &mut [f64]) {
        let n = input.len() as i64;
        let r = (self.kernel.len() / 2) as i64;
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, w) in self.kernel.iter().enumerate() {
                acc += w * input[reflect(i as i64 + k as i64 - r, n)];
            }
            *o = acc;
        }
    }

    fn blur_view_adjoint(&self, input: &[f64], out: &mut [f64]) {
        let n = input.len() as i64;
        let r = (self.kernel.len() / 2) as i64;
        for (i, &v) in input.iter().enumerate() {
            for (k, w) in self.kernel.iter().enumerate() {
                out[reflect(i as i64 + k as i64 - r, n)] += w * v;
            }
        }
    }
}

/// Unit-sum sampled Gaussian truncated at ±4σ; `[1.0]` for σ = 0.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![1.0];
    }
    let radius = (4.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Half-sample symmetric reflection of an index into `0..n`.
fn reflect(mut i: i64, n: i64) -> usize {
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}
