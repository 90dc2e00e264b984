//! Row-major 2D attenuation maps.

use crate::error::{Error, Result};

/// A 2D attenuation map in mm⁻¹ sampled on a square-pixel grid centered on
/// the rotation axis. Row 0 is the top of the image (largest y).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    width: usize,
    height: usize,
    pixel_size: f64,
    data: Vec<f64>,
}

/// Grid dimensions without pixel data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridShape {
    pub width: usize,
    pub height: usize,
    /// Pixel pitch in mm.
    pub pixel_size: f64,
}

impl GridShape {
    pub fn new(width: usize, height: usize, pixel_size: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid dimensions must be positive, got {width}x{height}"
            )));
        }
        if !(pixel_size > 0.0 && pixel_size.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "pixel size must be positive, got {pixel_size}"
            )));
        }
        Ok(Self {
            width,
            height,
            pixel_size,
        })
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Physical (x, y) of a pixel center in mm.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        let x = (col as f64 - (self.width as f64 - 1.0) / 2.0) * self.pixel_size;
        let y = ((self.height as f64 - 1.0) / 2.0 - row as f64) * self.pixel_size;
        (x, y)
    }

    /// Half extents of the grid bounding box in mm.
    pub fn half_extent(&self) -> (f64, f64) {
        (
            self.width as f64 * self.pixel_size / 2.0,
            self.height as f64 * self.pixel_size / 2.0,
        )
    }
}

impl ImageGrid {
    pub fn new(shape: GridShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                expected: shape.len(),
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image data"));
        }
        Ok(Self {
            width: shape.width,
            height: shape.height,
            pixel_size: shape.pixel_size,
            data,
        })
    }

    pub fn zeros(shape: GridShape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: GridShape, value: f64) -> Self {
        Self {
            width: shape.width,
            height: shape.height,
            pixel_size: shape.pixel_size,
            data: vec![value; shape.len()],
        }
    }

    pub fn shape(&self) -> GridShape {
        GridShape {
            width: self.width,
            height: self.height,
            pixel_size: self.pixel_size,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn congruent(&self, other: &ImageGrid) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Root-mean-square difference to another congruent image.
    pub fn rms_diff(&self, other: &ImageGrid) -> f64 {
        assert!(self.congruent(other), "rms_diff on non-congruent grids");
        let ss: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        (ss / self.data.len() as f64).sqrt()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
