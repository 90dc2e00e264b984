//! Binary image and sinogram files, PNG previews and atomic writes.
//!
//! Image: `DTIMG\x01`, u32 width, u32 height, f32 pixel size in mm, then
//! `width·height` f32 values row-major. Sinogram: `DTSIN\x01`, u32 views,
//! u32 bins, `views` f32 angles, then view-major f32 data. A measurement is a
//! sinogram followed by the marker `DTVR` and a second data block holding
//! the per-bin variance. All integers and floats are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::ImageEncoder;

use crate::error::{Error, Result};
use crate::image::{GridShape, ImageGrid};

pub const IMAGE_MAGIC: &[u8; 6] = b"DTIMG\x01";
pub const SINOGRAM_MAGIC: &[u8; 6] = b"DTSIN\x01";
pub const VARIANCE_MARKER: &[u8; 4] = b"DTVR";

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn push_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

pub fn encode_image(img: &ImageGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(18 + 4 * img.data().len());
    out.extend_from_slice(IMAGE_MAGIC);
    out.extend_from_slice(&(img.width() as u32).to_le_bytes());
    out.extend_from_slice(&(img.height() as u32).to_le_bytes());
    out.extend_from_slice(&(img.pixel_size() as f32).to_le_bytes());
    push_f32s(&mut out, img.data());
    out
}

pub fn decode_image(bytes: &[u8]) -> Result<ImageGrid> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(6)? != IMAGE_MAGIC {
        return Err(Error::Format("not a DTIMG file".into()));
    }
    let w = r.u32()? as usize;
    let h = r.u32()? as usize;
    let px = f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as f64;
    let shape = GridShape::new(w, h, px)?;
    let data = r.f32s(shape.len())?;
    if !r.done() {
        return Err(Error::Format("trailing bytes after image data".into()));
    }
    ImageGrid::new(shape, data)
}

pub fn write_image(path: &Path, img: &ImageGrid) -> Result<()> {
    write_atomic(path, &encode_image(img))
}

pub fn read_image(path: &Path) -> Result<ImageGrid> {
    decode_image(&fs::read(path)?)
}

/// Contents of a sinogram or measurement file.
#[derive(Debug, Clone, PartialEq)]
pub struct SinogramFile {
    pub angles: Vec<f64>,
    pub n_det: usize,
    pub data: Vec<f64>,
    pub variance: Option<Vec<f64>>,
}

impl SinogramFile {
    pub fn n_views(&self) -> usize {
        self.angles.len()
    }
}

pub fn encode_sinogram(s: &SinogramFile) -> Result<Vec<u8>> {
    let n = s.angles.len() * s.n_det;
    if s.data.len() != n || s.variance.as_ref().is_some_and(|v| v.len() != n) {
        return Err(Error::ShapeMismatch {
            expected: n,
            actual: s.data.len(),
        });
    }
    let mut out = Vec::new();
    out.extend_from_slice(SINOGRAM_MAGIC);
    out.extend_from_slice(&(s.angles.len() as u32).to_le_bytes());
    out.extend_from_slice(&(s.n_det as u32).to_le_bytes());
    push_f32s(&mut out, &s.angles);
    push_f32s(&mut out, &s.data);
    if let Some(v) = &s.variance {
        out.extend_from_slice(VARIANCE_MARKER);
        push_f32s(&mut out, v);
    }
    Ok(out)
}

pub fn decode_sinogram(bytes: &[u8]) -> Result<SinogramFile> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(6)? != SINOGRAM_MAGIC {
        return Err(Error::Format("not a DTSIN file".into()));
    }
    let views = r.u32()? as usize;
    let n_det = r.u32()? as usize;
    if views == 0 || n_det == 0 {
        return Err(Error::Format("empty sinogram".into()));
    }
    let angles = r.f32s(views)?;
    let data = r.f32s(views * n_det)?;
    let variance = if r.done() {
        None
    } else {
        if r.take(4)? != VARIANCE_MARKER {
            return Err(Error::Format("unrecognized block after sinogram data".into()));
        }
        Some(r.f32s(views * n_det)?)
    };
    if !r.done() {
        return Err(Error::Format("trailing bytes after sinogram data".into()));
    }
    if data.iter().chain(variance.iter().flatten()).chain(&angles).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sinogram file"));
    }
    Ok(SinogramFile {
        angles,
        n_det,
        data,
        variance,
    })
}

pub fn write_sinogram(path: &Path, s: &SinogramFile) -> Result<()> {
    write_atomic(path, &encode_sinogram(s)?)
}

pub fn read_sinogram(path: &Path) -> Result<SinogramFile> {
    decode_sinogram(&fs::read(path)?)
}

/// 8-bit grayscale rendering with values in `[lo, hi]` mapped to `[0, 255]`.
pub fn write_png(path: &Path, img: &ImageGrid, window: (f64, f64)) -> Result<()> {
    let (lo, hi) = window;
    if !(hi > lo) {
        return Err(Error::InvalidArgument(format!("empty display window [{lo}, {hi}]")));
    }
    let pixels: Vec<u8> = img
        .data()
        .iter()
        .map(|v| ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let mut bytes = Vec::new();
    image::codecs::png::PngEncoder::new(&mut bytes)
        .write_image(&pixels, img.width() as u32, img.height() as u32, image::ExtendedColorType::L8)
        .map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, &bytes)
}
