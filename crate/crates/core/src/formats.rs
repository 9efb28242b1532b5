//! Little-endian binary files for images and sinograms, plus 16-bit PGM
//! export for viewing.
//!
//! Image: `IMGF`, u32 version, u32 height, u32 width, f32 samples row-major.
//! Sinogram: `SINF`, u32 version, u32 views, u32 detectors, f32 samples.

use std::fs;
use std::path::Path;

use crate::error::{file_err, PtdError, Result};
use crate::fanbeam::Sinogram;
use crate::image::Image;

pub const IMAGE_MAGIC: &[u8; 4] = b"IMGF";
pub const SINOGRAM_MAGIC: &[u8; 4] = b"SINF";
pub const FORMAT_VERSION: u32 = 1;

/// Display window in HU used for PGM export by default.
pub const DEFAULT_WINDOW_HU: (f64, f64) = (-160.0, 240.0);

/// Normalized value to HU: 0 is air (-1000), 0.5 is water (0).
pub fn to_hu(v: f64) -> f64 {
    -1000.0 + 2000.0 * v
}

/// Cursor over a byte buffer; every read checks for truncation.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(PtdError::Format(format!(
                "{}: truncated at byte {} (needed {} more, {} left)",
                self.what,
                self.pos,
                n,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| PtdError::Format("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let m = self.take(4)?;
        if m != expected {
            return Err(PtdError::Format(format!(
                "{}: bad magic {:?}, expected {:?}",
                self.what,
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    pub(crate) fn version(&mut self, supported: u32) -> Result<u32> {
        let v = self.u32()?;
        if v == 0 || v > supported {
            return Err(PtdError::UnsupportedVersion { found: v, supported });
        }
        Ok(v)
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(PtdError::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, data: &[f64]) {
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn dim_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| PtdError::Format(format!("dimension {} does not fit in u32", n)))
}

pub fn image_to_bytes(img: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 4 * img.len());
    out.extend_from_slice(IMAGE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&dim_u32(img.height())?.to_le_bytes());
    out.extend_from_slice(&dim_u32(img.width())?.to_le_bytes());
    put_f32s(&mut out, img.data());
    Ok(out)
}

pub fn image_from_bytes(bytes: &[u8]) -> Result<Image> {
    let mut r = ByteReader::new(bytes, "image");
    r.magic(IMAGE_MAGIC)?;
    r.version(FORMAT_VERSION)?;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    if h == 0 || w == 0 {
        return Err(PtdError::Format(format!("image: empty shape {}x{}", h, w)));
    }
    let data = r.f32s(h * w)?;
    r.finish()?;
    Image::from_vec(h, w, data)
}

pub fn sinogram_to_bytes(sino: &Sinogram) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 4 * sino.data.len());
    out.extend_from_slice(SINOGRAM_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&dim_u32(sino.n_views)?.to_le_bytes());
    out.extend_from_slice(&dim_u32(sino.n_det)?.to_le_bytes());
    put_f32s(&mut out, &sino.data);
    Ok(out)
}

pub fn sinogram_from_bytes(bytes: &[u8]) -> Result<Sinogram> {
    let mut r = ByteReader::new(bytes, "sinogram");
    r.magic(SINOGRAM_MAGIC)?;
    r.version(FORMAT_VERSION)?;
    let v = r.u32()? as usize;
    let d = r.u32()? as usize;
    if v == 0 || d == 0 {
        return Err(PtdError::Format(format!("sinogram: empty shape {}x{}", v, d)));
    }
    let data = r.f32s(v * d)?;
    r.finish()?;
    Sinogram::from_vec(v, d, data)
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, image_to_bytes(img)?).map_err(file_err(path))?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Image> {
    image_from_bytes(&fs::read(path).map_err(file_err(path))?)
}

pub fn write_sinogram(path: &Path, sino: &Sinogram) -> Result<()> {
    fs::write(path, sinogram_to_bytes(sino)?).map_err(file_err(path))?;
    Ok(())
}

pub fn read_sinogram(path: &Path) -> Result<Sinogram> {
    sinogram_from_bytes(&fs::read(path).map_err(file_err(path))?)
}

/// Binary 16-bit PGM with the HU window mapped linearly onto 0..=65535.
pub fn image_to_pgm(img: &Image, window_hu: (f64, f64)) -> Result<Vec<u8>> {
    let (lo, hi) = window_hu;
    if !(hi > lo) {
        return Err(PtdError::InvalidArgument(format!("empty display window {:?}", window_hu)));
    }
    let mut out = format!("P5\n{} {}\n65535\n", img.width(), img.height()).into_bytes();
    for &v in img.data() {
        let frac = ((to_hu(v) - lo) / (hi - lo)).clamp(0.0, 1.0);
        let level = if frac.is_nan() { 0 } else { (frac * 65535.0).round() as u16 };
        out.extend_from_slice(&level.to_be_bytes());
    }
    Ok(out)
}

pub fn write_pgm(path: &Path, img: &Image, window_hu: (f64, f64)) -> Result<()> {
    fs::write(path, image_to_pgm(img, window_hu)?).map_err(file_err(path))?;
    Ok(())
}
