//! Single-channel 2D images, row-major, row 0 at the top.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err(
                "Image::from_vec",
                format!("{}x{} image needs {} values, got {}", height, width, height * width, data.len()),
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise `f(self, other)`.
    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Result<Image> {
        self.check_same_shape(other, "Image::zip_map")?;
        Ok(Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn scale(&self, c: f64) -> Image {
        self.map(|v| v * c)
    }

    pub fn dot(&self, other: &Image) -> Result<f64> {
        self.check_same_shape(other, "Image::dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Image) -> Result<f64> {
        self.check_same_shape(other, "Image::max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Image {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Mean over non-overlapping 2x2 blocks.
    pub fn downsample2(&self) -> Result<Image> {
        if !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) {
            return Err(shape_err(
                "Image::downsample2",
                format!("dims must be even, got {}x{}", self.height, self.width),
            ));
        }
        let (h, w) = (self.height / 2, self.width / 2);
        Ok(Image::from_fn(h, w, |r, c| {
            0.25 * (self.get(2 * r, 2 * c)
                + self.get(2 * r, 2 * c + 1)
                + self.get(2 * r + 1, 2 * c)
                + self.get(2 * r + 1, 2 * c + 1))
        }))
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(vec![1, 1, self.height, self.width], self.data.clone())
            .expect("image shape is consistent")
    }

    pub(crate) fn check_same_shape(&self, other: &Image, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }
}

/// Stacks equally sized images into an `[N, 1, H, W]` tensor.
pub fn stack(images: &[&Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| shape_err("stack", "no images"))?;
    let (h, w) = first.shape();
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        first.check_same_shape(img, "stack")?;
        data.extend_from_slice(img.data());
    }
    Tensor::from_vec(vec![images.len(), 1, h, w], data)
}

/// Splits an `[N, 1, H, W]` tensor into images.
pub fn unstack(t: &Tensor) -> Result<Vec<Image>> {
    let s = t.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(shape_err("unstack", format!("expected [N,1,H,W], got {:?}", s)));
    }
    let plane = s[2] * s[3];
    Ok(t.data()
        .chunks(plane)
        .map(|chunk| Image::from_vec(s[2], s[3], chunk.to_vec()).expect("plane size"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_block_mean() {
        let img = Image::from_vec(2, 2, vec![0.0, 0.0, 0.0, 4.0]).unwrap();
        assert_eq!(img.downsample2().unwrap().data(), &[1.0]);
        assert!(Image::zeros(3, 4).downsample2().is_err());
    }

    #[test]
    fn stack_roundtrip() {
        let a = Image::filled(4, 4, 1.0);
        let b = Image::filled(4, 4, 2.0);
        let t = stack(&[&a, &b]).unwrap();
        assert_eq!(t.shape(), &[2, 1, 4, 4]);
        let back = unstack(&t).unwrap();
        assert_eq!(back, vec![a, b]);
    }

    #[test]
    fn from_vec_rejects_bad_len() {
        assert!(Image::from_vec(2, 3, vec![0.0; 5]).is_err());
    }
}
