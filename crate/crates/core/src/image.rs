//! Single-channel rasters and binary masks.

use crate::error::{Error, Result};

/// Floating-point grey-level raster, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
    /// Extents at ingestion, kept through resizing so predictions can be
    /// mapped back.
    original_size: (usize, usize),
}

impl Image {
    /// A freshly ingested image; its own extents become `original_size`.
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape("image extents must be positive"));
        }
        if pixels.len() != width * height {
            return Err(Error::shape(format!(
                "{width}×{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Image {
            width,
            height,
            pixels,
            original_size: (width, height),
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Image::new(width, height, vec![value; width * height]).expect("positive extents")
    }

    /// Same original size as `self`, new raster.
    pub(crate) fn derived(&self, width: usize, height: usize, pixels: Vec<f32>) -> Self {
        debug_assert_eq!(pixels.len(), width * height);
        Image {
            width,
            height,
            pixels,
            original_size: self.original_size,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn original_size(&self) -> (usize, usize) {
        self.original_size
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.pixels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &p| (lo.min(p), hi.max(p)))
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&p| p as f64).sum::<f64>() / self.pixels.len() as f64
    }
}

/// Per-pixel boolean raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape("mask extents must be positive"));
        }
        if bits.len() != width * height {
            return Err(Error::shape(format!(
                "{width}×{height} mask needs {} bits, got {}",
                width * height,
                bits.len()
            )));
        }
        Ok(BinaryMask {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        BinaryMask::new(width, height, vec![false; width * height]).expect("positive extents")
    }

    pub fn full(width: usize, height: usize) -> Self {
        BinaryMask::new(width, height, vec![true; width * height]).expect("positive extents")
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        BinaryMask::new(width, height, bits).expect("positive extents")
    }

    /// Thresholds probabilities: a pixel is set when `p > threshold`.
    pub fn from_probabilities(width: usize, height: usize, probs: &[f32], threshold: f32) -> Result<Self> {
        BinaryMask::new(width, height, probs.iter().map(|&p| p > threshold).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    fn check_same_size(&self, other: &BinaryMask) -> Result<()> {
        if self.size() != other.size() {
            return Err(Error::shape(format!(
                "mask {:?} vs {:?}",
                self.size(),
                other.size()
            )));
        }
        Ok(())
    }

    pub fn intersect(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same_size(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect();
        BinaryMask::new(self.width, self.height, bits)
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> Result<usize> {
        self.check_same_size(other)?;
        Ok(self.bits.iter().zip(&other.bits).filter(|(&a, &b)| a && b).count())
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.size() == other.size() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// 0.0 / 1.0 per pixel.
    pub fn to_f32(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_set_algebra() {
        let a = BinaryMask::from_fn(4, 4, |x, _| x < 2);
        let b = BinaryMask::from_fn(4, 4, |_, y| y < 1);
        assert_eq!(a.count(), 8);
        assert_eq!(a.intersection_count(&b).unwrap(), 2);
        assert!(a.intersect(&b).unwrap().is_subset_of(&a));
        assert!(!a.is_subset_of(&b));
        assert!(a.intersect(&BinaryMask::empty(3, 4)).is_err());
    }

    #[test]
    fn original_size_survives_derivation() {
        let img = Image::filled(6, 4, 1.0);
        let small = img.derived(3, 2, vec![0.0; 6]);
        assert_eq!(small.size(), (3, 2));
        assert_eq!(small.original_size(), (6, 4));
    }
}
