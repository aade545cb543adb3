//! Preprocessing applied before each network: tag removal, resizing,
//! min-max scaling and masking of the second-stage input.

use crate::image::{BinaryMask, Image};

/// Default fraction of the image maximum above which pixels are considered
/// bright enough to belong to the breast or a marker tag.
pub const DEFAULT_TAG_THRESHOLD: f32 = 0.85;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessConfig {
    pub tag_threshold: f32,
    /// Square network input extent.
    pub target_size: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            tag_threshold: DEFAULT_TAG_THRESHOLD,
            target_size: 64,
        }
    }
}

/// Labels 8-connected components of `on`; returns per-pixel labels
/// (`usize::MAX` for background) and component sizes.
fn components(width: usize, height: usize, on: &[bool]) -> (Vec<usize>, Vec<usize>) {
    let mut labels = vec![usize::MAX; on.len()];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..on.len() {
        if !on[start] || labels[start] != usize::MAX {
            continue;
        }
        let label = sizes.len();
        let mut size = 0;
        labels[start] = label;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            size += 1;
            let (x, y) = ((idx % width) as isize, (idx / width) as isize);
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
                        continue;
                    }
                    let n = ny as usize * width + nx as usize;
                    if on[n] && labels[n] == usize::MAX {
                        labels[n] = label;
                        stack.push(n);
                    }
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Removes bright markers: among the 8-connected components of pixels above
/// `threshold · max`, every component except the largest (the breast) is
/// set to the image minimum.
pub fn remove_metal_tag(img: &Image, threshold: f32) -> Image {
    let (lo, hi) = img.min_max();
    let cut = threshold * hi;
    let on: Vec<bool> = img.pixels().iter().map(|&p| p > cut).collect();
    let (labels, sizes) = components(img.width(), img.height(), &on);
    if sizes.len() <= 1 {
        return img.clone();
    }
    // first component in scan order wins ties
    let keep = sizes
        .iter()
        .enumerate()
        .fold(0, |best, (i, &s)| if s > sizes[best] { i } else { best });
    let mut out = img.clone();
    for (p, &l) in out.pixels_mut().iter_mut().zip(&labels) {
        if l != usize::MAX && l != keep {
            *p = lo;
        }
    }
    out
}

/// Edge-aligned bilinear resampling: corner pixel centres map onto corner
/// pixel centres. The result keeps the source's `original_size`.
pub fn resize(img: &Image, width: usize, height: usize) -> Image {
    assert!(width > 0 && height > 0, "resize target must be positive");
    if img.size() == (width, height) {
        return img.clone();
    }
    let (sw, sh) = img.size();
    let scale = |src: usize, dst: usize| {
        if dst > 1 {
            (src - 1) as f64 / (dst - 1) as f64
        } else {
            0.0
        }
    };
    let (fx, fy) = (scale(sw, width), scale(sh, height));
    let src = img.pixels();
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let sy = y as f64 * fy;
        let y0 = (sy.floor() as usize).min(sh - 1);
        let y1 = (y0 + 1).min(sh - 1);
        let wy = sy - y0 as f64;
        for x in 0..width {
            let sx = x as f64 * fx;
            let x0 = (sx.floor() as usize).min(sw - 1);
            let x1 = (x0 + 1).min(sw - 1);
            let wx = sx - x0 as f64;
            let p = |xx: usize, yy: usize| src[yy * sw + xx] as f64;
            let top = p(x0, y0) * (1.0 - wx) + p(x1, y0) * wx;
            let bottom = p(x0, y1) * (1.0 - wx) + p(x1, y1) * wx;
            out.push((top * (1.0 - wy) + bottom * wy) as f32);
        }
    }
    img.derived(width, height, out)
}

/// `(p - min) / (max - min)`; a constant image maps to all zeros.
pub fn minmax_normalize(img: &Image) -> Image {
    let (lo, hi) = img.min_max();
    let pixels = if hi > lo {
        let range = hi - lo;
        img.pixels().iter().map(|&p| (p - lo) / range).collect()
    } else {
        vec![0.0; img.pixels().len()]
    };
    img.derived(img.width(), img.height(), pixels)
}

/// Zeroes everything outside `mask` and min-max rescales the pixels inside
/// it over the masked region only. An empty mask yields an all-zero image.
///
/// Panics if the mask and image sizes differ.
pub fn apply_breast_mask(img: &Image, mask: &BinaryMask) -> Image {
    assert_eq!(img.size(), mask.size(), "mask and image sizes differ");
    let (lo, hi) = img
        .pixels()
        .iter()
        .zip(mask.bits())
        .filter(|(_, &m)| m)
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), (&p, _)| (lo.min(p), hi.max(p)));
    let range = hi - lo;
    let pixels = img
        .pixels()
        .iter()
        .zip(mask.bits())
        .map(|(&p, &m)| {
            if m && range > 0.0 {
                (p - lo) / range
            } else {
                0.0
            }
        })
        .collect();
    img.derived(img.width(), img.height(), pixels)
}

/// Nearest-neighbour mask resampling: output pixel `x` reads source pixel
/// `floor(x · src / dst)`.
pub fn resample_mask(mask: &BinaryMask, width: usize, height: usize) -> BinaryMask {
    assert!(width > 0 && height > 0, "resample target must be positive");
    if mask.size() == (width, height) {
        return mask.clone();
    }
    let (sw, sh) = mask.size();
    BinaryMask::from_fn(width, height, |x, y| mask.get(x * sw / width, y * sh / height))
}

/// Stage-one input: tag removal, resize to the network extent, min-max.
pub fn preprocess(raw: &Image, config: &PreprocessConfig) -> Image {
    let cleaned = remove_metal_tag(raw, config.tag_threshold);
    let resized = resize(&cleaned, config.target_size, config.target_size);
    minmax_normalize(&resized)
}
