//! Fundamental raster type plus the spatial filters, ROI masking and patch
//! extraction everything else builds on.
//!
//! Pixels live in a canonical `[0,1]` range; conversion to `[0,255]` happens
//! only at 8-bit I/O and inside the quality metrics. Intermediate results of
//! filtering or network forward passes may leave the range, so only finiteness
//! is enforced here.

mod filter;
pub mod io;

pub use filter::{
    gaussian_filter, gaussian_filter_adjoint, gaussian_kernel, median_filter,
    median_filter_argmed, median_filter_reference,
};

use crate::error::{Error, Result};

/// Single- or three-channel float raster, row-major, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Image> {
        if channels != 1 && channels != 3 {
            return Err(Error::Parameter(format!(
                "image channels must be 1 or 3, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Parameter(format!(
                "image data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite pixel value {v}")));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Image {
        Image::constant(width, height, channels, 0.0)
    }

    pub fn constant(width: usize, height: usize, channels: usize, value: f64) -> Image {
        assert!(channels == 1 || channels == 3);
        Image {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.idx(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.idx(x, y, c);
        self.data[i] = v;
    }

    /// Channel mean, collapsing to a single channel. Identity for 1-channel
    /// images.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.width * self.height);
        for px in self.data.chunks_exact(self.channels) {
            data.push(px.iter().sum::<f64>() / self.channels as f64);
        }
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Replicates a single channel to three. Identity for 3-channel images.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.width * self.height * 3);
        for &v in &self.data {
            data.extend_from_slice(&[v, v, v]);
        }
        Image {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Parameter(format!(
                "crop {w}x{h}+{x0}+{y0} exceeds image {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * self.channels);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * self.channels;
            data.extend_from_slice(&self.data[start..start + w * self.channels]);
        }
        Ok(Image {
            width: w,
            height: h,
            channels: self.channels,
            data,
        })
    }
}

/// Spatial filter parameterization. `sigma` is required for the Gaussian
/// kind and ignored for the median.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub kernel_size: usize,
    pub sigma: Option<f64>,
    pub border: Border,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Median,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Border {
    Reflect,
}

impl FilterSpec {
    pub fn median(kernel_size: usize) -> FilterSpec {
        FilterSpec {
            kind: FilterKind::Median,
            kernel_size,
            sigma: None,
            border: Border::Reflect,
        }
    }

    pub fn gaussian(kernel_size: usize, sigma: f64) -> FilterSpec {
        FilterSpec {
            kind: FilterKind::Gaussian,
            kernel_size,
            sigma: Some(sigma),
            border: Border::Reflect,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::Parameter(format!(
                "kernel size must be odd and >= 1, got {}",
                self.kernel_size
            )));
        }
        if self.kind == FilterKind::Gaussian {
            match self.sigma {
                Some(s) if s > 0.0 => {}
                other => {
                    return Err(Error::Parameter(format!(
                        "gaussian filter requires sigma > 0, got {other:?}"
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn apply(&self, img: &Image) -> Result<Image> {
        self.validate()?;
        match self.kind {
            FilterKind::Median => median_filter(img, self.kernel_size),
            FilterKind::Gaussian => gaussian_filter(img, self.kernel_size, self.sigma.unwrap()),
        }
    }
}

/// Binary circular mask of the given size; 1 where the pixel center lies in
/// or on the inscribed circle (diameter = size), 0 outside.
pub fn circular_roi_mask(size: usize) -> Result<Image> {
    if size == 0 {
        return Err(Error::Parameter("mask size must be > 0".into()));
    }
    let mut mask = Image::zeros(size, size, 1);
    let center = size as f64 / 2.0;
    let r2 = center * center;
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 + 0.5 - center;
            let dy = y as f64 + 0.5 - center;
            if dx * dx + dy * dy <= r2 {
                mask.set(x, y, 0, 1.0);
            }
        }
    }
    Ok(mask)
}

/// Per-pixel, per-channel product of an image with a single-channel mask.
pub fn apply_mask(img: &Image, mask: &Image) -> Result<Image> {
    if mask.channels() != 1 {
        return Err(Error::Parameter(format!(
            "mask must be single-channel, got {}",
            mask.channels()
        )));
    }
    if img.width() != mask.width() || img.height() != mask.height() {
        return Err(Error::Parameter(format!(
            "mask {}x{} does not match image {}x{}",
            mask.width(),
            mask.height(),
            img.width(),
            img.height()
        )));
    }
    let mut out = img.clone();
    let c = img.channels();
    for (px, &m) in out.data_mut().chunks_exact_mut(c).zip(mask.data()) {
        for v in px {
            *v *= m;
        }
    }
    Ok(out)
}

/// All square patches whose top-left origins lie on the stride grid and that
/// fit fully inside the image, in row-major origin order.
pub fn extract_patches(
    img: &Image,
    patch: usize,
    stride: usize,
) -> Result<Vec<(Image, (usize, usize))>> {
    extract_patches_rect(img, patch, patch, stride, stride)
}

/// Rectangular variant of [`extract_patches`]; `pw`/`ph` are the patch width
/// and height, `sx`/`sy` the grid strides.
pub fn extract_patches_rect(
    img: &Image,
    pw: usize,
    ph: usize,
    sx: usize,
    sy: usize,
) -> Result<Vec<(Image, (usize, usize))>> {
    if pw == 0 || ph == 0 {
        return Err(Error::Parameter("patch size must be >= 1".into()));
    }
    if pw > img.width() || ph > img.height() {
        return Err(Error::Parameter(format!(
            "patch {pw}x{ph} exceeds image {}x{}",
            img.width(),
            img.height()
        )));
    }
    if sx == 0 || sy == 0 {
        return Err(Error::Parameter("stride must be >= 1".into()));
    }
    let mut out = Vec::new();
    let mut y = 0;
    while y + ph <= img.height() {
        let mut x = 0;
        while x + pw <= img.width() {
            out.push((img.crop(x, y, pw, ph)?, (x, y)));
            x += sx;
        }
        y += sy;
    }
    Ok(out)
}

/// Pastes patches back at their origins. With stride = patch size this
/// reproduces the covered region bit-exactly.
pub fn reassemble_patches(
    patches: &[(Image, (usize, usize))],
    width: usize,
    height: usize,
    channels: usize,
) -> Image {
    let mut out = Image::zeros(width, height, channels);
    for (patch, (ox, oy)) in patches {
        for y in 0..patch.height() {
            for x in 0..patch.width() {
                for c in 0..channels {
                    out.set(ox + x, oy + y, c, patch.get(x, y, c));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_invariants_enforced() {
        assert!(Image::new(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(Image::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Image::new(2, 1, 1, vec![0.0, f64::NAN]).is_err());
        assert!(Image::new(2, 2, 1, vec![0.5; 4]).is_ok());
    }

    #[test]
    fn mask_center_one_corner_zero() {
        let mask = circular_roi_mask(512).unwrap();
        assert_eq!(mask.get(255, 255, 0), 1.0);
        assert_eq!(mask.get(256, 256, 0), 1.0);
        assert_eq!(mask.get(0, 0, 0), 0.0);
        assert_eq!(mask.get(511, 511, 0), 0.0);
    }

    #[test]
    fn mask_area_fraction_close_to_quarter_pi() {
        let mask = circular_roi_mask(512).unwrap();
        let ones: f64 = mask.data().iter().sum();
        let fraction = ones / (512.0 * 512.0);
        let expected = std::f64::consts::PI / 4.0;
        assert!(
            (fraction - expected).abs() < 0.01,
            "fraction {fraction} vs {expected}"
        );
    }

    #[test]
    fn apply_mask_identity_and_annihilation() {
        let img = Image::new(3, 2, 3, (0..18).map(|i| i as f64 / 18.0).collect()).unwrap();
        let ones = Image::constant(3, 2, 1, 1.0);
        let zeros = Image::zeros(3, 2, 1);
        assert_eq!(apply_mask(&img, &ones).unwrap(), img);
        assert!(apply_mask(&img, &zeros)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn apply_mask_zero_outside_circle() {
        let img = Image::constant(16, 16, 1, 0.7);
        let mask = circular_roi_mask(16).unwrap();
        let out = apply_mask(&img, &mask).unwrap();
        assert_eq!(out.get(0, 0, 0), 0.0);
        assert_eq!(out.get(8, 8, 0), 0.7);
    }

    #[test]
    fn apply_mask_shape_mismatch_rejected() {
        let img = Image::zeros(4, 4, 1);
        let mask = Image::zeros(3, 4, 1);
        assert!(apply_mask(&img, &mask).is_err());
    }

    #[test]
    fn patches_single_full_size() {
        let img = Image::zeros(512, 512, 1);
        let patches = extract_patches(&img, 512, 512).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0].1, (0, 0));
    }

    #[test]
    fn patches_grid_enumeration() {
        let img = Image::zeros(768, 768, 1);
        let patches = extract_patches(&img, 512, 256).unwrap();
        let origins: Vec<_> = patches.iter().map(|p| p.1).collect();
        assert_eq!(origins, vec![(0, 0), (256, 0), (0, 256), (256, 256)]);
    }

    #[test]
    fn patches_rect_image_square_patch() {
        // 360x288 source with a 288 patch leaves room along x only.
        let img = Image::zeros(360, 288, 1);
        let patches = extract_patches(&img, 288, 72).unwrap();
        let origins: Vec<_> = patches.iter().map(|p| p.1).collect();
        assert_eq!(origins, vec![(0, 0), (72, 0)]);
    }

    #[test]
    fn patches_oversized_rejected() {
        let img = Image::zeros(100, 100, 1);
        assert!(extract_patches(&img, 128, 128).is_err());
    }

    #[test]
    fn patch_roundtrip_bit_exact() {
        let data: Vec<f64> = (0..64 * 64).map(|i| (i % 251) as f64 / 251.0).collect();
        let img = Image::new(64, 64, 1, data).unwrap();
        let patches = extract_patches(&img, 16, 16).unwrap();
        let back = reassemble_patches(&patches, 64, 64, 1);
        assert_eq!(back, img);
    }
}
