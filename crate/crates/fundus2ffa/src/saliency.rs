//! Local saliency maps for angiography-like images.
//!
//! The background of a fluorescein angiogram is estimated with a large median
//! filter (large with respect to vessel diameters, small with respect to the
//! optic disc), the image itself is denoised with a small Gaussian, and the
//! saliency map is the contrast-scaled difference of the two. Vessels, disc
//! and leakage light up; values stay signed so hypofluorescent structure is
//! preserved for the loss.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{gaussian_filter, median_filter, Image};

/// Signed saliency raster plus the contrast factor it was computed with.
/// Scaling is exact: a map computed with factor `a` equals `a` times the map
/// computed with factor 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
    pub contrast_factor: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaliencyConfig {
    /// Background-estimation median kernel; should exceed the maximal vessel
    /// diameter (~15 px at full scale) and stay below the optic-disc
    /// diameter (~120 px).
    pub median_kernel: usize,
    pub gaussian_kernel: usize,
    pub gaussian_sigma: f64,
    /// Contrast factor `a`. For loss use it is redundant with the saliency
    /// loss weight and stays at 1.
    pub a: f64,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        SaliencyConfig {
            median_kernel: 51,
            gaussian_kernel: 7,
            gaussian_sigma: 1.5,
            a: 1.0,
        }
    }
}

impl SaliencyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.median_kernel == 0 || self.median_kernel % 2 == 0 {
            return Err(Error::Parameter(format!(
                "median kernel must be odd, got {}",
                self.median_kernel
            )));
        }
        if self.gaussian_kernel == 0 || self.gaussian_kernel % 2 == 0 {
            return Err(Error::Parameter(format!(
                "gaussian kernel must be odd, got {}",
                self.gaussian_kernel
            )));
        }
        if self.gaussian_sigma <= 0.0 {
            return Err(Error::Parameter(format!(
                "gaussian sigma must be > 0, got {}",
                self.gaussian_sigma
            )));
        }
        if !self.a.is_finite() {
            return Err(Error::Parameter(format!(
                "contrast factor must be finite, got {}",
                self.a
            )));
        }
        Ok(())
    }
}

/// Median-filtered background estimate of a single-channel image.
pub fn estimate_background(img: &Image, cfg: &SaliencyConfig) -> Result<Image> {
    cfg.validate()?;
    median_filter(img, cfg.median_kernel)
}

/// Saliency map: `a * (gaussian(img) - background(img))`. Values are signed
/// and never clamped.
pub fn compute_saliency(img: &Image, cfg: &SaliencyConfig) -> Result<SaliencyMap> {
    cfg.validate()?;
    if img.channels() != 1 {
        return Err(Error::Parameter(format!(
            "saliency expects a single-channel image, got {} channels",
            img.channels()
        )));
    }
    let filtered = gaussian_filter(img, cfg.gaussian_kernel, cfg.gaussian_sigma)?;
    let background = estimate_background(img, cfg)?;
    let data = filtered
        .data()
        .iter()
        .zip(background.data())
        .map(|(&f, &b)| cfg.a * (f - b))
        .collect();
    Ok(SaliencyMap {
        width: img.width(),
        height: img.height(),
        data,
        contrast_factor: cfg.a,
    })
}

/// Renders a signed map for display: 0 maps to mid-gray, the largest
/// magnitude to full black/white, output clamped to `[0,1]`. With
/// `color = true` a blue-white-red diverging ramp is applied instead.
pub fn saliency_to_visual(map: &SaliencyMap, color: bool) -> Image {
    let scale = map
        .data
        .iter()
        .fold(0.0f64, |acc, &v| acc.max(v.abs()));
    // Below this the map is numerically zero; rescaling would amplify
    // floating-point dust into full-contrast noise.
    let scale = if scale <= 1e-9 { 0.0 } else { scale };
    let normalized: Vec<f64> = map
        .data
        .iter()
        .map(|&v| {
            let t = if scale == 0.0 { 0.5 } else { 0.5 + 0.5 * v / scale };
            t.clamp(0.0, 1.0)
        })
        .collect();
    if !color {
        return Image::new(map.width, map.height, 1, normalized)
            .expect("normalized map is finite and sized");
    }
    let mut data = Vec::with_capacity(map.width * map.height * 3);
    for &t in &normalized {
        // Blue below mid, red above, white at the center.
        let (r, g, b) = if t < 0.5 {
            let u = t / 0.5;
            (u, u, 1.0)
        } else {
            let u = (1.0 - t) / 0.5;
            (1.0, u, u)
        };
        data.extend_from_slice(&[r, g, b]);
    }
    Image::new(map.width, map.height, 3, data).expect("ramp output is finite and sized")
}

/// Raw map layout: u32 LE width, u32 LE height, then width*height f32 LE
/// values in row-major order.
pub fn write_raw_map(path: &Path, map: &SaliencyMap) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut buf = Vec::with_capacity(8 + map.data.len() * 4);
    buf.extend_from_slice(&(map.width as u32).to_le_bytes());
    buf.extend_from_slice(&(map.height as u32).to_le_bytes());
    for &v in &map.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_raw_map(path: &Path) -> Result<SaliencyMap> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::Data(format!("{}: truncated header", path.display())));
    }
    let width = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expected = 8 + width * height * 4;
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "{}: expected {expected} bytes for {width}x{height}, got {}",
            path.display(),
            bytes.len()
        )));
    }
    let data = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(SaliencyMap {
        width,
        height,
        data,
        contrast_factor: 1.0,
    })
}
