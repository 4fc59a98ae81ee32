//! 8-bit PNG loading and saving. Loading normalizes by 1/255; saving
//! multiplies by 255 and rounds half-to-even.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use super::Image;
use crate::error::{Error, Result};

pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    match img {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA8(_) => {
            from_gray(&img.to_luma8())
        }
        _ => from_rgb(&img.to_rgb8()),
    }
}

/// Loads as single-channel regardless of stored color type.
pub fn load_png_gray(path: &Path) -> Result<Image> {
    Ok(load_png(path)?.to_gray())
}

/// Loads as three-channel regardless of stored color type.
pub fn load_png_rgb(path: &Path) -> Result<Image> {
    Ok(load_png(path)?.to_rgb())
}

fn from_gray(img: &GrayImage) -> Result<Image> {
    let data = img.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
    Image::new(img.width() as usize, img.height() as usize, 1, data)
}

fn from_rgb(img: &RgbImage) -> Result<Image> {
    let mut data = Vec::with_capacity((img.width() * img.height() * 3) as usize);
    for p in img.pixels() {
        data.extend(p.0.iter().map(|&v| v as f64 / 255.0));
    }
    Image::new(img.width() as usize, img.height() as usize, 3, data)
}

#[inline]
fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let (w, h) = (img.width() as u32, img.height() as u32);
    let res = if img.channels() == 1 {
        let buf: Vec<u8> = img.data().iter().map(|&v| to_u8(v)).collect();
        GrayImage::from_raw(w, h, buf)
            .expect("buffer size checked by Image invariants")
            .save(path)
    } else {
        let buf: Vec<u8> = img.data().iter().map(|&v| to_u8(v)).collect();
        RgbImage::from_raw(w, h, buf)
            .expect("buffer size checked by Image invariants")
            .save(path)
    };
    res.map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))
}
