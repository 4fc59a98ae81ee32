//! Median and Gaussian filtering with reflect borders.
//!
//! The median uses the constant-time sliding-histogram scheme: one 256-bin
//! histogram per image column, updated once per row, merged into a kernel
//! histogram per pixel step. Cost per pixel is independent of the kernel
//! size. Inputs are quantized to 8 bits first; images originate as 8-bit
//! files so the quantization is lossless in practice.

use super::Image;
use crate::error::{Error, Result};

/// Mirror index without repeating the edge sample: `-1 -> 1`, `n -> n-2`.
/// Valid for excursions up to `n-1`, i.e. kernel sizes up to `2n-1`.
#[inline]
pub(crate) fn reflect(t: isize, n: usize) -> usize {
    let n = n as isize;
    let mut t = t;
    if t < 0 {
        t = -t;
    }
    if t >= n {
        t = 2 * (n - 1) - t;
    }
    debug_assert!(t >= 0 && t < n);
    t as usize
}

#[inline]
pub(crate) fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn check_odd_kernel(k: usize) -> Result<()> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::Parameter(format!(
            "kernel size must be odd and >= 1, got {k}"
        )));
    }
    Ok(())
}

// Per-column histogram over the current row window, with a 16-bucket coarse
// level so the median search never scans all 256 bins.
struct ColHist {
    fine: [u16; 256],
    coarse: [u16; 16],
}

impl ColHist {
    fn new() -> ColHist {
        ColHist {
            fine: [0; 256],
            coarse: [0; 16],
        }
    }

    #[inline]
    fn add(&mut self, v: u8) {
        self.fine[v as usize] += 1;
        self.coarse[(v >> 4) as usize] += 1;
    }

    #[inline]
    fn remove(&mut self, v: u8) {
        self.fine[v as usize] -= 1;
        self.coarse[(v >> 4) as usize] -= 1;
    }
}

struct KernelHist {
    fine: [u32; 256],
    coarse: [u32; 16],
}

impl KernelHist {
    fn new() -> KernelHist {
        KernelHist {
            fine: [0; 256],
            coarse: [0; 16],
        }
    }

    fn clear(&mut self) {
        self.fine.fill(0);
        self.coarse.fill(0);
    }

    #[inline]
    fn add_col(&mut self, col: &ColHist) {
        for (dst, &src) in self.fine.iter_mut().zip(col.fine.iter()) {
            *dst += src as u32;
        }
        for (dst, &src) in self.coarse.iter_mut().zip(col.coarse.iter()) {
            *dst += src as u32;
        }
    }

    #[inline]
    fn sub_col(&mut self, col: &ColHist) {
        for (dst, &src) in self.fine.iter_mut().zip(col.fine.iter()) {
            *dst -= src as u32;
        }
        for (dst, &src) in self.coarse.iter_mut().zip(col.coarse.iter()) {
            *dst -= src as u32;
        }
    }

    /// Value of the `rank`-th smallest element (1-based).
    #[inline]
    fn select(&self, rank: u32) -> u8 {
        let mut cum = 0u32;
        for (bucket, &c) in self.coarse.iter().enumerate() {
            if cum + c >= rank {
                let mut fine_cum = cum;
                for bin in bucket * 16..(bucket + 1) * 16 {
                    fine_cum += self.fine[bin];
                    if fine_cum >= rank {
                        return bin as u8;
                    }
                }
            }
            cum += c;
        }
        255
    }
}

/// Median filter over a k x k reflect-padded neighborhood of a
/// single-channel image. Exact on 8-bit-quantized inputs; O(1) amortized
/// per pixel in the kernel size.
pub fn median_filter(img: &Image, k: usize) -> Result<Image> {
    check_odd_kernel(k)?;
    if img.channels() != 1 {
        return Err(Error::Parameter(format!(
            "median filter requires a single-channel image, got {} channels",
            img.channels()
        )));
    }
    let (w, h) = (img.width(), img.height());
    let max_k = 2 * w.min(h) - 1;
    if k > max_k {
        return Err(Error::Parameter(format!(
            "kernel {k} exceeds maximum {max_k} for a {w}x{h} image"
        )));
    }

    let q: Vec<u8> = img.data().iter().map(|&v| quantize_u8(v)).collect();
    let p = (k - 1) / 2;
    let rank = (k * k) as u32 / 2 + 1;

    let mut cols: Vec<ColHist> = (0..w).map(|_| ColHist::new()).collect();
    for (x, col) in cols.iter_mut().enumerate() {
        for t in -(p as isize)..=(p as isize) {
            col.add(q[reflect(t, h) * w + x]);
        }
    }

    let mut out = vec![0.0f64; w * h];
    let mut kernel = KernelHist::new();
    for y in 0..h {
        kernel.clear();
        for t in -(p as isize)..=(p as isize) {
            kernel.add_col(&cols[reflect(t, w)]);
        }
        out[y * w] = median_value_of(kernel.select(rank));
        for x in 1..w {
            kernel.sub_col(&cols[reflect(x as isize - 1 - p as isize, w)]);
            kernel.add_col(&cols[reflect(x as isize + p as isize, w)]);
            out[y * w + x] = median_value_of(kernel.select(rank));
        }
        if y + 1 < h {
            let drop = reflect(y as isize - p as isize, h);
            let gain = reflect(y as isize + 1 + p as isize, h);
            for (x, col) in cols.iter_mut().enumerate() {
                col.remove(q[drop * w + x]);
                col.add(q[gain * w + x]);
            }
        }
    }

    Image::new(w, h, 1, out)
}

#[inline]
fn median_value_of(bin: u8) -> f64 {
    bin as f64 / 255.0
}

/// Normalized 1D Gaussian taps of odd length `k`.
pub fn gaussian_kernel(k: usize, sigma: f64) -> Vec<f64> {
    let c = (k / 2) as f64;
    let mut taps: Vec<f64> = (0..k)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Separable Gaussian blur with a normalized truncated kernel and reflect
/// padding. Linear in the input; applied per channel.
pub fn gaussian_filter(img: &Image, k: usize, sigma: f64) -> Result<Image> {
    check_odd_kernel(k)?;
    if sigma <= 0.0 {
        return Err(Error::Parameter(format!("sigma must be > 0, got {sigma}")));
    }
    let (w, h) = (img.width(), img.height());
    if k > 2 * w.min(h) - 1 {
        return Err(Error::Parameter(format!(
            "kernel {k} exceeds maximum {} for a {w}x{h} image",
            2 * w.min(h) - 1
        )));
    }
    let taps = gaussian_kernel(k, sigma);
    let p = (k / 2) as isize;
    let ch = img.channels();

    let mut out = img.clone();
    for c in 0..ch {
        let mut plane: Vec<f64> = (0..w * h)
            .map(|i| img.data()[i * ch + c])
            .collect();
        plane = pass_rows(&plane, w, h, &taps, p);
        plane = pass_cols(&plane, w, h, &taps, p);
        for (i, v) in plane.into_iter().enumerate() {
            out.data_mut()[i * ch + c] = v;
        }
    }
    Ok(out)
}

fn pass_rows(plane: &[f64], w: usize, h: usize, taps: &[f64], p: isize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        let orow = &mut out[y * w..(y + 1) * w];
        for (x, o) in orow.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, &t) in taps.iter().enumerate() {
                acc += t * row[reflect(x as isize + j as isize - p, w)];
            }
            *o = acc;
        }
    }
    out
}

fn pass_cols(plane: &[f64], w: usize, h: usize, taps: &[f64], p: isize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let orow = &mut out[y * w..(y + 1) * w];
        for (j, &t) in taps.iter().enumerate() {
            let sy = reflect(y as isize + j as isize - p, h);
            let srow = &plane[sy * w..(sy + 1) * w];
            for (o, &s) in orow.iter_mut().zip(srow) {
                *o += t * s;
            }
        }
    }
    out
}

/// Adjoint of [`gaussian_filter`] on a single-channel image: for
/// `y = G(x)`, maps a gradient with respect to `y` to the gradient with
/// respect to `x`. Reflect padding folds border contributions back onto
/// their mirror sources.
pub fn gaussian_filter_adjoint(grad: &Image, k: usize, sigma: f64) -> Result<Image> {
    check_odd_kernel(k)?;
    if sigma <= 0.0 {
        return Err(Error::Parameter(format!("sigma must be > 0, got {sigma}")));
    }
    if grad.channels() != 1 {
        return Err(Error::Parameter(
            "gaussian adjoint expects a single-channel gradient".into(),
        ));
    }
    let (w, h) = (grad.width(), grad.height());
    let taps = gaussian_kernel(k, sigma);
    let p = (k / 2) as isize;

    // Adjoint of (rows then cols) is (cols-adjoint then rows-adjoint).
    let mid = adjoint_cols(grad.data(), w, h, &taps, p);
    let out = adjoint_rows(&mid, w, h, &taps, p);
    Image::new(w, h, 1, out)
}

fn adjoint_rows(plane: &[f64], w: usize, h: usize, taps: &[f64], p: isize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let grow = &plane[y * w..(y + 1) * w];
        let orow = &mut out[y * w..(y + 1) * w];
        for (x, &g) in grow.iter().enumerate() {
            for (j, &t) in taps.iter().enumerate() {
                orow[reflect(x as isize + j as isize - p, w)] += t * g;
            }
        }
    }
    out
}

fn adjoint_cols(plane: &[f64], w: usize, h: usize, taps: &[f64], p: isize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let grow = &plane[y * w..(y + 1) * w];
        for (j, &t) in taps.iter().enumerate() {
            let sy = reflect(y as isize + j as isize - p, h);
            let orow = &mut out[sy * w..(sy + 1) * w];
            for (o, &g) in orow.iter_mut().zip(grow) {
                *o += t * g;
            }
        }
    }
    out
}

/// Median filter that also reports, per output pixel, the linear input
/// index of the selected element (ties resolved to the lowest row-major
/// input index). Used by the exact-subgradient mode of the saliency loss;
/// costs O(k^2) per pixel.
pub fn median_filter_argmed(img: &Image, k: usize) -> Result<(Image, Vec<usize>)> {
    check_odd_kernel(k)?;
    if img.channels() != 1 {
        return Err(Error::Parameter(
            "median argmed requires a single-channel image".into(),
        ));
    }
    let (w, h) = (img.width(), img.height());
    if k > 2 * w.min(h) - 1 {
        return Err(Error::Parameter(format!("kernel {k} too large")));
    }
    let q: Vec<u8> = img.data().iter().map(|&v| quantize_u8(v)).collect();
    let p = (k / 2) as isize;
    let rank = (k * k) / 2 + 1;
    let mut out = vec![0.0; w * h];
    let mut argmed = vec![0usize; w * h];
    let mut counts = [0u32; 256];
    for y in 0..h {
        for x in 0..w {
            counts.fill(0);
            for dy in -p..=p {
                let sy = reflect(y as isize + dy, h);
                for dx in -p..=p {
                    let sx = reflect(x as isize + dx, w);
                    counts[q[sy * w + sx] as usize] += 1;
                }
            }
            let mut cum = 0u32;
            let mut bin = 255u8;
            for (b, &c) in counts.iter().enumerate() {
                cum += c;
                if cum >= rank as u32 {
                    bin = b as u8;
                    break;
                }
            }
            let mut min_idx = usize::MAX;
            for dy in -p..=p {
                let sy = reflect(y as isize + dy, h);
                for dx in -p..=p {
                    let sx = reflect(x as isize + dx, w);
                    let idx = sy * w + sx;
                    if q[idx] == bin && idx < min_idx {
                        min_idx = idx;
                    }
                }
            }
            out[y * w + x] = bin as f64 / 255.0;
            argmed[y * w + x] = min_idx;
        }
    }
    Ok((Image::new(w, h, 1, out)?, argmed))
}

/// Brute-force median by sorting each reflect-padded window; shares the 8-bit
/// quantization with the fast path and defines its ground truth. Kept out of
/// `#[cfg(test)]` so integration suites can call it as an oracle.
pub fn median_filter_reference(img: &Image, k: usize) -> Result<Image> {
    check_odd_kernel(k)?;
    if img.channels() != 1 {
        return Err(Error::Parameter("reference median is single-channel".into()));
    }
    let (w, h) = (img.width(), img.height());
    if k > 2 * w.min(h) - 1 {
        return Err(Error::Parameter(format!("kernel {k} too large")));
    }
    let q: Vec<f64> = img
        .data()
        .iter()
        .map(|&v| quantize_u8(v) as f64 / 255.0)
        .collect();
    let p = (k / 2) as isize;
    let mut out = vec![0.0; w * h];
    let mut window = Vec::with_capacity(k * k);
    for y in 0..h {
        for x in 0..w {
            window.clear();
            for dy in -p..=p {
                for dx in -p..=p {
                    let sy = reflect(y as isize + dy, h);
                    let sx = reflect(x as isize + dx, w);
                    window.push(q[sy * w + sx]);
                }
            }
            window.sort_by(|a, b| a.partial_cmp(b).unwrap());
            out[y * w + x] = window[window.len() / 2];
        }
    }
    Image::new(w, h, 1, out)
}
