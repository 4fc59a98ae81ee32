//! Minimal dense-tensor machinery for the forward and backward passes of
//! the two networks. Everything is f64, single-sample (CHW), and strictly
//! deterministic: no threading, seeded initialization, explicit backward
//! implementations per layer.

pub mod layers;

use crate::error::{Error, Result};
use crate::raster::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape/data mismatch"
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// (channels, height, width) of a rank-3 tensor.
    pub fn dims3(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected CHW tensor");
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A learnable tensor together with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Param {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// HWC image to CHW tensor.
pub fn tensor_from_image(img: &Image) -> Tensor {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let mut data = vec![0.0; w * h * c];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                data[ch * h * w + y * w + x] = img.get(x, y, ch);
            }
        }
    }
    Tensor::from_vec(&[c, h, w], data)
}

/// CHW tensor (1 or 3 channels) back to an HWC image.
pub fn image_from_tensor(t: &Tensor) -> Result<Image> {
    let (c, h, w) = t.dims3();
    if c != 1 && c != 3 {
        return Err(Error::Parameter(format!(
            "cannot convert {c}-channel tensor to image"
        )));
    }
    let mut data = vec![0.0; w * h * c];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                data[(y * w + x) * c + ch] = t.data()[ch * h * w + y * w + x];
            }
        }
    }
    Image::new(w, h, c, data)
}
