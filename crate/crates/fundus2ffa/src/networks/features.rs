//! Frozen convolutional feature extractor for the perceptual loss: a
//! VGG19-shaped prefix (3x3 convs + ReLU, 2x2 max pools) truncated at a tap
//! point (i, j) = j-th convolution before the i-th pooling layer.
//!
//! Weights are never updated by training. They come either from a tensor
//! file or from a seeded random draw; the fixed-random mode keeps the stack
//! deterministic across processes, which is all the loss needs at desk
//! scale.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::checkpoint;
use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, Layer, MaxPool2x2, Relu, Sequential};
use crate::nn::Tensor;

/// Convolutions per block in the VGG19 layout.
const BLOCK_CONVS: [usize; 5] = [2, 2, 4, 4, 4];
/// Width multiplier per block relative to the base width.
const BLOCK_SCALE: [usize; 5] = [1, 2, 4, 8, 8];

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureExtractorConfig {
    pub mode: FeatureMode,
    /// Seed for the fixed-random mode.
    pub seed: u64,
    /// Weight file for the pretrained mode.
    pub weight_file: Option<PathBuf>,
    /// (i, j): j-th conv before the i-th maxpool.
    pub tap: (usize, usize),
    /// Channel width of the first block; 64 reproduces the VGG19 widths.
    pub base_width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    FixedRandom,
    PretrainedFromFile,
}

impl Default for FeatureExtractorConfig {
    fn default() -> Self {
        FeatureExtractorConfig {
            mode: FeatureMode::FixedRandom,
            seed: 0,
            weight_file: None,
            tap: (3, 3),
            base_width: 64,
        }
    }
}

impl FeatureExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        let (i, j) = self.tap;
        if !(1..=5).contains(&i) {
            return Err(Error::Parameter(format!(
                "feature tap pool index must be in 1..=5, got {i}"
            )));
        }
        if j < 1 || j > BLOCK_CONVS[i - 1] {
            return Err(Error::Parameter(format!(
                "feature tap conv index must be in 1..={}, got {j}",
                BLOCK_CONVS[i - 1]
            )));
        }
        if self.base_width == 0 {
            return Err(Error::Parameter("feature base_width must be >= 1".into()));
        }
        if self.mode == FeatureMode::PretrainedFromFile && self.weight_file.is_none() {
            return Err(Error::Parameter(
                "pretrained feature mode requires weight_file".into(),
            ));
        }
        Ok(())
    }
}

pub struct FeatureExtractor {
    pub cfg: FeatureExtractorConfig,
    seq: Sequential,
    replicated_input: bool,
}

impl FeatureExtractor {
    pub fn new(cfg: &FeatureExtractorConfig) -> Result<FeatureExtractor> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut seq = Sequential::new();
        let (tap_i, tap_j) = cfg.tap;
        let mut ch = 3usize;
        for block in 1..=tap_i {
            let width = cfg.base_width * BLOCK_SCALE[block - 1];
            let convs = if block == tap_i {
                tap_j
            } else {
                BLOCK_CONVS[block - 1]
            };
            for conv in 1..=convs {
                seq.push(
                    format!("conv{block}_{conv}"),
                    he_conv(ch, width, &mut rng),
                );
                seq.push(format!("relu{block}_{conv}"), Relu::new());
                ch = width;
            }
            if block < tap_i {
                seq.push(format!("pool{block}"), MaxPool2x2::new());
            }
        }
        let mut fx = FeatureExtractor {
            cfg: cfg.clone(),
            seq,
            replicated_input: false,
        };
        if cfg.mode == FeatureMode::PretrainedFromFile {
            let file = cfg.weight_file.as_ref().unwrap();
            fx.load_weights(file)?;
        }
        Ok(fx)
    }

    fn load_weights(&mut self, path: &Path) -> Result<()> {
        let (manifest, tensors) = checkpoint::read_tensors(path).map_err(|e| {
            Error::Data(format!(
                "feature weight file {}: {e}",
                path.display()
            ))
        })?;
        if manifest.kind != "feature-extractor" {
            return Err(Error::Data(format!(
                "feature weight file {}: kind is {:?}, expected \"feature-extractor\"",
                path.display(),
                manifest.kind
            )));
        }
        super::generator::import_named(&tensors, |f| self.seq.visit_params("fx", f)).map_err(
            |e| Error::Data(format!("feature weight file {}: {e}", path.display())),
        )
    }

    pub fn save_weights(&mut self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        self.seq
            .visit_params("fx", &mut |name, p| tensors.push((name, p.value.clone())));
        checkpoint::write_tensors(path, checkpoint::Manifest::new("feature-extractor"), &tensors)
    }

    /// Deterministic forward to the tap point. Gray inputs are replicated to
    /// three channels first.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (c, h, w) = x.dims3();
        let pools_before_tap = self.cfg.tap.0 - 1;
        let div = 1usize << pools_before_tap;
        if h % div != 0 || w % div != 0 {
            return Err(Error::Parameter(format!(
                "feature input {w}x{h} must be divisible by {div} for {} pools",
                pools_before_tap
            )));
        }
        let x3 = match c {
            3 => {
                self.replicated_input = false;
                x.clone()
            }
            1 => {
                self.replicated_input = true;
                let mut data = Vec::with_capacity(3 * h * w);
                for _ in 0..3 {
                    data.extend_from_slice(x.data());
                }
                Tensor::from_vec(&[3, h, w], data)
            }
            other => {
                return Err(Error::Parameter(format!(
                    "feature extractor takes 1 or 3 channels, got {other}"
                )))
            }
        };
        Ok(self.seq.forward(&x3, false))
    }

    /// Gradient with respect to the extractor input. For replicated gray
    /// inputs the three channel gradients collapse by summation.
    pub fn backward_to_input(&mut self, grad_features: &Tensor) -> Tensor {
        let g3 = self.seq.backward(grad_features);
        if !self.replicated_input {
            return g3;
        }
        let (_, h, w) = g3.dims3();
        let mut out = Tensor::zeros(&[1, h, w]);
        for ch in 0..3 {
            for i in 0..h * w {
                out.data_mut()[i] += g3.data()[ch * h * w + i];
            }
        }
        out
    }

    /// Feature map spatial dims for a square input of size n.
    pub fn feature_dims(&self, n: usize) -> usize {
        n >> (self.cfg.tap.0 - 1)
    }
}

fn he_conv(in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Conv2d {
    let mut conv = Conv2d::new(in_ch, out_ch, 3, 1, 1, rng);
    // Rescale to He magnitude so activations neither die nor blow up over
    // the stack; the base init draws N(0, 0.02).
    let std = (2.0 / (in_ch as f64 * 9.0)).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    for v in conv.weight.value.data_mut() {
        *v = dist.sample(rng);
    }
    conv
}
