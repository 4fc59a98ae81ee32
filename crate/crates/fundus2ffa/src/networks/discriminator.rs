//! Patch-level discriminator: five kernel-4 convolutions over the
//! channel-concatenated (condition, candidate) pair, leaky ReLU between,
//! instance norm on the middle layers, sigmoid on the final one-channel
//! map. Each output score judges one receptive-field-sized patch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DiscriminatorConfig, DISC_KERNEL, DISC_LAYERS, DISC_LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::nn::layers::{sigmoid, Conv2d, InstanceNorm2d, Layer, LeakyRelu, Sequential};
use crate::nn::{Param, Tensor};

pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    condition_channels: usize,
    candidate_channels: usize,
    seq: Sequential,
}

impl Discriminator {
    pub fn new(cfg: &DiscriminatorConfig, seed: u64) -> Result<Discriminator> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let condition_channels = 3;
        let candidate_channels = 1;
        let mut seq = Sequential::new();
        let mut ch = condition_channels + candidate_channels;
        for (i, (&stride, &width)) in cfg.strides.iter().zip(&cfg.widths).enumerate() {
            seq.push(
                format!("conv{i}"),
                Conv2d::new(ch, width, DISC_KERNEL, stride, 1, &mut rng),
            );
            let last = i == DISC_LAYERS - 1;
            if !last {
                if i > 0 {
                    seq.push(format!("norm{i}"), InstanceNorm2d::new(width));
                }
                seq.push(format!("lrelu{i}"), LeakyRelu::new(DISC_LEAKY_SLOPE));
            }
            ch = width;
        }
        Ok(Discriminator {
            cfg: cfg.clone(),
            condition_channels,
            candidate_channels,
            seq,
        })
    }

    fn check_inputs(&self, condition: &Tensor, candidate: &Tensor) -> Result<()> {
        let (cc, ch, cw) = condition.dims3();
        let (fc, fh, fw) = candidate.dims3();
        if cc != self.condition_channels || fc != self.candidate_channels {
            return Err(Error::Parameter(format!(
                "discriminator expects {}+{} channels, got {cc}+{fc}",
                self.condition_channels, self.candidate_channels
            )));
        }
        if (ch, cw) != (fh, fw) {
            return Err(Error::Parameter(format!(
                "condition {cw}x{ch} and candidate {fw}x{fh} must share spatial dims"
            )));
        }
        if self.cfg.score_map_size(ch).is_none() || self.cfg.score_map_size(cw).is_none() {
            return Err(Error::Parameter(format!(
                "input {cw}x{ch} too small for the discriminator stack"
            )));
        }
        Ok(())
    }

    /// Pre-sigmoid score map. Losses differentiate at this level; the
    /// probability map is `sigmoid` of it.
    pub fn forward_logits(
        &mut self,
        condition: &Tensor,
        candidate: &Tensor,
        train: bool,
    ) -> Result<Tensor> {
        self.check_inputs(condition, candidate)?;
        let joined = concat_channels(condition, candidate);
        Ok(self.seq.forward(&joined, train))
    }

    /// Image-level convenience over [`Self::forward_scores`].
    pub fn score_images(
        &mut self,
        condition: &crate::raster::Image,
        candidate: &crate::raster::Image,
    ) -> Result<Tensor> {
        use crate::nn::tensor_from_image;
        self.forward_scores(
            &tensor_from_image(condition),
            &tensor_from_image(candidate),
            false,
        )
    }

    /// Per-patch probabilities in (0,1).
    pub fn forward_scores(
        &mut self,
        condition: &Tensor,
        candidate: &Tensor,
        train: bool,
    ) -> Result<Tensor> {
        let mut logits = self.forward_logits(condition, candidate, train)?;
        for v in logits.data_mut() {
            *v = sigmoid(*v);
        }
        Ok(logits)
    }

    /// Backward from a gradient on the logits; returns gradients for the
    /// condition and candidate inputs.
    pub fn backward_from_logits(&mut self, grad_logits: &Tensor) -> (Tensor, Tensor) {
        let joined = self.seq.backward(grad_logits);
        split_channels(&joined, self.condition_channels)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(String, &mut Param)) {
        self.seq.visit_params("disc", f);
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |_, p| p.zero_grad());
    }

    pub fn export_params(&mut self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, p| out.push((name, p.value.clone())));
        out
    }

    pub fn import_params(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        super::generator::import_named(tensors, |f| self.visit_params(f))
    }
}

/// Analytic receptive field of one output score, from the layer recurrence
/// `r += (k-1) * jump; jump *= stride`.
pub fn receptive_field(cfg: &DiscriminatorConfig) -> usize {
    let mut r = 1usize;
    let mut jump = 1usize;
    for &s in &cfg.strides {
        r += (DISC_KERNEL - 1) * jump;
        jump *= s;
    }
    r
}

fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (ca, h, w) = a.dims3();
    let (cb, _, _) = b.dims3();
    let mut data = Vec::with_capacity((ca + cb) * h * w);
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(&[ca + cb, h, w], data)
}

fn split_channels(joined: &Tensor, first: usize) -> (Tensor, Tensor) {
    let (c, h, w) = joined.dims3();
    let split = first * h * w;
    (
        Tensor::from_vec(&[first, h, w], joined.data()[..split].to_vec()),
        Tensor::from_vec(&[c - first, h, w], joined.data()[split..].to_vec()),
    )
}
