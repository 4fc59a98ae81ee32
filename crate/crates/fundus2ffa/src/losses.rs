//! The four loss terms and their weighted combination: non-saturating
//! adversarial loss on patch scores, L1 pixel loss, squared feature
//! distance through the frozen extractor, and the squared difference of
//! local saliency maps. Each differentiable term also exposes a
//! value-plus-gradient form used by the training step.

use crate::error::{Error, Result};
use crate::networks::FeatureExtractor;
use crate::nn::{image_from_tensor, tensor_from_image, Tensor};
use crate::raster::{gaussian_filter_adjoint, median_filter_argmed, Image};
use crate::saliency::{compute_saliency, SaliencyConfig, SaliencyMap};

/// Scores at or below this are clamped before the log; keeps values finite
/// without materially biasing them.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 100.0,
            beta: 0.001,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::Parameter(format!(
                "loss weights must be non-negative: alpha={} beta={} gamma={}",
                self.alpha, self.beta, self.gamma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub gan: f64,
    pub pixel: f64,
    pub perceptual: f64,
    pub saliency: f64,
    pub total: f64,
}

impl LossReport {
    /// One comma-separated run-log line: iteration, gan, pixel, perceptual,
    /// saliency, total.
    pub fn csv_line(&self, iteration: u64) -> String {
        format!(
            "{iteration},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.gan, self.pixel, self.perceptual, self.saliency, self.total
        )
    }
}

/// How gradients traverse the median filter inside the saliency loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradMode {
    /// The background estimate of the generated image is a constant of the
    /// current forward pass; gradient flows only through the Gaussian path.
    /// The median's exact subgradient is sparse and noisy under
    /// batch-size-1 updates, so this is the default.
    DetachedBackground,
    /// The median routes gradient to its selected element (ties to the
    /// lowest row-major input index). Retained for study.
    ExactMedianSubgradient,
}

impl Default for GradMode {
    fn default() -> Self {
        GradMode::DetachedBackground
    }
}

/// Generator adversarial loss: mean over patch scores of `-log(score)`.
pub fn adversarial_g_loss(fake_scores: &Tensor) -> f64 {
    let n = fake_scores.len() as f64;
    fake_scores
        .data()
        .iter()
        .map(|&s| -s.max(LOG_EPS).ln())
        .sum::<f64>()
        / n
}

/// Discriminator loss: `mean(-log real) + mean(-log(1 - fake))`, the
/// maximization objective negated for descent.
pub fn adversarial_d_loss(real_scores: &Tensor, fake_scores: &Tensor) -> f64 {
    let nr = real_scores.len() as f64;
    let nf = fake_scores.len() as f64;
    let real: f64 = real_scores
        .data()
        .iter()
        .map(|&s| -s.max(LOG_EPS).ln())
        .sum::<f64>()
        / nr;
    let fake: f64 = fake_scores
        .data()
        .iter()
        .map(|&s| -(1.0 - s).max(LOG_EPS).ln())
        .sum::<f64>()
        / nf;
    real + fake
}

/// Mean absolute difference: channel-summed, normalized by pixel count.
pub fn pixel_l1(generated: &Image, target: &Image) -> Result<f64> {
    check_same_shape(generated, target)?;
    let n = (generated.width() * generated.height()) as f64;
    Ok(generated
        .data()
        .iter()
        .zip(target.data())
        .map(|(&g, &t)| (t - g).abs())
        .sum::<f64>()
        / n)
}

/// Value and gradient with respect to the generated tensor.
pub fn pixel_l1_with_grad(generated: &Tensor, target: &Tensor) -> (f64, Tensor) {
    let (_, h, w) = generated.dims3();
    let n = (h * w) as f64;
    let mut grad = Tensor::zeros(generated.shape());
    let mut total = 0.0;
    for ((&g, &t), gr) in generated
        .data()
        .iter()
        .zip(target.data())
        .zip(grad.data_mut())
    {
        let d = g - t;
        total += d.abs();
        *gr = d.signum() / n;
    }
    (total / n, grad)
}

/// Squared feature distance at the extractor tap, normalized by the
/// feature map's spatial size (channels are summed over).
pub fn perceptual_loss(
    generated: &Image,
    target: &Image,
    fx: &mut FeatureExtractor,
) -> Result<f64> {
    check_same_shape(generated, target)?;
    let ft = fx.forward(&tensor_from_image(target))?;
    let (value, _) = perceptual_with_grad(&tensor_from_image(generated), &ft, fx)?;
    Ok(value)
}

/// Value and gradient against precomputed target features.
pub fn perceptual_with_grad(
    generated: &Tensor,
    target_features: &Tensor,
    fx: &mut FeatureExtractor,
) -> Result<(f64, Tensor)> {
    let fg = fx.forward(generated)?;
    if fg.shape() != target_features.shape() {
        return Err(Error::Parameter(format!(
            "feature shapes differ: {:?} vs {:?}",
            fg.shape(),
            target_features.shape()
        )));
    }
    let (_, fh, fw) = fg.dims3();
    let n = (fh * fw) as f64;
    let mut value = 0.0;
    let mut gfeat = Tensor::zeros(fg.shape());
    for ((&a, &b), g) in fg
        .data()
        .iter()
        .zip(target_features.data())
        .zip(gfeat.data_mut())
    {
        let d = a - b;
        value += d * d;
        *g = 2.0 * d / n;
    }
    let grad = fx.backward_to_input(&gfeat);
    Ok((value / n, grad))
}

/// Squared saliency-map difference, normalized by the map's own pixel
/// count. The target map is precomputed from the real image; no gradient
/// ever flows into it.
pub fn saliency_loss(
    generated: &Image,
    target: &SaliencyMap,
    cfg: &SaliencyConfig,
    grad_mode: GradMode,
) -> Result<f64> {
    let t = tensor_from_image(&generated.to_gray());
    let (value, _) = saliency_with_grad(&t, target, cfg, grad_mode)?;
    Ok(value)
}

/// Value and gradient with respect to the generated single-channel tensor.
pub fn saliency_with_grad(
    generated: &Tensor,
    target: &SaliencyMap,
    cfg: &SaliencyConfig,
    grad_mode: GradMode,
) -> Result<(f64, Tensor)> {
    let (c, h, w) = generated.dims3();
    if c != 1 {
        return Err(Error::Parameter(format!(
            "saliency loss expects a single-channel image, got {c} channels"
        )));
    }
    if (w, h) != (target.width, target.height) {
        return Err(Error::Parameter(format!(
            "generated {w}x{h} does not match target saliency {}x{}",
            target.width, target.height
        )));
    }
    let img = image_from_tensor(generated)?;
    let map = compute_saliency(&img, cfg)?;

    let n = (w * h) as f64;
    let mut value = 0.0;
    let mut residual = Image::zeros(w, h, 1);
    for (i, (&s, &t)) in map.data.iter().zip(&target.data).enumerate() {
        let d = s - t;
        value += d * d;
        residual.data_mut()[i] = 2.0 * d / n;
    }
    value /= n;

    // Gaussian path: d(sal)/d(img) = a * G, so the pullback is a * G^T.
    let mut grad_img =
        gaussian_filter_adjoint(&residual, cfg.gaussian_kernel, cfg.gaussian_sigma)?;
    for v in grad_img.data_mut() {
        *v *= cfg.a;
    }

    if grad_mode == GradMode::ExactMedianSubgradient {
        // Median path: sal subtracts the background, so the selected input
        // element receives the negated residual.
        let (_, argmed) = median_filter_argmed(&img, cfg.median_kernel)?;
        for (out_idx, &src_idx) in argmed.iter().enumerate() {
            grad_img.data_mut()[src_idx] -= cfg.a * residual.data()[out_idx];
        }
    }

    Ok((value, tensor_from_image(&grad_img)))
}

/// Weighted combination: `gan + alpha*pixel + beta*perceptual +
/// gamma*saliency`. A non-finite term is a numeric fault naming the term.
pub fn total_loss(
    gan: f64,
    pixel: f64,
    perceptual: f64,
    saliency: f64,
    w: &LossWeights,
) -> Result<LossReport> {
    for (name, v) in [
        ("gan", gan),
        ("pixel", pixel),
        ("perceptual", perceptual),
        ("saliency", saliency),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss term {name} is {v}")));
        }
    }
    Ok(LossReport {
        gan,
        pixel,
        perceptual,
        saliency,
        total: gan + w.alpha * pixel + w.beta * perceptual + w.gamma * saliency,
    })
}

fn check_same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() || a.channels() != b.channels() {
        return Err(Error::Parameter(format!(
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    Ok(())
}
