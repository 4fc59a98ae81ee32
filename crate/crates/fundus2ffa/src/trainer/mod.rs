//! Alternating adversarial training: per pair, one discriminator Adam step
//! on real/fake patch scores (generator output detached), then one
//! generator Adam step on the combined loss against the just-updated
//! discriminator. Batch size is one; everything is seeded and
//! single-threaded, so identical runs produce identical traces.

mod adam;
mod schedule;

pub use adam::AdamState;
pub use schedule::lr_schedule;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::AlignedPair;
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_d_loss, adversarial_g_loss, perceptual_with_grad, pixel_l1_with_grad,
    saliency_with_grad, total_loss, GradMode, LossReport, LossWeights,
};
use crate::metrics;
use crate::networks::checkpoint::{self, Manifest};
use crate::networks::features::FeatureExtractorConfig;
use crate::networks::{
    Discriminator, DiscriminatorConfig, FeatureExtractor, Generator, GeneratorConfig,
};
use crate::nn::layers::sigmoid;
use crate::nn::{tensor_from_image, Tensor};
use crate::raster::{io, Image};
use crate::saliency::{compute_saliency, SaliencyConfig, SaliencyMap};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub decay_start_epoch: usize,
    pub lr0: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Fixed at 1; the normalization layers assume single-sample statistics.
    pub batch_size: usize,
    pub seed: u64,
    /// Checkpoint cadence in epochs.
    pub checkpoint_every: usize,
    pub grad_mode: GradMode,
    pub loss_weights: LossWeights,
    pub saliency: SaliencyConfig,
    /// Optional global gradient-norm clip; off by default.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            decay_start_epoch: 100,
            lr0: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 1,
            seed: 0,
            checkpoint_every: 50,
            grad_mode: GradMode::DetachedBackground,
            loss_weights: LossWeights::default(),
            saliency: SaliencyConfig::default(),
            max_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Parameter("epochs must be >= 1".into()));
        }
        if self.decay_start_epoch >= self.epochs {
            return Err(Error::Parameter(format!(
                "decay_start_epoch {} must be < epochs {}",
                self.decay_start_epoch, self.epochs
            )));
        }
        if self.lr0 < 0.0 || !self.lr0.is_finite() {
            return Err(Error::Parameter(format!("lr0 must be >= 0, got {}", self.lr0)));
        }
        if self.batch_size != 1 {
            return Err(Error::Parameter(format!(
                "batch_size is fixed at 1, got {}",
                self.batch_size
            )));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Parameter("checkpoint_every must be >= 1".into()));
        }
        self.loss_weights.validate()?;
        self.saliency.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub val_psnr: Option<f64>,
    pub val_ssim: Option<f64>,
}

/// Per-iteration loss rows, per-epoch validation metrics and the
/// learning-rate trace.
#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub iterations: Vec<(u64, LossReport)>,
    pub epochs: Vec<EpochRow>,
}

impl RunLog {
    pub fn iterations_csv(&self) -> String {
        let mut out = String::from("iteration,gan,pixel,perceptual,saliency,total\n");
        for (it, report) in &self.iterations {
            out.push_str(&report.csv_line(*it));
            out.push('\n');
        }
        out
    }

    pub fn epochs_csv(&self) -> String {
        let mut out = String::from("epoch,lr,val_psnr,val_ssim\n");
        for row in &self.epochs {
            let psnr = row.val_psnr.map(|v| format!("{v:.6}")).unwrap_or_default();
            let ssim = row.val_ssim.map(|v| format!("{v:.6}")).unwrap_or_default();
            out.push_str(&format!("{},{:.9e},{},{}\n", row.epoch, row.lr, psnr, ssim));
        }
        out
    }
}

pub struct FitOutcome {
    pub run_log: RunLog,
    pub final_checkpoint: Option<PathBuf>,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub gen: Generator,
    pub disc: Discriminator,
    pub fx: FeatureExtractor,
    adam_g: AdamState,
    adam_d: AdamState,
    saliency_cache: HashMap<u64, SaliencyMap>,
    feature_cache: HashMap<u64, Tensor>,
    iteration: u64,
    start_epoch: usize,
}

impl Trainer {
    pub fn new(
        cfg: &TrainConfig,
        gen_cfg: &GeneratorConfig,
        disc_cfg: &DiscriminatorConfig,
        fx_cfg: &FeatureExtractorConfig,
    ) -> Result<Trainer> {
        cfg.validate()?;
        if gen_cfg.out_channels != 1 || gen_cfg.in_channels != 3 {
            return Err(Error::Parameter(
                "training assumes a 3-channel structure input and 1-channel output".into(),
            ));
        }
        let gen = Generator::new(gen_cfg, cfg.seed)?;
        let disc = Discriminator::new(disc_cfg, cfg.seed.wrapping_add(1))?;
        let fx = FeatureExtractor::new(fx_cfg)?;
        Ok(Trainer {
            cfg: cfg.clone(),
            gen,
            disc,
            fx,
            adam_g: AdamState::new(),
            adam_d: AdamState::new(),
            saliency_cache: HashMap::new(),
            feature_cache: HashMap::new(),
            iteration: 0,
            start_epoch: 1,
        })
    }

    /// Rebuilds a trainer from a checkpoint; network configs come from the
    /// manifest, optimizer moments are restored, and training continues at
    /// the epoch after the stored one.
    pub fn resume(
        path: &Path,
        cfg: &TrainConfig,
        fx_cfg: &FeatureExtractorConfig,
    ) -> Result<Trainer> {
        let (manifest, tensors) = checkpoint::read_tensors(path)?;
        if manifest.kind != "training-checkpoint" {
            return Err(Error::Data(format!(
                "{}: kind {:?} is not a training checkpoint",
                path.display(),
                manifest.kind
            )));
        }
        let gen_cfg = manifest.generator.clone().ok_or_else(|| {
            Error::Data(format!("{}: manifest lacks generator config", path.display()))
        })?;
        let disc_cfg = manifest.discriminator.clone().ok_or_else(|| {
            Error::Data(format!(
                "{}: manifest lacks discriminator config",
                path.display()
            ))
        })?;
        let mut trainer = Trainer::new(cfg, &gen_cfg, &disc_cfg, fx_cfg)?;

        let gen_tensors: Vec<(String, Tensor)> = tensors
            .iter()
            .filter(|(n, _)| n.starts_with("gen."))
            .cloned()
            .collect();
        trainer.gen.import_params(&gen_tensors)?;
        let disc_tensors: Vec<(String, Tensor)> = tensors
            .iter()
            .filter(|(n, _)| n.starts_with("disc."))
            .cloned()
            .collect();
        trainer.disc.import_params(&disc_tensors)?;

        if tensors.iter().any(|(n, _)| n.starts_with("adam_g.")) {
            let gen = &mut trainer.gen;
            trainer.adam_g.import_tensors(
                "adam_g",
                manifest.adam_step_gen.unwrap_or(0),
                &tensors,
                |f| gen.visit_params(f),
            )?;
            let disc = &mut trainer.disc;
            trainer.adam_d.import_tensors(
                "adam_d",
                manifest.adam_step_disc.unwrap_or(0),
                &tensors,
                |f| disc.visit_params(f),
            )?;
        }
        let epoch = manifest.epoch.ok_or_else(|| {
            Error::Data(format!("{}: manifest lacks epoch", path.display()))
        })?;
        trainer.start_epoch = epoch + 1;
        trainer.iteration = 0;
        Ok(trainer)
    }

    pub fn start_epoch(&self) -> usize {
        self.start_epoch
    }

    pub fn save_checkpoint(&mut self, path: &Path, epoch: usize) -> Result<()> {
        let mut manifest = Manifest::new("training-checkpoint");
        manifest.epoch = Some(epoch);
        manifest.adam_step_gen = Some(self.adam_g.step_count());
        manifest.adam_step_disc = Some(self.adam_d.step_count());
        manifest.generator = Some(self.gen.cfg.clone());
        manifest.discriminator = Some(self.disc.cfg.clone());
        let mut tensors = self.gen.export_params();
        tensors.extend(self.disc.export_params());
        tensors.extend(self.adam_g.export_tensors("adam_g"));
        tensors.extend(self.adam_d.export_tensors("adam_d"));
        checkpoint::write_tensors(path, manifest, &tensors)
    }

    fn target_saliency(&mut self, pair: &AlignedPair) -> Result<SaliencyMap> {
        let key = content_hash(&pair.angiography);
        if let Some(map) = self.saliency_cache.get(&key) {
            return Ok(map.clone());
        }
        let map = compute_saliency(&pair.angiography, &self.cfg.saliency)?;
        self.saliency_cache.insert(key, map.clone());
        Ok(map)
    }

    fn target_features(&mut self, pair: &AlignedPair, real: &Tensor) -> Result<Tensor> {
        let key = content_hash(&pair.angiography);
        if let Some(t) = self.feature_cache.get(&key) {
            return Ok(t.clone());
        }
        let t = self.fx.forward(real)?;
        self.feature_cache.insert(key, t.clone());
        Ok(t)
    }

    /// One alternating update on a single pair: (1) target saliency of the
    /// real image fetched or computed once, (2) discriminator step with the
    /// generator output detached, (3) generator step on the combined loss.
    /// On a numeric fault both networks are restored to their pre-step
    /// state before the error is returned.
    pub fn train_step(&mut self, pair: &AlignedPair, lr: f64) -> Result<LossReport> {
        let cond = tensor_from_image(&pair.structure);
        let real = tensor_from_image(&pair.angiography);
        let target_map = self.target_saliency(pair)?;
        let target_feats = self.target_features(pair, &real)?;

        let gen_snapshot = self.gen.export_params();
        let disc_snapshot = self.disc.export_params();

        let result =
            self.step_inner(&cond, &real, &target_map, &target_feats, lr);
        match result {
            Ok(report) => {
                self.iteration += 1;
                Ok(report)
            }
            Err(e) => {
                self.gen.import_params(&gen_snapshot)?;
                self.disc.import_params(&disc_snapshot)?;
                Err(e)
            }
        }
    }

    fn step_inner(
        &mut self,
        cond: &Tensor,
        real: &Tensor,
        target_map: &SaliencyMap,
        target_feats: &Tensor,
        lr: f64,
    ) -> Result<LossReport> {
        let fake = self.gen.forward_tensor(cond, true)?;
        if !fake.all_finite() {
            return Err(Error::Numeric("generator produced non-finite output".into()));
        }
        self.d_step(cond, real, &fake, lr)?;
        let report = self.g_step(cond, real, &fake, target_map, target_feats, lr)?;
        self.check_finite_params()?;
        Ok(report)
    }

    // Discriminator update; the generator output enters as data.
    fn d_step(&mut self, cond: &Tensor, real: &Tensor, fake: &Tensor, lr: f64) -> Result<f64> {
        self.disc.zero_grads();

        let z_real = self.disc.forward_logits(cond, real, true)?;
        let s_real = scores_of(&z_real);
        let n_real = z_real.len() as f64;
        // d/dz of mean(-log sigmoid(z)) is (sigmoid(z) - 1) / n.
        let mut g_real = s_real.clone();
        for v in g_real.data_mut() {
            *v = (*v - 1.0) / n_real;
        }
        self.disc.backward_from_logits(&g_real);

        let z_fake = self.disc.forward_logits(cond, fake, true)?;
        let s_fake = scores_of(&z_fake);
        let n_fake = z_fake.len() as f64;
        // d/dz of mean(-log(1 - sigmoid(z))) is sigmoid(z) / n.
        let mut g_fake = s_fake.clone();
        for v in g_fake.data_mut() {
            *v /= n_fake;
        }
        self.disc.backward_from_logits(&g_fake);

        let loss = adversarial_d_loss(&s_real, &s_fake);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("discriminator loss is {loss}")));
        }
        self.clip_disc_grads();
        let cfg = self.cfg.clone();
        let disc = &mut self.disc;
        self.adam_d.step(lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, |f| {
            disc.visit_params(f)
        });
        Ok(loss)
    }

    // Generator update against the already-updated discriminator.
    fn g_step(
        &mut self,
        cond: &Tensor,
        real: &Tensor,
        fake: &Tensor,
        target_map: &SaliencyMap,
        target_feats: &Tensor,
        lr: f64,
    ) -> Result<LossReport> {
        self.gen.zero_grads();
        self.disc.zero_grads();

        let z_fake = self.disc.forward_logits(cond, fake, true)?;
        let s_fake = scores_of(&z_fake);
        let gan = adversarial_g_loss(&s_fake);
        let n = z_fake.len() as f64;
        // d/dz of mean(-log sigmoid(z)) is (sigmoid(z) - 1) / n.
        let mut g_logits = s_fake.clone();
        for v in g_logits.data_mut() {
            *v = (*v - 1.0) / n;
        }
        let (_, mut d_fake) = self.disc.backward_from_logits(&g_logits);

        let (pixel, g_pix) = pixel_l1_with_grad(fake, real);
        let (perceptual, g_perc) = perceptual_with_grad(fake, target_feats, &mut self.fx)?;
        let (sal, g_sal) =
            saliency_with_grad(fake, target_map, &self.cfg.saliency, self.cfg.grad_mode)?;

        let w = self.cfg.loss_weights;
        let report = total_loss(gan, pixel, perceptual, sal, &w)?;

        for i in 0..d_fake.len() {
            d_fake.data_mut()[i] +=
                w.alpha * g_pix.data()[i] + w.beta * g_perc.data()[i] + w.gamma * g_sal.data()[i];
        }
        self.gen.backward(&d_fake);

        self.clip_gen_grads();
        let cfg = self.cfg.clone();
        let gen = &mut self.gen;
        self.adam_g.step(lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, |f| {
            gen.visit_params(f)
        });
        Ok(report)
    }

    fn clip_gen_grads(&mut self) {
        if let Some(max) = self.cfg.max_grad_norm {
            let mut sq = 0.0;
            self.gen.visit_params(&mut |_, p| {
                sq += p.grad.data().iter().map(|g| g * g).sum::<f64>();
            });
            let norm = sq.sqrt();
            if norm > max {
                let scale = max / norm;
                self.gen.visit_params(&mut |_, p| {
                    for g in p.grad.data_mut() {
                        *g *= scale;
                    }
                });
            }
        }
    }

    fn clip_disc_grads(&mut self) {
        if let Some(max) = self.cfg.max_grad_norm {
            let mut sq = 0.0;
            self.disc.visit_params(&mut |_, p| {
                sq += p.grad.data().iter().map(|g| g * g).sum::<f64>();
            });
            let norm = sq.sqrt();
            if norm > max {
                let scale = max / norm;
                self.disc.visit_params(&mut |_, p| {
                    for g in p.grad.data_mut() {
                        *g *= scale;
                    }
                });
            }
        }
    }

    fn check_finite_params(&mut self) -> Result<()> {
        let mut bad: Option<String> = None;
        self.gen.visit_params(&mut |name, p| {
            if bad.is_none() && !p.value.all_finite() {
                bad = Some(name);
            }
        });
        self.disc.visit_params(&mut |name, p| {
            if bad.is_none() && !p.value.all_finite() {
                bad = Some(name);
            }
        });
        match bad {
            Some(name) => Err(Error::Numeric(format!(
                "non-finite parameter after update: {name}"
            ))),
            None => Ok(()),
        }
    }

    /// Runs the full schedule over a non-empty training set in seeded
    /// shuffled order. Checkpoints, sample translations and run logs land
    /// in `out_dir` when given.
    pub fn fit(
        &mut self,
        train: &[AlignedPair],
        val: &[AlignedPair],
        out_dir: Option<&Path>,
    ) -> Result<FitOutcome> {
        if train.is_empty() {
            return Err(Error::Parameter("training set is empty".into()));
        }
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut run_log = RunLog::default();
        let mut final_checkpoint = None;

        for epoch in self.start_epoch..=self.cfg.epochs {
            let lr = lr_schedule(epoch, &self.cfg)?;
            let mut order: Vec<usize> = (0..train.len()).collect();
            // Per-epoch stream so a resumed run shuffles exactly like an
            // uninterrupted one.
            let mut rng = ChaCha8Rng::seed_from_u64(
                self.cfg.seed ^ (epoch as u64).wrapping_mul(0x2545f4914f6cdd1d),
            );
            order.shuffle(&mut rng);

            for &idx in &order {
                let report = match self.train_step(&train[idx], lr) {
                    Ok(r) => r,
                    Err(e) => {
                        if let Some(dir) = out_dir {
                            // Params were restored to the last good state.
                            self.save_checkpoint(&dir.join("last_good.ckpt"), epoch - 1)?;
                            write_run_log(dir, &run_log)?;
                        }
                        return Err(e);
                    }
                };
                run_log.iterations.push((self.iteration, report));
            }

            let (val_psnr, val_ssim) = self.validate(val)?;
            run_log.epochs.push(EpochRow {
                epoch,
                lr,
                val_psnr,
                val_ssim,
            });

            if epoch % self.cfg.checkpoint_every == 0 || epoch == self.cfg.epochs {
                if let Some(dir) = out_dir {
                    let path = dir.join(format!("checkpoint_epoch{epoch:04}.ckpt"));
                    self.save_checkpoint(&path, epoch)?;
                    for pair in train.iter().take(2) {
                        let out = self.translate_image(&pair.structure)?;
                        io::save_png(
                            &dir.join("samples")
                                .join(format!("epoch{epoch:04}_{}.png", pair.source_id)),
                            &out,
                        )?;
                    }
                    final_checkpoint = Some(path);
                }
            }
        }
        if let Some(dir) = out_dir {
            write_run_log(dir, &run_log)?;
        }
        Ok(FitOutcome {
            run_log,
            final_checkpoint,
        })
    }

    fn validate(&mut self, val: &[AlignedPair]) -> Result<(Option<f64>, Option<f64>)> {
        if val.is_empty() {
            return Ok((None, None));
        }
        let mut psnrs = Vec::new();
        let mut ssims = Vec::new();
        for pair in val {
            let out = self.translate_image(&pair.structure)?;
            if let Some(p) = metrics::psnr(&out, &pair.angiography)? {
                psnrs.push(p);
            }
            ssims.push(metrics::ssim(
                &out,
                &pair.angiography,
                &metrics::SsimParams::default(),
            )?);
        }
        let psnr = if psnrs.is_empty() {
            None
        } else {
            Some(psnrs.iter().sum::<f64>() / psnrs.len() as f64)
        };
        let ssim = Some(ssims.iter().sum::<f64>() / ssims.len() as f64);
        Ok((psnr, ssim))
    }

    /// Deterministic inference with dropout off.
    pub fn translate_image(&mut self, img: &Image) -> Result<Image> {
        self.gen.forward(img, false)
    }
}

fn scores_of(logits: &Tensor) -> Tensor {
    let mut s = logits.clone();
    for v in s.data_mut() {
        *v = sigmoid(*v);
    }
    s
}

fn write_run_log(dir: &Path, log: &RunLog) -> Result<()> {
    std::fs::write(dir.join("runlog.csv"), log.iterations_csv())
        .map_err(|e| Error::io(dir.join("runlog.csv"), e))?;
    std::fs::write(dir.join("epochs.csv"), log.epochs_csv())
        .map_err(|e| Error::io(dir.join("epochs.csv"), e))
}

/// Loads a training checkpoint and runs the generator on one image.
pub fn translate_with_checkpoint(ckpt: &Path, img: &Image) -> Result<Image> {
    let (manifest, tensors) = checkpoint::read_tensors(ckpt)?;
    let gen_cfg = manifest.generator.ok_or_else(|| {
        Error::Data(format!("{}: manifest lacks generator config", ckpt.display()))
    })?;
    let mut gen = Generator::new(&gen_cfg, 0)?;
    let gen_tensors: Vec<(String, Tensor)> = tensors
        .into_iter()
        .filter(|(n, _)| n.starts_with("gen."))
        .collect();
    gen.import_params(&gen_tensors)?;
    gen.forward(img, false)
}

/// FNV-1a over the image geometry and pixel bit patterns; keys the
/// per-pair caches of target saliency maps and features.
fn content_hash(img: &Image) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
    };
    eat(&(img.width() as u64).to_le_bytes());
    eat(&(img.height() as u64).to_le_bytes());
    eat(&(img.channels() as u64).to_le_bytes());
    for &v in img.data() {
        eat(&v.to_bits().to_le_bytes());
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_phantom_pairs;
    use crate::networks::features::FeatureMode;

    fn tiny_setup() -> (TrainConfig, GeneratorConfig, DiscriminatorConfig, FeatureExtractorConfig) {
        let cfg = TrainConfig {
            epochs: 2,
            decay_start_epoch: 1,
            seed: 7,
            checkpoint_every: 1,
            ..TrainConfig::default()
        };
        let gen_cfg = GeneratorConfig {
            base_width: 4,
            n_residual_blocks: 1,
            ..GeneratorConfig::default()
        };
        let disc_cfg = DiscriminatorConfig {
            widths: vec![4, 8, 8, 8, 1],
            ..DiscriminatorConfig::default()
        };
        let fx_cfg = FeatureExtractorConfig {
            mode: FeatureMode::FixedRandom,
            seed: 3,
            tap: (2, 2),
            base_width: 4,
            ..FeatureExtractorConfig::default()
        };
        (cfg, gen_cfg, disc_cfg, fx_cfg)
    }

    fn trainer_and_pairs(n_pairs: usize) -> (Trainer, Vec<AlignedPair>) {
        let (cfg, gen_cfg, disc_cfg, fx_cfg) = tiny_setup();
        let trainer = Trainer::new(&cfg, &gen_cfg, &disc_cfg, &fx_cfg).unwrap();
        let pairs = synth_phantom_pairs(n_pairs, 64, 42).unwrap();
        (trainer, pairs)
    }

    #[test]
    fn zero_lr_keeps_params_and_losses_fixed() {
        let (mut trainer, pairs) = trainer_and_pairs(1);
        let before = trainer.gen.export_params();
        let r1 = trainer.train_step(&pairs[0], 0.0).unwrap();
        let r2 = trainer.train_step(&pairs[0], 0.0).unwrap();
        let after = trainer.gen.export_params();
        assert_eq!(r1, r2, "losses must repeat with lr=0");
        for ((_, a), (_, b)) in before.iter().zip(&after) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn deterministic_loss_trace() {
        let (mut t1, pairs) = trainer_and_pairs(2);
        let (mut t2, _) = trainer_and_pairs(2);
        for pair in &pairs {
            let a = t1.train_step(pair, 1e-4).unwrap();
            let b = t2.train_step(pair, 1e-4).unwrap();
            assert_eq!(a, b, "same seed and data must give identical reports");
        }
    }

    #[test]
    fn discriminator_updates_before_generator_sees_scores() {
        let (mut probe, pairs) = trainer_and_pairs(1);
        let pair = &pairs[0];
        let cond = tensor_from_image(&pair.structure);
        let real = tensor_from_image(&pair.angiography);
        let fake = probe.gen.forward_tensor(&cond, true).unwrap();
        let disc_before = probe.disc.export_params();
        let gan_before = {
            let s = probe.disc.forward_scores(&cond, &fake, false).unwrap();
            adversarial_g_loss(&s)
        };
        probe.d_step(&cond, &real, &fake, 1e-3).unwrap();
        let gan_after = {
            let s = probe.disc.forward_scores(&cond, &fake, false).unwrap();
            adversarial_g_loss(&s)
        };
        assert!(gan_before != gan_after, "d_step must move the scores");

        // A full step reports the generator loss measured AFTER the
        // discriminator update.
        let (mut full, _) = trainer_and_pairs(1);
        let report = full.train_step(pair, 1e-3).unwrap();
        assert!((report.gan - gan_after).abs() < 1e-12);
        assert!((report.gan - gan_before).abs() > 1e-12);
        drop(disc_before);
    }

    #[test]
    fn frozen_scores_reduce_to_supervised_gradients() {
        // With the adversarial contribution removed from the output
        // gradient, the generator gradient equals that of the weighted
        // supervised terms alone.
        let (mut trainer, pairs) = trainer_and_pairs(1);
        let pair = &pairs[0];
        let cond = tensor_from_image(&pair.structure);
        let real = tensor_from_image(&pair.angiography);
        let target_map = trainer.target_saliency(pair).unwrap();
        let target_feats = trainer.target_features(pair, &real).unwrap();
        let w = trainer.cfg.loss_weights;

        let grads_supervised = {
            let fake = trainer.gen.forward_tensor(&cond, true).unwrap();
            trainer.gen.zero_grads();
            let (_, g_pix) = pixel_l1_with_grad(&fake, &real);
            let (_, g_perc) =
                perceptual_with_grad(&fake, &target_feats, &mut trainer.fx).unwrap();
            let (_, g_sal) =
                saliency_with_grad(&fake, &target_map, &trainer.cfg.saliency, GradMode::DetachedBackground)
                    .unwrap();
            let mut total = Tensor::zeros(fake.shape());
            for i in 0..total.len() {
                total.data_mut()[i] = w.alpha * g_pix.data()[i]
                    + w.beta * g_perc.data()[i]
                    + w.gamma * g_sal.data()[i];
            }
            trainer.gen.backward(&total);
            let mut grads = Vec::new();
            trainer.gen.visit_params(&mut |_, p| grads.push(p.grad.clone()));
            grads
        };

        let grads_full_minus_adv = {
            let fake = trainer.gen.forward_tensor(&cond, true).unwrap();
            trainer.gen.zero_grads();
            // Constant fake scores: the adversarial gradient is identically
            // zero, so feed only the supervised parts.
            let (_, g_pix) = pixel_l1_with_grad(&fake, &real);
            let (_, g_perc) =
                perceptual_with_grad(&fake, &target_feats, &mut trainer.fx).unwrap();
            let (_, g_sal) =
                saliency_with_grad(&fake, &target_map, &trainer.cfg.saliency, GradMode::DetachedBackground)
                    .unwrap();
            let mut total = Tensor::zeros(fake.shape());
            for i in 0..total.len() {
                total.data_mut()[i] = w.alpha * g_pix.data()[i]
                    + w.beta * g_perc.data()[i]
                    + w.gamma * g_sal.data()[i];
            }
            trainer.gen.backward(&total);
            let mut grads = Vec::new();
            trainer.gen.visit_params(&mut |_, p| grads.push(p.grad.clone()));
            grads
        };

        for (a, b) in grads_supervised.iter().zip(&grads_full_minus_adv) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn fit_logs_one_row_per_step_and_epoch() {
        let (mut trainer, pairs) = trainer_and_pairs(3);
        let outcome = trainer.fit(&pairs, &[], None).unwrap();
        // 2 epochs x 3 pairs.
        assert_eq!(outcome.run_log.iterations.len(), 6);
        assert_eq!(outcome.run_log.epochs.len(), 2);
        // Monotone iteration indices.
        let its: Vec<u64> = outcome.run_log.iterations.iter().map(|(i, _)| *i).collect();
        assert!(its.windows(2).all(|w| w[1] == w[0] + 1));
        // One lr entry per epoch, matching the schedule.
        for row in &outcome.run_log.epochs {
            assert_eq!(row.lr, lr_schedule(row.epoch, &trainer.cfg).unwrap());
        }
    }

    #[test]
    fn fit_rejects_empty_dataset() {
        let (mut trainer, _) = trainer_and_pairs(1);
        assert!(trainer.fit(&[], &[], None).is_err());
    }

    #[test]
    fn checkpoint_resume_continues_schedule() {
        let dir = std::env::temp_dir().join("fundus2ffa_trainer_resume");
        std::fs::remove_dir_all(&dir).ok();
        std::fs::create_dir_all(&dir).unwrap();
        let (cfg, gen_cfg, disc_cfg, fx_cfg) = tiny_setup();
        let pairs = synth_phantom_pairs(2, 64, 5).unwrap();

        // Uninterrupted 2-epoch run.
        let mut full = Trainer::new(&cfg, &gen_cfg, &disc_cfg, &fx_cfg).unwrap();
        let full_out = full.fit(&pairs, &[], None).unwrap();

        // Run epoch 1, checkpoint, resume for epoch 2.
        let one_epoch = TrainConfig {
            epochs: 1,
            decay_start_epoch: 0,
            ..cfg.clone()
        };
        let mut first = Trainer::new(&one_epoch, &gen_cfg, &disc_cfg, &fx_cfg).unwrap();
        // Same epoch-1 lr as the full schedule.
        for pair_idx in shuffled_order(2, cfg.seed, 1) {
            first
                .train_step(&pairs[pair_idx], lr_schedule(1, &cfg).unwrap())
                .unwrap();
        }
        let ckpt = dir.join("epoch1.ckpt");
        first.save_checkpoint(&ckpt, 1).unwrap();

        let mut resumed = Trainer::resume(&ckpt, &cfg, &fx_cfg).unwrap();
        assert_eq!(resumed.start_epoch(), 2);
        let resumed_out = resumed.fit(&pairs, &[], None).unwrap();
        assert_eq!(resumed_out.run_log.epochs.len(), 1);
        assert_eq!(resumed_out.run_log.epochs[0].epoch, 2);
        assert_eq!(
            resumed_out.run_log.epochs[0].lr,
            full_out.run_log.epochs[1].lr
        );

        // The resumed trace reproduces the tail of the uninterrupted run up
        // to f32 checkpoint quantization of the parameters.
        let full_tail: Vec<f64> = full_out.run_log.iterations[2..]
            .iter()
            .map(|(_, r)| r.total)
            .collect();
        let resumed_tail: Vec<f64> = resumed_out
            .run_log
            .iterations
            .iter()
            .map(|(_, r)| r.total)
            .collect();
        assert_eq!(full_tail.len(), resumed_tail.len());
        for (a, b) in full_tail.iter().zip(&resumed_tail) {
            assert!((a - b).abs() < 2e-2 * a.abs().max(1.0), "{a} vs {b}");
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    fn shuffled_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x2545f4914f6cdd1d));
        order.shuffle(&mut rng);
        order
    }

    #[test]
    fn translate_checkpoint_roundtrip() {
        let dir = std::env::temp_dir().join("fundus2ffa_trainer_translate");
        std::fs::remove_dir_all(&dir).ok();
        std::fs::create_dir_all(&dir).unwrap();
        let (mut trainer, pairs) = trainer_and_pairs(1);
        trainer.train_step(&pairs[0], 1e-4).unwrap();
        let ckpt = dir.join("t.ckpt");
        trainer.save_checkpoint(&ckpt, 1).unwrap();

        let from_ckpt = translate_with_checkpoint(&ckpt, &pairs[0].structure).unwrap();
        let twice = translate_with_checkpoint(&ckpt, &pairs[0].structure).unwrap();
        assert_eq!(from_ckpt.data(), twice.data());
        assert_eq!(from_ckpt.channels(), 1);
        assert!(from_ckpt.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn adam_moments_follow_param_shapes() {
        let (mut trainer, pairs) = trainer_and_pairs(1);
        trainer.train_step(&pairs[0], 1e-4).unwrap();
        let mut shapes = Vec::new();
        trainer
            .gen
            .visit_params(&mut |name, p| shapes.push((name, p.value.shape().to_vec())));
        let moments = trainer.adam_g.export_tensors("adam_g");
        for (name, shape) in &shapes {
            let m = moments
                .iter()
                .find(|(n, _)| n == &format!("adam_g.m.{name}"))
                .unwrap();
            assert_eq!(&m.1.shape().to_vec(), shape);
        }
    }
}
