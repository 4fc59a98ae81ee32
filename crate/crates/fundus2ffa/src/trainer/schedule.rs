//! Learning-rate schedule: constant, then linear decay to exactly zero at
//! the final epoch.

use super::TrainConfig;
use crate::error::{Error, Result};

/// Rate for a 1-based epoch index: `lr0` through `decay_start_epoch`, then
/// `lr0 * (epochs - epoch) / (epochs - decay_start_epoch)`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch < 1 || epoch > cfg.epochs {
        return Err(Error::Parameter(format!(
            "epoch {epoch} outside 1..={}",
            cfg.epochs
        )));
    }
    if epoch <= cfg.decay_start_epoch {
        return Ok(cfg.lr0);
    }
    let remaining = (cfg.epochs - epoch) as f64;
    let span = (cfg.epochs - cfg.decay_start_epoch) as f64;
    Ok(cfg.lr0 * remaining / span)
}
